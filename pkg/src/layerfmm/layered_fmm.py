"""Reaction-field FMM for each reaction key and the top-level layered driver.

Conventions (see ``layerstack``): a key (ℓ, ℓ', ∗, ⋆) maps charges in layer ℓ
to fields at evaluation points in layer ℓ'.  Charges are moved to their
polarized coordinates, evaluation points to their effective locations; one
octree is built over the union.  Multipole expansions use k_ℓ, local expansions
k_ℓ', and the M2L step contracts against tabulated 𝓘 integrals:

    λ_{νμ} = (−1)^ν Σ_t M_t Σ_{nm} 𝓘_t[nm, νμ](c_s, c_t) M_{nm},
    Φ(r) = Σ λ_{νμ} j_ν(k_ℓ' |r − c_t|) Y_ν^μ.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import fmm_core as fc
from . import layerstack as ls
from . import sommerfeld as sf
from .specfun import SQRT4PI, nm_arrays

FOURPI = 4.0 * math.pi


@dataclass
class ReactionProblem:
    key: ls.ReactionKey
    polarizedSources: np.ndarray
    charges: np.ndarray
    effectiveTargets: np.ndarray
    dGap: float
    initialBox: tuple  # (center, side length)

    @classmethod
    def build(cls, stack: ls.LayerStack, key: ls.ReactionKey, sources, charges, targets) -> "ReactionProblem":
        # layerstack names transforms by the slot of the kernel: the first slot
        # (ell_t) holds the charges, the second (ell_s) the evaluation points
        sb = ls.effective_target(stack, key, np.asarray(sources, dtype=float).reshape(-1, 3))
        tb = ls.polarization_source(stack, key, np.asarray(targets, dtype=float).reshape(-1, 3))
        s = ls.key_sign(key)
        if len(sb) and len(tb):
            gap = float(s * (sb[:, 2].min() if s > 0 else sb[:, 2].max()) - s * (tb[:, 2].max() if s > 0 else tb[:, 2].min()))
        else:
            gap = math.inf
        if gap <= 0:
            raise ValueError(f"{key}: polarized sources and effective targets overlap (d_gap={gap:g})")
        allp = np.vstack([sb, tb]) if len(sb) + len(tb) else np.zeros((1, 3))
        lo, hi = allp.min(axis=0), allp.max(axis=0)
        size = float(np.max(hi - lo)) * (1 + 1e-12) + 1e-12
        return cls(key, sb, np.asarray(charges, dtype=complex).reshape(-1, 3), tb, gap, (0.5 * (lo + hi), size))


def max_m2l_level(S0: float, dGap: float) -> int:
    """L_max = ⌊log₂(S₀/d_gap)⌋ + 1."""
    return int(math.floor(math.log2(S0 / dGap))) + 1


# ---------------------------------------------------------------------------
# expansions
# ---------------------------------------------------------------------------

def reaction_p2m(points, charges, center, k, p: int) -> fc.Expansion:
    """M^v_nm = 4π Σ q^v j_n(k r̂) conj(Y_n^m) about ``center`` (polarized points)."""
    me = fc.p2m(points, charges, center, k, p)
    me.coeffs = FOURPI * me.coeffs
    return me


def m2l_tensor(stack, key, src_center, tgt_center, p: int, spec: sf.QuadratureSpec, ihat=None,
               p_local: Optional[int] = None) -> np.ndarray:
    """3×3-block M2L operator of shape (3·(q+1)², 3·(p+1)²), q = ``p_local`` (default p),
    acting on ME coefficients flattened as (component, slot) and producing LE
    coefficients in the same layout."""
    q = p if p_local is None else p_local
    src_center = np.asarray(src_center, dtype=float)
    tgt_center = np.asarray(tgt_center, dtype=float)
    d = src_center - tgt_center
    geom = sf.KeyGeometry(stack, key, math.hypot(d[0], d[1]), src_center[2], tgt_center[2])
    if ihat is None:
        ihat = sf.i_hat_table(geom, p, q, spec)
    table = sf.phase_factors(geom, math.atan2(d[1], d[0]), p, q) * ihat  # (a, b, t)
    nb, _ = nm_arrays(q)
    sgn = (-1.0) ** nb
    # T[u, b, v, a] = (−1)^ν_b Σ_t M_t[u, v] 𝓘_t[a, b]
    T = np.einsum("tuv,abt->ubva", ls.TERM_MATRIX, table) * sgn[None, :, None, None]
    return T.reshape(3 * (q + 1) ** 2, 3 * (p + 1) ** 2)


def reaction_m2l(me: fc.Expansion, tgt_center, stack, key, spec: sf.QuadratureSpec,
                 p_local: Optional[int] = None) -> fc.Expansion:
    T = m2l_tensor(stack, key, me.center, tgt_center, me.p, spec, p_local=p_local)
    lam = (T @ me.coeffs.reshape(-1)).reshape(3, -1)
    q = me.p if p_local is None else p_local
    return fc.Expansion("local", np.asarray(tgt_center, dtype=float), q, None, lam)


def reaction_s2l(points, charges, center, stack, key, p: int, spec: sf.QuadratureSpec,
                 method: str = "direct") -> fc.Expansion:
    """LE coefficients computed straight from the sources (no ME):
    λ_{νμ} = (−1)^ν √(4π) Σ_j Σ_t M_t q_j 𝓘_t[00, νμ](r̄_j, c_t)."""
    nb, _ = nm_arrays(p)
    lam = np.zeros((3, (p + 1) ** 2), dtype=complex)
    for r, q in zip(np.asarray(points, dtype=float), np.asarray(charges, dtype=complex)):
        tab = sf.i_full_table(stack, key, r, center, 0, p, spec, method)[0]  # (b, t)
        Mq = ls.TERM_MATRIX @ q  # (t, u)
        lam += np.einsum("bt,tu->ub", tab, Mq)
    lam *= SQRT4PI * (-1.0) ** nb
    return fc.Expansion("local", np.asarray(center, dtype=float), p, None, lam)


def reaction_m2t(me: fc.Expansion, targets, stack, key, spec: sf.QuadratureSpec) -> np.ndarray:
    """Evaluate a reaction ME at transformed targets: Φ = (1/√4π) Σ F_nm m_nm."""
    out = []
    for r in np.atleast_2d(np.asarray(targets, dtype=float)):
        tab = sf.i_full_table(stack, key, me.center, r, me.p, 0, spec)[:, 0, :]  # (a, t)
        W = tab.T @ me.coeffs.T  # (t, v)
        out.append(np.einsum("tuv,tv->u", ls.TERM_MATRIX, W) / SQRT4PI)
    return np.array(out)


def reaction_l2p(le: fc.Expansion, targets, kprime) -> np.ndarray:
    return fc.l2p(le, targets, kprime)


def reaction_s2t(stack, key, src_bar, charges, tgt_bar, spec: sf.QuadratureSpec, chunk: int = 1024) -> np.ndarray:
    """Direct Sommerfeld evaluation for every (target, source) pair; (nt, 3)."""
    tgt_bar = np.atleast_2d(tgt_bar)
    src_bar = np.atleast_2d(src_bar)
    out = np.zeros((len(tgt_bar), 3), dtype=complex)
    step = max(1, chunk // max(1, len(src_bar)))
    for i0 in range(0, len(tgt_bar), step):
        t = tgt_bar[i0:i0 + step]
        K = sf.pair_kernel_values(stack, key, np.tile(src_bar, (len(t), 1)), np.repeat(t, len(src_bar), axis=0), spec)
        out[i0:i0 + step] = np.einsum("tnij,nj->ti", K.reshape(len(t), len(src_bar), 3, 3), charges)
    return out


# ---------------------------------------------------------------------------
# M2L tables
# ---------------------------------------------------------------------------

class M2LTensorTable:
    """Î tables per (level, geometry class) and assembled tensors per box offset."""

    def __init__(self, stack, key, tree: fc.Octree, p: int, spec: sf.QuadratureSpec):
        self.stack, self.key, self.tree, self.p, self.spec = stack, key, tree, p, spec
        self.ihat: dict = {}
        self.tensors: dict = {}

    @staticmethod
    def class_key(level, dxy2, zrow_s, zrow_t):
        return (int(level), int(dxy2), int(zrow_s), int(zrow_t))

    def classes_at(self, level) -> int:
        return sum(1 for c in self.ihat if c[0] == level)

    @property
    def levels(self) -> list:
        return sorted({c[0] for c in self.ihat})

    def tensor(self, level, src_coords, tgt_coords) -> np.ndarray:
        d = np.asarray(src_coords) - np.asarray(tgt_coords)
        tk = (int(level), int(d[0]), int(d[1]), int(src_coords[2]), int(tgt_coords[2]))
        if tk in self.tensors:
            return self.tensors[tk]
        tree = self.tree
        S = tree.box_size(level)
        cs = tree.corner + (np.asarray(src_coords) + 0.5) * S
        ct = tree.corner + (np.asarray(tgt_coords) + 0.5) * S
        ck = self.class_key(level, d[0] ** 2 + d[1] ** 2, src_coords[2], tgt_coords[2])
        if ck not in self.ihat:
            geom = sf.KeyGeometry(self.stack, self.key, S * math.hypot(d[0], d[1]), cs[2], ct[2])
            self.ihat[ck] = sf.i_hat_table(geom, self.p, self.p, self.spec)
        T = m2l_tensor(self.stack, self.key, cs, ct, self.p, self.spec, ihat=self.ihat[ck])
        self.tensors[tk] = T
        return T


# ---------------------------------------------------------------------------
# reaction FMM driver
# ---------------------------------------------------------------------------

@dataclass
class ReactionStats:
    key: str = ""
    nlevels: int = 0
    dGap: float = 0.0
    S0: float = 0.0
    Lmax: int = 0
    m2lLevels: list = field(default_factory=list)
    classesPerLevel: dict = field(default_factory=dict)
    m2lPairs: int = 0
    s2tPairs: int = 0
    s2tInteractions: int = 0
    timings: dict = field(default_factory=dict)


def _box_counts(tree: fc.Octree, mask: np.ndarray) -> np.ndarray:
    c = np.concatenate([[0], np.cumsum(mask[tree.perm])])
    return c[tree.end] - c[tree.start]


GAP_REFINE_DEPTH = 6


def gap_leaf_size(S0: float, dGap: float, maxDepth: int = GAP_REFINE_DEPTH, separation: int = 2) -> float:
    """Largest leaf size that keeps charge and evaluation leaves non-adjacent.

    Leaves smaller than d_gap/2 never touch across the gap, so no direct
    Sommerfeld interactions remain.  The refinement depth is capped; beyond it
    the remaining adjacent pairs are handled directly.
    """
    return max(dGap / separation * (1.0 - 1e-9), S0 / 2**maxDepth)


def reaction_fmm(stack, key, sources, charges, targets, p: int, spec: Optional[sf.QuadratureSpec] = None,
                 leafCapacity: int = 100, return_stats: bool = False, gapRefine: bool = True,
                 separation: int = 2):
    """Φ^{∗⋆}_{ℓℓ'} at ``targets`` (physical points in layer ℓ') from charges in layer ℓ.

    With ``gapRefine`` the tree is also split until leaves are smaller than
    d_gap/2 (see ``gap_leaf_size``); otherwise only ``leafCapacity`` applies.
    """
    spec = spec or sf.QuadratureSpec()
    t0 = time.perf_counter()
    prob = ReactionProblem.build(stack, key, sources, charges, targets)
    ns, nt = len(prob.polarizedSources), len(prob.effectiveTargets)
    out = np.zeros((nt, 3), dtype=complex)
    stats = ReactionStats(key=key.label, dGap=prob.dGap)
    if ns == 0 or nt == 0:
        return (out, stats) if return_stats else out
    pts = np.vstack([prob.polarizedSources, prob.effectiveTargets])
    is_src = np.arange(len(pts)) < ns
    maxLeaf = gap_leaf_size(prob.initialBox[1], prob.dGap, separation=separation) if gapRefine else math.inf
    tree = fc.build_tree(pts, leafCapacity, rootBox=prob.initialBox, maxLeafSize=maxLeaf)
    stats.nlevels, stats.S0 = tree.nlevels, tree.size
    stats.Lmax = max_m2l_level(tree.size, prob.dGap)
    nsrc = _box_counts(tree, is_src)
    ntgt = _box_counts(tree, ~is_src)
    s = ls.key_sign(key)

    def admissible(T, C):
        # vertical separation of at least one empty box row, charges on the decaying side
        return s * (tree.coords[C, 2] - tree.coords[T, 2]) >= separation

    lists = fc.interaction_lists(tree, nsrc, ntgt, admissible)
    k, kp = stack.k[key.ell_t], stack.k[key.ell_s]
    nc = (p + 1) ** 2
    centers = tree.centers()
    stats.timings["setup"] = time.perf_counter() - t0

    # upward pass (k of the charge layer)
    t0 = time.perf_counter()
    me = np.zeros((tree.nboxes, 3, nc), dtype=complex)
    for b in tree.leaves():
        if nsrc[b] == 0:
            continue
        ix = tree.box_points(b)
        ix = ix[is_src[ix]]
        me[b] = reaction_p2m(pts[ix], prob.charges[ix], centers[b], k, p).coeffs
    fc.upward_pass(tree, me, fc.TranslationCache(k, p, tree, scaled=False), nsrc > 0)
    stats.timings["upward"] = time.perf_counter() - t0

    # M2L through tabulated tensors
    t0 = time.perf_counter()
    table = M2LTensorTable(stack, key, tree, p, spec)
    le = np.zeros((tree.nboxes, 3, nc), dtype=complex)
    for lvl, pairs in enumerate(lists.m2l):
        if len(pairs) == 0:
            continue
        stats.m2lPairs += len(pairs)
        stats.m2lLevels.append(lvl)
        tc, sc = tree.coords[pairs[:, 0]], tree.coords[pairs[:, 1]]
        code = np.hstack([sc - tc, sc[:, 2:3], tc[:, 2:3]])
        uniq, inv = np.unique(code, axis=0, return_inverse=True)
        for g, u in enumerate(uniq):
            sel = np.nonzero(inv.ravel() == g)[0]
            tgt, src = pairs[sel, 0], pairs[sel, 1]
            T = table.tensor(lvl, tree.coords[src[0]], tree.coords[tgt[0]])
            le[tgt] += (me[src].reshape(len(sel), -1) @ T.T).reshape(len(sel), 3, nc)
        stats.classesPerLevel[lvl] = table.classes_at(lvl)
    stats.timings["m2l"] = time.perf_counter() - t0

    # downward pass (k of the evaluation layer)
    t0 = time.perf_counter()
    fc.downward_pass(tree, le, fc.TranslationCache(kp, p, tree, scaled=False), ntgt > 0)
    res = np.zeros((len(pts), 3), dtype=complex)
    for b in tree.leaves():
        if ntgt[b] == 0:
            continue
        ix = tree.box_points(b)
        ix = ix[~is_src[ix]]
        ex = fc.Expansion("local", centers[b], p, None, le[b])
        res[ix] += fc.l2p(ex, pts[ix], kp)
    stats.timings["l2p"] = time.perf_counter() - t0

    # direct Sommerfeld interactions
    t0 = time.perf_counter()
    q_all = np.zeros((len(pts), 3), dtype=complex)
    q_all[:ns] = prob.charges
    counter = {"pairs": 0, "n": 0}

    def s2t(tp, sp, q):
        counter["pairs"] += 1
        counter["n"] += len(tp) * len(sp)
        return reaction_s2t(stack, key, sp, q, tp, spec)

    fc._direct_pass(tree, lists.direct, pts, q_all, pts, res, s2t, src_mask=is_src, tgt_mask=~is_src)
    stats.s2tPairs = counter["pairs"]
    stats.s2tInteractions = counter["n"]
    stats.timings["s2t"] = time.perf_counter() - t0
    out = res[ns:]
    return (out, stats) if return_stats else out


# ---------------------------------------------------------------------------
# full layered evaluation
# ---------------------------------------------------------------------------

@dataclass
class LayeredResult:
    phi: list                      # per layer: (N_ℓ, 3)
    free: list                     # per layer free-space part
    reaction: dict                 # key label -> (N_ℓ', 3)
    stats: dict = field(default_factory=dict)


def split_by_layer(stack: ls.LayerStack, points, charges=None):
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    lay = stack.layer_of(pts[:, 2])
    idxs = [np.nonzero(lay == l)[0] for l in range(stack.nlayers)]
    return idxs


def evaluate_layered(stack: ls.LayerStack, points: list, charges: list, p: int,
                     spec: Optional[sf.QuadratureSpec] = None, leafCapacity: int = 100,
                     components: str = "all") -> LayeredResult:
    """``points[ℓ]``/``charges[ℓ]`` hold the particles of layer ℓ (they act both as
    sources and as targets).  ``components`` is 'all', 'free' or 'reaction'."""
    spec = spec or sf.QuadratureSpec()
    L1 = stack.nlayers
    if len(points) != L1 or len(charges) != L1:
        raise ValueError("need one particle set per layer")
    for l, pt in enumerate(points):
        pt = np.asarray(pt, dtype=float).reshape(-1, 3)
        if len(pt) and np.any(stack.layer_of(pt[:, 2]) != l):
            raise ValueError(f"particles given for layer {l} lie outside it")
    free = [np.zeros((len(np.asarray(pt).reshape(-1, 3)), 3), dtype=complex) for pt in points]
    stats = {}
    if components in ("all", "free"):
        for l in range(L1):
            if len(free[l]) == 0:
                continue
            t0 = time.perf_counter()
            free[l], st = fc.freespace_fmm(points[l], charges[l], stack.k[l], p, leafCapacity, return_stats=True)
            st.timings["total"] = time.perf_counter() - t0
            stats[f"free{l}"] = st
    reaction = {}
    if components in ("all", "reaction"):
        for key in ls.all_reaction_keys(stack):
            src, tgt = points[key.ell_t], points[key.ell_s]
            if len(src) == 0 or len(tgt) == 0:
                continue
            t0 = time.perf_counter()
            val, st = reaction_fmm(stack, key, src, charges[key.ell_t], tgt, p, spec, leafCapacity,
                                   return_stats=True)
            st.timings["total"] = time.perf_counter() - t0
            reaction[key.label] = val
            stats[key.label] = st
    phi = [f.copy() for f in free]
    for key in ls.all_reaction_keys(stack):
        if key.label in reaction:
            phi[key.ell_s] += reaction[key.label]
    return LayeredResult(phi, free, reaction, stats)
