"""Adaptive octree and the scalar Helmholtz FMM, extended to the free-space
electric dyadic Green's function ``(I + ∇∇/k²) e^{ikR}/(4πR)``.

Wave functions: ``R_n^m(r) = j_n(kr) Y_n^m(r̂)`` and ``S_n^m(r) = h_n(kr) Y_n^m(r̂)``;
coefficient vectors are flattened with ``specfun.idx``.  Translations use dense
matrices assembled from Gaunt coefficients and are cached per (level, offset).
Expansions are stored with the scaled normalisation ``M = h_n(kS) μ`` (multipole)
and ``λ = ik h_n(kS') L`` (local) when a scale is given, and unscaled otherwise.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional

import numpy as np

from .specfun import SQRT4PI, idx, legendre_all, nm_arrays, sph_h1_all, sph_harm_all, sph_jn_all, cart2sph

FOURPI = 4.0 * math.pi


# ---------------------------------------------------------------------------
# octree
# ---------------------------------------------------------------------------

class Octree:
    """Adaptive octree; boxes carry global ids across all levels.

    Points are reordered by ``perm`` so every box owns the contiguous slice
    ``perm[start[b]:end[b]]``.
    """

    def __init__(self, points, leafCapacity: int = 100, center=None, size: Optional[float] = None,
                 maxDepth: int = 30, maxLeafSize: float = math.inf):
        pts = np.asarray(points, dtype=float).reshape(-1, 3)
        if center is None or size is None:
            lo, hi = pts.min(axis=0), pts.max(axis=0)
            c = 0.5 * (lo + hi)
            s = float(np.max(hi - lo)) * (1 + 1e-12) + 1e-12
            center = c if center is None else center
            size = s if size is None else size
        self.center = np.asarray(center, dtype=float)
        self.size = float(size)
        self.corner = self.center - 0.5 * self.size
        if np.any(np.abs(pts - self.center) > 0.5 * self.size * (1 + 1e-12)):
            raise ValueError("points outside the root box")
        self.points = pts
        self.leafCapacity = int(leafCapacity)
        self.maxLeafSize = float(maxLeafSize)
        self._build(maxDepth)

    def _build(self, maxDepth):
        n = len(self.points)
        perm = np.arange(n)
        level = [0]
        coords = [(0, 0, 0)]
        start, end = [0], [n]
        parent = [-1]
        children = [[-1] * 8]
        frontier = [0] if n > self.leafCapacity or (n and self.size > self.maxLeafSize) else []
        lvl = 0
        while frontier and lvl < maxDepth:
            nxt = []
            lvl += 1
            h = self.size / 2**lvl
            for b in frontier:
                sl = perm[start[b]:end[b]]
                c = np.array(coords[b]) * 2
                rel = (self.points[sl] - self.corner) / h - c
                octs = np.clip(rel >= 1.0, 0, 1).astype(int)
                code = octs[:, 0] + 2 * octs[:, 1] + 4 * octs[:, 2]
                order = np.argsort(code, kind="stable")
                perm[start[b]:end[b]] = sl[order]
                code = code[order]
                bounds = np.searchsorted(code, np.arange(9))
                for o in range(8):
                    s0, s1 = bounds[o], bounds[o + 1]
                    if s1 == s0:
                        continue
                    gid = len(level)
                    level.append(lvl)
                    coords.append((c[0] + (o & 1), c[1] + ((o >> 1) & 1), c[2] + ((o >> 2) & 1)))
                    start.append(start[b] + s0)
                    end.append(start[b] + s1)
                    parent.append(b)
                    children.append([-1] * 8)
                    children[b][o] = gid
                    if s1 - s0 > self.leafCapacity or h > self.maxLeafSize:
                        nxt.append(gid)
            frontier = nxt
        self.perm = perm
        self.level = np.array(level)
        self.coords = np.array(coords, dtype=np.int64)
        self.start = np.array(start)
        self.end = np.array(end)
        self.parent = np.array(parent)
        self.children = np.array(children)
        self.isLeaf = np.all(self.children < 0, axis=1)
        self.nlevels = int(self.level.max()) + 1
        self.lookup = [dict() for _ in range(self.nlevels)]
        for g, (l, c) in enumerate(zip(self.level, map(tuple, self.coords))):
            self.lookup[l][c] = g

    @property
    def nboxes(self) -> int:
        return len(self.level)

    def box_size(self, level) -> float:
        return self.size / 2.0**level

    def box_center(self, gid) -> np.ndarray:
        l = self.level[gid]
        return self.corner + (self.coords[gid] + 0.5) * self.box_size(l)

    def centers(self) -> np.ndarray:
        s = self.size / 2.0 ** self.level
        return self.corner + (self.coords + 0.5) * s[:, None]

    def leaves(self) -> np.ndarray:
        return np.nonzero(self.isLeaf)[0]

    def box_points(self, gid) -> np.ndarray:
        return self.perm[self.start[gid]:self.end[gid]]

    def boxes_at(self, level) -> np.ndarray:
        return np.nonzero(self.level == level)[0]

    def adjacent(self, a: int, b: int) -> bool:
        la, lb = self.level[a], self.level[b]
        if la < lb:
            a, b, la, lb = b, a, lb, la
        # a is at the finer (or equal) level
        d = 2 ** (la - lb)
        ca, cb = self.coords[a], self.coords[b] * d
        return bool(np.all((ca + 1 >= cb) & (ca <= cb + d)))


def build_tree(points, leafCapacity: int = 100, rootBox=None, maxLeafSize: float = math.inf) -> Octree:
    """``rootBox`` is (center, side length) or None for the bounding cube.

    Non-empty boxes are split while they hold more than ``leafCapacity`` points
    or are larger than ``maxLeafSize``.
    """
    if rootBox is None:
        return Octree(points, leafCapacity, maxLeafSize=maxLeafSize)
    center, size = rootBox
    return Octree(points, leafCapacity, center=center, size=size, maxLeafSize=maxLeafSize)


@dataclass
class InteractionLists:
    m2l: list          # per level: int array (npairs, 2) of (target gid, source gid)
    direct: np.ndarray  # (npairs, 2) of (target leaf gid, source gid)
    m2lLevels: list     # levels at which at least one M2L pair exists


def interaction_lists(tree: Octree, srcCount=None, tgtCount=None, admissible=None) -> InteractionLists:
    """Top-down traversal producing M2L pairs and direct (near-field) pairs.

    For a target box T, candidates come from the boxes adjacent to its parent:
    same-level well-separated boxes become M2L pairs, adjacent boxes are
    refined further, and whatever is still adjacent when T is a leaf (or is a
    coarser leaf that is not well separated from T's level) is a direct pair.
    ``admissible(T, C)`` (same level, non-adjacent) may veto an M2L pair, in
    which case the pair is refined like an adjacent one.
    """
    nb = tree.nboxes
    srcCount = np.full(nb, 1) if srcCount is None else np.asarray(srcCount)
    tgtCount = np.full(nb, 1) if tgtCount is None else np.asarray(tgtCount)
    m2l = [[] for _ in range(tree.nlevels)]
    direct = []
    adj = {0: [0]} if srcCount[0] > 0 and tgtCount[0] > 0 else {}
    if 0 in adj and tree.isLeaf[0]:
        direct.append((0, 0))
    for lvl in range(1, tree.nlevels):
        new_adj = {}
        for T in tree.boxes_at(lvl):
            if tgtCount[T] == 0:
                continue
            par = tree.parent[T]
            if par not in adj:
                continue
            near = []
            for S in adj[par]:
                if tree.isLeaf[S]:
                    cands = [S]
                else:
                    cands = [c for c in tree.children[S] if c >= 0 and srcCount[c] > 0]
                for C in cands:
                    if tree.level[C] == lvl:
                        if tree.adjacent(T, C) or (admissible is not None and not admissible(T, C)):
                            near.append(C)
                        else:
                            m2l[lvl].append((T, C))
                    else:
                        # coarser leaf
                        near.append(C) if tree.adjacent(T, C) else direct.append((T, C))
            if tree.isLeaf[T]:
                direct.extend((T, C) for C in near)
            else:
                new_adj[T] = near
        adj = new_adj
    m2l = [np.array(x, dtype=np.int64).reshape(-1, 2) for x in m2l]
    return InteractionLists(m2l, np.array(direct, dtype=np.int64).reshape(-1, 2),
                            [l for l, x in enumerate(m2l) if len(x)])


# ---------------------------------------------------------------------------
# Gaunt coefficients and translation matrices
# ---------------------------------------------------------------------------

@lru_cache(maxsize=8)
def gaunt_table(p: int) -> np.ndarray:
    """G[a, b, l] = ∫ Y_n^m Y_l^{μ-m} conj(Y_ν^μ) dΩ with a = idx(ν, μ), b = idx(n, m)."""
    L = 2 * p
    x, w = np.polynomial.legendre.leggauss(2 * p + L // 2 + 2)
    s = np.sqrt(1.0 - x * x)
    P = legendre_all(max(p, L), x, s)  # nodes x slots
    n, m = nm_arrays(p)
    G = np.zeros(((p + 1) ** 2, (p + 1) ** 2, L + 1))
    for a in range(len(n)):
        nu, mu = n[a], m[a]
        for b in range(len(n)):
            lam = mu - m[b]
            ls_ = np.arange(abs(lam), L + 1)
            lsel = ls_[(ls_ + n[b] + nu) % 2 == 0]
            lsel = lsel[(lsel >= abs(n[b] - nu)) & (lsel <= n[b] + nu)]
            if len(lsel) == 0:
                continue
            cols = lsel * lsel + lsel + lam
            G[a, b, lsel] = 2 * math.pi * ((w * P[:, a] * P[:, b]) @ P[:, cols])
    G.setflags(write=False)
    return G


@lru_cache(maxsize=8)
def _gaunt_sparse(p: int):
    """Nonzero Gaunt entries: flat (a, b) position, Y_l^{μ-m} slot, phase power, l, value."""
    G = gaunt_table(p)
    a, b, l = np.nonzero(G)
    n, m = nm_arrays(p)
    lam = m[a] - m[b]
    slot = l * l + l + lam
    phase = (n[a] + l - n[b]) % 4
    return a * len(n) + b, slot, phase, l, G[a, b, l]


def translation_matrix(t, k, p: int, kind: str) -> np.ndarray:
    """T[a, b] with F_b(r + t) = Σ_a T[a, b] R_a(r); F = R (kind 'RR') or S ('SR').

    Entry: 4π Σ_l i^{ν+l-n} f_l(k|t|) conj(Y_l^{μ-m}(t̂)) G[a, b, l], f = j or h.
    """
    t = np.asarray(t, dtype=float)
    pos, slot, phase, l, g = _gaunt_sparse(p)
    L = 2 * p
    r, th, phi = cart2sph(t)
    if kind == "RR":
        f = sph_jn_all(L, k * r)
    else:
        if r == 0:
            raise ValueError("singular translation with zero offset")
        f = sph_h1_all(L, k * r)
    Y = np.conj(sph_harm_all(L, th, phi))
    w = (FOURPI * g) * (1j ** np.arange(4))[phase] * f[l] * Y[slot]
    nc = (p + 1) ** 2
    T = np.bincount(pos, weights=w.real, minlength=nc * nc) + 1j * np.bincount(pos, weights=w.imag, minlength=nc * nc)
    return T.reshape(nc, nc)


class TranslationCache:
    """Per-FMM cache of scaled translation matrices keyed by level and offset."""

    def __init__(self, k, p: int, tree: Octree, scaled: bool = True):
        self.k = k
        self.p = p
        self.tree = tree
        self.scaled = scaled
        self._m2m, self._l2l, self._m2l = {}, {}, {}
        self.n, _ = nm_arrays(p)

    def hscale(self, level) -> np.ndarray:
        if not self.scaled:
            return np.ones((self.p + 1) ** 2, dtype=complex)
        S = self.tree.box_size(level)
        return sph_h1_all(self.p, self.k * S)[self.n]

    def m2m(self, level: int, octant: int) -> np.ndarray:
        """Matrix mapping a child ME (at ``level``) to its parent's ME."""
        key = (level, octant)
        if key not in self._m2m:
            S = self.tree.box_size(level)
            off = (np.array([octant & 1, (octant >> 1) & 1, (octant >> 2) & 1]) - 0.5) * S
            self._m2m[key] = m2m_matrix(off, self.k, self.p, self.hscale(level), self.hscale(level - 1))
        return self._m2m[key]

    def l2l(self, level: int, octant: int) -> np.ndarray:
        """Matrix mapping a parent LE (level - 1) to a child LE at ``level``."""
        key = (level, octant)
        if key not in self._l2l:
            S = self.tree.box_size(level)
            off = (np.array([octant & 1, (octant >> 1) & 1, (octant >> 2) & 1]) - 0.5) * S
            self._l2l[key] = l2l_matrix(off, self.k, self.p, self.hscale(level - 1), self.hscale(level))
        return self._l2l[key]

    def m2l(self, level: int, offset: tuple) -> np.ndarray:
        key = (level, offset)
        if key not in self._m2l:
            S = self.tree.box_size(level)
            t = np.asarray(offset, dtype=float) * S  # c_t - c_s
            hs = self.hscale(level)
            self._m2l[key] = m2l_matrix(t, self.k, self.p, hs, hs)
        return self._m2l[key]


def m2m_matrix(child_minus_parent, k, p, h_child=None, h_parent=None) -> np.ndarray:
    """Child ME → parent ME; unscaled when the h factors are None."""
    T = np.conj(translation_matrix(child_minus_parent, k, p, "RR")).T
    if h_child is not None:
        T = h_parent[:, None] * T / h_child[None, :]
    return T


def l2l_matrix(child_minus_parent, k, p, h_parent=None, h_child=None) -> np.ndarray:
    T = translation_matrix(child_minus_parent, k, p, "RR")
    if h_parent is not None:
        T = T * h_parent[None, :] / h_child[:, None]
    return T


def m2l_matrix(t_minus_s, k, p, h_src=None, h_tgt=None) -> np.ndarray:
    T = translation_matrix(t_minus_s, k, p, "SR")
    if h_src is not None:
        T = T / h_src[None, :] / h_tgt[:, None]
    return T


# ---------------------------------------------------------------------------
# expansions
# ---------------------------------------------------------------------------

@dataclass
class Expansion:
    kind: str  # 'multipole' or 'local'
    center: np.ndarray
    p: int
    scale: Optional[float]
    coeffs: np.ndarray  # (3, (p+1)**2)


def regular_basis(p: int, k, rel: np.ndarray) -> np.ndarray:
    """R_n^m(rel) for every point; shape (N, (p+1)**2)."""
    r, th, phi = cart2sph(rel)
    n, _ = nm_arrays(p)
    return sph_jn_all(p, k * r)[..., n] * sph_harm_all(p, th, phi)


def singular_basis(p: int, k, rel: np.ndarray) -> np.ndarray:
    r, th, phi = cart2sph(rel)
    n, _ = nm_arrays(p)
    return sph_h1_all(p, k * r)[..., n] * sph_harm_all(p, th, phi)


def p2m(points, charges, center, k, p, scale: Optional[float] = None) -> Expansion:
    """μ_nm = Σ q j_n(k r) conj(Y_n^m), times h_n(kS) when ``scale`` is given."""
    R = regular_basis(p, k, np.asarray(points) - center)
    q = np.asarray(charges).reshape(len(R), -1)
    mu = q.T @ np.conj(R)
    if scale is not None:
        n, _ = nm_arrays(p)
        mu = mu * sph_h1_all(p, k * scale)[n]
    return Expansion("multipole", np.asarray(center, dtype=float), p, scale, mu)


def m2m(me: Expansion, new_center, k, new_scale: Optional[float] = None) -> Expansion:
    n, _ = nm_arrays(me.p)
    hc = sph_h1_all(me.p, k * me.scale)[n] if me.scale is not None else None
    hp = sph_h1_all(me.p, k * new_scale)[n] if new_scale is not None else None
    T = m2m_matrix(me.center - np.asarray(new_center), k, me.p, hc, hp)
    return Expansion("multipole", np.asarray(new_center, dtype=float), me.p, new_scale, me.coeffs @ T.T)


def m2l(me: Expansion, center, k, scale: Optional[float] = None) -> Expansion:
    n, _ = nm_arrays(me.p)
    hs = sph_h1_all(me.p, k * me.scale)[n] if me.scale is not None else None
    ht = sph_h1_all(me.p, k * scale)[n] if scale is not None else None
    T = m2l_matrix(np.asarray(center) - me.center, k, me.p, hs, ht)
    if hs is None:
        T = 1j * k * T
    return Expansion("local", np.asarray(center, dtype=float), me.p, scale, me.coeffs @ T.T)


def l2l(le: Expansion, new_center, k, new_scale: Optional[float] = None) -> Expansion:
    n, _ = nm_arrays(le.p)
    hp = sph_h1_all(le.p, k * le.scale)[n] if le.scale is not None else None
    hc = sph_h1_all(le.p, k * new_scale)[n] if new_scale is not None else None
    T = l2l_matrix(np.asarray(new_center) - le.center, k, le.p, hp, hc)
    return Expansion("local", np.asarray(new_center, dtype=float), le.p, new_scale, le.coeffs @ T.T)


def local_coefficients(le: Expansion, k) -> np.ndarray:
    """Unscaled λ with u = Σ λ_nm R_nm."""
    if le.scale is None:
        return le.coeffs
    n, _ = nm_arrays(le.p)
    return le.coeffs * (1j * k * sph_h1_all(le.p, k * le.scale)[n])


def l2p(le: Expansion, points, k) -> np.ndarray:
    """Scalar field of each component at the points; shape (N, ncomp)."""
    R = regular_basis(le.p, k, np.asarray(points) - le.center)
    return R @ local_coefficients(le, k).T


def me_eval(me: Expansion, points, k) -> np.ndarray:
    """Direct evaluation of a (free-space) ME: ik Σ μ S_n^m."""
    S = singular_basis(me.p, k, np.asarray(points) - me.center)
    mu = me.coeffs
    if me.scale is not None:
        n, _ = nm_arrays(me.p)
        mu = mu / sph_h1_all(me.p, k * me.scale)[n]
    return 1j * k * (S @ mu.T)


# ---------------------------------------------------------------------------
# derivatives of regular expansions
# ---------------------------------------------------------------------------

@lru_cache(maxsize=16)
def derivative_matrices(p: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(Dx, Dy, Dz) / k: ∂_a Σ λ R_n^m = k Σ (D_a λ) R_n^m, shapes ((p+2)**2, (p+1)**2)."""
    P1 = p + 1
    Dz = np.zeros(((P1 + 1) ** 2, P1**2), dtype=complex)
    Dp = np.zeros_like(Dz)
    Dm = np.zeros_like(Dz)

    def alpha(n, m):
        if n < 0 or abs(m) > n:
            return 0.0
        return math.sqrt(((n + 1) ** 2 - m * m) / ((2 * n + 1) * (2 * n + 3)))

    for n in range(P1):
        for m in range(-n, n + 1):
            col = idx(n, m)
            Dz[idx(n + 1, m), col] -= alpha(n, m)
            if n - 1 >= abs(m):
                Dz[idx(n - 1, m), col] += alpha(n - 1, m)
            c1 = math.sqrt((n + m + 1) * (n + m + 2) / ((2 * n + 1) * (2 * n + 3)))
            Dp[idx(n + 1, m + 1), col] -= c1
            if n - 1 >= abs(m + 1):
                c2 = math.sqrt((n - m) * (n - m - 1) / ((2 * n - 1) * (2 * n + 1)))
                Dp[idx(n - 1, m + 1), col] -= c2
            d1 = math.sqrt((n - m + 1) * (n - m + 2) / ((2 * n + 1) * (2 * n + 3)))
            Dm[idx(n + 1, m - 1), col] += d1
            if n - 1 >= abs(m - 1):
                d2 = math.sqrt((n + m) * (n + m - 1) / ((2 * n - 1) * (2 * n + 1)))
                Dm[idx(n - 1, m - 1), col] += d2
    Dx = 0.5 * (Dp + Dm)
    Dy = (Dp - Dm) / 2j
    return Dx, Dy, Dz


def dyadic_local_coefficients(lam: np.ndarray, k, p: int) -> np.ndarray:
    """Coefficients (degree p+2) of Φ = u + ∇(∇·u)/k² from u's coefficients λ (3, (p+1)**2)."""
    D1 = derivative_matrices(p)
    D2 = derivative_matrices(p + 1)
    div = sum(k * (D1[v] @ lam[v]) for v in range(3))  # degree p+1
    out = np.zeros((3, (p + 3) ** 2), dtype=complex)
    for a in range(3):
        out[a, : (p + 1) ** 2] += lam[a]
        out[a] += (D2[a] @ div) / k  # k * D / k**2
    return out


def dyadic_eval_from_local(le: Expansion, points, k) -> np.ndarray:
    """Φ at points from a local expansion of the three scalar potentials; (N, 3)."""
    lam = local_coefficients(le, k)
    coef = dyadic_local_coefficients(lam, k, le.p)
    R = regular_basis(le.p + 2, k, np.asarray(points) - le.center)
    return R @ coef.T


# ---------------------------------------------------------------------------
# kernels
# ---------------------------------------------------------------------------

def helmholtz_kernel(targets, sources, k) -> np.ndarray:
    d = np.linalg.norm(targets[:, None, :] - sources[None, :, :], axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        g = np.exp(1j * k * d) / (FOURPI * d)
    g[d == 0] = 0.0
    return g


def dyadic_apply(targets, sources, charges, k, exclude_self: bool = False) -> np.ndarray:
    """Σ_j (I + ∇∇/k²) g(t - s_j) q_j, skipping coincident points."""
    R = targets[:, None, :] - sources[None, :, :]
    r = np.linalg.norm(R, axis=-1)
    zero = r == 0
    r = np.where(zero, 1.0, r)
    kr = k * r
    g = np.exp(1j * kr) / (FOURPI * r)
    a = g * (1 + 1j / kr - 1 / kr**2)
    b = g * (-1 - 3j / kr + 3 / kr**2)
    a = np.where(zero, 0.0, a)
    b = np.where(zero, 0.0, b)
    Rh = R / r[..., None]
    proj = np.einsum("tsi,si->ts", Rh, charges)
    return np.einsum("ts,si->ti", a, charges) + np.einsum("ts,ts,tsi->ti", b, proj, Rh)


# ---------------------------------------------------------------------------
# free-space dyadic FMM
# ---------------------------------------------------------------------------

@dataclass
class FMMStats:
    nlevels: int = 0
    m2lPairs: int = 0
    directPairs: int = 0
    timings: dict = field(default_factory=dict)


def _octant(tree: Octree, gid: int) -> int:
    c = tree.coords[gid] & 1
    return int(c[0] + 2 * c[1] + 4 * c[2])


def upward_pass(tree: Octree, me: np.ndarray, cache: TranslationCache, has_src: np.ndarray):
    """Accumulate child MEs into parents (in place), finest level first."""
    for lvl in range(tree.nlevels - 1, 0, -1):
        boxes = tree.boxes_at(lvl)
        boxes = boxes[has_src[boxes]]
        if len(boxes) == 0:
            continue
        octs = (tree.coords[boxes] & 1) @ np.array([1, 2, 4])
        for o in range(8):
            sel = boxes[octs == o]
            if len(sel):
                T = cache.m2m(lvl, o)
                me[tree.parent[sel]] += me[sel] @ T.T  # parents unique per octant


def downward_pass(tree: Octree, le: np.ndarray, cache: TranslationCache, has_tgt: np.ndarray):
    for lvl in range(1, tree.nlevels):
        boxes = tree.boxes_at(lvl)
        boxes = boxes[has_tgt[boxes]]
        if len(boxes) == 0:
            continue
        octs = (tree.coords[boxes] & 1) @ np.array([1, 2, 4])
        for o in range(8):
            sel = boxes[octs == o]
            if len(sel):
                T = cache.l2l(lvl, o)
                le[sel] += le[tree.parent[sel]] @ T.T


def group_by_offset(tree: Octree, pairs: np.ndarray):
    """Yield (offset tuple, targets, sources) with unique targets per group."""
    if len(pairs) == 0:
        return
    off = tree.coords[pairs[:, 0]] - tree.coords[pairs[:, 1]]
    code = (off[:, 0] + 8) * 289 + (off[:, 1] + 8) * 17 + (off[:, 2] + 8)
    order = np.argsort(code, kind="stable")
    code = code[order]
    cuts = np.nonzero(np.diff(code))[0] + 1
    for grp in np.split(order, cuts):
        yield tuple(int(x) for x in off[grp[0]]), pairs[grp, 0], pairs[grp, 1]


FREE_SEPARATION = 3


def freespace_fmm(points, charges, k, p: int, leafCapacity: int = 100, tree: Optional[Octree] = None,
                  return_stats: bool = False, separation: int = FREE_SEPARATION):
    """Φ_i = Σ_{j≠i} (I + ∇∇/k²) g(r_i − r_j) q_j for one set of particles.

    Same-level boxes interact through M2L once their integer coordinates differ
    by at least ``separation`` along some axis (2 is the classical rule).
    """
    import time

    pts = np.asarray(points, dtype=float)
    q = np.asarray(charges, dtype=complex).reshape(-1, 3)
    tree = tree or build_tree(pts, leafCapacity)
    stats = FMMStats(nlevels=tree.nlevels)
    t0 = time.perf_counter()
    admissible = None
    if separation > 2:
        c = tree.coords
        admissible = lambda T, C: np.abs(c[T] - c[C]).max() >= separation
    lists = interaction_lists(tree, admissible=admissible)
    cache = TranslationCache(k, p, tree)
    nc = (p + 1) ** 2
    nb = tree.nboxes
    centers = tree.centers()
    allbox = np.ones(nb, dtype=bool)

    me = np.zeros((nb, 3, nc), dtype=complex)
    le = np.zeros((nb, 3, nc), dtype=complex)
    n_arr, _ = nm_arrays(p)
    stats.timings["setup"] = time.perf_counter() - t0

    # P2M at leaves
    t0 = time.perf_counter()
    for lvl in range(tree.nlevels):
        leaves = tree.boxes_at(lvl)
        leaves = leaves[tree.isLeaf[leaves]]
        if len(leaves) == 0:
            continue
        hS = sph_h1_all(p, k * tree.box_size(lvl))[n_arr]
        for b in leaves:
            ix = tree.box_points(b)
            R = regular_basis(p, k, pts[ix] - centers[b])
            me[b] = (q[ix].T @ np.conj(R)) * hS
    upward_pass(tree, me, cache, allbox)
    stats.timings["upward"] = time.perf_counter() - t0

    # M2L
    t0 = time.perf_counter()
    for lvl, pairs in enumerate(lists.m2l):
        stats.m2lPairs += len(pairs)
        for off, tg, sr in group_by_offset(tree, pairs):
            T = cache.m2l(lvl, off)
            le[tg] += me[sr] @ T.T
    stats.timings["m2l"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    downward_pass(tree, le, cache, allbox)
    stats.timings["downward"] = time.perf_counter() - t0

    # L2P and direct
    t0 = time.perf_counter()
    out = np.zeros((len(pts), 3), dtype=complex)
    for b in tree.leaves():
        ix = tree.box_points(b)
        lam = le[b]
        ex = Expansion("local", centers[b], p, tree.box_size(tree.level[b]), lam)
        out[ix] += dyadic_eval_from_local(ex, pts[ix], k)
    stats.timings["l2p"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    stats.directPairs = len(lists.direct)
    _direct_pass(tree, lists.direct, pts, q, pts, out, lambda t, s, c: dyadic_apply(t, s, c, k))
    stats.timings["direct"] = time.perf_counter() - t0
    return (out, stats) if return_stats else out


def _direct_pass(tree: Octree, pairs: np.ndarray, src_pts, q, tgt_pts, out, kernel_apply,
                 src_mask=None, tgt_mask=None):
    """Near-field sums; ``kernel_apply(targets, sources, charges) -> (nt, 3)``."""
    if len(pairs) == 0:
        return
    order = np.argsort(pairs[:, 0], kind="stable")
    pairs = pairs[order]
    cuts = np.nonzero(np.diff(pairs[:, 0]))[0] + 1
    for grp in np.split(pairs, cuts):
        T = grp[0, 0]
        ti = tree.box_points(T)
        if tgt_mask is not None:
            ti = ti[tgt_mask[ti]]
        si = np.concatenate([tree.box_points(S) for S in grp[:, 1]])
        if src_mask is not None:
            si = si[src_mask[si]]
        if len(ti) == 0 or len(si) == 0:
            continue
        out[ti] += kernel_apply(tgt_pts[ti], src_pts[si], q[si])
