"""Direct-summation reference values.

The free-space kernel is evaluated in closed form from the radial derivatives
of e^{ikR}/(4πR).  Reaction kernels are integrated pair by pair and assembled in
a Cartesian form (ρ̂, ẑ dyads with J₀, J₁, J₂), which avoids the M-matrix table
and every expansion used by the FMM.  Only the DE quadrature driver and the
layer densities are shared with the fast path.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.special as sps

from . import layerstack as ls
from . import sommerfeld as sf

FOURPI = 4.0 * math.pi


@dataclass
class DirectResult:
    phi: np.ndarray                                   # (nt, 3)
    perComponent: dict = field(default_factory=dict)  # 'free' or key label -> (nt, 3)


# ---------------------------------------------------------------------------
# free space
# ---------------------------------------------------------------------------

def free_space_dyadic(r, rp, k) -> np.ndarray:
    """(I + ∇∇/k²) e^{ikR}/(4πR) for R = r − r'; broadcasts over leading axes."""
    R = np.asarray(r, dtype=float) - np.asarray(rp, dtype=float)
    d = np.linalg.norm(R, axis=-1)
    if np.any(d == 0):
        raise ValueError("coincident points")
    g = np.exp(1j * k * d) / (FOURPI * d)
    g1 = g * (1j * k - 1.0 / d)                       # dg/dR
    g2 = g * ((1j * k - 1.0 / d) ** 2 + 1.0 / d**2)   # d²g/dR²
    u = R / d[..., None]
    uu = u[..., :, None] * u[..., None, :]
    eye = np.eye(3)
    hess = g2[..., None, None] * uu + (g1 / d)[..., None, None] * (eye - uu)
    return g[..., None, None] * eye + hess / k**2


def direct_free_sum(sources, charges, targets, k, target_ids=None, chunk: int = 512) -> np.ndarray:
    """Σ_j G^f(r_i, r_j) q_j; ``target_ids[i]`` (if given) is the source index to skip."""
    sources = np.asarray(sources, dtype=float)
    charges = np.asarray(charges, dtype=complex)
    targets = np.atleast_2d(np.asarray(targets, dtype=float))
    out = np.zeros((len(targets), 3), dtype=complex)
    for i0 in range(0, len(targets), chunk):
        t = targets[i0:i0 + chunk]
        R = t[:, None, :] - sources[None, :, :]
        d = np.linalg.norm(R, axis=-1)
        skip = d == 0
        if target_ids is not None:
            skip[np.arange(len(t)), np.asarray(target_ids)[i0:i0 + chunk]] = True
        tt = np.where(skip[..., None], t[:, None, :] + 1.0, t[:, None, :])
        G = free_space_dyadic(tt, sources[None, :, :], k)
        G[skip] = 0.0
        out[i0:i0 + chunk] = np.einsum("tsij,sj->ti", G, charges)
    return out


# ---------------------------------------------------------------------------
# reaction components
# ---------------------------------------------------------------------------

def _radial_integrals(stack, key, zbar, zpbar, rho, spec: sf.QuadratureSpec) -> np.ndarray:
    """(i/4π) ∫ k_ρ Z σ_m J_κ(k_ρ ρ) dk_ρ for the five (κ, σ) pairs used below.

    Returns shape (npairs, 5) ordered as (J0σ1, J0σ5, J1σ2, J1σ4, J2σ3).
    """
    s = ls.key_sign(key)
    dz = s * (zbar - zpbar)
    if np.any(dz <= 0):
        raise ValueError(f"{key}: transformed pair not separated by an interface")
    a = spec.aFactor * stack.kmax
    segs = sf.contour_segments(0.0, float(dz.min()), stack.k[key.ell_s], a, spec, tail="real")
    sel = np.array([0, 4, 1, 3, 2])
    order = np.array([0, 0, 1, 1, 2])

    def kernel(krho, w, seg):
        kz = stack.kz(krho)
        kzt, kzs = kz[:, key.ell_t], kz[:, key.ell_s]
        sig = ls.reference_sigma(stack, key, krho)[sel].T                     # nodes x 5
        Z = ls.z_exponential_reference(stack, key, kzt[:, None], kzs[:, None], zbar[None, :], zpbar[None, :])
        x = krho[:, None] * rho[None, :]
        J = [sps.jv(o, x) for o in range(3)]
        S = np.empty((len(zbar), 5), dtype=complex)
        A = np.empty((len(zbar), 5))
        for c in range(5):
            f = ((w * krho)[:, None] * sig[:, c:c + 1]) * Z * J[order[c]]
            S[:, c] = f.sum(axis=0)
            A[:, c] = np.abs(f).sum(axis=0)
        return S, A

    val, _ = sf.de_integrate(kernel, segs, spec, request=f"oracle {key}")
    return (1j / FOURPI) * val


def reaction_kernel(stack, key, charge_bar, eval_bar, spec: sf.QuadratureSpec) -> np.ndarray:
    """3×3 reaction kernel for transformed (charge, evaluation) pairs; (npairs, 3, 3)."""
    charge_bar = np.atleast_2d(np.asarray(charge_bar, dtype=float))
    eval_bar = np.broadcast_to(np.asarray(eval_bar, dtype=float), charge_bar.shape)
    dx = charge_bar[:, 0] - eval_bar[:, 0]
    dy = charge_bar[:, 1] - eval_bar[:, 1]
    rho = np.hypot(dx, dy)
    phi = np.arctan2(dy, dx)
    I = _radial_integrals(stack, key, charge_bar[:, 2], eval_bar[:, 2], rho, spec)
    c, s = np.cos(phi), np.sin(phi)
    c2, s2 = np.cos(2 * phi), np.sin(2 * phi)
    G = np.zeros((len(rho), 3, 3), dtype=complex)
    G[:, 0, 0] = 0.5 * I[:, 0] + 0.5 * c2 * I[:, 4]
    G[:, 1, 1] = 0.5 * I[:, 0] - 0.5 * c2 * I[:, 4]
    G[:, 0, 1] = G[:, 1, 0] = 0.5 * s2 * I[:, 4]
    G[:, 2, 2] = I[:, 1]
    G[:, 0, 2] = 1j * c * I[:, 2]
    G[:, 1, 2] = 1j * s * I[:, 2]
    G[:, 2, 0] = 1j * c * I[:, 3]
    G[:, 2, 1] = 1j * s * I[:, 3]
    return G


def direct_reaction_sum(stack, sources, charges, targets, key, spec: Optional[sf.QuadratureSpec] = None,
                        chunk: int = 2048) -> np.ndarray:
    """Φ^{∗⋆}_{ℓℓ'} at physical ``targets`` (layer ℓ') from charges in layer ℓ."""
    spec = spec or sf.QuadratureSpec()
    cb = ls.effective_target(stack, key, np.asarray(sources, dtype=float).reshape(-1, 3))
    tb = ls.polarization_source(stack, key, np.atleast_2d(np.asarray(targets, dtype=float)))
    q = np.asarray(charges, dtype=complex).reshape(-1, 3)
    out = np.zeros((len(tb), 3), dtype=complex)
    if len(cb) == 0:
        return out
    step = max(1, chunk // len(cb))
    for i0 in range(0, len(tb), step):
        t = tb[i0:i0 + step]
        try:
            G = reaction_kernel(stack, key, np.tile(cb, (len(t), 1)), np.repeat(t, len(cb), axis=0), spec)
        except sf.NonConvergence as exc:
            raise sf.NonConvergence(f"{exc.request} targets {i0}..{i0 + len(t) - 1}", exc.levels, exc.err) from exc
        out[i0:i0 + step] = np.einsum("tnij,nj->ti", G.reshape(len(t), len(cb), 3, 3), q)
    return out


def direct_layered(stack, points: list, charges: list, target_ids: Optional[list] = None,
                   spec: Optional[sf.QuadratureSpec] = None, reaction: bool = True) -> list:
    """Reference Φ in every layer at ``points[ℓ'][target_ids[ℓ']]`` (all points if None)."""
    spec = spec or sf.QuadratureSpec()
    results = []
    for lp in range(stack.nlayers):
        ids = np.arange(len(points[lp])) if target_ids is None else np.asarray(target_ids[lp])
        tgt = np.asarray(points[lp], dtype=float).reshape(-1, 3)[ids]
        res = DirectResult(np.zeros((len(ids), 3), dtype=complex))
        if len(ids):
            res.perComponent["free"] = direct_free_sum(points[lp], charges[lp], tgt, stack.k[lp], ids)
            if reaction:
                for l in range(stack.nlayers):
                    for key in ls.reaction_keys(stack, l, lp):
                        if len(points[l]) == 0:
                            continue
                        res.perComponent[key.label] = direct_reaction_sum(stack, points[l], charges[l], tgt, key, spec)
            res.phi = sum(res.perComponent.values())
        results.append(res)
    return results
