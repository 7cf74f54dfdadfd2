"""Sommerfeld-type integrals over deformed contours.

All integrals have the shape ``∫_0^∞ B(k_ρ ρ) f(k_ρ) dk_ρ`` with a cylindrical
Bessel factor B.  The path is split into

* Γ₁: the arc ``k_ρ = sqrt(2k'aût − a²û²t²)``, t in [0, 1], which leaves the real
  axis into the fourth quadrant and rejoins it at ``a > max k_ℓ``;
* Γ₂±: the rays ``a + (Δz ± iρ) s / r`` carrying ``H^(1)/2`` and ``H^(2)/2``,
  along which Hankel function and vertical exponential decay together.

When ρ = 0 (or when requested) the tail is taken on the real axis with J.

Quadrature is double-exponential (tanh-sinh on Γ₁, exp-sinh on the tails) with
step halving and node reuse; a batch of integrands shares every node.
"""
from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.special as sps

from . import layerstack as ls
from .specfun import (
    cheb_shift_coeffs,
    cheb_term_count,
    idx,
    legendre_all,
    legendre_cheb_table,
    nm_arrays,
    tau_factor,
)

_EPS = np.finfo(float).eps


@dataclass(frozen=True)
class QuadratureSpec:
    relTol: float = 1e-12
    aFactor: float = 1.2
    # rays stop where the integrand envelope drops below tailCutoff·(its peak)
    tailCutoff: float = 1e-16
    maxLevels: int = 12
    h0: float = 0.5

    def __post_init__(self):
        if not self.aFactor > 1.0:
            raise ValueError("aFactor must exceed 1")
        if not 0.0 < self.relTol <= 1e-6:
            raise ValueError("relTol must lie in (0, 1e-6]")
        if not 0.0 < self.tailCutoff < 1.0:
            raise ValueError("tailCutoff must lie in (0, 1)")


class NonConvergence(RuntimeError):
    def __init__(self, request, levels, err):
        self.request = request
        self.levels = levels
        self.err = err
        super().__init__(f"quadrature not converged after {levels} levels (err {err:.3e}) for {request}")


# ---------------------------------------------------------------------------
# contour segments
# ---------------------------------------------------------------------------

class _Segment:
    """One DE-mapped piece of the contour with its Bessel kind and weight factor."""

    kind = "J"
    factor = 1.0
    umin = -3.5
    umax = 3.5

    def nodes(self, u):
        raise NotImplementedError


class _Arc(_Segment):
    def __init__(self, kp, a):
        self.kp = complex(kp)
        self.a = float(a)
        ratio = (self.kp / self.a)
        self.au = self.a * (ratio - 1j * np.sqrt(1.0 - ratio * ratio))

    def nodes(self, u):
        v = math.pi * np.sinh(u)
        t = sps.expit(v)
        omt = sps.expit(-v)
        dtdu = math.pi * np.cosh(u) * t * omt
        au_t = self.au * t
        krho = np.sqrt(au_t * (2.0 * self.kp - au_t))
        jac = (self.kp * self.au - self.au * au_t) / krho
        return krho, jac * dtdu


class _Ray(_Segment):
    umin = -4.5

    def __init__(self, a, direction, scale, kind, factor, xmax):
        self.a = float(a)
        self.w = complex(direction)
        self.scale = float(scale)
        self.kind = kind
        self.factor = factor
        self.umax = math.asinh(math.log(xmax) / (0.5 * math.pi))

    def nodes(self, u):
        x = np.exp(0.5 * math.pi * np.sinh(u))
        dxdu = 0.5 * math.pi * np.cosh(u) * x
        krho = self.a + self.w * x / self.scale
        return krho, self.w / self.scale * dxdu


def tail_length(cutoff: float, growth: float) -> float:
    """x where x^g e^{-x} has fallen to ``cutoff`` times its peak value (x ≥ g)."""
    lc = -math.log(cutoff)
    if growth <= 0:
        return lc
    g = float(growth)
    x = g + lc
    for _ in range(60):
        x = g + lc + g * math.log(x / g)
    return x


# "auto" tails stay on the real axis while rho <= REAL_TAIL_RATIO * dz
REAL_TAIL_RATIO = 2.0


def contour_segments(rho: float, dz: float, kp, a: float, spec: QuadratureSpec, tail: str = "auto",
                     growth: float = 4.0):
    """Γ₁ plus the tail pieces for horizontal distance rho and decay length dz.

    ``growth`` is the polynomial degree (in k_ρ) of the integrand's envelope and
    sets where the exponentially decaying rays are truncated.
    """
    if rho < 0:
        raise ValueError("rho must be non-negative")
    xmax = tail_length(spec.tailCutoff, growth)
    segs = [_Arc(kp, a)]
    if tail == "auto":
        # the Hankel split cancels badly when a·ρ is small against the Bessel order
        tail = "real" if rho == 0.0 or (dz > 0 and rho <= REAL_TAIL_RATIO * dz) else "hankel"
    if tail == "real":
        if dz <= 0:
            raise ValueError("real-axis tail needs a positive vertical decay length")
        segs.append(_Ray(a, 1.0, dz, "J", 1.0, xmax))
    else:
        if rho == 0.0:
            raise ValueError("Hankel split needs rho > 0")
        dzp = max(dz, 0.0)
        r = math.hypot(rho, dzp)
        segs.append(_Ray(a, (dzp + 1j * rho) / r, r, "H1", 0.5, xmax))
        segs.append(_Ray(a, (dzp - 1j * rho) / r, r, "H2", 0.5, xmax))
    return segs


def bessel(kind: str, orders, z):
    """Cylindrical Bessel values, shape z.shape + orders.shape (orders >= 0)."""
    orders = np.asarray(orders)
    zz = np.asarray(z)[..., None]
    if kind == "J":
        return sps.jv(orders, zz)
    if kind == "H1":
        return sps.hankel1(orders, zz)
    return sps.hankel2(orders, zz)


Kernel = Callable[[np.ndarray, np.ndarray, "_Segment"], tuple]


def de_integrate(kernel: Kernel, segments, spec: QuadratureSpec, request=None):
    """Integrate a batch of integrands sharing nodes; returns (values, levels used).

    ``kernel(krho, weights, segment)`` must return ``(S, A)``: the weighted sum of
    the batch over the given nodes and the weighted sum of magnitudes (used as a
    round-off floor for the stopping rule).  The segment's Bessel ``kind`` and
    ``factor`` are available to the kernel.
    """
    sums = [None] * len(segments)
    asums = [None] * len(segments)
    prev = None
    err = np.inf
    for level in range(spec.maxLevels + 1):
        h = spec.h0 / 2**level
        for i, seg in enumerate(segments):
            if level == 0:
                j = np.arange(math.ceil(seg.umin / h), math.floor(seg.umax / h) + 1)
            else:
                j = np.arange(math.ceil(seg.umin / h), math.floor(seg.umax / h) + 1)
                j = j[j % 2 != 0]
            u = j * h
            krho, w = seg.nodes(u)
            S, A = kernel(krho, w * seg.factor, seg)
            sums[i] = S if sums[i] is None else sums[i] + S
            asums[i] = A if asums[i] is None else asums[i] + A
        est = h * sum(sums)
        amag = h * sum(asums)
        if prev is not None and level >= 2:
            diff = np.abs(est - prev)
            tol = np.maximum(spec.relTol * np.abs(est), 64 * _EPS * amag)
            err = float(np.max(diff / np.maximum(np.abs(est), 1e-300)))
            if np.all(diff <= tol):
                return est, level
        prev = est
    raise NonConvergence(request, spec.maxLevels, err)


def integrate_bessel(f, order: int, rho: float, dz: float, kp, a: float, spec: QuadratureSpec,
                     tail: str = "auto", growth: float = 4.0):
    """∫_0^∞ J_order(k_ρ ρ) f(k_ρ) dk_ρ for a scalar analytic integrand f."""
    sgn = -1.0 if order < 0 and order % 2 else 1.0
    o = abs(order)

    def kernel(krho, w, seg):
        vals = w * f(krho) * bessel(seg.kind, o, krho * rho)[..., 0]
        return np.sum(vals), np.sum(np.abs(vals))

    val, _ = de_integrate(kernel, contour_segments(rho, dz, kp, a, spec, tail, growth + o), spec,
                          request=f"J_{order}, rho={rho}, dz={dz}")
    return sgn * val


# ---------------------------------------------------------------------------
# reaction-key spectral data on contour nodes
# ---------------------------------------------------------------------------

@dataclass
class KeyGeometry:
    """A reaction component at transformed coordinates (rho, zbar, zpbar)."""

    stack: ls.LayerStack
    key: ls.ReactionKey
    rho: float
    zbar: float
    zpbar: float

    @property
    def sign(self) -> int:
        return ls.key_sign(self.key)

    @property
    def dz(self) -> float:
        """Vertical decay length of the Z-exponential in transformed coordinates."""
        return self.sign * (self.zbar - self.zpbar)

    def contour(self, spec: QuadratureSpec, tail: str = "auto", growth: float = 4.0):
        a = spec.aFactor * self.stack.kmax
        kp = self.stack.k[self.key.ell_s]
        return contour_segments(self.rho, self.dz, kp, a, spec, tail, growth)

    def spectral(self, krho):
        """(kz_t, kz_s, Z·σ_1..5 in reference form) at the nodes."""
        kz = self.stack.kz(krho)
        kzt, kzs = kz[..., self.key.ell_t], kz[..., self.key.ell_s]
        sig = ls.reference_sigma(self.stack, self.key, krho)
        Z = ls.z_exponential_reference(self.stack, self.key, kzt, kzs, self.zbar, self.zpbar)
        return kzt, kzs, sig * Z


def _tau_classes(c, s):
    """τ_{n,|m|} for the four parity classes, index 2*(n%2) + (m%2)."""
    return np.stack([tau_factor(n, m, c, s) for n in (0, 1) for m in (0, 1)], axis=-1)


def _cheb_T(qmax: int, x):
    out = np.empty(np.shape(x) + (qmax + 1,), dtype=complex)
    out[..., 0] = 1.0
    if qmax >= 1:
        out[..., 1] = x
    for q in range(1, qmax):
        out[..., q + 1] = 2.0 * x * out[..., q] - out[..., q - 1]
    return out


def breve_integrals(geom: KeyGeometry, qmax: int, omax: int, spec: QuadratureSpec, tail: str = "auto"):
    """All Chebyshev-reduced integrals Ĭ for one geometry.

    Returns an array indexed ``[sigma(5), tau_t(4), tau_s(4), q, order]`` with
    ``∫ k_ρ J_order(k_ρ ρ) Z σ T_q(cos 2β₀) τ_t(β) τ_s(β') dk_ρ`` for orders 0..omax.
    """
    stack, key = geom.stack, geom.key
    k, kp = stack.k[key.ell_t], stack.k[key.ell_s]
    kmin = k if abs(k) <= abs(kp) else kp
    orders = np.arange(omax + 1)

    def kernel(krho, w, seg):
        kzt, kzs, zsig = geom.spectral(krho)
        tt = _tau_classes(kzt / k, krho / k)
        ts = _tau_classes(kzs / kp, krho / kp)
        F = (w * krho)[:, None, None, None] * zsig.T[:, :, None, None] * tt[:, None, :, None] * ts[:, None, None, :]
        F = F.reshape(len(krho), -1)
        T = _cheb_T(qmax, 1.0 - 2.0 * (krho / kmin) ** 2)
        Bz = bessel(seg.kind, orders, krho * geom.rho)
        G = (T[:, :, None] * Bz[:, None, :]).reshape(len(krho), -1)
        return F.T @ G, np.abs(F).T @ np.abs(G)

    segs = geom.contour(spec, tail, growth=2 * qmax + omax + 5)  # J_o adds up to k_ρ^o on the real axis
    vals, _ = de_integrate(kernel, segs, spec, request=f"breve {geom.key} rho={geom.rho}")
    return vals.reshape(5, 4, 4, qmax + 1, omax + 1)


@dataclass(frozen=True)
class SommerfeldIntegralRequest:
    besselOrder: int
    chebDegree: int
    key: ls.ReactionKey
    rho: float
    z: float
    zprime: float
    sigmaIndex: int  # 1..5
    tauSelector: tuple  # ((n, m), (nu, mu)) picking τ_{n,|m|}(β) τ_{ν,|μ|}(β')


def integrate_chebyshev_sommerfeld(req: SommerfeldIntegralRequest, spec: QuadratureSpec,
                                   stack: ls.LayerStack) -> complex:
    """A single Ĭ integral (Bessel order may be negative)."""
    geom = KeyGeometry(stack, req.key, req.rho, req.z, req.zprime)
    k, kp = stack.k[req.key.ell_t], stack.k[req.key.ell_s]
    kmin = k if abs(k) <= abs(kp) else kp
    (n, m), (nu, mu) = req.tauSelector
    o = abs(req.besselOrder)
    sgn = -1.0 if req.besselOrder < 0 and o % 2 else 1.0

    def kernel(krho, w, seg):
        kzt, kzs, zsig = geom.spectral(krho)
        f = (w * krho * zsig[req.sigmaIndex - 1] * tau_factor(n, m, kzt / k, krho / k)
             * tau_factor(nu, mu, kzs / kp, krho / kp)
             * _cheb_T(req.chebDegree, 1.0 - 2.0 * (krho / kmin) ** 2)[..., -1]
             * bessel(seg.kind, o, krho * req.rho)[..., 0])
        return np.sum(f), np.sum(np.abs(f))

    val, _ = de_integrate(kernel, geom.contour(spec, growth=2 * req.chebDegree + req.besselOrder + 5), spec, request=req)
    return sgn * val


# ---------------------------------------------------------------------------
# assembly of Î from Ĭ
# ---------------------------------------------------------------------------

def _cheb_product_tensor(kmax: int) -> np.ndarray:
    """P[i, l, q] with T_i T_l = Σ_q P[i, l, q] T_q."""
    P = np.zeros((kmax + 1, kmax + 1, 2 * kmax + 1))
    for i in range(kmax + 1):
        for l in range(kmax + 1):
            P[i, l, i + l] += 0.5
            P[i, l, abs(i - l)] += 0.5
    return P


def _b_matrix(p: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Padded B coefficients, sign factors and τ-class per (n, m) slot."""
    n_arr, m_arr = nm_arrays(p)
    kmax = max(cheb_term_count(n, m) for n, m in zip(n_arr, m_arr))
    B = np.zeros(((p + 1) ** 2, kmax + 1))
    sgn = np.ones((p + 1) ** 2)
    cls = np.zeros((p + 1) ** 2, dtype=int)
    for i, (n, m) in enumerate(zip(n_arr, m_arr)):
        t = legendre_cheb_table(int(n), int(m))
        B[i, : t.K + 1] = t.B
        sgn[i] = t.signFactor
        cls[i] = 2 * (n % 2) + (abs(m) % 2)
    return B, sgn, cls


def chebyshev_coefficients(pa: int, pb: int, gamma) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Series coefficients of Q_{nm}^{νμ} in T_q(cos 2β₀).

    Returns (coef[a, b, q], sign[a, b], tau class of a, tau class of b); ``a``
    indexes the (n, m) slots (P̂ at k_z/k), ``b`` the (ν, μ) slots (P̂ at k'_z/k').
    """
    Ba, sa, ca = _b_matrix(pa)
    Bb, sb, cb = _b_matrix(pb)
    g2 = gamma * gamma
    if abs(gamma) <= 1.0:
        C = cheb_shift_coeffs(g2, 1.0 - g2, Bb.shape[1] - 1).C
        Bb = Bb @ C
    else:
        C = cheb_shift_coeffs(1.0 / g2, 1.0 - 1.0 / g2, Ba.shape[1] - 1).C
        Ba = Ba @ C
    kmax = max(Ba.shape[1], Bb.shape[1]) - 1
    Ba = np.pad(Ba, ((0, 0), (0, kmax + 1 - Ba.shape[1])))
    Bb = np.pad(Bb, ((0, 0), (0, kmax + 1 - Bb.shape[1])))
    P = _cheb_product_tensor(kmax)
    coef = np.einsum("ai,bl,ilq->abq", Ba, Bb, P, optimize=True)
    return coef, np.outer(sa, sb), ca, cb


def _term_orders(pa: int, pb: int):
    _, ma = nm_arrays(pa)
    _, mb = nm_arrays(pb)
    return ma[:, None, None] - mb[None, :, None] + ls.TERM_KAPPA[None, None, :]


def i_hat_table(geom: KeyGeometry, pa: int, pb: int, spec: QuadratureSpec, method: str = "chebyshev",
                tail: str = "auto") -> np.ndarray:
    """Î_{nmκ}^{νμ}(ρ, z̄, z̄'; σ) for every (n,m) ≤ pa, (ν,μ) ≤ pb and kernel term.

    Output shape ``((pa+1)**2, (pb+1)**2, 8)``; the term axis follows
    ``layerstack.KERNEL_TERMS`` (κ and σ per term).
    """
    if method == "direct":
        return _i_hat_direct(geom, pa, pb, spec, tail)
    stack, key = geom.stack, geom.key
    gamma = stack.k[key.ell_t] / stack.k[key.ell_s]
    coef, sgn, ca, cb = chebyshev_coefficients(pa, pb, gamma)
    qmax = coef.shape[-1] - 1
    orders = _term_orders(pa, pb)
    breve = breve_integrals(geom, qmax, int(np.abs(orders).max()), spec, tail)
    out = np.empty(orders.shape, dtype=complex)
    A, B = coef.shape[:2]
    for t in range(len(ls.KERNEL_TERMS)):
        o = orders[:, :, t]
        osgn = np.where((o < 0) & (np.abs(o) % 2 == 1), -1.0, 1.0)
        sel = breve[ls.TERM_SIGMA[t]][ca[:, None], cb[None, :], :, np.abs(o)]
        out[:, :, t] = sgn * osgn * np.einsum("abq,abq->ab", coef, sel)
    return out


def _i_hat_direct(geom: KeyGeometry, pa: int, pb: int, spec: QuadratureSpec, tail: str = "auto"):
    """Î by quadrature of the Legendre products themselves (no Chebyshev step)."""
    stack, key = geom.stack, geom.key
    k, kp = stack.k[key.ell_t], stack.k[key.ell_s]
    _, ma = nm_arrays(pa)
    _, mb = nm_arrays(pb)
    omax = pa + pb + 2
    nA, nB = (pa + 1) ** 2, (pb + 1) ** 2

    def kernel(krho, w, seg):
        kzt, kzs, zsig = geom.spectral(krho)
        Pa = legendre_all(pa, kzt / k, krho / k)
        Pb = legendre_all(pb, kzs / kp, krho / kp)
        Bz = bessel(seg.kind, np.arange(omax + 1), krho * geom.rho)
        S = np.zeros((nA, nB, 8), dtype=complex)
        Aabs = np.zeros((nA, nB, 8))
        base = (w * krho)[:, None] * zsig.T  # nodes x 5
        for t, (kap, si, _) in enumerate(ls.KERNEL_TERMS):
            for m in range(-pa, pa + 1):
                rows = np.nonzero(ma == m)[0]
                o = m - mb + kap
                osgn = np.where((o < 0) & (np.abs(o) % 2 == 1), -1.0, 1.0)
                G = base[:, si, None] * Bz[:, np.abs(o)] * osgn * Pb
                S[rows, :, t] = Pa[:, rows].T @ G
                Aabs[rows, :, t] = np.abs(Pa[:, rows]).T @ np.abs(G)
        return S, Aabs

    vals, _ = de_integrate(kernel, geom.contour(spec, tail, growth=pa + pb + omax + 4), spec,
                           request=f"direct I-hat {key}")
    return vals


def phase_factors(geom: KeyGeometry, phi: float, pa: int, pb: int) -> np.ndarray:
    """(i e^{iφ})^{m-μ+κ} c_{nm}^{νμ} for every table slot."""
    na, ma = nm_arrays(pa)
    nb, mb = nm_arrays(pb)
    s = geom.sign
    o = _term_orders(pa, pb)
    ex = (na[:, None] + nb[None, :] + ma[:, None] + mb[None, :])
    c = (float(s) ** ex) * (1j ** ((na[:, None] + nb[None, :] + 1) % 4))
    return c[:, :, None] * (1j * np.exp(1j * phi)) ** o


def i_full_table(stack, key, r, rprime, pa: int, pb: int, spec: QuadratureSpec, method: str = "chebyshev"):
    """𝓘_{nmκ}^{νμ}(r, r'; σ) for transformed points r (P̂ at k_z/k) and r'."""
    r = np.asarray(r, dtype=float)
    rprime = np.asarray(rprime, dtype=float)
    dx, dy = r[0] - rprime[0], r[1] - rprime[1]
    geom = KeyGeometry(stack, key, math.hypot(dx, dy), r[2], rprime[2])
    phi = math.atan2(dy, dx)
    return phase_factors(geom, phi, pa, pb) * i_hat_table(geom, pa, pb, spec, method)


def _term_index(kappa: int, sigmaIndex: int) -> int:
    for t, (kap, si, _) in enumerate(ls.KERNEL_TERMS):
        if kap == kappa and si == sigmaIndex - 1:
            return t
    raise ValueError(f"no kernel term with kappa={kappa}, sigma{sigmaIndex}")


_IHAT_CACHE: dict = {}


def integral_I_hat(n, m, kappa, nu, mu, geom: KeyGeometry, sigmaIndex: int, spec: QuadratureSpec,
                   method: str = "chebyshev") -> complex:
    """One Î entry; tables are cached per (geometry, truncation, method)."""
    p = max(n, nu)
    ck = (geom.stack, geom.key, geom.rho, geom.zbar, geom.zpbar, p, spec, method)
    if ck not in _IHAT_CACHE:
        _IHAT_CACHE[ck] = i_hat_table(geom, p, p, spec, method)
    return _IHAT_CACHE[ck][idx(n, m), idx(nu, mu), _term_index(kappa, sigmaIndex)]


def integral_I_full(n, m, kappa, nu, mu, stack, key, r, rprime, sigmaIndex: int, spec: QuadratureSpec,
                    method: str = "chebyshev") -> complex:
    r = np.asarray(r, dtype=float)
    rprime = np.asarray(rprime, dtype=float)
    dx, dy = r[0] - rprime[0], r[1] - rprime[1]
    geom = KeyGeometry(stack, key, math.hypot(dx, dy), r[2], rprime[2])
    phi = math.atan2(dy, dx)
    s = geom.sign
    c = (float(s) ** (n + nu + m + mu)) * 1j ** ((n + nu + 1) % 4)
    val = integral_I_hat(n, m, kappa, nu, mu, geom, sigmaIndex, spec, method)
    return (1j * np.exp(1j * phi)) ** (m - mu + kappa) * c * val


# ---------------------------------------------------------------------------
# batched pair integrals (direct interactions and the oracle)
# ---------------------------------------------------------------------------

def pair_kernel_values(stack: ls.LayerStack, key: ls.ReactionKey, src_bar: np.ndarray, tgt_bar: np.ndarray,
                       spec: QuadratureSpec, max_oscillation: float = 5.0) -> np.ndarray:
    """3×3 kernel G^{∗⋆}(r_j, r_i) for transformed charge points ``src_bar`` (N, 3)
    and transformed evaluation points ``tgt_bar`` ((3,) or (N, 3), paired
    elementwise); returns shape (N, 3, 3).

    Pairs are integrated together on shared nodes with a real-axis tail; pairs
    whose horizontal distance is large compared with the vertical decay length
    fall back to the per-pair Hankel split.
    """
    src_bar = np.atleast_2d(np.asarray(src_bar, dtype=float))
    tgt_bar = np.broadcast_to(np.asarray(tgt_bar, dtype=float), src_bar.shape)
    d = src_bar[:, :2] - tgt_bar[:, :2]
    rho = np.hypot(d[:, 0], d[:, 1])
    phi = np.arctan2(d[:, 1], d[:, 0])
    s = ls.key_sign(key)
    dz = s * (src_bar[:, 2] - tgt_bar[:, 2])
    if np.any(dz <= 0):
        raise ValueError("transformed points are not separated by an interface")
    L = np.zeros((len(src_bar), 8), dtype=complex)
    fast = rho <= max_oscillation * dz
    if np.any(fast):
        L[fast] = _pair_L_batch(stack, key, src_bar[fast, 2], rho[fast], tgt_bar[fast, 2],
                                float(dz[fast].min()), spec)
    for j in np.nonzero(~fast)[0]:
        geom = KeyGeometry(stack, key, float(rho[j]), float(src_bar[j, 2]), float(tgt_bar[j, 2]))
        L[j] = _pair_L_single(geom, spec)
    kap = ls.TERM_KAPPA
    L = L * (1j / (4 * math.pi)) * (1j ** (kap % 4))[None, :] * np.exp(1j * kap[None, :] * phi[:, None])
    return np.einsum("nt,tij->nij", L, ls.TERM_MATRIX)


def _pair_L_single(geom: KeyGeometry, spec: QuadratureSpec) -> np.ndarray:
    kap = np.abs(ls.TERM_KAPPA)
    ksgn = np.where(ls.TERM_KAPPA == -1, -1.0, 1.0)

    def kernel(krho, w, seg):
        _, _, zsig = geom.spectral(krho)
        Bz = bessel(seg.kind, np.arange(3), krho * geom.rho)
        f = (w * krho)[:, None] * zsig.T[:, ls.TERM_SIGMA] * Bz[:, kap] * ksgn
        return f.sum(axis=0), np.abs(f).sum(axis=0)

    val, _ = de_integrate(kernel, geom.contour(spec), spec, request=f"pair {geom.key}")
    return val


def _pair_L_batch(stack, key, zbar, rho, zpbar, dzmin, spec):
    """∫ k_ρ J_|κ|(k_ρ ρ_j) Z_j σ dk_ρ (sign of J_{-1} folded in) for many pairs."""
    zpbar = np.broadcast_to(np.asarray(zpbar, dtype=float), np.shape(zbar))
    kz_t_idx, kz_s_idx = key.ell_t, key.ell_s
    zt, zs = ls.reference_planes(stack, key)
    s = ls.key_sign(key)
    a = spec.aFactor * stack.kmax
    segs = contour_segments(0.0, dzmin, stack.k[key.ell_s], a, spec, tail="real")
    kap = np.abs(ls.TERM_KAPPA)
    ksgn = np.where(ls.TERM_KAPPA == -1, -1.0, 1.0)

    def kernel(krho, w, seg):
        kz = stack.kz(krho)
        kzt, kzs = kz[:, kz_t_idx], kz[:, kz_s_idx]
        sig = ls.reference_sigma(stack, key, krho).T  # nodes x 5
        base = (w * krho)[:, None] * sig[:, ls.TERM_SIGMA] * ksgn
        Zj = np.exp(s * 1j * (kzt[:, None] * (zbar[None, :] - zt) - kzs[:, None] * (zpbar[None, :] - zs)))
        x = krho[:, None] * rho[None, :]
        if np.all(np.imag(krho) == 0):
            x = x.real
            J0, J1 = sps.j0(x), sps.j1(x)
        else:
            J0, J1 = sps.jv(0, x), sps.jv(1, x)
        with np.errstate(divide="ignore", invalid="ignore"):
            J2 = np.where(x == 0, 0.0, 2.0 * J1 / np.where(x == 0, 1.0, x) - J0)
        small = np.abs(x) < 0.5
        if np.any(small):
            J2 = np.where(small, sps.jv(2, x), J2)
        Jk = (J0, J1, J2)
        S = np.empty((len(zbar), 8), dtype=complex)
        A = np.empty((len(zbar), 8))
        for t in range(8):
            g = Zj * Jk[kap[t]]
            S[:, t] = base[:, t] @ g
            A[:, t] = np.abs(base[:, t]) @ np.abs(g)
        return S, A

    val, _ = de_integrate(kernel, segs, spec, request=f"pair batch {key}")
    return val


# ---------------------------------------------------------------------------
# table cache files
# ---------------------------------------------------------------------------

TABLE_MAGIC = b"LAYERFMM-TABLE"
TABLE_VERSION = 1


def save_table(path, table: np.ndarray, meta: Optional[dict] = None) -> None:
    """Binary table file: magic, version, JSON header, little-endian complex pairs.

    Layout::

        14 bytes  b"LAYERFMM-TABLE"
        uint32    format version (little endian)
        uint32    length of the UTF-8 JSON header in bytes
        header    {"shape": [...], "meta": {...}}
        payload   prod(shape) pairs of float64 (real, imag), little endian, C order
    """
    table = np.ascontiguousarray(table, dtype="<c16")
    header = json.dumps({"shape": list(table.shape), "meta": meta or {}}).encode()
    with open(path, "wb") as fh:
        fh.write(TABLE_MAGIC)
        fh.write(struct.pack("<II", TABLE_VERSION, len(header)))
        fh.write(header)
        fh.write(table.tobytes())


def load_table(path) -> tuple[np.ndarray, dict]:
    with open(path, "rb") as fh:
        magic = fh.read(len(TABLE_MAGIC))
        if magic != TABLE_MAGIC:
            raise ValueError(f"{path}: not a table file")
        version, hlen = struct.unpack("<II", fh.read(8))
        if version != TABLE_VERSION:
            raise ValueError(f"{path}: unsupported table version {version}")
        header = json.loads(fh.read(hlen).decode())
        data = np.frombuffer(fh.read(), dtype="<c16")
    return data.reshape(header["shape"]).astype(complex), header["meta"]
