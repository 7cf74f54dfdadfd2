"""Special functions shared by the free-space and layered expansions.

Index convention for triangular (n, m) arrays: ``idx(n, m) = n*n + n + m`` so a
truncation degree ``p`` gives ``(p + 1)**2`` entries.

Normalization: ``P̂_n^m`` is normalized so that ``Y_n^m = P̂_n^m(cos θ) e^{imφ}``
is orthonormal on the unit sphere.  For ``m >= 0`` no Condon-Shortley phase is
included and ``P̂_n^{-m} = (-1)^m P̂_n^m``, hence ``conj(Y_n^m) = (-1)^m Y_n^{-m}``.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
import math

import numpy as np
import scipy.special as sps

SQRT4PI = math.sqrt(4.0 * math.pi)


def idx(n: int, m: int) -> int:
    return n * n + n + m


def nm_arrays(p: int) -> tuple[np.ndarray, np.ndarray]:
    """Degree and order of every slot of a flattened (p+1)**2 coefficient array."""
    n = np.concatenate([np.full(2 * k + 1, k) for k in range(p + 1)])
    m = np.concatenate([np.arange(-k, k + 1) for k in range(p + 1)])
    return n, m


# ---------------------------------------------------------------------------
# Chebyshev machinery
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ChebShiftTable:
    """Coefficients with ``T_j(a x + b) = sum_s C[j, s] T_s(x)``."""

    a: float
    b: float
    jmax: int
    C: np.ndarray

    def expand(self, j: int, x):
        x = np.asarray(x)
        return np.polynomial.chebyshev.chebval(x, self.C[j, : j + 1])


def cheb_shift_coeffs(a: float, b: float, jmax: int) -> ChebShiftTable:
    if jmax < 0:
        raise ValueError("jmax must be non-negative")
    C = np.zeros((jmax + 1, jmax + 1))
    C[0, 0] = 1.0
    if jmax >= 1:
        C[1, 0] = b
        C[1, 1] = a
    if jmax >= 2:
        C[2, 1] = 4.0 * a * b
    for n in range(1, jmax):
        # row n + 1 from rows n and n - 1
        C[n + 1, n + 1] = a * C[n, n]
        C[n + 1, 0] = a * C[n, 1] + 2.0 * b * C[n, 0] - C[n - 1, 0]
        if n >= 2:
            C[n + 1, n] = a * C[n, n - 1] + 2.0 * b * C[n, n]
            C[n + 1, 1] = 2.0 * a * C[n, 0] + a * C[n, 2] + 2.0 * b * C[n, 1] - C[n - 1, 1]
        for s in range(2, n):
            C[n + 1, s] = a * (C[n, s - 1] + C[n, s + 1]) + 2.0 * b * C[n, s] - C[n - 1, s]
    C.setflags(write=False)
    return ChebShiftTable(float(a), float(b), jmax, C)


def _parity_class(n: int, m: int) -> str:
    return ("even" if n % 2 == 0 else "odd") + "-" + ("even" if m % 2 == 0 else "odd")


def cheb_term_count(n: int, m: int) -> int:
    """K_n of the trigonometric expansion (depends on the parities of n and m)."""
    m = abs(m)
    if n % 2 == 0:
        return n // 2
    return (n + 1) // 2 if m % 2 == 0 else (n - 1) // 2


def tau_factor(n: int, m: int, cos_b, sin_b):
    """Prefactor τ_{n,|m|}(β) given cos β and sin β (complex allowed)."""
    m = abs(m)
    if n % 2 == 0 and m % 2 == 0:
        return np.ones_like(cos_b * sin_b)
    if n % 2 == 1 and m % 2 == 0:
        return 1.0 / cos_b
    if n % 2 == 1:
        return sin_b * np.ones_like(cos_b)
    return sin_b / cos_b


@dataclass(frozen=True)
class LegendreChebTable:
    """``P̂_n^m(cos θ) = signFactor · τ_{n,|m|}(θ) · Σ_k B[k] T_k(cos 2θ)``."""

    n: int
    m: int
    parityClass: str
    K: int
    B: np.ndarray
    signFactor: int

    def evaluate(self, theta):
        theta = np.asarray(theta)
        c, s = np.cos(theta), np.sin(theta)
        series = np.polynomial.chebyshev.chebval(np.cos(2 * theta), self.B)
        return self.signFactor * tau_factor(self.n, self.m, c, s) * series


def _a_coef(n, m, k):
    return 2.0 * (2 * m * m - n * (n + 1) + 4 * (k - 1) ** 2) / (2 * (k - 2) * (2 * k - 3) - n * (n + 1))


def _b_coef(n, m, k):
    return (n * (n + 1) - 2 * k * (2 * k - 1)) / (2 * (k - 2) * (2 * k - 3) - n * (n + 1))


@lru_cache(maxsize=None)
def _A_even(n: int, m: int) -> tuple:
    # n even, m even, 0 <= m <= n; backward recursion on k
    if n == 0:
        return (1.0 / SQRT4PI,)
    h = n // 2
    A = np.zeros(h + 2)
    A[h] = (-1) ** (m // 2) * math.exp(
        math.lgamma(n + 0.5) - math.log(math.pi)
        + 0.5 * (math.log(2 * n + 1) - math.lgamma(n - m + 1) - math.lgamma(n + m + 1))
    )
    for k in range(h - 1, 0, -1):
        A[k] = _a_coef(n, m, k + 2) * A[k + 1] + _b_coef(n, m, k + 2) * A[k + 2]
    if n >= 4:
        A[0] = (_a_coef(n, m, 2) * A[1] + _b_coef(n, m, 2) * A[2]) / 2.0
    else:
        A[0] = (n * (n + 1) - 2) / (2 * n * (n + 1) - 4 * m * m) * A[1]
    return tuple(A[: h + 1])


def _pad(v, length):
    out = np.zeros(length)
    out[: len(v)] = v
    return out


@lru_cache(maxsize=None)
def _B(n: int, m: int) -> tuple:
    """Cheb coefficients B_{n,m}^k for 0 <= m <= n (tuple of length K_n + 1)."""
    if m < 0 or m > n:
        raise ValueError("need 0 <= m <= n")
    K = cheb_term_count(n, m)
    if n % 2 == 0 and m % 2 == 0:
        return _A_even(n, m)
    if n % 2 == 0:
        # tan-type: mix of orders m +/- 1 at the same degree
        up = _pad(_B(n, m + 1), K + 1) * math.sqrt((n - m) * (n + m + 1))
        dn = _pad(_B(n, m - 1), K + 1) * math.sqrt((n + m) * (n - m + 1))
        return tuple((up + dn) / (2 * m))
    if m % 2 == 1:
        # sin-type: degree n - 1, orders m +/- 1
        f = math.sqrt((2 * n + 1) / (2 * n - 1)) / (2 * m)
        out = _pad(_B(n - 1, m - 1), K + 1) * math.sqrt((n + m) * (n + m - 1))
        if m < n:
            out = out + _pad(_B(n - 1, m + 1), K + 1) * math.sqrt((n - m) * (n - m - 1))
        return tuple(f * out)
    # sec-type: degrees n +/- 1 at the same order
    out = _pad(_B(n + 1, m), K + 1) * math.sqrt((n - m + 1) * (n + m + 1) / ((2 * n + 1) * (2 * n + 3)))
    if m <= n - 1:
        out = out + _pad(_B(n - 1, m), K + 1) * math.sqrt((n + m) * (n - m) / ((2 * n - 1) * (2 * n + 1)))
    return tuple(out)


def legendre_cheb_table(n: int, m: int) -> LegendreChebTable:
    if abs(m) > n or n < 0:
        raise ValueError(f"invalid (n, m) = ({n}, {m})")
    B = np.array(_B(n, abs(m)))
    B.setflags(write=False)
    sign = (-1) ** abs(m) if m < 0 else 1
    return LegendreChebTable(n, m, _parity_class(n, abs(m)), len(B) - 1, B, sign)


# ---------------------------------------------------------------------------
# Associated Legendre functions and spherical harmonics
# ---------------------------------------------------------------------------

def legendre_all(p: int, c, s) -> np.ndarray:
    """All P̂_n^m for n <= p, |m| <= n, given cos and sin of the polar angle.

    ``c`` and ``s`` may be complex; passing ``s`` explicitly fixes the branch of
    sqrt(1 - c**2).  Returns shape ``c.shape + ((p+1)**2,)``.
    """
    c = np.asarray(c)
    s = np.asarray(s)
    shape = np.broadcast(c, s).shape
    dtype = np.result_type(c, s, float)
    out = np.zeros(shape + ((p + 1) ** 2,), dtype=dtype)
    pmm = np.full(shape, 1.0 / SQRT4PI, dtype=dtype)
    for m in range(p + 1):
        if m > 0:
            pmm = pmm * (math.sqrt((2 * m + 1) / (2 * m)) * s)
        out[..., idx(m, m)] = pmm
        if m == p:
            break
        p1 = math.sqrt(2 * m + 3) * c * pmm
        out[..., idx(m + 1, m)] = p1
        p0 = pmm
        for n in range(m + 2, p + 1):
            a = math.sqrt((4 * n * n - 1) / (n * n - m * m))
            b = math.sqrt(((n - 1) ** 2 - m * m) / (4 * (n - 1) ** 2 - 1))
            p0, p1 = p1, a * (c * p1 - b * p0)
            out[..., idx(n, m)] = p1
    for m in range(1, p + 1):
        sgn = -1.0 if m % 2 else 1.0
        for n in range(m, p + 1):
            out[..., idx(n, -m)] = sgn * out[..., idx(n, m)]
    return out


def normalized_assoc_legendre(n: int, m: int, w) -> complex:
    """Analytic extension P̂_n^m(w) with sqrt(1 - w**2) on the principal branch."""
    if abs(m) > n:
        raise ValueError("|m| > n")
    w = complex(w)
    s = np.sqrt(1.0 - w * w)
    val = legendre_all(n, np.array(w), np.array(s))[idx(n, m)]
    if abs(w.imag) == 0.0 and abs(w.real) <= 1.0:
        return complex(val.real, 0.0)
    return complex(val)


def spherical_harmonic(n: int, m: int, theta, phi):
    if abs(m) > n:
        raise ValueError("|m| > n")
    theta = np.asarray(theta, dtype=float)
    P = legendre_all(n, np.cos(theta), np.sin(theta))[..., idx(n, m)]
    return P * np.exp(1j * m * np.asarray(phi))


def sph_harm_all(p: int, theta, phi) -> np.ndarray:
    """All Y_n^m(θ, φ), n <= p; shape ``theta.shape + ((p+1)**2,)``."""
    theta = np.asarray(theta, dtype=float)
    phi = np.asarray(phi, dtype=float)
    P = legendre_all(p, np.cos(theta), np.sin(theta))
    _, mm = nm_arrays(p)
    return P * np.exp(1j * phi[..., None] * mm)


def cart2sph(v: np.ndarray):
    v = np.asarray(v, dtype=float)
    r = np.linalg.norm(v, axis=-1)
    rho = np.hypot(v[..., 0], v[..., 1])
    theta = np.arctan2(rho, v[..., 2])
    phi = np.arctan2(v[..., 1], v[..., 0])
    return r, theta, phi


# ---------------------------------------------------------------------------
# Bessel-type functions
# ---------------------------------------------------------------------------

def sph_jn_all(nmax: int, z) -> np.ndarray:
    """j_0..j_nmax at z; upward recurrence where |z| >= n, Miller otherwise.

    Returns shape ``z.shape + (nmax + 1,)``.
    """
    z = np.asarray(z)
    dtype = np.result_type(z, float)
    out = np.zeros(z.shape + (nmax + 1,), dtype=dtype)
    zero = z == 0
    zs = np.where(zero, 1.0, z)
    j0 = np.sin(zs) / zs
    j1 = np.sin(zs) / zs**2 - np.cos(zs) / zs
    az = np.abs(zs)

    # upward values (accurate for n <= |z|)
    up = np.zeros_like(out)
    up[..., 0] = j0
    if nmax >= 1:
        up[..., 1] = j1
    for n in range(1, nmax):
        up[..., n + 1] = (2 * n + 1) / zs * up[..., n] - up[..., n - 1]

    # Miller downward recurrence, rescaled to avoid overflow
    start = nmax + 20 + int(np.ceil(np.max(az, initial=0.0)))
    dn = np.zeros_like(out)
    f_next = np.zeros(z.shape, dtype=dtype)
    f_cur = np.full(z.shape, 1e-30, dtype=dtype)
    for n in range(start, 0, -1):
        f_prev = (2 * n + 1) / zs * f_cur - f_next
        f_next, f_cur = f_cur, f_prev
        # now f_cur ~ j_{n-1}, f_next ~ j_n
        if n - 1 <= nmax:
            dn[..., n - 1] = f_cur
        if n <= nmax:
            dn[..., n] = f_next
        big = np.abs(f_cur) > 1e200
        if np.any(big):
            scale = np.where(big, 1e-200, 1.0)
            f_cur = f_cur * scale
            f_next = f_next * scale
            dn *= scale[..., None]
    use0 = np.abs(j0) >= np.abs(j1)
    norm = np.where(use0, j0 / np.where(dn[..., 0] == 0, 1, dn[..., 0]),
                    j1 / np.where(dn[..., min(1, nmax)] == 0, 1, dn[..., min(1, nmax)]))
    if nmax == 0:
        norm = j0 / dn[..., 0]
    dn = dn * norm[..., None]

    n_idx = np.arange(nmax + 1)
    choose_up = n_idx <= az[..., None]
    out = np.where(choose_up, up, dn)
    out[zero] = 0.0
    out[zero, 0] = 1.0
    return out


def sph_yn_all(nmax: int, z) -> np.ndarray:
    z = np.asarray(z)
    if np.any(z == 0):
        raise ZeroDivisionError("y_n is singular at z = 0")
    dtype = np.result_type(z, float)
    out = np.zeros(z.shape + (nmax + 1,), dtype=dtype)
    out[..., 0] = -np.cos(z) / z
    if nmax >= 1:
        out[..., 1] = -np.cos(z) / z**2 - np.sin(z) / z
    for n in range(1, nmax):
        out[..., n + 1] = (2 * n + 1) / z * out[..., n] - out[..., n - 1]
    return out


def sph_h1_all(nmax: int, z) -> np.ndarray:
    """Spherical Hankel functions of the first kind, h_n = j_n + i y_n."""
    z = np.asarray(z)
    if np.any(z == 0):
        raise ZeroDivisionError("h_n^(1) is singular at z = 0")
    if np.iscomplexobj(z):
        # upward recurrence on h directly is stable for outgoing solutions
        out = np.zeros(z.shape + (nmax + 1,), dtype=complex)
        out[..., 0] = -1j * np.exp(1j * z) / z
        if nmax >= 1:
            out[..., 1] = -np.exp(1j * z) * (z + 1j) / z**2
        for n in range(1, nmax):
            out[..., n + 1] = (2 * n + 1) / z * out[..., n] - out[..., n - 1]
        return out
    return sph_jn_all(nmax, z) + 1j * sph_yn_all(nmax, z)


def sph_jn_deriv(j: np.ndarray, z) -> np.ndarray:
    """Derivatives from an array of values f_0..f_N (j_n or h_n), N >= 1 required for full range."""
    z = np.asarray(z)[..., None]
    n = np.arange(j.shape[-1])
    d = np.empty_like(j)
    d[..., 0] = -j[..., 1] if j.shape[-1] > 1 else np.nan
    d[..., 1:] = j[..., :-1] - (n[1:] + 1) / z * j[..., 1:]
    return d


def wave_functions(n: int, z):
    """(j_n(z), h_n^(1)(z)) for scalar or array z."""
    z = np.asarray(z)
    jn = sph_jn_all(n, z)[..., n]
    hn = sph_h1_all(n, z)[..., n]
    return jn, hn


def cyl_functions(m: int, z):
    """(J_m, H_m^(1), H_m^(2)) at complex or real z."""
    z = np.asarray(z)
    if np.any(z == 0):
        raise ZeroDivisionError("Hankel functions are singular at z = 0")
    return sps.jv(m, z), sps.hankel1(m, z), sps.hankel2(m, z)


def jv_int(order, z):
    """J_order(z) for integer order (negative allowed) and complex z."""
    order = np.asarray(order)
    sgn = np.where((order < 0) & (order % 2 == 1), -1.0, 1.0)
    return sgn * sps.jv(np.abs(order), z)
