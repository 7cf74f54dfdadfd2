"""Horizontally layered media: wave numbers, reaction-component bookkeeping and
the 1-D interface densities that carry the layer physics.

Layers are numbered 0..L from top to bottom; interface ``d[l]`` separates layer
``l`` (above) from layer ``l + 1`` (below).

Reaction amplitudes are computed in a *reference* form: every up-going wave in
the target layer is referenced to the interface below it, every down-going wave
to the interface above it, and the free wave leaving the source is referenced to
the interface it first hits.  All reference amplitudes stay bounded for
evanescent ``k_rho``; the exponentially growing/decaying normalisation of the
``Z``-exponential form is recovered by dividing by ``Z`` at the reference planes.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

UP = 1
DOWN = -1
_DIRNAME = {UP: "up", DOWN: "down"}


class DensityError(ArithmeticError):
    """The interface system is singular at the requested k_rho."""

    def __init__(self, krho):
        self.krho = krho
        super().__init__(f"singular layered transfer system at k_rho = {krho}")


@dataclass(frozen=True)
class LayerStack:
    d: tuple
    eps: tuple
    mu: tuple
    omega: float
    k: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        d = tuple(float(x) for x in self.d)
        eps = tuple(complex(x) if np.iscomplexobj(x) else float(x) for x in self.eps)
        mu = tuple(complex(x) if np.iscomplexobj(x) else float(x) for x in self.mu)
        if len(eps) != len(d) + 1 or len(mu) != len(d) + 1:
            raise ValueError("need len(eps) == len(mu) == len(d) + 1")
        if any(d[i] <= d[i + 1] for i in range(len(d) - 1)):
            raise ValueError("interfaces must be strictly decreasing")
        object.__setattr__(self, "d", d)
        object.__setattr__(self, "eps", eps)
        object.__setattr__(self, "mu", mu)
        k = self.omega * np.sqrt(np.asarray(eps, dtype=complex) * np.asarray(mu, dtype=complex))
        if np.all(np.imag(k) == 0):
            k = np.real(k)
        k.setflags(write=False)
        object.__setattr__(self, "k", k)

    @property
    def L(self) -> int:
        return len(self.d)

    @property
    def nlayers(self) -> int:
        return len(self.d) + 1

    @property
    def kmax(self) -> float:
        return float(np.max(np.real(self.k)))

    def layer_of(self, z) -> np.ndarray:
        """Layer index of each z; points on an interface go to the layer above."""
        z = np.asarray(z, dtype=float)
        return np.sum(np.asarray(self.d)[None, :] > z.reshape(-1, 1), axis=1).reshape(z.shape)

    def thickness(self, ell: int) -> float:
        if ell <= 0 or ell >= self.L:
            return np.inf
        return self.d[ell - 1] - self.d[ell]

    def is_homogeneous(self) -> bool:
        return len(set(self.eps)) == 1 and len(set(self.mu)) == 1

    def kz(self, krho) -> np.ndarray:
        """Vertical wave numbers, shape ``krho.shape + (L+1,)``, branch Im >= 0."""
        krho = np.asarray(krho, dtype=complex)
        kz = np.sqrt(np.asarray(self.k, dtype=complex) ** 2 - krho[..., None] ** 2)
        return np.where(kz.imag < 0, -kz, kz)

    def spectral_point(self, krho, ell_t: int, ell_s: int) -> "SpectralPoint":
        return SpectralPoint.build(self, krho, ell_t, ell_s)


@dataclass(frozen=True)
class SpectralPoint:
    krho: complex
    kz: np.ndarray
    beta: complex
    betaPrime: complex
    gamma: complex

    @classmethod
    def build(cls, stack: LayerStack, krho, ell_t: int, ell_s: int) -> "SpectralPoint":
        krho = complex(krho)
        kz = stack.kz(krho)
        k, kp = stack.k[ell_t], stack.k[ell_s]
        beta = np.arccos(complex(kz[ell_t] / k))
        beta_p = np.arccos(complex(kz[ell_s] / kp))
        return cls(krho, kz, beta, beta_p, complex(k / kp))


@dataclass(frozen=True, order=True)
class ReactionKey:
    """(target layer, source layer, direction at target, direction at source)."""

    ell_t: int
    ell_s: int
    dir_t: int
    dir_s: int

    def __str__(self):
        return f"({self.ell_t},{self.ell_s},{_DIRNAME[self.dir_t]},{_DIRNAME[self.dir_s]})"

    @property
    def label(self) -> str:
        arrows = {UP: "u", DOWN: "d"}
        return f"r{self.ell_t}{self.ell_s}{arrows[self.dir_t]}{arrows[self.dir_s]}"


def key_exists(stack: LayerStack, key: ReactionKey) -> bool:
    """A component is present only when its bounding interfaces exist."""
    L = stack.L
    ok_t = key.ell_t <= L - 1 if key.dir_t == UP else key.ell_t >= 1
    ok_s = key.ell_s >= 1 if key.dir_s == UP else key.ell_s <= L - 1
    in_range = 0 <= key.ell_t <= L and 0 <= key.ell_s <= L
    return in_range and ok_t and ok_s and L >= 1


def reaction_keys(stack: LayerStack, ell_t: int, ell_s: int) -> list[ReactionKey]:
    keys = []
    for dt in (UP, DOWN):
        for ds in (UP, DOWN):
            key = ReactionKey(ell_t, ell_s, dt, ds)
            if key_exists(stack, key):
                keys.append(key)
    return keys


def all_reaction_keys(stack: LayerStack) -> Iterator[ReactionKey]:
    for lt in range(stack.nlayers):
        for ls in range(stack.nlayers):
            yield from reaction_keys(stack, lt, ls)


def key_sign(key: ReactionKey) -> int:
    """The sign s of the exponent: +1 for target above source-type propagation."""
    l, lp = key.ell_t, key.ell_s
    if key.dir_s == DOWN:
        return 1 if l <= lp else -1
    return 1 if l < lp else -1


def tau(stack: LayerStack, ell: int, z):
    if ell < 0 or ell >= stack.L:
        raise ValueError(f"no interface d_{ell} in a stack with {stack.L} interfaces")
    return 2.0 * stack.d[ell] - np.asarray(z)


def _target_reflection(key: ReactionKey):
    """Interface index used to reflect the target, or None for identity."""
    l, lp = key.ell_t, key.ell_s
    if key.dir_t == UP:
        reflect = l >= lp if key.dir_s == UP else l > lp
        return l if reflect else None
    reflect = l < lp if key.dir_s == UP else l <= lp
    return l - 1 if reflect else None


def _source_reflection(key: ReactionKey):
    l, lp = key.ell_t, key.ell_s
    if key.dir_s == DOWN:
        return lp if l <= lp else None
    return lp - 1 if l >= lp else None


def effective_target(stack: LayerStack, key: ReactionKey, r) -> np.ndarray:
    r = np.array(r, dtype=float, copy=True)
    i = _target_reflection(key)
    if i is not None:
        r[..., 2] = tau(stack, i, r[..., 2])
    return r


def polarization_source(stack: LayerStack, key: ReactionKey, rp) -> np.ndarray:
    rp = np.array(rp, dtype=float, copy=True)
    i = _source_reflection(key)
    if i is not None:
        rp[..., 2] = tau(stack, i, rp[..., 2])
    return rp


def transmission_distance(stack: LayerStack, key: ReactionKey, r, rp) -> np.ndarray:
    return np.linalg.norm(effective_target(stack, key, r) - polarization_source(stack, key, rp), axis=-1)


def reference_planes(stack: LayerStack, key: ReactionKey) -> tuple[float, float]:
    """Interfaces at which the target-side and source-side waves are referenced."""
    zt = stack.d[key.ell_t] if key.dir_t == UP else stack.d[key.ell_t - 1]
    zs = stack.d[key.ell_s - 1] if key.dir_s == UP else stack.d[key.ell_s]
    return zt, zs


def z_exponential(stack: LayerStack, key: ReactionKey, krho, z, zprime):
    """The Z-exponential of a reaction component, evaluated at physical z, z'."""
    kz = stack.kz(krho)
    k = kz[..., key.ell_t]
    kp = kz[..., key.ell_s]
    zb = effective_target(stack, key, np.array([0.0, 0.0, z]))[2]
    zpb = polarization_source(stack, key, np.array([0.0, 0.0, zprime]))[2]
    s = key_sign(key)
    return np.exp(s * 1j * (k * zb - kp * zpb))


def z_exponential_reference(stack: LayerStack, key: ReactionKey, kz_t, kz_s, zbar, zpbar):
    """Reference-form exponential in transformed coordinates (bounded factor)."""
    zt, zs = reference_planes(stack, key)
    s = key_sign(key)
    return np.exp(s * 1j * (kz_t * (zbar - zt) - kz_s * (zpbar - zs)))


# ---------------------------------------------------------------------------
# interface densities
# ---------------------------------------------------------------------------

def _interface_system(stack: LayerStack, kz: np.ndarray, weights: Sequence, ell_s: int):
    """Batched linear system for the reference amplitudes.

    Unknown ordering: U_0, D_1, U_1, ..., D_{L-1}, U_{L-1}, D_L (U: up-going
    referenced at the layer's bottom interface, D: down-going referenced at its
    top interface).  Two right-hand sides: unit free wave leaving the source
    upward (column 0) and downward (column 1).
    """
    L = stack.L
    batch = kz.shape[:-1]
    n = 2 * L
    A = np.zeros(batch + (n, n), dtype=complex)
    rhs = np.zeros(batch + (n, 2), dtype=complex)

    def u_col(ell):
        return None if ell >= L else (0 if ell == 0 else 2 * ell)

    def d_col(ell):
        return None if ell == 0 else 2 * ell - 1

    w = [complex(x) for x in weights]
    for i in range(L):
        row_v, row_d = 2 * i, 2 * i + 1
        top, bot = i, i + 1
        kt, kb = kz[..., top], kz[..., bot]
        # layer above (top): evaluated at its bottom interface d_i
        cu = u_col(top)
        A[..., row_v, cu] += 1.0
        A[..., row_d, cu] += 1j * kt / w[top]
        cd = d_col(top)
        if cd is not None:
            e = np.exp(1j * kt * stack.thickness(top))
            A[..., row_v, cd] += e
            A[..., row_d, cd] += -1j * kt * e / w[top]
        # layer below: evaluated at its top interface d_i
        cu = u_col(bot)
        if cu is not None:
            e = np.exp(1j * kb * stack.thickness(bot))
            A[..., row_v, cu] -= e
            A[..., row_d, cu] -= 1j * kb * e / w[bot]
        cd = d_col(bot)
        A[..., row_v, cd] -= 1.0
        A[..., row_d, cd] -= -1j * kb / w[bot]
        # free wave of the source layer
        ks = kz[..., ell_s]
        if ell_s == bot:  # upward free wave hits d_i from below
            rhs[..., row_v, 0] += 1.0
            rhs[..., row_d, 0] += 1j * ks / w[bot]
        if ell_s == top:  # downward free wave hits d_i from above
            rhs[..., row_v, 1] -= 1.0
            rhs[..., row_d, 1] -= -1j * ks / w[top]
    return A, rhs, u_col, d_col


def reference_amplitudes(stack: LayerStack, krho, ell_s: int, which: str = "phi") -> np.ndarray:
    """Reaction amplitudes R[..., ell, dir_t, dir_s] in reference form.

    ``dir`` axes are ordered (up, down).  ``which`` selects the jump weight:
    'phi' uses mu (continuity of (1/mu) d/dz), 'psi' uses eps.
    """
    krho = np.asarray(krho)
    kz = stack.kz(krho)
    out = np.zeros(krho.shape + (stack.nlayers, 2, 2), dtype=complex)
    if stack.L == 0:
        return out
    if stack.is_homogeneous():
        return _homogeneous_amplitudes(stack, kz, ell_s, out)
    weights = stack.mu if which == "phi" else stack.eps
    A, rhs, u_col, d_col = _interface_system(stack, kz, weights, ell_s)
    try:
        sol = np.linalg.solve(A, rhs)
    except np.linalg.LinAlgError:
        raise DensityError(krho) from None
    if not np.all(np.isfinite(sol)):
        bad = np.asarray(krho)[~np.all(np.isfinite(sol), axis=(-1, -2))]
        raise DensityError(bad.ravel()[0] if bad.size else krho)
    for ell in range(stack.nlayers):
        cu, cd = u_col(ell), d_col(ell)
        if cu is not None:
            out[..., ell, 0, :] = sol[..., cu, :]
        if cd is not None:
            out[..., ell, 1, :] = sol[..., cd, :]
    return out


def _homogeneous_amplitudes(stack: LayerStack, kz, ell_s: int, out):
    """No reflections; the free wave simply crosses the (fictitious) interfaces."""
    for ell in range(stack.nlayers):
        if ell < ell_s:  # up-going, referenced at d_ell, leaves source at d_{ell_s-1}
            out[..., ell, 0, 0] = np.exp(1j * kz[..., ell] * (stack.d[ell] - stack.d[ell_s - 1]))
        elif ell > ell_s:  # down-going, referenced at d_{ell-1}, leaves source at d_{ell_s}
            out[..., ell, 1, 1] = np.exp(1j * kz[..., ell] * (stack.d[ell_s] - stack.d[ell - 1]))
    return out


def _dir_index(d: int) -> int:
    return 0 if d == UP else 1


@dataclass
class DensitySet:
    """φ, ψ and the five σ densities per reaction key at one (or many) k_rho.

    ``phi``/``psi`` follow the Z-exponential normalisation; ``phi_ref`` etc. are
    the bounded reference-form values used internally.
    """

    phi: dict
    psi: dict
    sigma: dict
    phi_ref: dict
    psi_ref: dict
    sigma_ref: dict


def sigma_combinations(key: ReactionKey, phi, psi, krho, kz_t, kz_s, gamma):
    """The five σ densities (stacked on a leading axis of length 5)."""
    same = key.dir_t == key.dir_s
    c1 = 1.0 if same else -1.0
    c3 = -c1  # follows the spectral ψ·J5 sign; reduces to free space on a homogeneous stack
    c2 = -1.0 if key.dir_t == UP else 1.0
    c4 = 1.0 if key.dir_s == DOWN else -1.0
    s1 = phi / kz_s + c1 * gamma * kz_t * psi
    s2 = c2 * gamma * krho * kz_t / kz_s * psi
    s3 = phi / kz_s + c3 * gamma * kz_t * psi
    s4 = c4 * gamma * krho * psi
    s5 = gamma * krho**2 / kz_s * psi
    return np.stack([s1, s2, s3, s4, s5])


def gamma_factor(stack: LayerStack, ell_t: int, ell_s: int):
    return stack.mu[ell_t] / (stack.mu[ell_s] * stack.k[ell_t] ** 2)


def reference_sigma(stack: LayerStack, key: ReactionKey, krho) -> np.ndarray:
    """Reference-form σ_1..σ_5 for one key, shape (5,) + krho.shape."""
    krho = np.asarray(krho, dtype=complex)
    kz = stack.kz(krho)
    it, is_ = _dir_index(key.dir_t), _dir_index(key.dir_s)
    Rphi = reference_amplitudes(stack, krho, key.ell_s, "phi")[..., key.ell_t, it, is_]
    Rpsi = reference_amplitudes(stack, krho, key.ell_s, "psi")[..., key.ell_t, it, is_]
    g = gamma_factor(stack, key.ell_t, key.ell_s)
    return sigma_combinations(key, Rphi, Rpsi, krho, kz[..., key.ell_t], kz[..., key.ell_s], g)


def reaction_densities(stack: LayerStack, sp: SpectralPoint, ellS: int, ellT: int) -> DensitySet:
    krho = np.asarray(sp.krho)
    kz = stack.kz(krho)
    Rphi = reference_amplitudes(stack, krho, ellS, "phi")[..., ellT, :, :]
    Rpsi = reference_amplitudes(stack, krho, ellS, "psi")[..., ellT, :, :]
    g = gamma_factor(stack, ellT, ellS)
    out = DensitySet({}, {}, {}, {}, {}, {})
    for key in reaction_keys(stack, ellT, ellS):
        it, is_ = _dir_index(key.dir_t), _dir_index(key.dir_s)
        zt, zs = reference_planes(stack, key)
        zref = z_exponential(stack, key, sp.krho, zt, zs)
        rp, rs = Rphi[..., it, is_], Rpsi[..., it, is_]
        out.phi_ref[key], out.psi_ref[key] = rp, rs
        out.phi[key], out.psi[key] = rp / zref, rs / zref
        kzt, kzs = kz[..., ellT], kz[..., ellS]
        out.sigma_ref[key] = sigma_combinations(key, rp, rs, krho, kzt, kzs, g)
        out.sigma[key] = out.sigma_ref[key] / zref
    return out


def reconstruct_reaction(stack: LayerStack, krho, ell_s: int, z, zprime, which: str = "phi",
                         derivative: bool = False, layer=None):
    """Normalised 1-D Green's function ``δ e^{ik'|z-z'|} + Σ density·Z`` at z.

    The physical φ (or ψ) is it times -1/(2 ω k'_z) (resp. -1/(2 ω μ' k'_z)).
    ``layer`` forces the layer whose expression is used (for evaluating both
    one-sided limits exactly at an interface); by default it is ``layer_of(z)``.
    """
    z = np.asarray(z, dtype=float)
    ell = stack.layer_of(z) if layer is None else np.full(z.shape, int(layer))
    R = reference_amplitudes(stack, np.asarray(krho), ell_s, which)
    kz = stack.kz(np.asarray(krho))
    ks = kz[ell_s]
    src = np.zeros(2, dtype=complex)
    if ell_s >= 1:
        src[0] = np.exp(1j * ks * (stack.d[ell_s - 1] - zprime))
    if ell_s <= stack.L - 1:
        src[1] = np.exp(1j * ks * (zprime - stack.d[ell_s]))
    out = np.zeros(z.shape, dtype=complex)
    for i, (zz, l) in enumerate(zip(z.ravel(), ell.ravel())):
        kl = kz[l]
        tgt = np.zeros(2, dtype=complex)
        if l <= stack.L - 1:
            tgt[0] = np.exp(1j * kl * (zz - stack.d[l]))
        if l >= 1:
            tgt[1] = np.exp(-1j * kl * (zz - stack.d[l - 1]))
        if derivative:
            tgt *= np.array([1j * kl, -1j * kl])
        val = tgt @ R[l] @ src
        if l == ell_s:
            free = np.exp(1j * ks * abs(zz - zprime))
            val += 1j * ks * np.sign(zz - zprime) * free if derivative else free
        out.flat[i] = val
    return out


# ---------------------------------------------------------------------------
# constant matrices of the eight-term reaction kernel
# ---------------------------------------------------------------------------

M1 = np.diag([0.5, 0.5, 0.0]).astype(complex)
M2 = np.array([[-0.25, 0.25j, 0], [0.25j, 0.25, 0], [0, 0, 0]], dtype=complex)
M3 = np.array([[-0.25, -0.25j, 0], [-0.25j, 0.25, 0], [0, 0, 0]], dtype=complex)
M4 = np.array([[0, 0, 0.5], [0, 0, -0.5j], [0, 0, 0]], dtype=complex)
M5 = np.array([[0, 0, 0.5], [0, 0, 0.5j], [0, 0, 0]], dtype=complex)
M6 = np.diag([0.0, 0.0, 1.0]).astype(complex)

# (kappa, sigma index 0..4, matrix) for each of the eight terms
KERNEL_TERMS = (
    (0, 0, M1),
    (0, 4, M6),
    (-1, 1, M5),
    (-1, 3, M5.T.copy()),
    (1, 1, M4),
    (1, 3, M4.T.copy()),
    (-2, 2, M3),
    (2, 2, M2),
)
TERM_KAPPA = np.array([t[0] for t in KERNEL_TERMS])
TERM_SIGMA = np.array([t[1] for t in KERNEL_TERMS])
TERM_MATRIX = np.stack([t[2] for t in KERNEL_TERMS])
