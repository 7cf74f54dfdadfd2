import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from layerfmm import layerstack as ls
from layerfmm import sommerfeld as sf
from layerfmm.layerstack import DOWN, UP, ReactionKey

TWO = ls.LayerStack(d=(0.0,), eps=(1.2, 0.8), mu=(1.0, 1.0), omega=2.0)
THREE = ls.LayerStack(d=(0.0, -1.5), eps=(1.2, 0.8, 1.3), mu=(1.0, 1.0, 1.0), omega=2.0)
SPEC = sf.QuadratureSpec()


def sommerfeld(rho, dz, k, spec=SPEC, tail="auto"):
    """i ∫ J0(k_ρ ρ) e^{i k_z |Δz|} k_ρ/k_z dk_ρ, which equals e^{ikr}/r."""
    def f(kr):
        kz = np.sqrt(k * k - kr * kr + 0j)
        kz = np.where(kz.imag < 0, -kz, kz)
        return 1j * kr / kz * np.exp(1j * kz * abs(dz))
    return sf.integrate_bessel(f, 0, rho, dz, k, spec.aFactor * k, spec, tail=tail)


def test_sommerfeld_identity_example():
    rho, dz, k = 0.4, 0.7, 2.0 * math.sqrt(1.2)
    r = math.hypot(rho, dz)
    val = sommerfeld(rho, dz, k)
    assert abs(val - np.exp(1j * k * r) / r) <= 1e-10 * abs(1 / r)


def test_sommerfeld_identity_random():
    rng = np.random.default_rng(11)
    ks = np.concatenate([TWO.k, THREE.k])
    for _ in range(10):
        rho = rng.uniform(0.0, 2.5)
        dz = rng.uniform(0.2, 2.0)
        k = rng.choice(ks)
        r = math.hypot(rho, dz)
        assert abs(sommerfeld(rho, dz, k) - np.exp(1j * k * r) / r) <= 1e-10 / r


@pytest.mark.parametrize("rho,dz", [(0.0, 0.5), (0.6, 0.3), (2.0, 0.4), (0.3, 1.5)])
def test_contour_independence(rho, dz):
    k = TWO.kmax
    base = sommerfeld(rho, dz, k)
    for fac in (0.9, 1.1):
        spec = sf.QuadratureSpec(aFactor=SPEC.aFactor * fac)
        assert abs(sommerfeld(rho, dz, k, spec) - base) <= 10 * SPEC.relTol * abs(base)


def test_rho_zero_limit():
    k = TWO.k[0]
    a = sommerfeld(0.0, 0.8, k)
    b = sommerfeld(1e-9, 0.8, k, tail="hankel")
    assert abs(a - b) <= 1e-9 * abs(a)


@pytest.mark.parametrize("n,rho,dz", [(12, 0.3, 1.5), (20, 0.1, 0.8), (3, 2.0, 0.5)])
def test_high_order_laplace_transform(n, rho, dz):
    # ∫ J_n(λρ) λ^n e^{-λ z} dλ = (2ρ)^n Γ(n+1/2) / (√π (z²+ρ²)^{n+1/2})
    exact = (2 * rho) ** n * math.gamma(n + 0.5) / (math.sqrt(math.pi) * (dz * dz + rho * rho) ** (n + 0.5))
    k = TWO.kmax
    f = lambda kr: kr**n * np.exp(-kr * dz)
    val = sf.integrate_bessel(f, n, rho, dz, k, SPEC.aFactor * k, SPEC, growth=n)
    assert abs(val - exact) <= 1e-11 * abs(exact)


def test_auto_tail_choice():
    k, a = TWO.kmax, SPEC.aFactor * TWO.kmax
    kinds = lambda rho, dz: [s.kind for s in sf.contour_segments(rho, dz, k, a, SPEC)[1:]]
    assert kinds(0.0, 0.5) == ["J"]
    assert kinds(0.3, 1.5) == ["J"]
    assert kinds(2.0, 0.4) == ["H1", "H2"]


def test_nonconvergence_reported():
    spec = sf.QuadratureSpec(relTol=1e-15, maxLevels=1)
    with pytest.raises(sf.NonConvergence) as info:
        sommerfeld(0.5, 0.3, 2.0, spec)
    assert "rho=0.5" in str(info.value)


def test_spec_validation():
    with pytest.raises(ValueError):
        sf.QuadratureSpec(aFactor=1.0)
    with pytest.raises(ValueError):
        sf.QuadratureSpec(relTol=1e-3)


def test_tail_length():
    for cutoff, g in [(1e-16, 4.0), (1e-12, 0.0), (1e-16, 30.0)]:
        x = sf.tail_length(cutoff, g)
        peak = g**g * math.exp(-g) if g > 0 else 1.0
        assert x**g * math.exp(-x) == pytest.approx(cutoff * peak, rel=1e-10)
        assert x >= g


def test_refinement_levels_decrease():
    k = TWO.k[0]
    errs = []
    ref = np.exp(1j * k * math.hypot(0.5, 0.4)) / math.hypot(0.5, 0.4)
    for lv in range(2, 7):
        spec = sf.QuadratureSpec(relTol=1e-15, maxLevels=lv)
        try:
            val = sommerfeld(0.5, 0.4, k, spec)
        except sf.NonConvergence:
            continue
        errs.append(abs(val - ref))
    # once a level budget suffices, the result is accurate and stays so
    assert errs and max(errs) <= 1e-12


# ---------------------------------------------------------------------------
# reaction-integral tables
# ---------------------------------------------------------------------------

KEY = ReactionKey(0, 0, UP, DOWN)


def geometry(rho=0.5, zbar=0.45, zpbar=-0.55, stack=TWO, key=KEY):
    return sf.KeyGeometry(stack, key, rho, zbar, zpbar)


def test_chebyshev_matches_direct_quadrature():
    g = geometry()
    a = sf.i_hat_table(g, 4, 4, SPEC, "chebyshev")
    b = sf.i_hat_table(g, 4, 4, SPEC, "direct")
    assert np.abs(a - b).max() <= 1e-9 * max(1.0, np.abs(b).max())


def test_chebyshev_matches_direct_three_layer():
    key = ReactionKey(1, 2, UP, UP)
    zb = ls.effective_target(THREE, key, np.array([0, 0, -0.6]))[2]
    zpb = ls.polarization_source(THREE, key, np.array([0, 0, -2.1]))[2]
    g = sf.KeyGeometry(THREE, key, 0.7, zb, zpb)
    a = sf.i_hat_table(g, 4, 3, SPEC)
    b = sf.i_hat_table(g, 4, 3, SPEC, "direct")
    assert np.abs(a - b).max() <= 1e-9 * max(1.0, np.abs(b).max())


def test_homogeneous_reflection_tables_vanish():
    homo = ls.LayerStack(d=(0.0,), eps=(1.1, 1.1), mu=(1.0, 1.0), omega=2.0)
    t = sf.i_hat_table(geometry(stack=homo), 3, 3, SPEC)
    assert np.abs(t).max() == 0.0


def test_rotation_covariance():
    r = np.array([0.3, 0.1, 0.45])
    rp = np.array([-0.1, 0.25, -0.55])
    a = sf.i_full_table(TWO, KEY, r, rp, 3, 3, SPEC)
    delta = 0.7
    c, s = math.cos(delta), math.sin(delta)
    d = r[:2] - rp[:2]
    r2 = rp.copy()
    r2[:2] += [c * d[0] - s * d[1], s * d[0] + c * d[1]]
    r2[2] = r[2]
    b = sf.i_full_table(TWO, KEY, r2, rp, 3, 3, SPEC)
    o = sf._term_orders(3, 3)
    np.testing.assert_allclose(b, a * np.exp(1j * o * delta), atol=1e-12 * np.abs(a).max())


def test_zero_order_entry_is_pair_integral():
    # n = ν = 0, κ = 0: (P̂_0^0)² ∫ k_ρ Z σ1 J0 dk_ρ, with (P̂_0^0)² = 1/(4π)
    g = geometry()
    t = sf.i_hat_table(g, 0, 0, SPEC)

    def kernel(kr, w, seg):
        _, _, zsig = g.spectral(kr)
        v = w * kr * zsig[0] * sf.bessel(seg.kind, 0, kr * g.rho)[..., 0]
        return np.array([v.sum()]), np.array([np.abs(v).sum()])

    val, _ = sf.de_integrate(kernel, g.contour(SPEC), SPEC)
    assert t[0, 0, 0] == pytest.approx(val[0] / (4 * math.pi), rel=1e-10)
    # with the i^{n+ν+1} phase the full entry is the pair integral (i/4π)∫ k_ρ Z σ1 J0
    r = np.array([g.rho, 0.0, g.zbar])
    rp = np.array([0.0, 0.0, g.zpbar])
    full = sf.i_full_table(TWO, KEY, r, rp, 0, 0, SPEC)
    assert full[0, 0, 0] == pytest.approx(1j * val[0] / (4 * math.pi), rel=1e-10)


def test_cached_entries_are_identical():
    g = geometry(rho=0.31)
    a = sf.integral_I_hat(2, 1, 1, 1, 0, g, 2, SPEC)
    b = sf.integral_I_hat(2, 1, 1, 1, 0, g, 2, SPEC)
    assert a == b
    with pytest.raises(ValueError):
        sf.integral_I_hat(2, 1, 3, 1, 0, g, 2, SPEC)


def test_table_roundtrip(tmp_path):
    t = sf.i_hat_table(geometry(), 2, 2, SPEC)
    path = tmp_path / "table.bin"
    sf.save_table(path, t, {"key": "r00ud"})
    back, meta = sf.load_table(path)
    assert meta["key"] == "r00ud"
    np.testing.assert_array_equal(back, t)


def test_pair_values_match_table_path():
    rng = np.random.default_rng(5)
    src = np.column_stack([rng.uniform(-0.3, 0.3, 6), rng.uniform(-0.3, 0.3, 6), rng.uniform(0.3, 0.9, 6)])
    tgt = np.array([0.05, -0.02, -0.6])
    G = sf.pair_kernel_values(TWO, KEY, src, tgt, SPEC)
    for j in range(len(src)):
        full = sf.i_full_table(TWO, KEY, src[j], tgt, 0, 0, SPEC)[0, 0]   # (8,) kernel terms
        ref = np.einsum("t,tij->ij", full, ls.TERM_MATRIX)
        np.testing.assert_allclose(G[j], ref, atol=1e-10 * np.abs(ref).max())


@settings(max_examples=8, deadline=None)
@given(rho=st.floats(0.05, 1.5), dz=st.floats(0.3, 1.5))
def test_sommerfeld_identity_property(rho, dz):
    k = TWO.k[1]
    r = math.hypot(rho, dz)
    assert abs(sommerfeld(rho, dz, k) - np.exp(1j * k * r) / r) <= 1e-10 / r
