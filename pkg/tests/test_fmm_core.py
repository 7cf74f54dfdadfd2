import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from layerfmm import fmm_core as fc
from layerfmm import oracle
from layerfmm.specfun import SQRT4PI, nm_arrays, sph_h1_all

K = 2.0 * math.sqrt(1.2)


# ---------------------------------------------------------------------------
# tree and lists
# ---------------------------------------------------------------------------

def test_single_point_tree():
    t = fc.build_tree(np.array([[0.1, 0.2, 0.3]]), 1)
    assert t.nboxes == 1 and t.isLeaf[0]


def test_octant_centers_tree():
    pts = np.array([[x, y, z] for z in (-0.5, 0.5) for y in (-0.5, 0.5) for x in (-0.5, 0.5)])
    t = fc.build_tree(pts, 1, rootBox=(np.zeros(3), 2.0))
    assert t.nlevels == 2
    assert len(t.leaves()) == 8
    assert all(len(t.box_points(b)) == 1 for b in t.leaves())


def test_uniform_tree_partition():
    pts = np.random.default_rng(0).random((10_000, 3))
    t = fc.build_tree(pts, 100)
    leaves = t.leaves()
    sizes = [len(t.box_points(b)) for b in leaves]
    assert max(sizes) <= 100
    allix = np.concatenate([t.box_points(b) for b in leaves])
    assert np.array_equal(np.sort(allix), np.arange(len(pts)))
    # each leaf's points lie inside its box
    c = t.centers()
    for b in leaves[:50]:
        h = t.box_size(t.level[b])
        assert np.all(np.abs(pts[t.box_points(b)] - c[b]) <= 0.5 * h * (1 + 1e-9))


def test_max_leaf_size():
    pts = np.random.default_rng(1).random((50, 3))
    t = fc.build_tree(pts, 1000, rootBox=(np.full(3, 0.5), 1.0), maxLeafSize=0.3)
    assert all(t.box_size(t.level[b]) <= 0.3 for b in t.leaves())


def test_points_outside_root_rejected():
    with pytest.raises(ValueError):
        fc.build_tree(np.array([[2.0, 0, 0]]), 10, rootBox=(np.zeros(3), 1.0))


def _coverage(t, lists, n):
    """How many times each (target, source) point pair is accounted for."""
    cnt = np.zeros((n, n), dtype=int)
    for pairs in lists.m2l:
        for T, C in pairs:
            cnt[np.ix_(t.box_points(T), t.box_points(C))] += 1
    for T, C in lists.direct:
        cnt[np.ix_(t.box_points(T), t.box_points(C))] += 1
    return cnt


@pytest.mark.parametrize("seed", [0, 1])
def test_interaction_lists_partition_all_pairs(seed):
    rng = np.random.default_rng(seed)
    pts = np.vstack([rng.random((200, 3)) * 0.3, rng.random((200, 3))])  # nonuniform
    t = fc.build_tree(pts, 8)
    lists = fc.interaction_lists(t)
    assert np.all(_coverage(t, lists, len(pts)) == 1)
    for lvl, pairs in enumerate(lists.m2l):
        for T, C in pairs:
            assert t.level[T] == t.level[C] == lvl
            assert not t.adjacent(T, C)
            assert t.adjacent(t.parent[T], t.parent[C])


def test_admissibility_veto_keeps_partition():
    rng = np.random.default_rng(2)
    pts = rng.random((300, 3))
    t = fc.build_tree(pts, 10)
    lists = fc.interaction_lists(t, admissible=lambda T, C: abs(t.coords[T, 2] - t.coords[C, 2]) >= 2)
    assert np.all(_coverage(t, lists, len(pts)) == 1)


# ---------------------------------------------------------------------------
# expansions and translations
# ---------------------------------------------------------------------------

def test_p2m_unit_source_at_center():
    S = 0.5
    me = fc.p2m(np.zeros((1, 3)), np.array([[1.0, 0, 0]]), np.zeros(3), K, 6, scale=S)
    expect = sph_h1_all(0, K * S)[0] / SQRT4PI
    assert me.coeffs[0, 0] == pytest.approx(expect, rel=1e-14)
    assert np.abs(me.coeffs[0, 1:]).max() == 0.0


def _cluster(rng, n, center, radius):
    v = rng.normal(size=(n, 3))
    v *= (radius * rng.random(n) ** (1 / 3) / np.linalg.norm(v, axis=1))[:, None]
    return center + v


def test_me_matches_kernel():
    rng = np.random.default_rng(3)
    a = 0.25
    src = _cluster(rng, 20, np.zeros(3), a)
    q = rng.normal(size=(20, 1)) + 1j * rng.normal(size=(20, 1))
    tgt = _cluster(rng, 10, np.zeros(3), 1.0)
    tgt *= (3 * a / np.linalg.norm(tgt, axis=1))[:, None]
    me = fc.p2m(src, q, np.zeros(3), K, 20)
    ref = fc.helmholtz_kernel(tgt, src, K) @ q
    np.testing.assert_allclose(fc.me_eval(me, tgt, K), ref, rtol=0, atol=1e-9 * np.abs(ref).max())


@pytest.mark.parametrize("scaled", [False, True])
def test_m2m_m2l_l2l_chain(scaled):
    rng = np.random.default_rng(4)
    cs, ct = np.zeros(3), np.array([1.0, 0.5, -0.5])
    src = _cluster(rng, 15, cs + [0.05, -0.05, 0.05], 0.1)
    tgt = _cluster(rng, 10, ct + [-0.05, 0.05, 0.0], 0.1)
    q = rng.normal(size=(15, 3)) + 1j * rng.normal(size=(15, 3))
    S = 0.3 if scaled else None
    me = fc.p2m(src, q, cs + [0.05, -0.05, 0.05], K, 20, scale=S)
    me = fc.m2m(me, cs, K, new_scale=S)
    le = fc.m2l(me, ct + [0.05, 0.05, 0.05], K, scale=S)
    le = fc.l2l(le, ct + [-0.05, 0.05, 0.0], K, new_scale=S)
    ref = fc.helmholtz_kernel(tgt, src, K) @ q
    np.testing.assert_allclose(fc.l2p(le, tgt, K), ref, rtol=0, atol=1e-9 * np.abs(ref).max())
    np.testing.assert_allclose(fc.me_eval(me, tgt, K), ref, rtol=0, atol=1e-9 * np.abs(ref).max())


def test_gaunt_and_translation_by_zero():
    T = fc.translation_matrix(np.zeros(3), K, 6, "RR")
    np.testing.assert_allclose(T, np.eye(49), atol=1e-13)
    G = fc.gaunt_table(3)
    n, m = nm_arrays(3)
    # b = (0, 0): ∫ Y_0^0 Y_l^μ conj(Y_ν^μ) = δ_{lν}/√4π
    for a in range(16):
        expect = np.zeros(7)
        expect[n[a]] = 1 / SQRT4PI
        np.testing.assert_allclose(G[a, 0], expect, atol=1e-14)
    # sympy's Gaunt coefficient (Wigner 3j based) as an independent check
    from sympy.physics.wigner import gaunt
    nu, mu, nn, mm = 3, 1, 2, -1
    l, lam = 3, mu - mm
    # ∫ Y_n^m Y_l^λ conj(Y_ν^μ) with the no-phase convention: Y = (-1)^|m| Y_CS
    ref = float(gaunt(nn, l, nu, mm, lam, -mu)) * (-1) ** mu
    ref *= (-1) ** (abs(mm) + abs(lam) + abs(mu))
    from layerfmm.specfun import idx
    assert G[idx(nu, mu), idx(nn, mm), l] == pytest.approx(ref, abs=1e-14)


def test_derivative_maps_vs_finite_differences():
    p = 6
    rng = np.random.default_rng(5)
    lam = rng.normal(size=(p + 1) ** 2) + 1j * rng.normal(size=(p + 1) ** 2)
    x0 = np.array([[0.21, -0.13, 0.17]])
    D = fc.derivative_matrices(p)
    h = 1e-5
    for a in range(3):
        e = np.zeros(3)
        e[a] = h
        fd = (fc.regular_basis(p, K, x0 + e) @ lam - fc.regular_basis(p, K, x0 - e) @ lam) / (2 * h)
        exact = K * (fc.regular_basis(p + 1, K, x0) @ (D[a] @ lam))
        assert abs(fd[0] - exact[0]) <= 1e-7 * max(1.0, abs(exact[0]))


def test_trace_identity_and_oracle():
    rng = np.random.default_rng(6)
    t = rng.random((5, 3)) + 1.0
    s = np.zeros((1, 3))
    G = np.stack([fc.dyadic_apply(t, s, np.eye(3)[[c]], K) for c in range(3)], axis=-1)
    g = np.exp(1j * K * np.linalg.norm(t, axis=1)) / (4 * math.pi * np.linalg.norm(t, axis=1))
    np.testing.assert_allclose(np.trace(G, axis1=1, axis2=2), 2 * g, rtol=1e-12)
    np.testing.assert_allclose(G, oracle.free_space_dyadic(t, s, K), rtol=1e-12)


def test_dyadic_local_evaluation():
    # a local expansion of three scalar potentials from far sources; Φ from the derivative maps
    rng = np.random.default_rng(7)
    src = _cluster(rng, 10, np.array([2.0, 0.0, 0.0]), 0.2)
    q = rng.normal(size=(10, 3)) + 1j * rng.normal(size=(10, 3))
    tgt = _cluster(rng, 8, np.zeros(3), 0.2)
    me = fc.p2m(src, q, np.array([2.0, 0.0, 0.0]), K, 20)
    le = fc.m2l(me, np.zeros(3), K)
    got = fc.dyadic_eval_from_local(le, tgt, K)
    ref = fc.dyadic_apply(tgt, src, q, K)
    np.testing.assert_allclose(got, ref, rtol=0, atol=1e-9 * np.abs(ref).max())


def test_freespace_fmm_small():
    rng = np.random.default_rng(8)
    pts = rng.random((200, 3))
    q = rng.normal(size=(200, 3)) + 1j * rng.normal(size=(200, 3))
    got = fc.freespace_fmm(pts, q, K, 16, leafCapacity=10)
    ref = oracle.direct_free_sum(pts, q, pts, K, np.arange(200))
    err = np.linalg.norm(got - ref) / np.linalg.norm(ref)
    assert err <= 1e-6


def test_scaled_coefficients_stay_in_range():
    p = 16
    S0 = 1.0
    for k in (0.5, 2.0, 10.0):
        for j in range(11):
            S = S0 / 2**j
            rng = np.random.default_rng(j)
            pts = (rng.random((5, 3)) - 0.5) * S
            me = fc.p2m(pts, np.ones((5, 1)), np.zeros(3), k, p, scale=S)
            mag = np.abs(me.coeffs)
            assert np.all(np.isfinite(mag)) and mag.max() < 1e300
            assert mag[mag > 0].min() > 1e-300


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 1000), cap=st.integers(1, 40))
def test_tree_partition_property(seed, cap):
    pts = np.random.default_rng(seed).random((120, 3))
    t = fc.build_tree(pts, cap)
    allix = np.concatenate([t.box_points(b) for b in t.leaves()])
    assert np.array_equal(np.sort(allix), np.arange(120))
    assert max(len(t.box_points(b)) for b in t.leaves()) <= cap or t.nlevels > 25
