import numpy as np
import pytest

from layerfmm import layered_fmm as lf
from layerfmm import layerstack as ls
from layerfmm import oracle
from layerfmm import sommerfeld as sf
from layerfmm.layerstack import DOWN, UP, ReactionKey

TWO = ls.LayerStack(d=(0.0,), eps=(1.2, 0.8), mu=(1.0, 1.0), omega=2.0)
SPEC = sf.QuadratureSpec()


def relerr(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(b)


def box_points(rng, n, center, half):
    return center + (rng.random((n, 3)) - 0.5) * 2 * half


def charges(rng, n):
    return rng.normal(size=(n, 3)) + 1j * rng.normal(size=(n, 3))


# transformed-coordinate box pairs for key r00ud: charges above z=0, evaluation images below
KEY = ReactionKey(0, 0, UP, DOWN)


@pytest.mark.parametrize("seed", range(5))
def test_m2l_equals_s2l(seed):
    # a level-4 source box of a unit root; the ME truncation then stays below the tolerance
    rng = np.random.default_rng(seed)
    cs = np.array([rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5), rng.uniform(0.5, 0.9)])
    ct = np.array([rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5), rng.uniform(-0.9, -0.5)])
    src = box_points(rng, 12, cs, 1 / 32)
    q = charges(rng, 12)
    p = 12
    me = lf.reaction_p2m(src, q, cs, TWO.k[KEY.ell_t], p)
    via_m2l = lf.reaction_m2l(me, ct, TWO, KEY, SPEC).coeffs
    direct = lf.reaction_s2l(src, q, ct, TWO, KEY, p, SPEC).coeffs
    assert np.abs(via_m2l - direct).max() <= 1e-9 * np.abs(direct).max()


def test_rectangular_m2l_removes_truncation():
    # a large source box: a higher-order ME feeding a p=12 LE recovers S2L to round-off
    rng = np.random.default_rng(81)
    cs = np.array([rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5), rng.uniform(0.5, 0.9)])
    ct = np.array([rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5), rng.uniform(-0.9, -0.5)])
    src = box_points(rng, 12, cs, 0.15)
    q = charges(rng, 12)
    direct = lf.reaction_s2l(src, q, ct, TWO, KEY, 12, SPEC).coeffs
    errs = []
    for pme in (12, 28):
        me = lf.reaction_p2m(src, q, cs, TWO.k[KEY.ell_t], pme)
        le = lf.reaction_m2l(me, ct, TWO, KEY, SPEC, p_local=12)
        assert le.p == 12
        errs.append(np.abs(le.coeffs - direct).max() / np.abs(direct).max())
    assert errs[0] > 1e-7 and errs[1] <= 1e-12


def test_expansions_reproduce_kernel():
    rng = np.random.default_rng(9)
    cs, ct = np.array([0.1, 0.0, 0.7]), np.array([-0.2, 0.1, -0.7])
    src = box_points(rng, 10, cs, 0.15)
    tgt = box_points(rng, 6, ct, 0.15)
    q = charges(rng, 10)
    G = oracle.reaction_kernel(TWO, KEY, np.tile(src, (6, 1)), np.repeat(tgt, 10, axis=0), SPEC)
    ref = np.einsum("tnij,nj->ti", G.reshape(6, 10, 3, 3), q)
    p = 14
    me = lf.reaction_p2m(src, q, cs, TWO.k[0], p)
    assert relerr(lf.reaction_m2t(me, tgt, TWO, KEY, SPEC), ref) <= 1e-8
    le = lf.reaction_s2l(src, q, ct, TWO, KEY, p, SPEC)
    assert relerr(lf.reaction_l2p(le, tgt, TWO.k[KEY.ell_s]), ref) <= 1e-8
    assert relerr(lf.reaction_s2t(TWO, KEY, src, q, tgt, SPEC), ref) <= 2 * SPEC.relTol


def test_chebyshev_and_direct_s2l_agree():
    rng = np.random.default_rng(10)
    src = box_points(rng, 3, np.array([0.0, 0.0, 0.6]), 0.1)
    q = charges(rng, 3)
    ct = np.array([0.3, 0.2, -0.6])
    a = lf.reaction_s2l(src, q, ct, TWO, KEY, 6, SPEC, method="chebyshev").coeffs
    b = lf.reaction_s2l(src, q, ct, TWO, KEY, 6, SPEC, method="direct").coeffs
    assert np.abs(a - b).max() <= 1e-9 * np.abs(b).max()


def test_reaction_problem():
    rng = np.random.default_rng(11)
    src = box_points(rng, 20, np.array([0.5, 0.5, 0.75]), 0.5)
    tgt = box_points(rng, 20, np.array([0.5, 0.5, 0.75]), 0.5)
    prob = lf.ReactionProblem.build(TWO, KEY, src, charges(rng, 20), tgt)
    assert prob.dGap > 0
    c, size = prob.initialBox
    allp = np.vstack([prob.polarizedSources, prob.effectiveTargets])
    assert np.all(np.abs(allp - c) <= size / 2)
    bad = np.array([[0.0, 0.0, -0.3]])   # an evaluation point on the wrong side
    with pytest.raises(ValueError):
        lf.ReactionProblem.build(TWO, KEY, np.array([[0.0, 0.0, -0.2]]), np.ones((1, 3)), bad)


def test_max_m2l_level():
    assert lf.max_m2l_level(2.5, 0.5) == 3
    assert lf.max_m2l_level(1.0, 1.0) == 1


def _two_layer_particles(rng, n):
    pts = [box_points(rng, n, np.array([0.5, 0.5, 0.75]), 0.5), box_points(rng, n, np.array([0.5, 0.5, -0.75]), 0.5)]
    return pts, [charges(rng, n) for _ in range(2)]


def test_reaction_fmm_against_oracle():
    rng = np.random.default_rng(12)
    pts, q = _two_layer_particles(rng, 150)
    ids = rng.choice(150, 12, replace=False)
    for key in ls.all_reaction_keys(TWO):
        src, tgt = pts[key.ell_t], pts[key.ell_s]
        ref = oracle.direct_reaction_sum(TWO, src, q[key.ell_t], tgt[ids], key, SPEC)
        errs = []
        for p in (4, 8, 12):
            val, st = lf.reaction_fmm(TWO, key, src, q[key.ell_t], tgt, p, SPEC, leafCapacity=20, return_stats=True)
            errs.append(relerr(val[ids], ref))
            assert st.s2tPairs == 0
        assert errs[0] > errs[1] > errs[2]
        assert errs[2] <= 1e-4


def test_reaction_fmm_direct_fallback():
    # without gap refinement, adjacent leaves across the gap are summed directly
    rng = np.random.default_rng(13)
    pts, q = _two_layer_particles(rng, 60)
    key = ReactionKey(1, 0, DOWN, DOWN)
    val, st = lf.reaction_fmm(TWO, key, pts[1], q[1], pts[0], 10, SPEC, leafCapacity=200,
                              return_stats=True, gapRefine=False)
    assert st.s2tPairs > 0
    ref = oracle.direct_reaction_sum(TWO, pts[1], q[1], pts[0], key, SPEC)
    assert relerr(val, ref) <= 1e-12


def test_homogeneous_stack_reduces_to_free_space():
    homo = ls.LayerStack(d=(0.0,), eps=(1.2, 1.2), mu=(1.0, 1.0), omega=2.0)
    rng = np.random.default_rng(14)
    pts, q = _two_layer_particles(rng, 120)
    allp, allq = np.vstack(pts), np.vstack(q)
    refs = [oracle.direct_free_sum(allp, allq, pts[l], homo.k[0], np.arange(120) + 120 * l) for l in range(2)]
    errs = []
    for p in (4, 8, 12):
        res = lf.evaluate_layered(homo, pts, q, p, SPEC, leafCapacity=30)
        for key in ls.all_reaction_keys(homo):
            if key.ell_t == key.ell_s:
                assert np.abs(res.reaction[key.label]).max() <= 1e-15
        errs.append(max(relerr(res.phi[l], refs[l]) for l in range(2)))
    assert errs[0] > errs[1] > errs[2]
    assert errs[2] <= 1e-4


def test_homogeneous_cross_layer_kernel_is_free_space():
    homo = ls.LayerStack(d=(0.0,), eps=(1.2, 1.2), mu=(1.0, 1.0), omega=2.0)
    a, b = np.array([[0.1, 0.2, 0.6]]), np.array([[0.3, -0.1, -0.5]])
    for key in ls.all_reaction_keys(homo):
        if key.ell_t == key.ell_s:
            continue
        ch, ev = (a, b) if key.ell_t == 0 else (b, a)
        G = oracle.reaction_kernel(homo, key, ls.effective_target(homo, key, ch),
                                   ls.polarization_source(homo, key, ev), SPEC)
        np.testing.assert_allclose(G, oracle.free_space_dyadic(ev, ch, homo.k[0]), rtol=0, atol=1e-12)


def test_structure_counts():
    rng = np.random.default_rng(15)
    pts, q = _two_layer_particles(rng, 400)
    for key in ls.all_reaction_keys(TWO):
        _, st = lf.reaction_fmm(TWO, key, pts[key.ell_t], q[key.ell_t], pts[key.ell_s], 2, SPEC,
                                leafCapacity=50, return_stats=True)
        assert st.s2tPairs == 0
        assert len(st.m2lLevels) <= st.Lmax
        assert max(st.classesPerLevel.values()) <= 37


def test_evaluate_layered_rejects_misplaced_particles():
    rng = np.random.default_rng(16)
    pts, q = _two_layer_particles(rng, 5)
    with pytest.raises(ValueError):
        lf.evaluate_layered(TWO, [pts[1], pts[0]], q, 4)
    with pytest.raises(ValueError):
        lf.evaluate_layered(TWO, pts[:1], q[:1], 4)
