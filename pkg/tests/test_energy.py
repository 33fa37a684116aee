import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from artifit.articulation import PRISMATIC, REVOLUTE, JointSpec
from artifit.assignment import Assignment
from artifit.distance import weighted_dcd
from artifit.energy import (TERMS, EnergyBreakdown, EnergyConfig, LossWeights, backward, forward, loss_object,
                            loss_part, loss_regA, loss_regD, loss_regJ, loss_regP, loss_regS, loss_regW,
                            part_aligned_inputs, total_energy)
from artifit.gradcheck import check_instance, random_instance
from artifit.params import N_ANCHORS, InstanceParams

seeds = st.integers(0, 2**32 - 1)
IDENTITY_ANCHOR = 59


def test_default_weights():
    assert LossWeights().as_array().tolist() == [10, 10, 100, 10, 10, 10, 10, 10]
    cfg = EnergyConfig()
    assert (cfg.alpha_l, cfg.alpha_r, cfg.knn_k, cfg.beta) == (30.0, 120.0, 64, 0.05)


def test_loss_object_examples():
    rng = np.random.default_rng(0)
    y = rng.normal(size=(30, 3))
    assert loss_object(y, y) == 0.0
    got = loss_object(np.zeros((1, 3)), np.array([[0.1, 0.0, 0.0]]))
    assert got == pytest.approx((1 - np.exp(-0.3)) + (1 - np.exp(-1.2)), abs=1e-15)
    assert loss_object(y, y + 100.0) < 2.0


def test_loss_object_monotone_in_offset():
    g = np.stack(np.meshgrid(*[np.arange(4.0)] * 3), axis=-1).reshape(-1, 3)
    v = np.array([1.0, 0.0, 0.0])
    for s in (0.01, 0.05, 0.1, 0.2):
        assert loss_object(g + s * v, g) < loss_object(g + 2 * s * v, g)


def test_loss_regS():
    rng = np.random.default_rng(1)
    yb = rng.normal(size=(20, 3))
    assert loss_regS(yb, yb) == 0.0
    assert loss_regS(yb + [0.1, 0, 0], yb) == pytest.approx(0.1, abs=1e-15)
    y = rng.normal(size=(20, 3))
    oracle = sum(np.sqrt(sum((y[i, k] - yb[i, k]) ** 2 for k in range(3))) for i in range(20)) / 20
    assert loss_regS(y, yb) == pytest.approx(oracle, rel=1e-13)
    with pytest.raises(ValueError):
        loss_regS(y[:5], yb)


def _regD_oracle(y, k):
    n = len(y)
    ranks = np.empty((n, k - 1))
    for i in range(n):
        d = np.array([np.linalg.norm(y[i] - y[j]) for j in range(n) if j != i])
        ranks[i] = np.sort(d)[: k - 1]
    return float(np.mean([np.var(ranks[:, r]) for r in range(k - 1)]))


def test_loss_regD_symmetric_clouds_are_zero():
    # closed lattice: points evenly spaced on a circle, every point sees the same neighbour distances
    t = 2 * np.pi * np.arange(24) / 24
    ring = np.stack([np.cos(t), np.sin(t), np.zeros_like(t)], axis=1)
    assert loss_regD(ring, 3) == pytest.approx(0.0, abs=1e-24)
    tet = np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], dtype=float)
    assert loss_regD(tet, 4) == pytest.approx(0.0, abs=1e-24)


@given(seeds, st.integers(2, 12))
def test_loss_regD_matches_oracle(seed, k):
    y = np.random.default_rng(seed).normal(size=(15, 3))
    assert loss_regD(y, k) == pytest.approx(_regD_oracle(y, k), rel=1e-10, abs=1e-15)


def test_loss_regD_too_few_points():
    with pytest.raises(ValueError):
        loss_regD(np.zeros((10, 3)), 64)


def test_loss_regW_examples():
    assert loss_regW(np.full((2, 10), 0.5)) == 0.0
    w = np.zeros((2, 100))
    w[0] = 1.0
    assert loss_regW(w) == pytest.approx(0.05 / 2)
    w = np.zeros((2, 100))
    w[0, :2] = 1.0
    w[1] = 1.0 - w[0]
    assert loss_regW(w) == pytest.approx(0.015, abs=1e-15)


def test_loss_regP_examples():
    rng = np.random.default_rng(2)
    z = rng.normal(size=(1, 2, 10, 3))
    assert loss_regP(z, Assignment(((0, 1),))) == 0.0
    # three parts, part 0 shared by both joints; its slots sit at +-0.1 from their mean
    m = rng.normal(size=(10, 3))
    z = rng.normal(size=(2, 2, 10, 3))
    z[0, 0] = m + [0.1, 0, 0]
    z[1, 0] = m - [0.1, 0, 0]
    assert loss_regP(z, Assignment(((0, 1), (0, 2)))) == pytest.approx(0.2 / 4, abs=1e-15)


@given(seeds)
def test_loss_regP_basket_oracle(seed):
    rng = np.random.default_rng(seed)
    z = rng.normal(size=(2, 2, 8, 3))
    a = Assignment(((1, 0), (2, 0)))
    mean = (z[0, 1] + z[1, 1]) / 2
    oracle = (np.linalg.norm(z[0, 1] - mean, axis=1).mean() + np.linalg.norm(z[1, 1] - mean, axis=1).mean()) / 4
    assert loss_regP(z, a) == pytest.approx(oracle, rel=1e-13)


def test_loss_regA():
    assert loss_regA(np.zeros((1, 2))) == 0.0
    assert loss_regA(np.array([[0.5, 0.0]])) == 0.125
    a = np.random.default_rng(3).normal(size=(2, 2))
    assert loss_regA(a) == pytest.approx(sum(v * v for v in a.ravel()) / 4, rel=1e-15)


def test_loss_regJ():
    rng = np.random.default_rng(4)
    y = rng.normal(size=(20, 3))
    x = rng.normal(size=(20, 3))
    assert loss_regJ(x[:1], y[:1], x, y) == 0.0
    y = np.zeros((1, 3))
    assert loss_regJ(x[:1], [[0.1, 0, 0]], x, y) == pytest.approx(1 - np.exp(-0.3), abs=1e-15)
    assert loss_regJ(x[:1] + 50, [[50.0, 0, 0]], x, y) < 2.0


def test_loss_part_examples_and_oracle():
    rng = np.random.default_rng(5)
    y = rng.normal(size=(12, 3))
    z = np.stack([y, y])[None]
    crisp = np.zeros((2, 12))
    crisp[0, :6] = 1.0
    crisp[1] = 1.0 - crisp[0]
    a = Assignment(((0, 1),))
    assert loss_part(z, y, crisp, crisp, a) == 0.0
    z = rng.normal(size=(1, 2, 12, 3))
    assert loss_part(z, y, np.zeros((2, 12)), np.zeros((2, 12)), a) == 0.0
    w_x, w_y = rng.dirichlet([1, 1], 12).T, rng.dirichlet([1, 1], 12).T
    oracle = sum(weighted_dcd(z[0, i], y, w_x[p], 30.0) + weighted_dcd(y, z[0, i], w_y[p], 120.0)
                 for i, p in enumerate((1, 0)))
    assert loss_part(z, y, w_x, w_y, Assignment(((1, 0),))) == pytest.approx(oracle, rel=1e-13)


def _perfect_instance(n_parts=2, n=40, seed=0):
    rng = np.random.default_rng(seed)
    y = rng.normal(scale=0.3, size=(n, 3))
    j = n_parts - 1
    specs = [JointSpec(REVOLUTE if k % 2 == 0 else PRISMATIC) for k in range(j)]
    dirs = rng.normal(size=(j, 3))
    params = InstanceParams(
        anchor_rot=np.zeros((N_ANCHORS, 3)), anchor_trans=np.zeros((N_ANCHORS, 3)),
        seg_x=np.zeros((n_parts, n)), seg_y=np.zeros((n_parts, n)),
        pivot_x=y[:j].copy(), dir_x=dirs.copy(), state_x=np.zeros((j, 2)),
        pivot_y=y[:j].copy(), dir_y=dirs.copy(), state_y=np.zeros((j, 2)),
        deform=np.zeros((n, 3)),
    )
    return y, params, specs


def test_perfect_fit_leaves_only_density_term():
    y, params, specs = _perfect_instance()
    cfg = EnergyConfig(knn_k=16)
    br = total_energy(y, y, params, specs, cfg, IDENTITY_ANCHOR)
    for t in TERMS:
        if t != "regD":
            # the pivot round trip leaves Z equal to Y up to rounding
            assert br[t] == pytest.approx(0.0, abs=1e-24), t
    assert br.total == pytest.approx(10.0 * loss_regD(y, 16), rel=1e-14)


def test_stationary_at_perfect_fit():
    y, params, specs = _perfect_instance()
    cfg = EnergyConfig(knn_k=16)
    c = forward(y, y, params, specs, cfg, IDENTITY_ANCHOR)
    grads = backward(c, LossWeights(regD=0.0))
    assert max(np.abs(g).max() for g in grads.values()) < 1e-8


def test_all_weights_zero():
    inst = random_instance(7)
    zero = LossWeights(**{t: 0.0 for t in TERMS})
    cfg = EnergyConfig(weights=zero, knn_k=16)
    c = forward(inst.x, inst.base, inst.params, inst.specs, cfg, inst.anchor)
    assert c.breakdown.total == 0.0
    assert all(not g.any() for g in backward(c).values())


@given(seeds, st.sampled_from([2, 3]))
def test_breakdown_identity_and_nonnegative(seed, n_parts):
    inst = random_instance(seed % 100000, n_parts=n_parts)
    br = total_energy(inst.x, inst.base, inst.params, inst.specs, inst.cfg, inst.anchor)
    assert all(br[t] >= 0 for t in TERMS)
    w = LossWeights()
    assert br.total == pytest.approx(sum(getattr(w, t) * br[t] for t in TERMS), abs=1e-12)
    again = EnergyBreakdown.from_terms(br.terms, w)
    assert again.total == br.total


def test_terms_match_standalone_functions():
    inst = random_instance(11, n_parts=3)
    c = forward(inst.x, inst.base, inst.params, inst.specs, inst.cfg, inst.anchor, inst.assign)
    t = c.breakdown.terms
    assert t["o"] == pytest.approx(loss_object(c.xa, c.y), rel=1e-13)
    assert t["regS"] == pytest.approx(loss_regS(c.y, inst.base), rel=1e-13)
    assert t["regD"] == pytest.approx(loss_regD(c.y, inst.cfg.knn_k), rel=1e-13)
    assert t["regW"] == pytest.approx(loss_regW(c.w_y), rel=1e-13, abs=1e-15)
    assert t["regA"] == pytest.approx(loss_regA(c.ay), rel=1e-13)
    assert t["regJ"] == pytest.approx(loss_regJ(inst.params.pivot_x, inst.params.pivot_y, c.xa, c.y), rel=1e-13)
    z = part_aligned_inputs(c.xa, inst.params, inst.specs)
    assert np.allclose(z, c.z, atol=1e-12)
    assert t["p"] == pytest.approx(loss_part(z, c.y, c.w_x, c.w_y, c.assign), rel=1e-12)
    assert t["regP"] == pytest.approx(loss_regP(z, c.assign), rel=1e-12, abs=1e-15)


def test_zeroing_part_weight_zeroes_part_only_parameters():
    inst = random_instance(12, n_parts=2)
    c = forward(inst.x, inst.base, inst.params, inst.specs, inst.cfg, inst.anchor, inst.assign)
    on = backward(c)
    off = backward(c, LossWeights(p=0.0))
    # with two parts nothing is shared, so these are reachable only through L_p
    for key in ("seg_x", "dir_x", "state_x", "dir_y"):
        assert np.abs(on[key]).max() > 0, key
        assert not off[key].any(), key


@pytest.mark.parametrize("seed", range(6))
def test_gradients_per_term_match_finite_differences(seed):
    inst = random_instance(1000 + seed, n_parts=2 + seed % 2)
    rep = check_instance(inst, per_key=3, seed=seed)
    assert rep.checked > 0
    for t, v in rep.max_rel.items():
        assert v < 1e-3, (t, v)


@pytest.mark.parametrize("n_parts", [2, 3])
def test_every_coordinate_matches_finite_differences(n_parts):
    inst = random_instance(77 + n_parts, n_parts=n_parts)
    rep = check_instance(inst, per_key=None)
    assert rep.checked > 300
    assert rep.worst() < 1e-3
