import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from artifit.distance import (dcd_per_point, mutual_nearest, nearest, scatter_rows, weighted_cd, weighted_dcd,
                              weighted_dcd_grad)

seeds = st.integers(0, 2**32 - 1)


def brute_nn(p, q):
    """Pure-python nearest distances; ties go to the first candidate."""
    out = []
    for a in p:
        best = None
        for b in q:
            d = float(np.sqrt(((a - b) ** 2).sum()))
            if best is None or d < best:
                best = d
        out.append(best)
    return np.array(out)


def test_cd_examples():
    p = np.zeros((1, 3))
    q = np.array([[1.0, 0, 0], [0, 2.0, 0]])
    assert weighted_cd(p, q, [1.0]) == 1.0
    x = np.random.default_rng(0).normal(size=(9, 3))
    assert weighted_cd(x, x, np.ones(9)) == 0.0
    assert weighted_cd(x, x[::-1] + 1, np.zeros(9)) == 0.0
    with pytest.raises(ValueError):
        weighted_cd(x, np.zeros((0, 3)), np.ones(9))
    with pytest.raises(ValueError):
        weighted_cd(x, x, np.ones(4))


def test_dcd_examples():
    p = np.zeros((1, 3))
    q = np.array([[0.1, 0, 0]])
    assert weighted_dcd(p, q, [1.0], 30.0) == pytest.approx(0.259182, abs=5e-7)
    assert weighted_dcd(p, q, [1.0], 30.0) == pytest.approx(1 - np.exp(-0.3), abs=1e-15)
    x = np.random.default_rng(1).normal(size=(6, 3))
    assert weighted_dcd(x, x, np.ones(6), 120.0) == 0.0
    assert weighted_dcd(x, 10 * x + 50, np.ones(6), 1000.0) < 1.0
    with pytest.raises(ValueError):
        weighted_dcd(x, x, np.ones(6), 0.0)
    with pytest.raises(ValueError):
        dcd_per_point(np.ones(2), 1.0, "cube")


def test_l2_exponent_variant():
    p, q = np.zeros((1, 3)), np.array([[0.1, 0, 0]])
    assert weighted_dcd(p, q, [1.0], 30.0, "l2") == pytest.approx(1 - np.exp(-3.0), abs=1e-15)


@given(seeds, st.integers(1, 64), st.integers(1, 64))
def test_distances_match_brute_force(seed, n, m):
    rng = np.random.default_rng(seed)
    p, q = rng.normal(size=(n, 3)), rng.normal(size=(m, 3))
    w = rng.random(n)
    d = brute_nn(p, q)
    assert abs(weighted_cd(p, q, w) - float(w @ d) / n) < 1e-12
    alpha = float(rng.uniform(1.0, 150.0))
    oracle = sum(wi * (1.0 - np.exp(-alpha * di * di)) for wi, di in zip(w, d)) / n
    assert abs(weighted_dcd(p, q, w, alpha) - oracle) < 1e-12
    per = dcd_per_point(d, alpha)
    assert np.all(per >= 0) and np.all(per < 1)


def test_nearest_ties_take_lowest_index():
    q = np.array([[1.0, 0, 0], [-1.0, 0, 0], [0, 1.0, 0]])
    idx, d = nearest(np.zeros((1, 3)), q)
    assert idx[0] == 0 and d[0] == 1.0
    a, b = mutual_nearest(np.zeros((1, 3)), q)
    assert a[0] == 0 and list(b) == [0, 0, 0]


@given(st.floats(0.0, 2.0), st.floats(1e-3, 1.0))
def test_dcd_monotone_in_distance(d, step):
    q = np.zeros((1, 3))
    near = weighted_dcd(np.array([[d, 0, 0]]), q, [1.0], 30.0)
    far = weighted_dcd(np.array([[d + step, 0, 0]]), q, [1.0], 30.0)
    if near < 1.0 - 1e-12:
        assert far > near


def _numeric_grad(f, x, h=1e-5):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        e = np.zeros_like(x)
        e[idx] = h
        g[idx] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def _tie_margin(p, q):
    d = np.sort(np.sqrt(((p[:, None] - q[None]) ** 2).sum(-1)), axis=1)
    return float((d[:, 1] - d[:, 0]).min()) if q.shape[0] > 1 else np.inf


@pytest.mark.parametrize("seed", range(100))
def test_gradient_finite_difference(seed):
    rng = np.random.default_rng(seed)
    p, q, w = rng.normal(size=(8, 3)) * 0.3, rng.normal(size=(8, 3)) * 0.3, rng.random(8)
    if _tie_margin(p, q) < 1e-6:
        pytest.skip("nearest-neighbour tie region")
    g = weighted_dcd_grad(p, q, w, 30.0)
    num_p = _numeric_grad(lambda x: weighted_dcd(x, q, w, 30.0), p)
    num_w = _numeric_grad(lambda x: weighted_dcd(p, q, x, 30.0), w)
    scale = max(np.abs(num_p).max(), 1e-6)
    assert np.abs(g.d_source - num_p).max() / scale < 1e-4
    assert np.abs(g.d_weights - num_w).max() / max(np.abs(num_w).max(), 1e-6) < 1e-4


def test_gradient_properties():
    rng = np.random.default_rng(8)
    p, q, w = rng.normal(size=(8, 3)), rng.normal(size=(8, 3)), rng.random(8)
    g1 = weighted_dcd_grad(p, q, w, 30.0)
    g2 = weighted_dcd_grad(p, q, 2 * w, 30.0)
    assert np.allclose(g2.d_source, 2 * g1.d_source, rtol=0, atol=1e-15)
    assert np.all(weighted_dcd_grad(p, p, w, 30.0).d_source == 0)
    w0 = w.copy()
    w0[3] = 0.0
    assert np.all(weighted_dcd_grad(p, q, w0, 30.0).d_source[3] == 0)


def test_scatter_rows_matches_add_at():
    rng = np.random.default_rng(3)
    idx = rng.integers(0, 5, 40)
    rows = rng.normal(size=(40, 3))
    ref = np.zeros((5, 3))
    np.add.at(ref, idx, rows)
    assert np.allclose(scatter_rows(idx, rows, 5), ref, atol=1e-14)
