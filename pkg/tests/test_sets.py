import itertools
import json

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from tubeil.errors import DimensionMismatch, EmptyResult, NonFinite, Overflow
from tubeil.sets import (AxisBox, Polytope, box_from_deviations, estimate_tube_mc, linear_map_box,
                         minkowski_sum_box, pontryagin_diff_polytope_box, sample_tube_dense,
                         sample_tube_sparse, sample_tube_uniform)


def box(lo, hi):
    return AxisBox(np.array(lo, float), np.array(hi, float))


def test_minkowski_examples():
    s = minkowski_sum_box(box([-1], [1]), box([-0.5], [0.5]))
    assert np.allclose(s.lower, -1.5) and np.allclose(s.upper, 1.5)
    a = box([0, 0], [1, 2])
    assert np.allclose(minkowski_sum_box(a, AxisBox.zero(2)).upper, a.upper)
    s = minkowski_sum_box(a, box([-1, -1], [0, 0]))
    assert np.allclose(s.lower, [-1, -1]) and np.allclose(s.upper, [1, 2])


def test_minkowski_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        minkowski_sum_box(AxisBox.zero(2), AxisBox.zero(3))


def test_pontryagin_examples():
    p = Polytope.from_box(box([-1, -1], [1, 1]))
    t = pontryagin_diff_polytope_box(p, AxisBox.symmetric([0.3, 0.3])).bounding_box()
    assert np.allclose(t.lower, -0.7) and np.allclose(t.upper, 0.7)
    same = pontryagin_diff_polytope_box(p, AxisBox.zero(2))
    assert np.allclose(same.h, p.h)
    half = Polytope([[1.0, 1.0]], [1.0])
    assert pontryagin_diff_polytope_box(half, AxisBox.symmetric([0.1, 0.1])).h[0] == pytest.approx(0.8)


def test_pontryagin_empty():
    with pytest.raises(EmptyResult):
        pontryagin_diff_polytope_box(Polytope.from_box(box([-1], [1])), AxisBox.symmetric([1.5]))


def test_linear_map_examples():
    b = box([-1, -1], [1, 1])
    assert np.allclose(linear_map_box(np.eye(2), b).upper, b.upper)
    img = linear_map_box([[1.0, 1.0]], b)
    verts = np.array(list(itertools.product([-1, 1], repeat=2))) @ np.array([[1.0, 1.0]]).T
    assert img.lower[0] == verts.min() and img.upper[0] == verts.max()
    z = linear_map_box(np.zeros((2, 2)), box([1, 2], [3, 4]))
    assert np.allclose(z.lower, 0) and np.allclose(z.upper, 0)
    with pytest.raises(DimensionMismatch):
        linear_map_box(np.eye(3), b)


def test_mc_tube_zero_disturbance():
    Z = estimate_tube_mc(lambda e, w: 0.5 * e + w, AxisBox.zero(1), 20, 30)
    assert np.allclose(Z.halfwidth, 0.0)


def test_mc_tube_scalar_geometric_series():
    Z = estimate_tube_mc(lambda e, w: 0.5 * e + w, box([-1], [1]), 200, 40, rng=np.random.default_rng(0),
                         safety=1.1)
    assert 1.9 * 1.1 <= Z.upper[0] <= 2.0 * 1.1
    assert Z.lower[0] == -Z.upper[0]


def test_mc_tube_needs_rollouts():
    with pytest.raises(ValueError):
        estimate_tube_mc(lambda e, w: e, box([-1], [1]), 0, 5)


def test_mc_tube_divergence():
    with pytest.raises(NonFinite), np.errstate(over="ignore"):
        estimate_tube_mc(lambda e, w: 1e200 * e + w, box([-1], [1]), 5, 10)


@settings(max_examples=25, deadline=None)
@given(st.floats(0.1, 2.0), st.floats(0.1, 2.0))
def test_mc_tube_monotone_in_disturbance(a, b):
    lo, hi = sorted((a, b))
    est = [estimate_tube_mc(lambda e, w: 0.7 * e + w, AxisBox.symmetric([r, 0.5 * r]), 30, 20,
                            rng=np.random.default_rng(5)) for r in (lo, hi)]
    assert np.all(est[0].halfwidth <= est[1].halfwidth + 1e-12)


def test_sparse_samples():
    s = sample_tube_sparse(np.zeros(2), AxisBox.symmetric([1.0, 2.0]))
    assert {tuple(r) for r in s} == {(1, 0), (-1, 0), (0, 2), (0, -2)}
    assert len(sample_tube_sparse(np.zeros(8), AxisBox.symmetric(np.ones(8)))) == 16
    c = np.arange(3.0)
    assert np.allclose(sample_tube_sparse(c, AxisBox.zero(3)), c)


def test_dense_samples():
    assert len(sample_tube_dense(np.zeros(8), AxisBox.symmetric(np.ones(8)))) == 256
    assert sorted(sample_tube_dense([1.0], AxisBox.symmetric([0.5]))[:, 0]) == [0.5, 1.5]
    corners = sample_tube_dense(np.zeros(2), box([0, 0], [1, 1]))
    assert {tuple(r) for r in corners} == {(0, 0), (0, 1), (1, 0), (1, 1)}
    with pytest.raises(Overflow):
        sample_tube_dense(np.zeros(21), AxisBox.zero(21))


def test_uniform_samples():
    rng = np.random.default_rng(0)
    for n in (25, 50, 100):
        assert sample_tube_uniform(np.zeros(9), AxisBox.symmetric(np.ones(9)), n, rng).shape == (n, 9)
    c = np.array([1.0, -2.0])
    assert np.allclose(sample_tube_uniform(c, AxisBox.zero(2), 7, rng), c)
    big = sample_tube_uniform(c, AxisBox.symmetric([1.0, 3.0]), 100_000, rng)
    assert np.allclose(big.mean(axis=0), c, atol=0.01 * np.array([1.0, 3.0]))
    with pytest.raises(ValueError):
        sample_tube_uniform(c, AxisBox.zero(2), 0, rng)


halfwidths = st.lists(st.floats(0.0, 3.0), min_size=1, max_size=6)


@settings(max_examples=50, deadline=None)
@given(halfwidths, st.integers(0, 2 ** 31 - 1))
def test_samples_lie_in_tube(h, seed):
    rng = np.random.default_rng(seed)
    tube = AxisBox.symmetric(h)
    c = rng.normal(size=len(h))
    assert len(sample_tube_sparse(c, tube)) == 2 * len(h)
    assert len(sample_tube_dense(c, tube)) == 2 ** len(h)
    for s in (sample_tube_sparse(c, tube), sample_tube_dense(c, tube), sample_tube_uniform(c, tube, 20, rng)):
        assert np.all(tube.contains(s - c))


def _vertices_2d(p: Polytope):
    """Brute-force vertex enumeration: intersect every pair of facet lines."""
    out = []
    for i, j in itertools.combinations(range(len(p.h)), 2):
        M = p.H[[i, j]]
        if abs(np.linalg.det(M)) < 1e-9:
            continue
        v = np.linalg.solve(M, p.h[[i, j]])
        if p.contains(v, tol=1e-7):
            out.append(v)
    return np.array(out)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.floats(0.01, 0.4), st.floats(0.01, 0.4))
def test_erosion_then_dilation_stays_inside(seed, hx, hy):
    rng = np.random.default_rng(seed)
    ang = np.sort(rng.uniform(0, 2 * np.pi, 6))
    H = np.column_stack([np.cos(ang), np.sin(ang)])
    H = np.vstack([H, np.eye(2), -np.eye(2)])
    A = Polytope(H, rng.uniform(0.8, 2.0, len(H)))
    B = AxisBox.symmetric([hx, hy])
    try:
        E = pontryagin_diff_polytope_box(A, B)
    except EmptyResult:
        assume(False)
    V = _vertices_2d(E)
    assume(len(V))
    pts = (V[:, None, :] + B.vertices()[None]).reshape(-1, 2)
    assert np.all(A.contains(pts, tol=1e-7))


def test_box_json_roundtrip(tmp_path):
    b = box([-1, 0.5], [2, 3])
    b.save(tmp_path / "b.json")
    d = json.loads((tmp_path / "b.json").read_text())
    assert d["dim"] == 2 and d["lower"] == [-1, 0.5]
    back = AxisBox.load(tmp_path / "b.json")
    assert np.array_equal(back.lower, b.lower) and np.array_equal(back.upper, b.upper)


def test_box_from_deviations():
    b = box_from_deviations(np.array([[0.1, -0.4], [-0.3, 0.2]]), safety=2.0)
    assert np.allclose(b.upper, [0.6, 0.8])
    with pytest.raises(NonFinite):
        box_from_deviations(np.array([[np.nan]]))


def test_polytope_rejects_zero_rows():
    with pytest.raises(ValueError):
        Polytope([[0.0, 0.0]], [1.0])
    assert Polytope([[1.0], [-1.0]], [-1.0, -1.0]).is_empty()
