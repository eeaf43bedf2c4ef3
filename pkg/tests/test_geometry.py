import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import brute_chamfer, brute_hausdorff
from cosa.geometry import (GeometryError, PointCloud, chamfer, chamfer_grad, hausdorff,
                           hausdorff_grad, l2_distortion, linf_clip, normalize)
from cosa.nn import grad_check


coords = st.floats(-2, 2, allow_nan=False, width=64)
clouds = st.integers(1, 12).flatmap(lambda n: arrays(np.float64, (n, 3), elements=coords))


def test_chamfer_examples():
    p = np.array([[0, 0, 0], [1, 0, 0]], float)
    assert chamfer(p, p) == 0.0
    assert chamfer([[0, 0, 0]], [[0, 0, 1]]) == 2.0
    assert chamfer([[0, 0, 0], [2, 0, 0]], [[1, 0, 0]]) == pytest.approx(2.0, abs=1e-15)
    assert brute_chamfer([[0, 0, 0], [2, 0, 0]], [[1, 0, 0]]) == 2.0


def test_hausdorff_examples():
    rng = np.random.default_rng(3)
    p = rng.normal(size=(17, 3))
    assert hausdorff(p, p) == 0.0
    assert hausdorff([[0, 0, 0]], [[0, 3, 4]]) == 5.0
    assert hausdorff([[0, 0, 0], [10, 0, 0]], [[0, 0, 0]]) == 10.0


def test_metrics_match_bruteforce_oracle():
    rng = np.random.default_rng(0)
    for _ in range(40):
        n, m = rng.integers(1, 65, size=2)
        p, q = rng.normal(size=(n, 3)), rng.normal(size=(m, 3))
        assert abs(chamfer(p, q) - brute_chamfer(p, q)) <= 1e-12
        assert abs(hausdorff(p, q) - brute_hausdorff(p, q)) <= 1e-12


@settings(max_examples=60, deadline=None)
@given(clouds, clouds)
def test_symmetry_and_identity(p, q):
    assert chamfer(p, q) == chamfer(q, p)
    assert hausdorff(p, q) == hausdorff(q, p)
    assert chamfer(p, p) == 0.0 and hausdorff(p, p) == 0.0


def test_empty_cloud_rejected():
    with pytest.raises(GeometryError):
        chamfer(np.zeros((0, 3)), [[0, 0, 0]])
    with pytest.raises(GeometryError):
        hausdorff([[0, 0, 0]], np.zeros((0, 3)))


def test_l2_distortion():
    p = np.zeros((2, 3))
    assert l2_distortion(p, p) == 0.0
    assert l2_distortion([[0, 0, 0]], [[0, 0, 0.3]]) == pytest.approx(0.3, abs=1e-15)
    assert l2_distortion(p, [[0.3, 0, 0], [0, 0.4, 0]]) == pytest.approx(0.5, abs=1e-15)
    with pytest.raises(GeometryError):
        l2_distortion(p, np.zeros((3, 3)))


def test_linf_clip_examples():
    rng = np.random.default_rng(1)
    orig = rng.normal(size=(10, 3))
    assert np.array_equal(linf_clip(orig, orig, 0.3).points, orig)
    out = linf_clip([[0.5, 0, 0]], [[0.0, 0, 0]], 0.18)
    assert out.points[0, 0] == 0.18
    adv = orig + rng.normal(size=orig.shape)
    assert np.array_equal(linf_clip(adv, orig, 0.0).points, orig)
    with pytest.raises(GeometryError):
        linf_clip(adv, orig, -0.1)
    with pytest.raises(GeometryError):
        linf_clip(adv[:5], orig, 0.1)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 30), st.floats(0, 1), st.integers(0, 2**32 - 1))
def test_linf_clip_bound_and_idempotent(n, eps, seed):
    rng = np.random.default_rng(seed)
    orig = rng.normal(size=(n, 3))
    adv = orig + rng.normal(scale=2, size=(n, 3))
    c = linf_clip(adv, orig, eps)
    assert np.abs(c.points - orig).max() <= eps + 1e-12
    assert np.array_equal(linf_clip(c, orig, eps).points, c.points)
    inside = np.abs(adv - orig) <= eps
    assert np.array_equal(c.points[inside], adv[inside])


def test_normalize():
    out = normalize([[1, 1, 1], [3, 1, 1]])
    assert np.array_equal(out.points, [[-1, 0, 0], [1, 0, 0]])
    rng = np.random.default_rng(2)
    c = normalize(rng.normal(size=(50, 3)) * 4 + 7)
    assert np.abs(c.points.mean(axis=0)).max() <= 1e-9
    assert abs(np.linalg.norm(c.points, axis=1).max() - 1) <= 1e-9
    assert np.abs(normalize(c).points - c.points).max() <= 1e-12
    with pytest.raises(GeometryError):
        normalize(np.ones((4, 3)))


def test_pointcloud_invariants():
    with pytest.raises(GeometryError):
        PointCloud(np.zeros((0, 3)))
    with pytest.raises(GeometryError):
        PointCloud([[0, np.nan, 0]])
    with pytest.raises(GeometryError):
        PointCloud(np.zeros((3, 2)))
    p = PointCloud([[0, 0, 0]], label=np.int64(3))
    assert p.label == 3 and isinstance(p.label, int)


def test_metric_gradients():
    rng = np.random.default_rng(5)
    p = rng.normal(size=(12, 3))
    q0 = rng.normal(size=(9, 3))
    rep = grad_check(lambda q: chamfer_grad(p, q)[::2], q0)
    assert rep.max_rel_err <= 1e-6
    rep = grad_check(lambda q: hausdorff_grad(p, q)[::2], q0)
    assert rep.max_rel_err <= 1e-6
    value, gp, _ = chamfer_grad(p, q0)
    assert value == chamfer(p, q0)
    rep = grad_check(lambda x: chamfer_grad(x, q0)[:2], p)
    assert rep.max_rel_err <= 1e-6
