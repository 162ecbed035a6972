import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hashsdf import geometry as geo
from hashsdf.plyio import write_ply


def _write_cloud(path, pos, conf=None, normals=None):
    v = {"x": pos[:, 0], "y": pos[:, 1], "z": pos[:, 2]}
    if normals is not None:
        v.update(nx=normals[:, 0], ny=normals[:, 1], nz=normals[:, 2])
    if conf is not None:
        v["confidence"] = conf
    write_ply(path, v)


def test_confidence_filter_keeps_seven_of_ten(tmp_path):
    rng = np.random.default_rng(1)
    conf = np.ones(10)
    conf[[2, 5, 8]] = 0.1
    p = tmp_path / "c.ply"
    _write_cloud(p, rng.standard_normal((10, 3)), conf, np.tile([0.0, 0, 1], (10, 1)))
    assert len(geo.load_point_cloud(p, 0.5)) == 7
    assert len(geo.load_point_cloud(p, 0.0)) == 10


def test_threshold_too_aggressive(tmp_path):
    p = tmp_path / "c.ply"
    _write_cloud(p, np.eye(3), np.full(3, 0.2))
    with pytest.raises(geo.EmptyCloudError, match="threshold"):
        geo.load_point_cloud(p, 0.5)


def test_normals_are_renormalized_and_confidence_defaults(tmp_path):
    p = tmp_path / "c.ply"
    n = np.array([[0.0, 2.0, 0.0], [0, 0, 1], [1, 0, 0]])
    _write_cloud(p, np.eye(3), normals=n)
    cloud = geo.load_point_cloud(p)
    np.testing.assert_allclose(cloud.normals[0], [0, 1, 0], atol=0)
    np.testing.assert_array_equal(cloud.confidence, 1.0)
    np.testing.assert_array_equal(cloud.colors, 0.5)


def test_missing_normals_estimated_outward(tmp_path):
    cloud = geo.synthesize_cloud(geo.AnalyticShape("sphere", (1.0,)), 500, seed=3)
    p = tmp_path / "s.ply"
    _write_cloud(p, cloud.positions)
    loaded = geo.load_point_cloud(p)
    cos = np.sum(loaded.normals * cloud.normals, axis=1)
    assert cos.min() > 0.95


def test_save_load_roundtrip(tmp_path):
    cloud = geo.synthesize_cloud(geo.AnalyticShape("torus", (0.3, 0.1)), 50, seed=2)
    p = tmp_path / "t.ply"
    geo.save_point_cloud(p, cloud)
    back = geo.load_point_cloud(p)
    np.testing.assert_array_equal(back.positions, cloud.positions)
    np.testing.assert_allclose(back.normals, cloud.normals, atol=1e-15)
    assert np.abs(back.colors - cloud.colors).max() <= 0.5 / 255 + 1e-12


def test_normalize_unit_cube():
    corners = np.array([[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)], dtype=float)
    cloud = geo.PointCloud(corners, np.tile([0, 0, 1.0], (8, 1)), np.zeros((8, 3)), np.ones(8))
    out, tf = geo.normalize_cloud(cloud, 0.1)
    np.testing.assert_allclose(out.positions.min(axis=0), 0.1, atol=1e-15)
    np.testing.assert_allclose(out.positions.max(axis=0), 0.9, atol=1e-15)
    assert tf.scale == pytest.approx(0.8)


def test_normalize_degenerate():
    cloud = geo.PointCloud(np.ones((4, 3)), np.tile([0, 0, 1.0], (4, 1)), np.zeros((4, 3)), np.ones(4))
    with pytest.raises(geo.DegenerateCloudError):
        geo.normalize_cloud(cloud)


@settings(max_examples=30, deadline=None)
@given(st.floats(1e-3, 1e3), st.lists(st.floats(-1e3, 1e3), min_size=3, max_size=3), st.integers(0, 2**31))
def test_transform_roundtrip(scale, offset, seed):
    tf = geo.SceneTransform(scale, np.array(offset))
    x = np.random.default_rng(seed).uniform(-10, 10, (100, 3))
    err = np.abs(tf.invert(tf.apply(x)) - x).max()
    assert err < 1e-9 * max(1.0, np.abs(offset).max() / scale)


def test_spatial_index_exact_and_ties():
    pts = np.array([[0.0, 0, 0], [1, 0, 0], [-1, 0, 0]])
    idx = geo.SpatialIndex(pts)
    assert idx.nearest(pts[1]) == (1, 0.0)
    # (1, 0, 0) and (-1, 0, 0) are equidistant from the y axis
    i, d = idx.nearest(np.array([[0.0, 5, 0]]))
    assert i[0] == 0
    two = geo.SpatialIndex(np.array([[1.0, 0, 0], [-1, 0, 0]]))
    assert two.nearest([0.0, 0.0, 0.0])[0] == 0


def test_spatial_index_matches_brute_force():
    rng = np.random.default_rng(7)
    pts = rng.uniform(size=(1000, 3))
    q = rng.uniform(size=(100, 3))
    i, d = geo.SpatialIndex(pts).nearest(q)
    D = np.linalg.norm(q[:, None] - pts[None], axis=2)
    np.testing.assert_array_equal(i, D.argmin(axis=1))
    np.testing.assert_array_equal(d, D[np.arange(100), i])


@pytest.mark.parametrize("kind, params, q, expect", [
    ("sphere", (0.5,), (0, 0, 0), -0.5),
    ("sphere", (0.5,), (1, 0, 0), 0.5),
    ("box", (0.2, 0.2, 0.2), (0.3, 0, 0), 0.1),
    ("box", (0.2, 0.2, 0.2), (0.3, 0.3, 0), np.sqrt(0.02)),
    ("torus", (0.3, 0.1), (0.3, 0, 0), -0.1),
    ("torus", (0.3, 0.1), (0, 0, 0), np.hypot(0.3, 0) - 0.1),
])
def test_analytic_sdf_values(kind, params, q, expect):
    assert geo.analytic_sdf(geo.AnalyticShape(kind, params), np.array(q, float)) == pytest.approx(expect, abs=1e-15)


@pytest.mark.parametrize("kind, params", [("sphere", (-1,)), ("torus", (0.1, 0.3)), ("box", (1, 2)),
                                          ("cone", (1,)), ("sphere", (np.nan,))])
def test_invalid_shapes(kind, params):
    with pytest.raises(ValueError):
        geo.AnalyticShape(kind, params)


@pytest.mark.parametrize("kind, params", [("sphere", (0.5,)), ("torus", (0.3, 0.1)), ("box", (0.3, 0.2, 0.1))])
def test_gradient_matches_finite_differences(kind, params):
    shape = geo.AnalyticShape(kind, params)
    q = np.random.default_rng(4).uniform(-0.6, 0.6, (200, 3))
    h = 1e-6
    fd = np.stack([(shape.sdf(q + h * e) - shape.sdf(q - h * e)) / (2 * h) for e in np.eye(3)], axis=1)
    g = shape.gradient(q)
    # skip points near the medial axis where the sdf is not differentiable
    ok = np.abs(np.linalg.norm(fd, axis=1) - 1) < 1e-4
    assert ok.mean() > 0.9
    np.testing.assert_allclose(g[ok], fd[ok], atol=1e-6)


def test_synthesized_sphere_is_exact():
    c = geo.synthesize_cloud(geo.AnalyticShape("sphere", (0.5,)), 2000, seed=5)
    r = np.linalg.norm(c.positions, axis=1)
    assert np.abs(r - 0.5).max() < 1e-9
    np.testing.assert_allclose(c.normals, c.positions / r[:, None], atol=1e-15)
    again = geo.synthesize_cloud(geo.AnalyticShape("sphere", (0.5,)), 2000, seed=5)
    np.testing.assert_array_equal(c.positions, again.positions)


@pytest.mark.parametrize("kind, params", [("torus", (0.3, 0.1)), ("box", (0.3, 0.2, 0.1))])
def test_synthesized_points_lie_on_surface(kind, params):
    shape = geo.AnalyticShape(kind, params)
    c = geo.synthesize_cloud(shape, 3000, seed=1)
    assert np.abs(shape.sdf(c.positions)).max() < 1e-9
    assert np.allclose(np.linalg.norm(c.normals, axis=1), 1.0)
    assert c.colors.min() >= 0.1 and c.colors.max() <= 0.9


def test_box_sampling_is_area_weighted():
    shape = geo.AnalyticShape("box", (0.4, 0.2, 0.1))
    c = geo.synthesize_cloud(shape, 60000, seed=0)
    # fraction of points on the two z faces: area 4*hx*hy each
    areas = np.array([0.2 * 0.1, 0.4 * 0.1, 0.4 * 0.2])
    frac_z = np.mean(np.abs(c.normals[:, 2]) == 1)
    assert frac_z == pytest.approx(areas[2] / areas.sum(), abs=0.01)


def test_analytic_field_scales_distances():
    shape = geo.AnalyticShape("sphere", (0.5,))
    tf = geo.SceneTransform(0.8, np.full(3, 0.5))
    f = geo.AnalyticField(shape, tf)
    assert f.sdf(np.array([0.5, 0.5, 0.5])) == pytest.approx(-0.4)
    d, g = f.sdf_and_grad(np.array([[1.0, 0.5, 0.5]]))
    assert d[0] == pytest.approx(0.1)
    np.testing.assert_allclose(g, [[1, 0, 0]])
