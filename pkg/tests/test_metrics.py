import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial.transform import Rotation

from hashsdf import geometry as geo, metrics as M, reconstruction as rec


def brute_chamfer(P, G):
    D = np.sum((P[:, None] - G[None]) ** 2, axis=2)
    return D.min(axis=1).mean() + D.min(axis=0).mean()


def brute_nae(P, Pn, G, Gn):
    D = np.sum((P[:, None] - G[None]) ** 2, axis=2)
    j = D.argmin(axis=1)
    cos = np.clip(np.sum(Pn * Gn[j], axis=1), -1, 1)
    return np.degrees(np.arccos(cos)).mean()


def unit(rng, n):
    v = rng.standard_normal((n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def test_chamfer_two_point_example_and_identity():
    assert M.chamfer(np.zeros((1, 3)), np.array([[1.0, 0, 0]])) == 2.0
    P = np.random.default_rng(0).uniform(size=(30, 3))
    assert M.chamfer(P, P) == 0.0


@pytest.mark.parametrize("seed", range(5))
def test_chamfer_and_nae_match_brute_force(seed):
    rng = np.random.default_rng(seed)
    P, G = rng.uniform(size=(50, 3)), rng.uniform(size=(70 + seed * 6, 3))
    Pn, Gn = unit(rng, len(P)), unit(rng, len(G))
    assert M.chamfer(P, G) == pytest.approx(brute_chamfer(P, G), rel=1e-14, abs=0)
    assert M.chamfer(P, G) == M.chamfer(G, P)
    nae = M.normal_angle_error(M.SurfaceSamples(P, Pn), M.SurfaceSamples(G, Gn))
    assert nae == pytest.approx(brute_nae(P, Pn, G, Gn), rel=1e-12)


def test_nae_identity_orthogonal_and_rigid_invariance():
    rng = np.random.default_rng(1)
    P, N = rng.uniform(size=(40, 3)), unit(rng, 40)
    S = M.SurfaceSamples(P, N)
    assert M.normal_angle_error(S, S) == 0.0
    ortho = np.cross(N, unit(rng, 40))
    ortho /= np.linalg.norm(ortho, axis=1, keepdims=True)
    assert M.normal_angle_error(S, M.SurfaceSamples(P, ortho)) == pytest.approx(90.0)
    G = M.SurfaceSamples(rng.uniform(size=(60, 3)), unit(rng, 60))
    R = Rotation.from_euler("xyz", [10, -40, 77], degrees=True).as_matrix()
    move = lambda s: M.SurfaceSamples(s.points @ R.T + [1, 2, 3], s.normals @ R.T)
    assert M.normal_angle_error(move(S), move(G)) == pytest.approx(M.normal_angle_error(S, G), abs=1e-9)


def _two_triangles():
    v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [3, 0, 0], [5, 0, 0], [3, 3, 0.0]])
    return rec.TriangleMesh(v, [[0, 1, 2], [3, 4, 5]])


def test_sample_surface_area_split_and_plane():
    m = _two_triangles()   # areas 0.5 and 3.0
    s = M.sample_surface(m, 20000, seed=3)
    np.testing.assert_array_equal(s.points[:, 2], 0.0)
    np.testing.assert_array_equal(np.abs(s.normals), np.tile([0, 0, 1.0], (20000, 1)))
    k = np.sum(s.points[:, 0] < 2)
    p = 0.5 / 3.5
    assert abs(k - 20000 * p) < 3 * np.sqrt(20000 * p * (1 - p))
    t = M.sample_surface(m, 100, seed=3)
    np.testing.assert_array_equal(t.points, M.sample_surface(m, 100, seed=3).points)
    with pytest.raises(ValueError):
        M.sample_surface(rec.TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3))), 10)


def _random_similarity(rng):
    return M.SimilarityTransform(rng.uniform(0.5, 2.0), Rotation.random(random_state=rng.integers(1 << 31)).as_matrix(),
                                 rng.uniform(-5, 5, 3))


def test_umeyama_identity_and_known_transform():
    rng = np.random.default_rng(2)
    src = rng.standard_normal((10, 3))
    tf = M.umeyama(src, src)
    assert tf.scale == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(tf.rotation, np.eye(3), atol=1e-12)
    R = Rotation.from_euler("z", 30, degrees=True).as_matrix()
    tf = M.umeyama(src, 2 * src @ R.T + [1, 2, 3])
    assert abs(tf.scale - 2) < 1e-9
    assert np.abs(tf.rotation - R).max() < 1e-9
    assert np.abs(tf.translation - [1, 2, 3]).max() < 1e-9


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31), st.integers(10, 60))
def test_umeyama_recovers_random_similarity(seed, n):
    rng = np.random.default_rng(seed)
    truth = _random_similarity(rng)
    src = rng.uniform(-1, 1, (n, 3))
    tf = M.umeyama(src, truth.apply(src))
    assert abs(tf.scale - truth.scale) < 1e-9
    assert np.abs(tf.rotation - truth.rotation).max() < 1e-9
    assert np.abs(tf.translation - truth.translation).max() < 1e-9
    assert abs(np.linalg.det(tf.rotation) - 1) < 1e-9


def test_umeyama_reflection_guard_and_degenerate():
    rng = np.random.default_rng(4)
    src = rng.standard_normal((12, 3))
    dst = src * [1, 1, -1]
    tf = M.umeyama(src, dst)
    assert np.linalg.det(tf.rotation) == pytest.approx(1.0)
    assert np.abs(tf.apply(src) - dst).max() > 1e-3
    line = np.outer(np.arange(5.0), [1, 2, 3])
    with pytest.raises(M.DegenerateCorrespondenceError):
        M.umeyama(line, line)
    with pytest.raises(M.DegenerateCorrespondenceError):
        M.umeyama(src[:2], src[:2])


def _sphere_points(n, seed):
    return geo.synthesize_cloud(geo.AnalyticShape("box", (0.5, 0.3, 0.2)), n, seed=seed).positions


def test_icp_already_aligned():
    pts = _sphere_points(2000, 0)
    init = M.SimilarityTransform()
    res = M.icp_refine(pts, pts, init)
    assert res.iterations <= 1 and res.residual == 0.0
    np.testing.assert_allclose(res.transform.rotation, np.eye(3), atol=1e-9)


def test_icp_recovers_five_degrees_monotonically():
    dst = _sphere_points(20000, 1)
    src = _sphere_points(5000, 2)
    R = Rotation.from_rotvec(np.radians(5) * np.array([1, 2, 2]) / 3).as_matrix()
    moved = src @ R.T
    res = M.icp_refine(moved, dst, M.SimilarityTransform(), max_iters=100)
    assert all(b <= a for a, b in zip(res.residuals, res.residuals[1:]))
    err = M.rotation_angle_deg(res.transform.rotation @ R)
    assert err < 0.1


def test_sdf_field_rmse_values():
    shape = geo.AnalyticShape("sphere", (0.3,))
    oracle = geo.AnalyticField(shape, geo.SceneTransform(1.0, np.full(3, 0.5)))

    class Shifted:
        def sdf(self, x):
            return oracle.sdf(x) + 0.1

    assert M.sdf_field_rmse(oracle, oracle, 5000, 0.3) == 0.0
    assert M.sdf_field_rmse(Shifted(), oracle, 5000, 0.3) == pytest.approx(0.1, rel=1e-12)


def test_sdf_field_rmse_against_summation():
    oracle = geo.AnalyticField(geo.AnalyticShape("sphere", (0.3,)), geo.SceneTransform(1.0, np.full(3, 0.5)))

    class Wobbly:
        def sdf(self, x):
            return oracle.sdf(x) + 0.05 * np.sin(17 * x[:, 0])

    rng = np.random.default_rng(9)
    x = rng.uniform(0, 1, (1024, 3))
    x = x[np.abs(oracle.sdf(x)) <= 0.3][:10]
    expect = np.sqrt(sum((0.05 * np.sin(17 * xi[0])) ** 2 for xi in x) / 10)
    assert M.sdf_field_rmse(Wobbly(), oracle, 10, 0.3, seed=9) == pytest.approx(expect, rel=1e-12)


def test_read_landmarks(tmp_path):
    p = tmp_path / "lm.txt"
    p.write_text("# pairs\n0 0 0 1 1 1\n1 0 0 2 1 1  # x\n\n0 1 0 1 2 1\n")
    src, dst = M.read_landmarks(p)
    np.testing.assert_array_equal(dst - src, 1.0)
    p.write_text("0 0 0 1 1 1\n0 0 x 1 1 1\n")
    with pytest.raises(ValueError, match=":2:"):
        M.read_landmarks(p)
    p.write_text("0 0 0 1 1 1\n")
    with pytest.raises(ValueError, match="at least 3"):
        M.read_landmarks(p)


def test_evaluate_meshes_identity_and_csv():
    m = rec.marching_cubes(rec.evaluate_grid(
        geo.AnalyticField(geo.AnalyticShape("sphere", (0.3,)), geo.SceneTransform(1.0, np.full(3, 0.5))), 24))
    r = M.evaluate_meshes(m, m, 3000, seed=1)
    assert r.cd == 0.0 and r.nae_deg == 0.0 and r.icp_residual == 0.0
    lines = r.to_csv().splitlines()
    assert lines[0] == "cd,nae_deg,n_pred,n_gt,icp_residual" and lines[1].startswith("0.0,0.0,3000,3000")


def test_evaluate_meshes_landmark_alignment():
    shape = geo.AnalyticShape("box", (0.3, 0.2, 0.1))
    gt = rec.marching_cubes(rec.evaluate_grid(geo.AnalyticField(shape, geo.SceneTransform(1.0, np.full(3, 0.5))), 40))
    truth = M.SimilarityTransform(1.5, Rotation.from_euler("y", 50, degrees=True).as_matrix(), np.array([2.0, 0, 1]))
    inv_R = truth.rotation.T
    pred = rec.TriangleMesh(((gt.vertices - truth.translation) @ inv_R) / truth.scale, gt.faces)
    lm_src = pred.vertices[:: len(pred.vertices) // 6][:6]
    r = M.evaluate_meshes(pred, gt, 5000, 0, landmarks=(lm_src, truth.apply(lm_src)))
    assert r.cd < 1e-4 and r.nae_deg < 2.0
