import itertools

import numpy as np
import pytest

from thermoslam import calib, geom, synth
from thermoslam.calib import BoardGeometry, PlaneModel, PlanePair
from thermoslam.geom import Pose

from conftest import random_twist


def plane_points(rng, normal, d, n=50, extent=1.0):
    normal = np.asarray(normal, float) / np.linalg.norm(normal)
    a = np.cross(normal, [1.0, 0.0, 0.0] if abs(normal[0]) < 0.9 else [0.0, 1.0, 0.0])
    a /= np.linalg.norm(a)
    b = np.cross(normal, a)
    s = rng.uniform(-extent, extent, (n, 2))
    return -d * normal + s[:, :1] * a + s[:, 1:] * b


def make_pair(normal_cam, d_cam, E, rng, n=30):
    """Plane pair for a camera->LiDAR extrinsic ``E``."""
    pts_cam = plane_points(rng, normal_cam, d_cam, n)
    n_c = np.asarray(normal_cam, float) / np.linalg.norm(normal_cam)
    n_v = E.R @ n_c
    d_v = d_cam - n_v @ E.t
    return PlanePair(PlaneModel(n_c, d_cam), PlaneModel(n_v, d_v), pts_cam)


# -- plane segmentation --------------------------------------------------------


def test_ransac_plane_noiseless(rng):
    pts = plane_points(rng, [0, 0, 1], -2.0)  # z = 2
    model = calib.ransac_plane(pts)
    np.testing.assert_allclose(np.abs(model.normal), [0, 0, 1], atol=1e-12)
    assert model.d == pytest.approx(-model.normal[2] * 2.0)
    assert len(model.inliers) == 50
    assert np.linalg.norm(model.normal) == pytest.approx(1.0, abs=1e-9)


def test_ransac_plane_with_outliers(rng):
    inl = plane_points(rng, [0.2, -0.1, 1.0], -2.0, n=80)
    n = np.array([0.2, -0.1, 1.0]) / np.linalg.norm([0.2, -0.1, 1.0])
    out = inl[:20] + n * rng.uniform(0.1, 1.0, (20, 1)) * rng.choice([-1, 1], (20, 1))
    model = calib.ransac_plane(np.vstack([inl, out]))
    assert len(model.inliers) == 80
    assert np.max(np.abs(model.distance(inl))) < 1e-9
    assert np.all(np.abs(model.distance(model.inliers)) <= calib.RANSAC_THRESHOLD)


def test_ransac_rejects_collinear_and_sparse(rng):
    line = np.outer(np.linspace(0, 1, 10), [1.0, 2.0, 3.0])
    with pytest.raises(calib.CalibrationError):
        calib.ransac_plane(line, min_inliers=5)
    with pytest.raises(calib.PlaneRejected):
        calib.ransac_plane(plane_points(rng, [0, 0, 1], -2.0, n=10))


def test_ransac_deterministic(rng):
    pts = np.vstack([plane_points(rng, [0, 1, 1], -1.5, 60), rng.normal(size=(30, 3))])
    a = calib.ransac_plane(pts, seed=3)
    b = calib.ransac_plane(pts, seed=3)
    np.testing.assert_array_equal(a.normal, b.normal)


def test_segment_lidar_plane_uses_board_region(rng, K):
    E = synth.default_extrinsic()
    board = plane_points(rng, [0, 0, -1], 2.0, 200, extent=0.4)  # camera frame, z = 2
    wall = plane_points(rng, [0, 0, -1], 4.0, 400, extent=3.0)
    cloud = E.apply(np.vstack([board, wall]))
    uv, _ = geom.project_points(board, K)
    poly = np.array([uv.min(0), [uv[:, 0].max(), uv[:, 1].min()], uv.max(0), [uv[:, 0].min(), uv[:, 1].max()]])
    model = calib.segment_lidar_plane(cloud, poly, E, K)
    assert np.max(np.abs(model.distance(E.apply(board)))) < 1e-9


# -- triplet selection -------------------------------------------------------


def _pairs_from_normals(normals):
    return [PlanePair(PlaneModel(np.asarray(n, float) / np.linalg.norm(n), 1.0), PlaneModel(np.array([0, 0, 1.0]), 1.0), np.zeros((1, 3))) for n in normals]


def test_triplet_prefers_orthogonal():
    normals = [[0, 0.05, 1], [1, 0, 0], [0, 0.02, 1], [0, 1, 0], [0.03, 0, 1], [0, 0, 1]]
    assert sorted(calib.select_plane_triplet(_pairs_from_normals(normals))) in ([1, 3, 5], [0, 1, 3], [1, 2, 3], [1, 3, 4])
    i, j, k = calib.select_plane_triplet(_pairs_from_normals(normals))
    assert calib.triplet_score(np.array([p.cam_plane.normal for p in _pairs_from_normals(normals)]), i, j, k) > -0.1


def test_triplet_exactly_three():
    assert calib.select_plane_triplet(_pairs_from_normals([[1, 0, 0], [0, 1, 0], [0, 0, 1]])) == (0, 1, 2)


@pytest.mark.parametrize("n", [5, 10, 12])
def test_triplet_matches_brute_force(rng, n):
    normals = rng.normal(size=(n, 3))
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    pairs = _pairs_from_normals(normals)

    def score(t):
        a, b, c = normals[list(t)]
        return np.exp(-a @ b - b @ c - a @ c)

    oracle = max(itertools.combinations(range(n), 3), key=score)
    assert calib.select_plane_triplet(pairs) == oracle


def test_triplet_degenerate():
    with pytest.raises(calib.DegenerateGeometry):
        calib.select_plane_triplet(_pairs_from_normals([[0, 0, 1], [0, 0.02, 1], [0.03, 0, 1]]))
    with pytest.raises(calib.CalibrationError):
        calib.select_plane_triplet(_pairs_from_normals([[0, 0, 1], [1, 0, 0]]))


# -- closed-form solution ------------------------------------------------------


def test_solve_rotation_identity_and_random(rng):
    normals = [[1, 0, 0], [0, 1, 0], [0.3, 0.3, 1]]
    same = [make_pair(n, 2.0, Pose(), rng) for n in normals]
    np.testing.assert_allclose(calib.solve_rotation(same), np.eye(3), atol=1e-12)
    for _ in range(10):
        E = geom.exp(random_twist(rng, 3.0, 0.5))
        pairs = [make_pair(n, 2.0, E, rng) for n in rng.normal(size=(3, 3))]
        np.testing.assert_allclose(calib.solve_rotation(pairs), E.R, atol=1e-9)


def test_solve_rotation_reflection_trap():
    # Mirror-image LiDAR normals make the raw V U^T a reflection.
    n_c = np.eye(3)
    n_v = np.diag([1.0, 1.0, -1.0])
    pairs = [PlanePair(PlaneModel(n_c[i], 1.0), PlaneModel(n_v[i], 1.0), np.zeros((1, 3))) for i in range(3)]
    H = sum(np.outer(p.cam_plane.normal, p.lidar_plane.normal) for p in pairs)
    U, _, Vt = np.linalg.svd(H)
    assert np.linalg.det(Vt.T @ U.T) < 0
    R = calib.solve_rotation(pairs)
    assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-9)
    np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-9)


def test_solve_translation(rng):
    normals = [[1, 0, 0.2], [0, 1, 0.1], [0.1, 0.2, 1]]
    pairs = [make_pair(n, 2.0, Pose(), rng) for n in normals]
    np.testing.assert_allclose(calib.solve_translation(pairs, np.eye(3)), 0.0, atol=1e-9)
    E = Pose(geom.so3_exp([0.1, -0.2, 0.05]), [0.1, -0.05, 0.2])
    pairs = [make_pair(n, 2.0, E, rng) for n in normals]
    np.testing.assert_allclose(calib.solve_translation(pairs, E.R), E.t, atol=1e-9)
    parallel = [make_pair(n, d, E, rng) for n, d in [([1, 0, 0], 2.0), ([1, 0, 0], 3.0), ([0, 1, 0], 2.0)]]
    with pytest.raises(calib.DegenerateGeometry):
        calib.solve_translation(parallel, E.R)


# -- refinement ---------------------------------------------------------------


def _pairs(rng, E, n=20, noise=0.0):
    out = []
    for _ in range(n):
        nrm = rng.normal(size=3) + [0, 0, -2.0]
        pair = make_pair(nrm, rng.uniform(1.5, 3.0), E, rng)
        if noise:
            pair.lidar_plane = PlaneModel(pair.lidar_plane.normal, pair.lidar_plane.d + rng.normal(0, noise))
        out.append(pair)
    return out


def test_refine_at_ground_truth_is_stationary(rng):
    E = synth.default_extrinsic()
    res = calib.refine_extrinsic(_pairs(rng, E), E)
    assert res.initial_cost == pytest.approx(0.0, abs=1e-20)
    assert res.pose.allclose(E, atol=1e-12)


def test_refine_recovers_from_perturbation(rng):
    E = synth.default_extrinsic()
    start = E @ geom.exp(np.r_[np.radians([2.0, 0, 0]), 0.05, 0, 0])
    res = calib.refine_extrinsic(_pairs(rng, E), start)
    err = geom.relative(res.pose, E)
    assert np.degrees(err.rotation_angle()) < 0.05
    assert np.linalg.norm(err.t) < 1e-3
    assert np.all(np.diff(res.costs) <= 0)
    assert res.final_cost <= res.initial_cost


# -- chessboard pose --------------------------------------------------------


def test_chessboard_pose_round_trip(rng, K):
    board = BoardGeometry(5, 7, 0.1)
    for _ in range(10):
        pose = Pose(geom.so3_exp(rng.normal(0, 0.3, 3)), [rng.uniform(-0.3, 0.1), rng.uniform(-0.3, 0.0), rng.uniform(1.5, 3.0)])
        uv, valid = geom.project_points(pose.apply(board.object_points()), K)
        assert valid.all()
        est, plane = calib.detect_chessboard_pose(uv, board, K)
        assert est.allclose(pose, atol=1e-6)
        assert np.max(np.abs(plane.distance(pose.apply(board.object_points())))) < 1e-6


def test_chessboard_fronto_parallel(K):
    board = BoardGeometry(5, 7, 0.1)
    pose = Pose(np.eye(3), [-0.3, -0.2, 1.0])
    uv, _ = geom.project_points(pose.apply(board.object_points()), K)
    _, plane = calib.detect_chessboard_pose(uv, board, K)
    np.testing.assert_allclose(plane.normal, [0, 0, -1], atol=1e-9)
    assert plane.d == pytest.approx(1.0, abs=1e-9)


def test_chessboard_failures(K):
    board = BoardGeometry(5, 7, 0.1)
    pose = Pose(geom.so3_exp([0.2, -0.1, 0.05]), [-0.3, -0.2, 2.0])
    uv, _ = geom.project_points(pose.apply(board.object_points()), K)
    shuffled = uv.copy()
    shuffled[7:14] = shuffled[7:14][::-1]
    with pytest.raises(calib.ChessboardError):
        calib.detect_chessboard_pose(shuffled, board, K)
    with pytest.raises(calib.ChessboardError):
        calib.detect_chessboard_pose(uv[:3], BoardGeometry(1, 3, 0.1), K)
    line = np.stack([np.linspace(10, 100, 35), np.linspace(10, 100, 35)], axis=1)
    with pytest.raises(calib.ChessboardError):
        calib.detect_chessboard_pose(line, board, K)


def test_opencv_corner_adapter_on_rendered_board():
    from thermoslam.imgproc import rescale_to_8bit

    cfg = synth.SceneConfig()
    K = cfg.intrinsics()
    board = BoardGeometry(5, 7, 0.1)
    R = synth.BODY_FROM_CAM
    bp = Pose(R, [0.8, 0.3, 1.4])  # fronto-parallel, 0.8 m ahead of the camera
    m = board.square
    tex = synth.Texture(base=22.0, checker=(board.square, 8.0, 0.05))
    surf = synth.Surface(bp.apply([-m, -m, 0.0]), R[:, 0], R[:, 1], ((board.cols + 1) * m, (board.rows + 1) * m), tex)
    surf.texture = synth._shifted(tex, m)
    scene = synth.ThermoScene([surf] + synth.box_surfaces([-3, -3, 0], [6, 3, 2.8], np.random.default_rng(0)))
    rig = synth.camera_pose([0.0, 0.0, 1.2], 0.0)
    found = calib.find_chessboard_corners(rescale_to_8bit(synth.render_thermal(scene, rig, K)), board)
    truth, _ = geom.project_points(rig.inverse().apply(bp.apply(board.object_points())), K)
    assert found is not None
    # OpenCV may enumerate the grid from either end
    err = min(np.abs(found - truth).max(), np.abs(found[::-1] - truth).max())
    assert err < 0.1
