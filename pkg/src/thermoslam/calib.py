"""Thermal camera to LiDAR extrinsic calibration from chessboard plane pairs.

The extrinsic ``T`` maps camera-frame points into the LiDAR frame
(``p_lidar = T.apply(p_camera)``). Planes are ``{p : n.p + d = 0}`` with the
unit normal oriented toward the sensor origin (``d > 0``).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from itertools import combinations
from typing import Sequence

import numpy as np

from . import geom
from .geom import CameraIntrinsics, Pose

log = logging.getLogger(__name__)

RANSAC_THRESHOLD = 0.02
RANSAC_ITERATIONS = 500
MIN_INLIERS = 20
PARALLEL_DEG = 5.0


class CalibrationError(RuntimeError):
    pass


class PlaneRejected(CalibrationError):
    pass


class DegenerateGeometry(CalibrationError):
    pass


class ChessboardError(CalibrationError):
    pass


@dataclass
class PlaneModel:
    normal: np.ndarray
    d: float
    inliers: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))

    def distance(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) @ self.normal + self.d

    def oriented(self) -> "PlaneModel":
        """Flip so the normal points toward the origin (d >= 0)."""
        if self.d < 0:
            return PlaneModel(-self.normal, -self.d, self.inliers)
        return self


@dataclass
class PlanePair:
    cam_plane: PlaneModel
    lidar_plane: PlaneModel
    cam_points: np.ndarray
    timestamp: int = 0


@dataclass(frozen=True)
class BoardGeometry:
    """Chessboard with ``rows x cols`` inner corners spaced ``square`` meters."""

    rows: int
    cols: int
    square: float

    def object_points(self) -> np.ndarray:
        r, c = np.mgrid[0 : self.rows, 0 : self.cols]
        return np.stack([c.ravel() * self.square, r.ravel() * self.square, np.zeros(r.size)], axis=1)

    def outline(self) -> np.ndarray:
        """Indices of the four extreme inner corners, in polygon order."""
        n = self.rows * self.cols
        return np.array([0, self.cols - 1, n - 1, n - self.cols])


def fit_plane(points: np.ndarray) -> tuple[np.ndarray, float]:
    """Least-squares plane: smallest eigenvector of the centered covariance."""
    points = np.asarray(points, dtype=float)
    if len(points) < 3:
        raise DegenerateGeometry("need at least 3 points for a plane")
    c = points.mean(axis=0)
    evals, evecs = np.linalg.eigh(np.cov((points - c).T, bias=True))
    if evals[1] <= 1e-12 * max(evals[2], 1e-300):
        raise DegenerateGeometry("points are collinear")
    n = evecs[:, 0]
    d = -float(n @ c)
    if d < 0:
        n, d = -n, -d
    return n, d


def points_in_polygon(uv: np.ndarray, polygon: np.ndarray) -> np.ndarray:
    """Convex polygon containment test (either winding)."""
    polygon = np.asarray(polygon, dtype=float)
    edges = np.roll(polygon, -1, axis=0) - polygon
    rel = uv[:, None, :] - polygon[None, :, :]
    cross = edges[None, :, 0] * rel[:, :, 1] - edges[None, :, 1] * rel[:, :, 0]
    return np.all(cross >= 0, axis=1) | np.all(cross <= 0, axis=1)


def ransac_plane(
    points: np.ndarray,
    threshold: float = RANSAC_THRESHOLD,
    iterations: int = RANSAC_ITERATIONS,
    min_inliers: int = MIN_INLIERS,
    seed: int = 0,
) -> PlaneModel:
    points = np.asarray(points, dtype=float)
    n = len(points)
    if n < max(3, min_inliers):
        raise PlaneRejected(f"only {n} candidate points")
    rng = np.random.default_rng(seed)
    idx = np.stack([rng.choice(n, 3, replace=False) for _ in range(iterations)])
    a, b, c = points[idx[:, 0]], points[idx[:, 1]], points[idx[:, 2]]
    normals = np.cross(b - a, c - a)
    norms = np.linalg.norm(normals, axis=1)
    ok = norms > 1e-9
    normals[ok] /= norms[ok, None]
    ds = -np.einsum("ij,ij->i", normals, a)
    counts = (np.abs(points @ normals.T + ds) <= threshold).sum(axis=0)
    counts[~ok] = -1
    best = int(np.argmax(counts))  # lowest trial index wins ties
    if counts[best] < min_inliers:
        raise PlaneRejected(f"best plane has {max(counts[best], 0)} inliers < {min_inliers}")
    mask = np.abs(points @ normals[best] + ds[best]) <= threshold
    nrm, d = fit_plane(points[mask])
    mask = np.abs(points @ nrm + d) <= threshold
    if mask.sum() < min_inliers:
        raise PlaneRejected("refit lost inliers")
    return PlaneModel(nrm, d, points[mask])


def segment_lidar_plane(
    cloud: np.ndarray,
    board_region: np.ndarray,
    T_init: Pose,
    K: CameraIntrinsics,
    threshold: float = RANSAC_THRESHOLD,
    iterations: int = RANSAC_ITERATIONS,
    min_inliers: int = MIN_INLIERS,
    seed: int = 0,
) -> PlaneModel:
    """RANSAC plane over LiDAR points that project inside the board region.

    ``board_region`` is either a convex pixel polygon (M, 2) or a boolean
    mask of the image size.
    """
    cloud = np.asarray(cloud, dtype=float).reshape(-1, 3)
    p_cam = T_init.inverse().apply(cloud)
    uv, valid = geom.project_points(p_cam, K)
    region = np.asarray(board_region)
    if region.dtype == bool and region.shape == (K.height, K.width):
        inside = np.zeros(len(cloud), dtype=bool)
        pix = np.rint(uv[valid]).astype(int)
        inside[valid] = region[pix[:, 1], pix[:, 0]]
    else:
        inside = valid & points_in_polygon(uv, region)
    return ransac_plane(cloud[inside], threshold, iterations, min_inliers, seed)


def triplet_score(normals: np.ndarray, i: int, j: int, k: int) -> float:
    """Log of the unnormalized selection probability for a normal triplet."""
    a, b, c = normals[i], normals[j], normals[k]
    return float(-(a @ b) - (b @ c) - (a @ c))


def select_plane_triplet(pairs: Sequence[PlanePair]) -> tuple[int, int, int]:
    """Index triple of camera planes with the most mutually dissimilar normals."""
    if len(pairs) < 3:
        raise CalibrationError("need at least 3 plane pairs")
    normals = np.array([p.cam_plane.normal for p in pairs])
    G = normals @ normals.T
    if np.min(G) > np.cos(np.radians(PARALLEL_DEG)):
        raise DegenerateGeometry("all board normals are within 5 degrees of parallel")
    combos = np.array(list(combinations(range(len(pairs)), 3)))
    i, j, k = combos.T
    scores = -(G[i, j] + G[j, k] + G[i, k])
    best = combos[int(np.argmax(scores))]
    return int(best[0]), int(best[1]), int(best[2])


def solve_rotation(triplet: Sequence[PlanePair]) -> np.ndarray:
    """Rotation taking camera-frame normals onto LiDAR-frame normals."""
    H = sum(np.outer(p.cam_plane.normal, p.lidar_plane.normal) for p in triplet)
    U, S, Vt = np.linalg.svd(H)
    if S[1] < 1e-9 * max(S[0], 1e-300):
        raise DegenerateGeometry("normal covariance has rank < 2")
    V = Vt.T
    if np.linalg.det(V @ U.T) < 0:
        V[:, -1] *= -1
    return V @ U.T


def solve_translation(triplet: Sequence[PlanePair], R: np.ndarray) -> np.ndarray:
    """Closed-form translation minimizing point-to-LiDAR-plane distances."""
    A = np.zeros((3, 3))
    b = np.zeros(3)
    for p in triplet:
        n, d = p.lidar_plane.normal, p.lidar_plane.d
        q = p.cam_points @ R.T
        A += len(q) * np.outer(n, n)
        b -= n * np.sum(q @ n + d)
    if np.linalg.cond(A) > 1e8:
        raise DegenerateGeometry("LiDAR plane normals do not span 3-space")
    return np.linalg.solve(A, b)


def _stack(pairs: Sequence[PlanePair]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    pts = np.concatenate([p.cam_points for p in pairs])
    nrm = np.concatenate([np.repeat(p.lidar_plane.normal[None], len(p.cam_points), 0) for p in pairs])
    ds = np.concatenate([np.full(len(p.cam_points), p.lidar_plane.d) for p in pairs])
    return pts, nrm, ds


def plane_cost(pairs: Sequence[PlanePair], T: Pose) -> float:
    pts, nrm, ds = _stack(pairs)
    r = np.einsum("ij,ij->i", nrm, T.apply(pts)) + ds
    return float(r @ r)


@dataclass
class RefineResult:
    pose: Pose
    initial_cost: float
    final_cost: float
    iterations: int
    costs: list[float]


def refine_extrinsic(
    pairs: Sequence[PlanePair],
    T_init: Pose,
    max_iterations: int = 200,
    min_decrease: float = 1e-10,
    max_backtracks: int = 10,
) -> RefineResult:
    """Descent on the twist with backtracking; cost never increases.

    The descent direction is the gradient preconditioned by the
    Gauss-Newton matrix, which removes the rotation/translation scale
    imbalance that makes plain gradient steps crawl.
    """
    if len(pairs) < 3:
        raise CalibrationError("need at least 3 plane pairs")
    pts, nrm, ds = _stack(pairs)

    def residuals(T: Pose) -> tuple[np.ndarray, np.ndarray]:
        q = T.apply(pts)
        return np.einsum("ij,ij->i", nrm, q) + ds, q

    T = T_init
    r, q = residuals(T)
    cost = float(r @ r)
    costs = [cost]
    it = 0
    for it in range(1, max_iterations + 1):
        J = np.einsum("ni,nij->nj", nrm, geom.point_jacobian(q))
        g = J.T @ r
        H = J.T @ J
        step = -np.linalg.solve(H + 1e-12 * np.trace(H) * np.eye(6), g)
        alpha = 1.0
        for _ in range(max_backtracks):
            T_new = geom.exp(alpha * step) @ T
            r_new, q_new = residuals(T_new)
            cost_new = float(r_new @ r_new)
            if not np.isfinite(cost_new):
                raise CalibrationError("refinement diverged (non-finite cost)")
            if cost_new < cost:
                break
            alpha *= 0.5
        else:
            it -= 1
            break
        decrease = cost - cost_new
        T, r, q, cost = T_new, r_new, q_new, cost_new
        costs.append(cost)
        if decrease < min_decrease:
            break
    return RefineResult(T, costs[0], cost, it, costs)


# -- chessboard pose -------------------------------------------------------


def _normalize_2d(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    c = x.mean(axis=0)
    s = np.sqrt(2) / max(np.mean(np.linalg.norm(x - c, axis=1)), 1e-12)
    N = np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1]])
    return (x - c) * s, N


def homography_dlt(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Normalized DLT homography with ``dst ~ H @ src``."""
    xs, Ns = _normalize_2d(src)
    xd, Nd = _normalize_2d(dst)
    rows = []
    for (x, y), (u, v) in zip(xs, xd):
        rows.append([-x, -y, -1, 0, 0, 0, u * x, u * y, u])
        rows.append([0, 0, 0, -x, -y, -1, v * x, v * y, v])
    _, _, vt = np.linalg.svd(np.array(rows))
    Hn = vt[-1].reshape(3, 3)
    H = np.linalg.inv(Nd) @ Hn @ Ns
    return H / H[2, 2]


def reprojection_residuals(pose: Pose, obj: np.ndarray, corners: np.ndarray, K: CameraIntrinsics):
    pc = pose.apply(obj)
    uv = np.stack([pc[:, 0] / pc[:, 2] * K.fx + K.cx, pc[:, 1] / pc[:, 2] * K.fy + K.cy], axis=1)
    return (uv - corners).ravel(), pc


def detect_chessboard_pose(
    corners: np.ndarray,
    board: BoardGeometry,
    K: CameraIntrinsics,
    max_rms: float = 1.0,
) -> tuple[Pose, PlaneModel]:
    """Board pose (board -> camera) from row-major inner corners, plus its plane."""
    corners = np.asarray(corners, dtype=float).reshape(-1, 2)
    if len(corners) < 4:
        raise ChessboardError("need at least 4 corners")
    if len(corners) != board.rows * board.cols:
        raise ChessboardError(f"expected {board.rows * board.cols} corners, got {len(corners)}")
    sv = np.linalg.svd(corners - corners.mean(axis=0), compute_uv=False)
    if sv[1] < 1e-6 * sv[0]:
        raise ChessboardError("corner layout is collinear")
    obj = board.object_points()
    norm = np.stack([(corners[:, 0] - K.cx) / K.fx, (corners[:, 1] - K.cy) / K.fy], axis=1)
    H = homography_dlt(obj[:, :2], norm)
    h1, h2, h3 = H[:, 0], H[:, 1], H[:, 2]
    lam = 2.0 / (np.linalg.norm(h1) + np.linalg.norm(h2))
    if h3[2] * lam < 0:
        lam = -lam
    r1, r2, t = lam * h1, lam * h2, lam * h3
    R = geom.nearest_rotation(np.stack([r1, r2, np.cross(r1, r2)], axis=1))
    pose = Pose(R, t)

    # Gauss-Newton on the reprojection error.
    r, pc = reprojection_residuals(pose, obj, corners, K)
    for _ in range(20):
        J = geom.pixel_jacobian(pc, K).reshape(-1, 6)
        step = -np.linalg.lstsq(J, r, rcond=None)[0]
        cand = geom.exp(step) @ pose
        r_new, pc_new = reprojection_residuals(cand, obj, corners, K)
        if r_new @ r_new >= r @ r:
            break
        pose, r, pc = cand, r_new, pc_new
        if np.linalg.norm(step) < 1e-12:
            break
    rms = float(np.sqrt(np.mean(r.reshape(-1, 2) ** 2) * 2))
    if not np.isfinite(rms) or rms > max_rms or np.any(pc[:, 2] <= 0):
        raise ChessboardError(f"reprojection RMS {rms:.3f} px above {max_rms}")
    n = pose.R[:, 2]
    plane = PlaneModel(n, -float(n @ pose.t), pc).oriented()
    return pose, plane


def find_chessboard_corners(img8: np.ndarray, board: BoardGeometry) -> np.ndarray | None:
    """Detect inner corners in an 8-bit image with OpenCV; ``None`` if not found."""
    import cv2

    found, corners = cv2.findChessboardCorners(img8, (board.cols, board.rows))
    if not found:
        return None
    criteria = (cv2.TERM_CRITERIA_EPS + cv2.TERM_CRITERIA_MAX_ITER, 50, 1e-4)
    corners = cv2.cornerSubPix(img8, corners, (5, 5), (-1, -1), criteria)
    return corners.reshape(-1, 2).astype(float)


# -- end to end ------------------------------------------------------------


@dataclass
class Observation:
    timestamp: int
    corners: np.ndarray
    cloud: np.ndarray


@dataclass
class CalibrationResult:
    extrinsic: Pose
    initial: Pose
    pairs: list[PlanePair]
    triplet: tuple[int, int, int]
    refine: RefineResult
    rejected: list[tuple[int, str]]


def build_plane_pair(
    obs: Observation,
    board: BoardGeometry,
    K: CameraIntrinsics,
    T_init: Pose,
    seed: int = 0,
    **ransac,
) -> PlanePair:
    corners = np.asarray(obs.corners, dtype=float)
    board_pose, cam_plane = detect_chessboard_pose(corners, board, K)
    polygon = corners[board.outline()]
    lidar_plane = segment_lidar_plane(obs.cloud, polygon, T_init, K, seed=seed, **ransac)
    return PlanePair(cam_plane, lidar_plane, board_pose.apply(board.object_points()), obs.timestamp)


def calibrate(
    observations: Sequence[Observation],
    board: BoardGeometry,
    K: CameraIntrinsics,
    T_init: Pose,
    seed: int = 0,
    **ransac,
) -> CalibrationResult:
    """Full calibration over a temporal stream of board observations."""
    pairs, rejected = [], []
    for i, obs in enumerate(observations):
        try:
            pairs.append(build_plane_pair(obs, board, K, T_init, seed=seed + i, **ransac))
        except CalibrationError as exc:
            log.info("observation %d rejected: %s", obs.timestamp, exc)
            rejected.append((obs.timestamp, str(exc)))
    triplet = select_plane_triplet(pairs)
    chosen = [pairs[i] for i in triplet]
    R = solve_rotation(chosen)
    t = solve_translation(chosen, R)
    initial = Pose(R, t)
    refined = refine_extrinsic(pairs, initial)
    return CalibrationResult(refined.pose, initial, pairs, triplet, refined, rejected)
