"""Direct tracking of sparse LiDAR points on raw 14-bit thermal images.

Residuals compare raw counts (no normalization) between a reference sample
and its reprojection in the target image; they are weighted with a
Student-t weight whose scale is re-estimated every Gauss-Newton iteration.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from . import geom
from .geom import CameraIntrinsics, Pose
from .imgproc import ThermalImage, build_pyramid, in_bounds, sample_bilinear_many, sample_gradient_many

log = logging.getLogger(__name__)

# Sparse residual pattern: center plus 7 offsets within radius 2.
PATTERN = np.array(
    [[0, 0], [0, -2], [-1, -1], [1, -1], [-2, 0], [2, 0], [-1, 1], [0, 2]], dtype=float
)
SIGMA_FLOOR = 1e-3
BORDER = 1.0


class TrackingLost(RuntimeError):
    def __init__(self, reason: str, diagnostics: "TrackDiagnostics | None" = None):
        super().__init__(reason)
        self.reason = reason
        self.diagnostics = diagnostics


@dataclass(frozen=True)
class RobustWeight:
    """Student-t weight ``(nu + 1) / (nu + (r / sigma)^2)``."""

    nu: float = 5.0
    sigma: float = 1.0

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")

    def __call__(self, r):
        r = np.asarray(r, dtype=float)
        return (self.nu + 1.0) / (self.nu + (r / self.sigma) ** 2)

    def cost(self, r) -> np.ndarray:
        """Per-residual ``w(r) * r^2``; bounded above by ``(nu + 1) sigma^2``."""
        r = np.asarray(r, dtype=float)
        return self(r) * r * r

    @property
    def saturation(self) -> float:
        return (self.nu + 1.0) * self.sigma**2


def estimate_sigma(
    residuals: Sequence[float],
    nu: float = 5.0,
    floor: float = SIGMA_FLOOR,
    tol: float = 1e-6,
    max_iter: int = 50,
) -> float:
    """Fixed-point scale estimate for t-distributed residuals."""
    r2 = np.asarray(residuals, dtype=float) ** 2
    if r2.size < 10:
        raise ValueError(f"need at least 10 residuals, got {r2.size}")
    s2 = (np.median(np.sqrt(r2)) / 0.6745) ** 2
    if s2 < floor * floor:
        s2 = max(float(np.mean(r2)), floor * floor)
    for _ in range(max_iter):
        new = float(np.mean(r2 * (nu + 1.0) / (nu + r2 / s2)))
        new = max(new, floor * floor)
        done = abs(new - s2) <= tol * s2
        s2 = new
        if done:
            break
    return max(float(np.sqrt(s2)), floor)


# -- point sets ---------------------------------------------------------------


@dataclass
class PointSet:
    """Pattern-expanded reference points for one pyramid level."""

    points: np.ndarray  # (M, 3) in the reference camera frame
    reference: np.ndarray  # (M,) reference counts
    owner: np.ndarray  # (M,) index into the selected point list

    def transformed(self, T: Pose) -> "PointSet":
        return PointSet(T.apply(self.points), self.reference, self.owner)

    @staticmethod
    def concat(sets: Sequence["PointSet"]) -> "PointSet":
        if not sets:
            return PointSet(np.zeros((0, 3)), np.zeros(0), np.zeros(0, dtype=int))
        return PointSet(
            np.concatenate([s.points for s in sets]),
            np.concatenate([s.reference for s in sets]),
            np.concatenate([s.owner for s in sets]),
        )


def expand_pattern(points: np.ndarray, image: np.ndarray, K: CameraIntrinsics, pattern=PATTERN) -> PointSet:
    """Back-project each pattern pixel at its point's depth and sample references."""
    if len(points) == 0:
        return PointSet.concat([])
    uv, valid = geom.project_points(points, K)
    idx = np.nonzero(valid)[0]
    uv = uv[idx]
    z = points[idx, 2]
    uvo = (uv[:, None, :] + pattern[None, :, :]).reshape(-1, 2)
    zo = np.repeat(z, len(pattern))
    owner = np.repeat(idx, len(pattern))
    ok = in_bounds(image, uvo, margin=BORDER)
    uvo, zo, owner = uvo[ok], zo[ok], owner[ok]
    pts = geom.unproject(uvo, zo, K)
    return PointSet(pts, sample_bilinear_many(image, uvo), owner)


def depth_edges(points: np.ndarray, uv: np.ndarray, radius: float = 4.0, rel_jump: float = 0.05) -> np.ndarray:
    """Flag points whose image-space neighbors lie at a clearly different depth."""
    z = points[:, 2]
    edge = np.zeros(len(points), dtype=bool)
    if len(points) < 2:
        return edge
    pairs = cKDTree(uv).query_pairs(radius, output_type="ndarray")
    if len(pairs):
        i, j = pairs[:, 0], pairs[:, 1]
        jump = np.abs(z[i] - z[j]) > rel_jump * np.minimum(z[i], z[j])
        edge[i[jump]] = True
        edge[j[jump]] = True
    return edge


def depth_slope(points: np.ndarray, K: CameraIntrinsics, reach: float = 2.0, k: int = 10) -> np.ndarray:
    """Relative depth change across a pattern footprint of ``reach`` pixels.

    The local surface normal comes from a PCA over the k nearest cloud points.
    The pattern is unprojected at the centre depth, so steeply inclined
    surfaces (floors at grazing angles) carry a systematic parallax error.
    """
    n = len(points)
    if n < 3:
        return np.zeros(n)
    k = min(k, n)
    _, nn = cKDTree(points).query(points, k=k)
    nb = points[nn] - points[nn].mean(axis=1, keepdims=True)
    _, vecs = np.linalg.eigh(np.einsum("nki,nkj->nij", nb, nb))
    normal = vecs[:, :, 0]
    ray = points / points[:, 2:3]
    nr = np.einsum("ij,ij->i", normal, ray)
    du = np.abs(normal[:, 0]) * reach / K.fx + np.abs(normal[:, 1]) * reach / K.fy
    with np.errstate(divide="ignore", invalid="ignore"):
        rel = du / np.maximum(np.abs(nr) - du, 1e-12)
    return np.where(np.abs(nr) > du, rel, np.inf)


def select_points(
    points: np.ndarray,
    image: np.ndarray,
    K: CameraIntrinsics,
    max_points: int = 1500,
    cell: int = 16,
    max_slope: float = 0.02,
) -> np.ndarray:
    """Grid-bucketed selection preferring large image gradients. Returns indices.

    Points next to depth discontinuities are skipped: their pattern would
    straddle surfaces that move differently under parallax. Likewise for
    points whose depth varies by more than ``max_slope`` across the pattern.
    """
    uv, valid = geom.project_points(points, K, border=3.0)
    valid &= ~depth_edges(points, uv)
    valid &= depth_slope(points, K) < max_slope
    idx = np.nonzero(valid)[0]
    if len(idx) <= max_points:
        return idx
    g = np.linalg.norm(sample_gradient_many(image, uv[idx]), axis=1)
    cells = (uv[idx, 1] // cell).astype(np.int64) * (K.width // cell + 1) + (uv[idx, 0] // cell).astype(np.int64)
    # Order by cell, then gradient descending (stable for ties).
    order = np.lexsort((-g, cells))
    cells_sorted = cells[order]
    starts = np.r_[0, np.nonzero(np.diff(cells_sorted))[0] + 1]
    rank = np.arange(len(order)) - np.repeat(starts, np.diff(np.r_[starts, len(order)]))
    # Round robin across cells: rank 0 of every cell first, then rank 1, ...
    pick = order[np.lexsort((-g[order], rank))][:max_points]
    return np.sort(idx[pick])


# -- frames -------------------------------------------------------------------


@dataclass
class Frame:
    image: ThermalImage
    pyramid: list[np.ndarray]
    points: np.ndarray  # selected tracking points, camera frame
    cloud: np.ndarray  # every in-view LiDAR point, camera frame
    pose: Pose
    K: CameraIntrinsics
    timestamp: int = 0
    _levels: dict = field(default_factory=dict, repr=False)

    @classmethod
    def build(
        cls,
        image: ThermalImage,
        cloud_cam: np.ndarray,
        K: CameraIntrinsics,
        pose: Pose | None = None,
        levels: int = 4,
        max_points: int = 1500,
        pyramid: list[np.ndarray] | None = None,
    ) -> "Frame":
        pyr = pyramid if pyramid is not None else build_pyramid(image, levels)
        cloud_cam = np.asarray(cloud_cam, dtype=float).reshape(-1, 3)
        _, valid = geom.project_points(cloud_cam, K)
        cloud = cloud_cam[valid]
        sel = select_points(cloud, pyr[0], K, max_points)
        return cls(image, pyr, cloud[sel], cloud, pose or Pose(), K, image.timestamp)

    @property
    def num_levels(self) -> int:
        return len(self.pyramid)

    def level_points(self, level: int) -> PointSet:
        if level not in self._levels:
            self._levels[level] = expand_pattern(self.points, self.pyramid[level], self.K.at_level(level))
        return self._levels[level]


@dataclass
class Keyframe(Frame):
    id: int = 0
    bag: object = None  # loop.features.DescriptorBag


def make_keyframe(frame: Frame, kf_id: int) -> Keyframe:
    kf = Keyframe(
        frame.image, frame.pyramid, frame.points, frame.cloud, frame.pose, frame.K, frame.timestamp, id=kf_id
    )
    kf._levels = frame._levels
    return kf


# -- residuals and Jacobians -------------------------------------------------------


def residuals(
    points: np.ndarray,
    X: Pose,
    image: np.ndarray,
    K: CameraIntrinsics,
    reference: np.ndarray,
    a: float = 1.0,
    b: float = 0.0,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """``r = a * I(pi(X p)) + b - reference``; returns (r, valid, q, uv)."""
    q = X.apply(points)
    uv, valid = geom.project_points(q, K, border=BORDER)
    r = np.zeros(len(points))
    r[valid] = a * sample_bilinear_many(image, uv[valid]) + b - reference[valid]
    return r, valid, q, uv


def residual(p_ref, T_rel: Pose, image: np.ndarray, K: CameraIntrinsics, temp_ref: float) -> float | None:
    """Single thermographic residual, ``None`` when the point leaves the view."""
    r, valid, _, _ = residuals(np.asarray(p_ref, dtype=float)[None], T_rel, image, K, np.array([temp_ref]))
    return float(r[0]) if valid[0] else None


def residual_jacobian(q: np.ndarray, uv: np.ndarray, image: np.ndarray, K: CameraIntrinsics) -> np.ndarray:
    """d r / d xi for a left update of X, at transformed points ``q``. Shape (N, 6)."""
    grad = sample_gradient_many(image, uv)
    x, y, z = q[:, 0], q[:, 1], q[:, 2]
    inv_z = 1.0 / z
    gx = grad[:, 0] * K.fx * inv_z
    gy = grad[:, 1] * K.fy * inv_z
    gz = -(gx * x + gy * y) * inv_z
    # Row = g^T [-[q]x | I] with g = dI/dq, i.e. [q x g, g].
    return np.stack([y * gz - z * gy, z * gx - x * gz, x * gy - y * gx, gx, gy, gz], axis=1)


def weighted_cost(r: np.ndarray, valid: np.ndarray, w: np.ndarray, saturation: float) -> float:
    """IRLS objective ``sum w r^2`` with weights frozen at the linearization point.

    Residuals that left the view contribute ``saturation``.
    """
    return float(np.sum(w[valid] * r[valid] ** 2) + (~valid).sum() * saturation)


def robust_cost(r: np.ndarray, valid: np.ndarray, weight: RobustWeight) -> float:
    """Sum of ``w(r) r^2`` over valid residuals; invalid ones cost the saturation value."""
    return float(np.sum(weight.cost(r[valid])) + (~valid).sum() * weight.saturation)


# -- Gauss-Newton engine ------------------------------------------------------------


@dataclass
class TrackParams:
    nu: float = 5.0
    max_iterations: int = 30
    min_update: float = 1e-6
    min_valid_ratio: float = 0.3
    rms_gate: float = 1e9
    max_damping_tries: int = 10


@dataclass
class TrackDiagnostics:
    cost: float = 0.0
    iterations: list[int] = field(default_factory=list)
    valid_ratio: float = 0.0
    inlier_ratio: float = 0.0
    weighted_rms: float = 0.0
    sigma: float = 0.0
    rank_deficient: bool = False
    num_residuals: int = 0
    a: float = 1.0
    b: float = 0.0
    steps: list[tuple[float, float]] = field(default_factory=list)  # frozen-weight cost before/after each accepted step


def _gn_step(J, r, w, lam):
    H = J.T @ (J * w[:, None])
    g = J.T @ (w * r)
    A = H + lam * np.diag(np.diag(H)) if lam > 0 else H
    try:
        return -np.linalg.solve(A, g), H
    except np.linalg.LinAlgError:
        return -np.linalg.lstsq(A, g, rcond=None)[0], H


def _rank_deficient(H: np.ndarray) -> bool:
    ev = np.linalg.eigvalsh(H)
    return bool(ev[-1] <= 0 or ev[0] <= 1e-10 * ev[-1])


def _fit_affine(I: np.ndarray, ref: np.ndarray, w: np.ndarray) -> tuple[float, float]:
    """Weighted least squares for ``a * I + b ~ ref``."""
    sw = w.sum()
    mi = (w @ I) / sw
    mr = (w @ ref) / sw
    var = w @ (I - mi) ** 2
    if var <= 1e-12 * sw:
        return 1.0, float(mr - mi)
    a = float((w @ ((I - mi) * (ref - mr))) / var)
    return a, float(mr - a * mi)


def gauss_newton(
    levels: Sequence[tuple[PointSet, np.ndarray, CameraIntrinsics]],
    X_init: Pose,
    params: TrackParams = TrackParams(),
    affine: bool = False,
    affine_init: tuple[float, float] = (1.0, 0.0),
) -> tuple[Pose, TrackDiagnostics]:
    """Coarse-to-fine IRLS Gauss-Newton with Levenberg fallback.

    ``levels`` is ordered coarse to fine; each entry holds the reference
    point set, target image and intrinsics of that level. With ``affine``,
    pose steps and closed-form (a, b) updates alternate.
    """
    X = X_init
    a, b = affine_init
    diag = TrackDiagnostics()
    for ps, img, K in levels:
        n_total = len(ps.points)
        iters = 0
        if n_total < 10:
            diag.iterations.append(0)
            continue
        lam = 0.0
        for iters in range(1, params.max_iterations + 1):
            r, valid, q, uv = residuals(ps.points, X, img, K, ps.reference, a, b)
            if valid.sum() < 10:
                break
            weight = RobustWeight(params.nu, estimate_sigma(r[valid], params.nu))
            moved_ab = 0.0
            if affine:
                # closed-form photometric update at the current pose
                I = sample_bilinear_many(img, uv[valid])
                ref = ps.reference[valid]
                w_ab = weight(r[valid])
                a_new, b_new = _fit_affine(I, ref, w_ab)
                if a_new > 0 and np.sum(w_ab * (a_new * I + b_new - ref) ** 2) <= np.sum(w_ab * r[valid] ** 2):
                    moved_ab = float(np.hypot(a_new - a, b_new - b))
                    a, b = a_new, b_new
                    r, valid, q, uv = residuals(ps.points, X, img, K, ps.reference, a, b)
                    weight = RobustWeight(params.nu, estimate_sigma(r[valid], params.nu))
            w_all = weight(r)
            E = weighted_cost(r, valid, w_all, weight.saturation)
            J = a * residual_jacobian(q[valid], uv[valid], img, K)
            w = w_all[valid]
            accepted = False
            for _ in range(params.max_damping_tries):
                delta, H = _gn_step(J, r[valid], w, lam)
                X_new = geom.exp(delta) @ X
                r_new, valid_new, _, _ = residuals(ps.points, X_new, img, K, ps.reference, a, b)
                E_new = weighted_cost(r_new, valid_new, w_all, weight.saturation)
                if E_new <= E:
                    accepted = True
                    diag.steps.append((E, E_new))
                    lam = lam / 10.0 if lam > 1e-6 else 0.0
                    break
                lam = max(lam * 10.0, 1e-4)
            step_norm = float(np.linalg.norm(delta)) if accepted else 0.0
            if accepted:
                X = X_new
            if not accepted and moved_ab < params.min_update:
                break
            if step_norm < params.min_update and moved_ab < params.min_update:
                break
        diag.iterations.append(iters)

    # Final statistics at the finest level.
    ps, img, K = levels[-1]
    r, valid, q, uv = residuals(ps.points, X, img, K, ps.reference, a, b)
    n_total = max(len(ps.points), 1)
    diag.num_residuals = int(valid.sum())
    diag.valid_ratio = valid.sum() / n_total
    diag.a, diag.b = a, b
    if valid.sum() >= 10:
        sigma = estimate_sigma(r[valid], params.nu)
        weight = RobustWeight(params.nu, sigma)
        w = weight(r[valid])
        diag.sigma = sigma
        diag.cost = robust_cost(r, valid, weight)
        diag.weighted_rms = float(np.sqrt(np.sum(w * r[valid] ** 2) / np.sum(w)))
        diag.inlier_ratio = float(np.mean(np.abs(r[valid]) < 3.0 * sigma))
        J = residual_jacobian(q[valid], uv[valid], img, K)
        diag.rank_deficient = _rank_deficient(J.T @ (J * w[:, None]))
    else:
        diag.rank_deficient = True
    return X, diag


def _check(diag: TrackDiagnostics, params: TrackParams) -> None:
    if diag.valid_ratio < params.min_valid_ratio:
        raise TrackingLost(f"valid residual ratio {diag.valid_ratio:.2f} below {params.min_valid_ratio}", diag)
    if diag.rank_deficient:
        raise TrackingLost("zero-information Hessian (textureless or no points)", diag)
    if diag.weighted_rms > params.rms_gate:
        raise TrackingLost(f"weighted RMS {diag.weighted_rms:.1f} above gate {params.rms_gate}", diag)


def track(
    frame_prev: Frame,
    cur_pyramid: Sequence[np.ndarray],
    T_init: Pose,
    params: TrackParams = TrackParams(),
    levels: Sequence[int] | None = None,
) -> tuple[Pose, TrackDiagnostics]:
    """Relative pose mapping previous-frame points into the current frame.

    Raises :class:`TrackingLost` when the result is not trustworthy.
    """
    if len(frame_prev.points) < 50:
        raise TrackingLost(f"only {len(frame_prev.points)} points in view", None)
    n = min(frame_prev.num_levels, len(cur_pyramid))
    order = list(levels) if levels is not None else list(range(n - 1, -1, -1))
    data = [(frame_prev.level_points(L), cur_pyramid[L], frame_prev.K.at_level(L)) for L in order]
    X, diag = gauss_newton(data, T_init, params)
    _check(diag, params)
    return X, diag


def window_levels(window: Sequence[Keyframe], cur_pyramid, levels: Sequence[int]):
    data = []
    for L in levels:
        ps = PointSet.concat([kf.level_points(L).transformed(kf.pose) for kf in window])
        data.append((ps, cur_pyramid[L], window[0].K.at_level(L)))
    return data


def refine_local(
    cur_pyramid: Sequence[np.ndarray],
    pose_init: Pose,
    window: Sequence[Keyframe],
    params: TrackParams = TrackParams(),
    levels: Sequence[int] = (0,),
) -> tuple[Pose, TrackDiagnostics]:
    """Refine the current frame's world pose against a window of fixed keyframes.

    Falls back to ``pose_init`` when the refined pose has a higher robust cost.
    """
    if not window:
        raise ValueError("refinement window is empty")
    data = window_levels(window, cur_pyramid, levels)
    X0 = pose_init.inverse()
    X, diag = gauss_newton(data, X0, params)
    ps, img, K = data[-1]
    r0, v0, _, _ = residuals(ps.points, X0, img, K, ps.reference)
    r1, v1, _, _ = residuals(ps.points, X, img, K, ps.reference)
    if v0.sum() >= 10:
        weight = RobustWeight(params.nu, estimate_sigma(r0[v0], params.nu))
        if robust_cost(r1, v1, weight) > robust_cost(r0, v0, weight):
            log.debug("refinement increased cost; keeping tracked pose")
            return pose_init, diag
    return X.inverse(), diag


def visible_ratio(kf: Frame, pose: Pose) -> float:
    """Fraction of the keyframe's tracking points that project into a view at ``pose``."""
    if len(kf.points) == 0:
        return 0.0
    q = geom.relative(pose, kf.pose).apply(kf.points)
    _, valid = geom.project_points(q, kf.K, border=BORDER)
    return float(valid.mean())


def should_create_keyframe(
    pose: Pose,
    last_kf: Frame,
    valid_ratio: float | None = None,
    max_translation: float = 0.5,
    max_rotation_deg: float = 10.0,
    min_valid_ratio: float = 0.6,
) -> bool:
    dt, dr = geom.pose_distance(last_kf.pose, pose)
    if valid_ratio is None:
        valid_ratio = visible_ratio(last_kf, pose)
    return dt > max_translation or np.degrees(dr) > max_rotation_deg or valid_ratio < min_valid_ratio
