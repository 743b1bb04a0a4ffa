"""Loop detection, bias-aware loop alignment and the loop acceptance gate."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from . import geom
from .features import DescriptorBag, match_descriptors, similarity
from .geom import Pose
from .odom import Keyframe, TrackDiagnostics, TrackParams, gauss_newton

log = logging.getLogger(__name__)


class AlignmentFailed(RuntimeError):
    pass


@dataclass
class LoopParams:
    t_recent: float = 30.0  # seconds
    eta_min: float = 0.75
    rho_min: float = 0.4
    eps: float = 0.05
    max_rounds: int = 50
    min_inlier_ratio: float = 0.3
    gain_range: tuple[float, float] = (0.5, 2.0)
    far_init_distance: float = 5.0
    ransac_iterations: int = 200
    ransac_threshold: float = 0.1  # meters
    seed: int = 0


# -- detection ----------------------------------------------------------------


@dataclass
class LoopCandidate:
    keyframe: Keyframe
    eta: float
    score: float
    common_ratio: float


def _bag(kf: Keyframe) -> DescriptorBag | None:
    bag = kf.bag
    return bag if bag is not None and bag.usable else None


def detect_loop(cur: Keyframe, database: Sequence[Keyframe], params: LoopParams = LoopParams()) -> LoopCandidate | None:
    """Best old keyframe by normalized similarity, or ``None``.

    The score against each candidate is normalized by the best score among
    recent keyframes (those within ``t_recent`` of ``cur``). Candidates must
    also share at least ``rho_min`` of the common-word count of the
    best-sharing candidate.
    """
    qbag = _bag(cur)
    if qbag is None:
        return None
    window = params.t_recent * 1e9
    recent, old = [], []
    for kf in database:
        if kf is cur or kf.id == cur.id or _bag(kf) is None:
            continue
        (recent if abs(kf.timestamp - cur.timestamp) < window else old).append(kf)
    if not old:
        return None
    norm = max((similarity(qbag.vector, kf.bag.vector) for kf in recent), default=0.0)
    if norm <= 1e-12:
        log.debug("keyframe %d: no recent keyframe to normalize against", cur.id)
        return None
    qwords = set(qbag.vector)
    common = np.array([len(qwords & set(kf.bag.vector)) for kf in old], dtype=float)
    if common.max() <= 0:
        return None
    scores = np.array([similarity(qbag.vector, kf.bag.vector) for kf in old])
    ratios = common / common.max()
    eta = scores / norm
    eta[ratios < params.rho_min] = -np.inf
    best = int(np.argmax(eta))
    if eta[best] < params.eta_min:
        return None
    return LoopCandidate(old[best], float(eta[best]), float(scores[best]), float(ratios[best]))


# -- alignment ----------------------------------------------------------------


@dataclass
class AlignResult:
    pose: Pose  # maps reference-frame points into the target frame
    a: float
    b: float
    diagnostics: TrackDiagnostics


def align_affine(
    ref: Keyframe,
    target_pyramid: Sequence[np.ndarray],
    T_init: Pose,
    params: LoopParams = LoopParams(),
    estimate_affine: bool = True,
    track_params: TrackParams | None = None,
) -> AlignResult:
    """Align ``ref`` points against a target image under ``a * I + b``.

    Pose steps and closed-form (a, b) updates alternate; ``a`` starts at 1 and
    ``b`` at 0. With ``estimate_affine=False`` the plain residual is used.
    """
    tp = track_params or TrackParams(max_iterations=params.max_rounds)
    n = min(ref.num_levels, len(target_pyramid))
    data = [(ref.level_points(L), target_pyramid[L], ref.K.at_level(L)) for L in range(n - 1, -1, -1)]
    X, diag = gauss_newton(data, T_init, tp, affine=estimate_affine)
    if not np.all(np.isfinite(X.matrix())) or not params.gain_range[0] <= diag.a <= params.gain_range[1]:
        raise AlignmentFailed(f"alignment diverged (a = {diag.a:.3f})")
    if diag.rank_deficient:
        raise AlignmentFailed("target carries no gradient information")
    if diag.valid_ratio < params.min_inlier_ratio or diag.inlier_ratio < params.min_inlier_ratio:
        raise AlignmentFailed(f"inlier ratio {min(diag.valid_ratio, diag.inlier_ratio):.2f} too low")
    return AlignResult(X, diag.a, diag.b, diag)


def cross_validate(T_c_to_kf: Pose, T_kf_to_c: Pose, eps: float = 0.05) -> bool:
    return consistency(T_c_to_kf, T_kf_to_c) < eps


def consistency(T_c_to_kf: Pose, T_kf_to_c: Pose) -> float:
    return float(np.linalg.norm(geom.log(T_kf_to_c @ T_c_to_kf)))


# -- initialization -----------------------------------------------------------


def keypoint_depths(kf: Keyframe, keypoints: np.ndarray, radius: float = 3.0) -> np.ndarray:
    """3-D camera-frame points for keypoints with a LiDAR return within ``radius`` px."""
    out = np.full((len(keypoints), 3), np.nan)
    if len(kf.cloud) == 0 or len(keypoints) == 0:
        return out
    uv, valid = geom.project_points(kf.cloud, kf.K)
    cloud = kf.cloud[valid]
    dist, idx = cKDTree(uv[valid]).query(keypoints, distance_upper_bound=radius)
    ok = np.isfinite(dist)
    if ok.any():
        out[ok] = geom.unproject(keypoints[ok], cloud[idx[ok], 2], kf.K)
    return out


def ransac_rigid(
    src: np.ndarray, dst: np.ndarray, threshold: float, iterations: int, seed: int = 0
) -> tuple[Pose, np.ndarray]:
    """3-point RANSAC for ``dst ~ T src``, refit on the inliers."""
    n = len(src)
    if n < 3:
        raise AlignmentFailed(f"only {n} 3-D correspondences")
    rng = np.random.default_rng(seed)
    best = np.zeros(n, dtype=bool)
    for _ in range(iterations):
        pick = rng.choice(n, 3, replace=False)
        try:
            T, _ = geom.umeyama(src[pick], dst[pick])
        except (ValueError, np.linalg.LinAlgError):
            continue
        inl = np.linalg.norm(T.apply(src) - dst, axis=1) < threshold
        if inl.sum() > best.sum():
            best = inl
    if best.sum() < 3:
        raise AlignmentFailed("no consistent 3-D correspondence set")
    T, _ = geom.umeyama(src[best], dst[best])
    return T, best


def initial_alignment(
    ref: Keyframe, target: Keyframe, params: LoopParams = LoopParams(), distance: float | None = None
) -> Pose:
    """Starting pose mapping ``ref`` points into ``target`` for loop alignment.

    Identity for nearby pairs (by odometric ``distance``, defaulting to the
    keyframe poses); descriptor matches lifted to 3-D with LiDAR depth and a
    RANSAC rigid fit otherwise.
    """
    if distance is None:
        distance, _ = geom.pose_distance(ref.pose, target.pose)
    if distance < params.far_init_distance:
        return Pose()
    if ref.bag is None or target.bag is None:
        raise AlignmentFailed("keyframes carry no descriptors")
    m = match_descriptors(ref.bag.descriptors, target.bag.descriptors)
    p_ref = keypoint_depths(ref, ref.bag.keypoints[m[:, 0]])
    p_tgt = keypoint_depths(target, target.bag.keypoints[m[:, 1]])
    ok = np.all(np.isfinite(p_ref), axis=1) & np.all(np.isfinite(p_tgt), axis=1)
    T, inl = ransac_rigid(p_ref[ok], p_tgt[ok], params.ransac_threshold, params.ransac_iterations, params.seed)
    log.debug("descriptor initialization: %d/%d inliers", inl.sum(), ok.sum())
    return T


# -- full check ---------------------------------------------------------------


@dataclass
class LoopEvent:
    query_ts: int
    candidate_ts: int
    eta: float
    common_ratio: float
    a: float
    b: float
    accepted: bool
    consistency: float
    query_id: int = -1
    candidate_id: int = -1
    relative: Pose | None = None  # candidate -> query frame, when aligned
    reverse: Pose | None = None  # query -> candidate frame, when aligned
    inliers: int = 0


def verify_loop(
    cur: Keyframe, cand: LoopCandidate, params: LoopParams = LoopParams(), distance: float | None = None
) -> LoopEvent:
    """Forward and reverse bias-aware alignment plus the consistency gate."""
    kf = cand.keyframe
    event = LoopEvent(cur.timestamp, kf.timestamp, cand.eta, cand.common_ratio, 1.0, 0.0, False, np.inf, cur.id, kf.id)
    try:
        T0 = initial_alignment(kf, cur, params, distance)
        fwd = align_affine(kf, cur.pyramid, T0, params)  # kf points -> current frame
        rev = align_affine(cur, kf.pyramid, fwd.pose.inverse(), params)  # current points -> kf frame
    except AlignmentFailed as exc:
        log.info("loop %d -> %d: alignment failed (%s)", cur.id, kf.id, exc)
        return event
    event.a, event.b = fwd.a, fwd.b
    event.consistency = consistency(fwd.pose, rev.pose)
    event.accepted = event.consistency < params.eps
    event.relative = fwd.pose
    event.reverse = rev.pose
    event.inliers = int(round(fwd.diagnostics.num_residuals * fwd.diagnostics.inlier_ratio))
    return event


LOOP_FIELDS = ["query_ts", "candidate_ts", "eta", "common_ratio", "a", "b", "accepted", "consistency"]


def write_loop_events(path: str | Path, events: Sequence[LoopEvent]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOOP_FIELDS)
        for e in events:
            w.writerow(
                [e.query_ts, e.candidate_ts, f"{e.eta:.6f}", f"{e.common_ratio:.6f}", f"{e.a:.6f}", f"{e.b:.4f}",
                 int(e.accepted), f"{e.consistency:.6g}"]
            )
