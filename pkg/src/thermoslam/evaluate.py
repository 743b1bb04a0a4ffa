"""Absolute trajectory error with time interpolation and rigid/similarity alignment."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import geom


@dataclass
class ATEResult:
    rmse: float
    count: int
    scale: float
    alignment: geom.Pose
    errors: np.ndarray


def interpolate_positions(stamps: np.ndarray, positions: np.ndarray, query: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Linear interpolation of positions at ``query`` stamps inside the sampled range."""
    stamps = np.asarray(stamps, dtype=np.int64)
    query = np.asarray(query, dtype=np.int64)
    inside = (query >= stamps[0]) & (query <= stamps[-1])
    q = query[inside]
    k = np.clip(np.searchsorted(stamps, q, side="right") - 1, 0, len(stamps) - 2) if len(stamps) > 1 else np.zeros(len(q), int)
    if len(stamps) == 1:
        return positions[np.zeros(len(q), int)], inside
    t0, t1 = stamps[k], stamps[k + 1]
    f = ((q - t0) / (t1 - t0).astype(float))[:, None]
    return positions[k] + f * (positions[k + 1] - positions[k]), inside


def evaluate_ate(
    est_stamps,
    est_positions,
    gt_stamps,
    gt_positions,
    align: bool = False,
    scale: bool = False,
    gt_valid=None,
) -> ATEResult:
    """Position RMSE of ``est`` against time-interpolated ``gt``.

    ``gt_valid`` optionally masks ground-truth samples (e.g. unreliable
    fixes); estimates that interpolate from a masked sample are skipped.
    """
    est_stamps = np.asarray(est_stamps, dtype=np.int64)
    gt_stamps = np.asarray(gt_stamps, dtype=np.int64)
    est = np.asarray(est_positions, dtype=float).reshape(-1, 3)
    gt = np.asarray(gt_positions, dtype=float).reshape(-1, 3)
    order = np.argsort(gt_stamps, kind="stable")
    gt_stamps, gt = gt_stamps[order], gt[order]
    ref, inside = interpolate_positions(gt_stamps, gt, est_stamps)
    keep = inside.copy()
    if gt_valid is not None:
        valid = np.asarray(gt_valid, dtype=bool)[order]
        ok, _ = interpolate_positions(gt_stamps, valid[:, None].astype(float), est_stamps)
        keep[inside] = ok[:, 0] >= 1.0
        ref = ref[keep[inside]]
    est = est[keep]
    if len(est) < 2:
        raise ValueError(f"only {len(est)} overlapping samples; need at least 2")
    T, s = geom.Pose(), 1.0
    if align or scale:
        T, s = align_positions(est, ref, scale)
        est = s * T.apply(est) if s != 1.0 else T.apply(est)
    err = np.linalg.norm(est - ref, axis=1)
    return ATEResult(float(np.sqrt(np.mean(err**2))), len(err), s, T, err)


def align_positions(est: np.ndarray, ref: np.ndarray, scale: bool = False) -> tuple[geom.Pose, float]:
    """Umeyama alignment of ``est`` onto ``ref``; centroid-only for a static estimate."""
    if np.linalg.norm(est - est.mean(axis=0)) < 1e-12:
        # Rotation and scale are unobservable from a single point.
        return geom.Pose(np.eye(3), ref.mean(axis=0) - est.mean(axis=0)), 1.0
    T, s = geom.umeyama(est, ref, with_scale=scale)
    # Express as s * (R p + t / s) so callers can apply ``s * T.apply(p)``.
    return geom.Pose(T.R, T.t / s), s
