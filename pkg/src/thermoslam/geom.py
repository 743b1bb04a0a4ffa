"""Rigid-body geometry: SE(3) algebra, pinhole projection and trajectory files.

Twists are 6-vectors ordered ``[w, v]`` (angular in radians, then linear in
meters). Pose updates are left-multiplicative: ``T_new = exp(xi) @ T``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.spatial.transform import Rotation

SMALL_ANGLE = 1e-8
# Below this, (t - sin t) / t^3 and the log's V^-1 coefficient lose digits to
# cancellation, so their series are used instead.
SERIES_ANGLE = 1e-2
ORTHO_TOL = 1e-7
DEFAULT_Z_MIN = 0.1


class BranchAmbiguityError(ValueError):
    """Raised by :func:`log` when the rotation angle is (numerically) pi."""


def hat(w: np.ndarray) -> np.ndarray:
    """Skew-symmetric matrix such that ``hat(w) @ p == cross(w, p)``."""
    x, y, z = w
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def vee(m: np.ndarray) -> np.ndarray:
    return np.array([m[2, 1], m[0, 2], m[1, 0]])


def nearest_rotation(m: np.ndarray) -> np.ndarray:
    u, _, vt = np.linalg.svd(m)
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform ``p -> R @ p + t``. Immutable."""

    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.asarray(self.R, dtype=float).reshape(3, 3)
        t = np.asarray(self.t, dtype=float).reshape(3)
        object.__setattr__(self, "R", _freeze(R))
        object.__setattr__(self, "t", _freeze(t))

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "Pose":
        m = np.asarray(m, dtype=float)
        return cls(m[:3, :3], m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.R
        m[:3, 3] = self.t
        return m

    def inverse(self) -> "Pose":
        Rt = self.R.T
        return Pose(Rt, -Rt @ self.t)

    def __matmul__(self, other: "Pose") -> "Pose":
        R = self.R @ other.R
        if np.linalg.norm(R.T @ R - np.eye(3)) > ORTHO_TOL:
            R = nearest_rotation(R)
        return Pose(R, self.R @ other.t + self.t)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform a single 3-vector or an (N, 3) array of points."""
        points = np.asarray(points, dtype=float)
        return points @ self.R.T + self.t

    def allclose(self, other: "Pose", atol: float = 1e-9) -> bool:
        return bool(
            np.allclose(self.R, other.R, atol=atol, rtol=0)
            and np.allclose(self.t, other.t, atol=atol, rtol=0)
        )

    def rotation_angle(self) -> float:
        c = np.clip((np.trace(self.R) - 1.0) / 2.0, -1.0, 1.0)
        s = np.linalg.norm(vee(self.R - self.R.T)) / 2.0
        return float(np.arctan2(s, c))

    def __repr__(self) -> str:
        w = Rotation.from_matrix(self.R).as_rotvec()
        return f"Pose(rotvec={np.round(w, 6).tolist()}, t={np.round(self.t, 6).tolist()})"


def _coefficients(theta: float) -> tuple[float, float, float]:
    """Return (sin t / t, (1 - cos t) / t^2, (t - sin t) / t^3)."""
    t2 = theta * theta
    if theta < SMALL_ANGLE:
        return 1.0 - t2 / 6.0, 0.5 - t2 / 24.0, 1.0 / 6.0 - t2 / 120.0
    a = np.sin(theta) / theta
    half = np.sin(0.5 * theta) / theta
    b = 2.0 * half * half  # cancellation-free form of (1 - cos t) / t^2
    if theta < SERIES_ANGLE:
        c = 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0
    else:
        c = (theta - np.sin(theta)) / (t2 * theta)
    return a, b, c


def so3_exp(w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    theta = float(np.linalg.norm(w))
    a, b, _ = _coefficients(theta)
    W = hat(w)
    return np.eye(3) + a * W + b * (W @ W)


def so3_log(R: np.ndarray) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    axis2 = vee(R - R.T)  # 2 sin(theta) * axis
    s = np.linalg.norm(axis2) / 2.0
    c = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    theta = float(np.arctan2(s, c))
    if np.pi - theta < 1e-9:
        raise BranchAmbiguityError("rotation angle is pi; log is not unique")
    if theta < SMALL_ANGLE:
        return axis2 / 2.0 * (1.0 + theta * theta / 6.0)
    if theta < np.pi - 1e-3:
        return axis2 * (theta / (2.0 * s))
    # Near pi the antisymmetric part vanishes; recover the axis from the symmetric part.
    S = (R + R.T) / 2.0 - c * np.eye(3)
    i = int(np.argmax(np.diag(S)))
    axis = S[:, i] / np.sqrt(S[i, i])
    if axis @ axis2 < 0:
        axis = -axis
    return axis / np.linalg.norm(axis) * theta


def exp(xi: Sequence[float]) -> Pose:
    """Closed-form SE(3) exponential of a twist ``[w, v]``."""
    xi = np.asarray(xi, dtype=float).reshape(6)
    w, v = xi[:3], xi[3:]
    theta = float(np.linalg.norm(w))
    a, b, c = _coefficients(theta)
    W = hat(w)
    WW = W @ W
    R = np.eye(3) + a * W + b * WW
    V = np.eye(3) + b * W + c * WW
    return Pose(R, V @ v)


def log(T: Pose) -> np.ndarray:
    """Principal-branch SE(3) logarithm, returns ``[w, v]``."""
    w = so3_log(T.R)
    theta = float(np.linalg.norm(w))
    W = hat(w)
    if theta < SERIES_ANGLE:
        t2 = theta * theta
        k = 1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0
    else:
        a, b, _ = _coefficients(theta)
        k = (1.0 - a / (2.0 * b)) / (theta * theta)
    V_inv = np.eye(3) - 0.5 * W + k * (W @ W)
    return np.concatenate([w, V_inv @ T.t])


def compose(a: Pose, b: Pose) -> Pose:
    return a @ b


def inverse(T: Pose) -> Pose:
    return T.inverse()


def relative(T_n: Pose, T_m: Pose) -> Pose:
    """Pose of frame m expressed in frame n: ``inverse(T_n) @ T_m``."""
    return T_n.inverse() @ T_m


def transform(T: Pose, p: np.ndarray) -> np.ndarray:
    return T.apply(p)


def pose_distance(a: Pose, b: Pose) -> tuple[float, float]:
    """Translation (m) and rotation (rad) of ``relative(a, b)``."""
    d = relative(a, b)
    return float(np.linalg.norm(d.t)), d.rotation_angle()


def umeyama(src: np.ndarray, dst: np.ndarray, with_scale: bool = False) -> tuple[Pose, float]:
    """Least-squares ``dst ~ s * R @ src + t``. Returns (Pose(R, t), s)."""
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    if src.shape != dst.shape or len(src) < 3:
        raise ValueError("need at least 3 corresponding points")
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    xs, xd = src - mu_s, dst - mu_d
    U, S, Vt = np.linalg.svd(xd.T @ xs / len(src))
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U) * np.linalg.det(Vt)) or 1.0])
    R = U @ D @ Vt
    var = np.mean(np.sum(xs**2, axis=1))
    s = float(np.trace(np.diag(S) @ D) / var) if with_scale and var > 0 else 1.0
    return Pose(R, mu_d - s * R @ mu_s), s


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")

    def at_level(self, level: int) -> "CameraIntrinsics":
        """Intrinsics for pyramid level ``level`` built by 2x2 box averaging."""
        s = 2.0**level
        return CameraIntrinsics(
            self.fx / s,
            self.fy / s,
            (self.cx + 0.5) / s - 0.5,
            (self.cy + 0.5) / s - 0.5,
            self.width >> level,
            self.height >> level,
        )

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


def project_points(
    points: np.ndarray,
    K: CameraIntrinsics,
    border: float = 0.0,
    z_min: float = DEFAULT_Z_MIN,
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized projection. Returns pixel coordinates (N, 2) and a validity mask."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    z = points[:, 2]
    front = z > z_min
    zs = np.where(front, z, 1.0)
    u = points[:, 0] * K.fx / zs + K.cx
    v = points[:, 1] * K.fy / zs + K.cy
    valid = (
        front
        & (u >= border)
        & (u <= K.width - 1 - border)
        & (v >= border)
        & (v <= K.height - 1 - border)
    )
    return np.stack([u, v], axis=1), valid


def project(
    p: Sequence[float], K: CameraIntrinsics, border: float = 0.0, z_min: float = DEFAULT_Z_MIN
) -> np.ndarray | None:
    """Project one camera-frame point; ``None`` when it is out of view."""
    uv, valid = project_points(np.asarray(p, dtype=float)[None], K, border, z_min)
    return uv[0] if valid[0] else None


def unproject(u: Sequence[float], depth: float | np.ndarray, K: CameraIntrinsics) -> np.ndarray:
    """Back-project pixel(s) at the given depth. Accepts (2,) or (N, 2) pixels."""
    depth = np.asarray(depth, dtype=float)
    if np.any(depth <= 0):
        raise ValueError("depth must be positive")
    u = np.asarray(u, dtype=float)
    x = (u[..., 0] - K.cx) / K.fx * depth
    y = (u[..., 1] - K.cy) / K.fy * depth
    return np.stack([x, y, np.broadcast_to(depth, x.shape)], axis=-1)


def projection_jacobian(points: np.ndarray, K: CameraIntrinsics) -> np.ndarray:
    """d(pixel)/d(point) for each point, shape (N, 2, 3)."""
    x, y, z = points[:, 0], points[:, 1], points[:, 2]
    iz = 1.0 / z
    J = np.zeros((len(points), 2, 3))
    J[:, 0, 0] = K.fx * iz
    J[:, 0, 2] = -K.fx * x * iz * iz
    J[:, 1, 1] = K.fy * iz
    J[:, 1, 2] = -K.fy * y * iz * iz
    return J


def point_jacobian(points: np.ndarray) -> np.ndarray:
    """d(exp(xi) q)/d(xi) at xi = 0 for q in ``points``, shape (N, 3, 6)."""
    n = len(points)
    J = np.zeros((n, 3, 6))
    x, y, z = points[:, 0], points[:, 1], points[:, 2]
    # -[q]x
    J[:, 0, 1], J[:, 0, 2] = z, -y
    J[:, 1, 0], J[:, 1, 2] = -z, x
    J[:, 2, 0], J[:, 2, 1] = y, -x
    J[:, 0, 3] = J[:, 1, 4] = J[:, 2, 5] = 1.0
    return J


def pixel_jacobian(points: np.ndarray, K: CameraIntrinsics) -> np.ndarray:
    """d pi(exp(xi) q) / d xi at xi = 0, shape (N, 2, 6)."""
    return np.einsum("nij,njk->nik", projection_jacobian(points, K), point_jacobian(points))


# -- trajectory files -------------------------------------------------------


def format_timestamp(ns: int) -> str:
    ns = int(ns)
    sign = "-" if ns < 0 else ""
    ns = abs(ns)
    return f"{sign}{ns // 1_000_000_000}.{ns % 1_000_000_000:09d}"


def parse_timestamp(text: str) -> int:
    """Parse seconds text into integer nanoseconds without float rounding."""
    text = text.strip()
    sign = -1 if text.startswith("-") else 1
    text = text.lstrip("+-")
    if "e" in text.lower():
        return sign * int(round(float(text) * 1e9))
    whole, _, frac = text.partition(".")
    frac = (frac + "000000000")[:9]
    return sign * (int(whole or 0) * 1_000_000_000 + int(frac))


def write_tum(path: str | Path, stamps: Iterable[int], poses: Iterable[Pose]) -> None:
    lines = []
    for ns, T in zip(stamps, poses):
        q = Rotation.from_matrix(T.R).as_quat()  # x, y, z, w
        if q[3] < 0:
            q = -q
        vals = " ".join(f"{x:.9f}" for x in (*T.t, *q))
        lines.append(f"{format_timestamp(ns)} {vals}\n")
    Path(path).write_text("".join(lines))


def read_tum(path: str | Path) -> tuple[np.ndarray, list[Pose], np.ndarray]:
    """Read a TUM trajectory. An optional 9th column is a 0/1 validity mask."""
    stamps, poses, mask = [], [], []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.replace(",", " ").split()
        if len(parts) not in (8, 9):
            raise ValueError(f"{path}:{lineno}: expected 8 or 9 columns, got {len(parts)}")
        stamps.append(parse_timestamp(parts[0]))
        vals = [float(x) for x in parts[1:8]]
        R = Rotation.from_quat(vals[3:7]).as_matrix()
        poses.append(Pose(R, vals[:3]))
        mask.append(bool(int(float(parts[8]))) if len(parts) == 9 else True)
    return np.array(stamps, dtype=np.int64), poses, np.array(mask, dtype=bool)
