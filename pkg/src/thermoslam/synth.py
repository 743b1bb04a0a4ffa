"""Procedural thermographic scenes, ray-cast thermal/LiDAR rendering, datasets.

World frame: z up. Cameras use x right, y down, z forward; the LiDAR uses
x forward, y left, z up.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.spatial.transform import Rotation

from . import geom
from .calib import BoardGeometry
from .geom import CameraIntrinsics, Pose
from .imgproc import RawToCelsius, ThermalImage

log = logging.getLogger(__name__)

# Columns are the camera axes expressed in a z-up body frame looking along +x.
BODY_FROM_CAM = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])
VLP16_ELEVATIONS = np.radians(np.arange(-15.0, 16.0, 2.0))
SKY_CELSIUS = -10.0
MAX_RANGE = 100.0


# -- textures -----------------------------------------------------------------


@dataclass
class Texture:
    """Smooth temperature field over surface coordinates (s1, s2) in meters."""

    base: float = 15.0
    gradient: tuple[float, float] = (0.0, 0.0)
    waves: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))  # k1, k2, amp, phase
    patches: np.ndarray = field(default_factory=lambda: np.zeros((0, 6)))  # c1, c2, h1, h2, amp, soft
    checker: tuple[float, float, float] | None = None  # square, amplitude, softness

    def __call__(self, s1: np.ndarray, s2: np.ndarray) -> np.ndarray:
        T = self.base + self.gradient[0] * s1 + self.gradient[1] * s2
        for k1, k2, amp, ph in self.waves:
            T = T + amp * np.sin(k1 * s1 + k2 * s2 + ph)
        for c1, c2, h1, h2, amp, soft in self.patches:
            near = (np.abs(s1 - c1) < h1 + 6 * soft) & (np.abs(s2 - c2) < h2 + 6 * soft)
            if not near.any():
                continue
            a = s1[near] - c1
            b = s2[near] - c2
            box = (
                0.25
                * (np.tanh((a + h1) / soft) - np.tanh((a - h1) / soft))
                * (np.tanh((b + h2) / soft) - np.tanh((b - h2) / soft))
            )
            T[near] = T[near] + amp * box
        if self.checker is not None:
            sq, amp, soft = self.checker
            sgn = np.tanh(np.sin(np.pi * s1 / sq) / soft) * np.tanh(np.sin(np.pi * s2 / sq) / soft)
            T = T + amp * sgn
        return T

    @classmethod
    def random(
        cls,
        rng: np.random.Generator,
        size: tuple[float, float],
        base: float | None = None,
        patch_density: float = 0.6,
        softness: float = 0.12,
        fixture_density: float = 0.5,
        fixture_softness: float = 0.03,
    ) -> "Texture":
        """Waves plus soft warm/cold patches and smaller, crisper fixtures."""
        n_waves = 6
        lam = rng.uniform(0.8, 3.0, n_waves)
        ang = rng.uniform(0, np.pi, n_waves)
        k = 2 * np.pi / lam
        waves = np.stack(
            [k * np.cos(ang), k * np.sin(ang), rng.uniform(0.4, 1.2, n_waves), rng.uniform(0, 2 * np.pi, n_waves)],
            axis=1,
        )
        n_patch = int(rng.poisson(patch_density * size[0] * size[1]))
        n_fix = int(rng.poisson(fixture_density * size[0] * size[1]))

        def blobs(n, half, amp, soft):
            return np.stack(
                [
                    rng.uniform(0, size[0], n),
                    rng.uniform(0, size[1], n),
                    rng.uniform(*half, n),
                    rng.uniform(*half, n),
                    rng.choice([-1.0, 1.0], n) * rng.uniform(*amp, n),
                    np.full(n, soft),
                ],
                axis=1,
            )

        patches = np.concatenate(
            [
                blobs(n_patch, (0.08, 0.35), (2.0, 6.0), softness),
                blobs(n_fix, (0.04, 0.15), (3.0, 8.0), fixture_softness),
            ]
        )
        return cls(
            base=float(rng.uniform(10.0, 20.0)) if base is None else base + float(rng.normal(0.0, 0.5)),
            gradient=tuple(rng.uniform(-0.15, 0.15, 2)),
            waves=waves,
            patches=patches,
        )


@dataclass
class Surface:
    """Planar rectangle ``origin + s1 * e1 + s2 * e2`` with s in [0, extent]."""

    origin: np.ndarray
    e1: np.ndarray
    e2: np.ndarray
    extent: tuple[float, float]
    texture: Texture

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=float)
        self.e1 = np.asarray(self.e1, dtype=float) / np.linalg.norm(self.e1)
        self.e2 = np.asarray(self.e2, dtype=float) / np.linalg.norm(self.e2)
        self.normal = np.cross(self.e1, self.e2)

    def temperature_at(self, points: np.ndarray) -> np.ndarray:
        rel = np.asarray(points) - self.origin
        return self.texture(rel @ self.e1, rel @ self.e2)


def rectangle(corner, e1, e2, l1, l2, texture) -> Surface:
    return Surface(corner, e1, e2, (l1, l2), texture)


def box_surfaces(
    lo, hi, rng: np.random.Generator, base: float = 15.0, skip: Sequence[str] = ()
) -> list[Surface]:
    """Faces of an axis-aligned box with random textures around ``base`` Celsius."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    dx, dy, dz = hi - lo
    X, Y, Z = np.eye(3)
    faces = {
        "xmin": (lo, Y, Z, dy, dz),
        "xmax": (np.array([hi[0], lo[1], lo[2]]), Y, Z, dy, dz),
        "ymin": (lo, X, Z, dx, dz),
        "ymax": (np.array([lo[0], hi[1], lo[2]]), X, Z, dx, dz),
        "zmin": (lo, X, Y, dx, dy),
        "zmax": (np.array([lo[0], lo[1], hi[2]]), X, Y, dx, dy),
    }
    out = []
    for name, (o, a, b, la, lb) in faces.items():
        if name in skip:
            continue
        out.append(rectangle(o, a, b, la, lb, Texture.random(rng, (la, lb), base=base)))
    return out


@dataclass
class ThermoScene:
    surfaces: list[Surface]
    seed: int = 0
    dynamic: list[list[Surface]] = field(default_factory=list)

    def surfaces_at(self, frame: int | None = None) -> list[Surface]:
        if frame is None or not self.dynamic:
            return self.surfaces
        return self.surfaces + self.dynamic[frame % len(self.dynamic)]


def raycast(surfaces: Sequence[Surface], origin: np.ndarray, dirs: np.ndarray, near: float = 1e-3):
    """Nearest hit per ray: returns (t, surface index or -1)."""
    n = len(dirs)
    best_t = np.full(n, np.inf)
    best_s = np.full(n, -1, dtype=np.int64)
    for i, s in enumerate(surfaces):
        denom = dirs @ s.normal
        num = (s.origin - origin) @ s.normal
        with np.errstate(divide="ignore", invalid="ignore"):
            t = num / denom
        cand = (t > near) & (t < best_t) & (np.abs(denom) > 1e-12)
        if not cand.any():
            continue
        idx = np.nonzero(cand)[0]
        hit = origin + t[idx, None] * dirs[idx] - s.origin
        a = hit @ s.e1
        b = hit @ s.e2
        inside = (a >= 0) & (a <= s.extent[0]) & (b >= 0) & (b <= s.extent[1])
        idx = idx[inside]
        best_t[idx] = t[idx]
        best_s[idx] = i
    return best_t, best_s


def shade(surfaces: Sequence[Surface], points: np.ndarray, index: np.ndarray) -> np.ndarray:
    T = np.full(len(points), SKY_CELSIUS)
    for i, s in enumerate(surfaces):
        m = index == i
        if m.any():
            T[m] = s.temperature_at(points[m])
    return T


def render_celsius(scene: ThermoScene, pose: Pose, K: CameraIntrinsics, frame: int | None = None) -> np.ndarray:
    """Temperature field seen through each pixel center, shape (height, width)."""
    v, u = np.mgrid[0 : K.height, 0 : K.width]
    d_cam = np.stack([(u.ravel() - K.cx) / K.fx, (v.ravel() - K.cy) / K.fy, np.ones(u.size)], axis=1)
    dirs = d_cam @ pose.R.T
    surfaces = scene.surfaces_at(frame)
    t, idx = raycast(surfaces, pose.t, dirs)
    hits = pose.t + np.where(np.isfinite(t), t, 0.0)[:, None] * dirs
    return shade(surfaces, hits, idx).reshape(K.height, K.width)


def render_thermal(
    scene: ThermoScene,
    pose: Pose,
    K: CameraIntrinsics,
    conv: RawToCelsius = RawToCelsius(),
    timestamp: int = 0,
    frame: int | None = None,
) -> ThermalImage:
    """14-bit raw thermal image of the scene from camera pose ``pose`` (camera -> world)."""
    return ThermalImage(conv.to_raw(render_celsius(scene, pose, K, frame)), timestamp)


def render_lidar(
    scene: ThermoScene,
    pose: Pose,
    elevations: np.ndarray = VLP16_ELEVATIONS,
    azimuth_steps: int = 1800,
    noise: float = 0.0,
    rng: np.random.Generator | None = None,
    frame: int | None = None,
    max_range: float = MAX_RANGE,
) -> np.ndarray:
    """Spinning multi-ring scan from LiDAR pose ``pose``; points in the LiDAR frame."""
    az = np.arange(azimuth_steps) * (2 * np.pi / azimuth_steps)
    el, az = np.meshgrid(elevations, az, indexing="ij")
    d = np.stack([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)], axis=-1).reshape(-1, 3)
    t, idx = raycast(scene.surfaces_at(frame), pose.t, d @ pose.R.T)
    ok = (idx >= 0) & (t <= max_range)
    rng_ = t[ok]
    if noise > 0:
        rng = rng if rng is not None else np.random.default_rng(0)
        rng_ = rng_ + rng.normal(0.0, noise, rng_.size)
    return d[ok] * rng_[:, None]


# -- trajectories -------------------------------------------------------------


@dataclass
class ScriptedTrajectory:
    stamps: np.ndarray  # int64 ns, strictly increasing
    poses: list[Pose]

    def __post_init__(self):
        self.stamps = np.asarray(self.stamps, dtype=np.int64)
        if np.any(np.diff(self.stamps) <= 0):
            raise ValueError("timestamps must be strictly increasing")
        if len(self.stamps) != len(self.poses):
            raise ValueError("stamps and poses differ in length")

    def __len__(self) -> int:
        return len(self.poses)

    def at(self, stamp: int) -> Pose:
        """Linear translation and geodesic rotation interpolation."""
        i = int(np.searchsorted(self.stamps, stamp, side="right")) - 1
        if i < 0 or stamp > self.stamps[-1]:
            raise ValueError("timestamp outside trajectory")
        if i == len(self.stamps) - 1:
            return self.poses[-1]
        a, b = self.poses[i], self.poses[i + 1]
        s = (stamp - self.stamps[i]) / (self.stamps[i + 1] - self.stamps[i])
        dR = geom.so3_exp(s * geom.so3_log(a.R.T @ b.R))
        return Pose(a.R @ dR, (1 - s) * a.t + s * b.t)


def camera_pose(position, yaw: float, pitch: float = 0.0, roll: float = 0.0) -> Pose:
    """Camera-to-world pose for a body at ``position`` with z-up yaw/pitch/roll."""
    R_body = Rotation.from_euler("ZYX", [yaw, pitch, roll]).as_matrix()
    return Pose(R_body @ BODY_FROM_CAM, position)


# -- presets ------------------------------------------------------------------


@dataclass
class SceneConfig:
    preset: str = "corridor-loop"
    seed: int = 1
    frames: int = 0
    width: int = 320
    height: int = 256
    fx: float = 160.0
    fy: float = 160.0
    cx: float = -1.0
    cy: float = -1.0
    lidar_noise: float = 0.0
    azimuth_steps: int = 1800
    frame_period_ms: float = 200.0
    step: float = 0.1
    start_ns: int = 1_000_000_000
    raw_scale: float = 0.04
    raw_offset: float = -273.15
    extrinsic_error_deg: float = 1.0
    extrinsic_error_m: float = 0.02
    vocabulary_images: int = 30
    corner_noise: float = 0.0  # pixels

    def intrinsics(self) -> CameraIntrinsics:
        cx = (self.width - 1) / 2.0 if self.cx < 0 else self.cx
        cy = (self.height - 1) / 2.0 if self.cy < 0 else self.cy
        return CameraIntrinsics(self.fx, self.fy, cx, cy, self.width, self.height)

    def conv(self) -> RawToCelsius:
        return RawToCelsius(self.raw_scale, self.raw_offset)


def parse_scene_config(text: str) -> SceneConfig:
    """Parse ``key = value`` lines (``#`` comments). Unknown keys are rejected."""
    known = {f.name: f for f in fields(SceneConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
        typ = type(getattr(SceneConfig(), key))
        values[key] = typ(val) if typ is not int else int(float(val))
    return SceneConfig(**values)


def default_extrinsic() -> Pose:
    """Ground-truth camera -> LiDAR transform of the synthetic rig.

    The LiDAR sits 10 cm above and 5 cm behind the camera, slightly rotated.
    """
    lidar_to_cam = Pose(BODY_FROM_CAM.T @ geom.so3_exp([0.010, -0.015, 0.020]), [0.03, -0.10, -0.05])
    return lidar_to_cam.inverse()


@dataclass
class Preset:
    scene: ThermoScene
    trajectory: ScriptedTrajectory
    extrinsic: Pose
    board: BoardGeometry | None = None
    board_poses: list[Pose] | None = None  # board -> world per frame


def _stamps(cfg: SceneConfig, n: int) -> np.ndarray:
    period = int(round(cfg.frame_period_ms * 1e6))
    return cfg.start_ns + period * np.arange(n, dtype=np.int64)


def tunnel_preset(cfg: SceneConfig) -> Preset:
    rng = np.random.default_rng(cfg.seed)
    length, width, height = 40.0, 3.0, 2.6
    surfaces = box_surfaces([-2.0, -width / 2, 0.0], [length, width / 2, height], rng)
    # Pillars and cabinets along the walls for depth structure.
    for x in np.arange(3.0, length - 4, 4.0):
        y0 = width / 2 - 0.35 if rng.random() < 0.5 else -width / 2
        surfaces += box_surfaces([x, y0, 0.0], [x + 0.5, y0 + 0.35, rng.uniform(1.0, 2.2)], rng, skip=("zmin",))
    n = cfg.frames or 100
    poses = []
    for i in range(n):
        s = i * cfg.step
        poses.append(
            camera_pose(
                [0.5 + s, 0.2 * np.sin(0.15 * s), 1.25 + 0.05 * np.sin(0.4 * s)],
                yaw=0.06 * np.sin(0.3 * s),
                pitch=0.03 * np.sin(0.5 * s),
                roll=0.02 * np.sin(0.7 * s),
            )
        )
    return Preset(ThermoScene(surfaces, cfg.seed), ScriptedTrajectory(_stamps(cfg, n), poses), default_extrinsic())


def corridor_loop_path(side: float, radius: float):
    """Arc-length parametrized rounded square centerline: s -> (x, y, heading)."""
    straight = side - 2 * radius
    quarter = np.pi * radius / 2
    seg = straight + quarter
    perimeter = 4 * seg

    def at(s: float):
        s = s % perimeter
        k = int(s // seg)
        r = s - k * seg
        heading0 = k * np.pi / 2
        corners = [(radius, 0.0), (side, radius), (side - radius, side), (0.0, side - radius)]
        x0, y0 = corners[k]
        c, sn = np.cos(heading0), np.sin(heading0)
        if r <= straight:
            return x0 + c * r, y0 + sn * r, heading0
        a = (r - straight) / radius
        # Arc center sits to the left of the heading.
        cxp = x0 + c * straight - sn * radius
        cyp = y0 + sn * straight + c * radius
        h = heading0 + a
        return cxp + np.sin(h) * radius, cyp - np.cos(h) * radius, h

    return at, perimeter


def corridor_loop_preset(cfg: SceneConfig) -> Preset:
    rng = np.random.default_rng(cfg.seed)
    side, radius, width, height = 6.0, 1.0, 2.4, 2.6
    lo, hi = -width / 2, side + width / 2
    surfaces = box_surfaces([lo, lo, 0.0], [hi, hi, height], rng)
    surfaces += box_surfaces([width / 2, width / 2, -0.01], [side - width / 2, side - width / 2, height + 0.01], rng)
    at, perimeter = corridor_loop_path(side, radius)
    n = cfg.frames or int(np.ceil((perimeter + 2.5) / cfg.step))
    poses = []
    for i in range(n):
        s = i * cfg.step
        x, y, h = at(s)
        poses.append(
            camera_pose(
                [x, y, 1.25 + 0.04 * np.sin(0.5 * s)],
                yaw=h,
                pitch=0.03 * np.sin(0.37 * s),
                roll=0.02 * np.sin(0.61 * s),
            )
        )
    return Preset(ThermoScene(surfaces, cfg.seed), ScriptedTrajectory(_stamps(cfg, n), poses), default_extrinsic())


def calib_room_preset(cfg: SceneConfig) -> Preset:
    """Static rig facing a chessboard that moves through 30 poses in 3 orientation groups."""
    rng = np.random.default_rng(cfg.seed)
    surfaces = box_surfaces([-3.0, -3.0, 0.0], [6.0, 3.0, 2.8], rng)
    board = BoardGeometry(rows=5, cols=7, square=0.1)
    n = cfg.frames or 30
    rig = camera_pose([0.0, 0.0, 1.2], yaw=0.0)
    extrinsic = default_extrinsic()
    lidar_z = rig.apply(extrinsic.inverse().t)[2]
    margin = board.square
    w = (board.cols - 1) * board.square + 2 * margin
    h = (board.rows - 1) * board.square + 2 * margin
    groups = [(0.6, 0.0), (-0.6, 0.0), (0.0, 0.55)]
    dynamic, board_poses = [], []
    for i in range(n):
        yaw, tilt = groups[i % 3]
        yaw += rng.normal(0, 0.08)
        tilt += rng.normal(0, 0.08)
        dist = rng.uniform(2.0, 3.0)
        lateral = rng.uniform(-0.5, 0.5)
        # Board frame: x along columns, y along rows (down), z away from the rig.
        R = Rotation.from_euler("ZY", [yaw, tilt]).as_matrix() @ BODY_FROM_CAM
        center = np.array([dist, lateral, lidar_z + rng.normal(0, 0.05)])
        first_corner = center - R @ np.array([(board.cols - 1) * board.square / 2, (board.rows - 1) * board.square / 2, 0])
        pose = Pose(R, first_corner)
        board_poses.append(pose)
        origin = pose.apply([-margin, -margin, 0.0])
        tex = Texture(base=22.0, checker=(board.square, 8.0, 0.05))
        # Surface coordinates measured from the first inner corner so the checker aligns.
        surf = Surface(origin, R[:, 0], R[:, 1], (w, h), tex)
        surf.texture = _shifted(tex, margin)
        dynamic.append([surf])
    stamps = _stamps(cfg, n)
    scene = ThermoScene(surfaces, cfg.seed, dynamic)
    return Preset(scene, ScriptedTrajectory(stamps, [rig] * n), extrinsic, board, board_poses)


def _shifted(tex: Texture, offset: float) -> Callable:
    def f(s1, s2):
        return tex(s1 - offset, s2 - offset)

    return f


PRESETS = {"corridor-loop": corridor_loop_preset, "tunnel": tunnel_preset, "calib-room": calib_room_preset}


def make_preset(cfg: SceneConfig) -> Preset:
    try:
        return PRESETS[cfg.preset](cfg)
    except KeyError:
        raise ValueError(f"unknown preset {cfg.preset!r}; choose from {sorted(PRESETS)}") from None


# -- dataset generation ---------------------------------------------------------


def board_corners(preset: Preset, frame: int, K: CameraIntrinsics) -> np.ndarray:
    """Ground-truth pixel positions of the inner corners in frame ``frame``."""
    T_wc = preset.trajectory.poses[frame]
    obj = preset.board.object_points()
    q = T_wc.inverse().apply(preset.board_poses[frame].apply(obj))
    uv, _ = geom.project_points(q, K, border=-np.inf)
    return uv


def perturbed_extrinsic(E: Pose, deg: float, meters: float, rng: np.random.Generator) -> Pose:
    """``E`` disturbed by a rotation of ``deg`` and a shift of ``meters`` in random directions."""
    axis = rng.normal(size=3)
    shift = rng.normal(size=3)
    w = np.radians(deg) * axis / np.linalg.norm(axis)
    v = meters * shift / np.linalg.norm(shift)
    return E @ Pose(geom.so3_exp(w), v)


def generate_dataset(cfg: SceneConfig, out_dir: str | Path, preset: Preset | None = None) -> Path:
    """Render ``cfg`` to the standard dataset layout under ``out_dir``."""
    from . import features
    from .dataset import Calibration, write_board, write_calibration, write_points_csv
    from .imgproc import rescale_to_8bit, write_pgm

    preset = preset or make_preset(cfg)
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "clouds").mkdir(parents=True, exist_ok=True)
    K, conv, E = cfg.intrinsics(), cfg.conv(), preset.extrinsic
    traj = preset.trajectory
    lidar_rng = np.random.default_rng([cfg.seed, 1])
    corner_rng = np.random.default_rng([cfg.seed, 2])
    n = len(traj.poses)
    voc_every = max(1, n // max(cfg.vocabulary_images, 1))
    voc_desc = []
    for i, (ts, T_wc) in enumerate(zip(traj.stamps, traj.poses)):
        ts = int(ts)
        frame = i if preset.scene.dynamic else None
        img = render_thermal(preset.scene, T_wc, K, conv, ts, frame)
        write_pgm(out / "images" / f"{ts}.pgm", img)
        cloud = render_lidar(
            preset.scene, T_wc @ E.inverse(), azimuth_steps=cfg.azimuth_steps, noise=cfg.lidar_noise, rng=lidar_rng, frame=frame
        )
        write_points_csv(out / "clouds" / f"{ts}.csv", cloud)
        if preset.board is not None:
            uv = board_corners(preset, i, K)
            if cfg.corner_noise > 0:
                uv = uv + corner_rng.normal(0.0, cfg.corner_noise, uv.shape)
            write_points_csv(out / "images" / f"{ts}.corners.csv", uv, fmt="%.6f")
        if i % voc_every == 0 and len(voc_desc) < cfg.vocabulary_images:
            voc_desc.append(features.extract_orb(rescale_to_8bit(img, conv=conv))[1])
    write_calibration(out / "calib.txt", Calibration(K, conv, E))
    geom.write_tum(out / "groundtruth.txt", traj.stamps, traj.poses)
    if preset.board is not None:
        write_board(out / "board.txt", preset.board)
        init = perturbed_extrinsic(E, cfg.extrinsic_error_deg, cfg.extrinsic_error_m, np.random.default_rng([cfg.seed, 3]))
        write_calibration(out / "calib_init.txt", Calibration(K, conv, init))
    if any(len(d) for d in voc_desc):
        features.Vocabulary.train(voc_desc, seed=cfg.seed).save(out / "vocabulary.bin")
    log.info("wrote %d frames to %s", n, out)
    return out
