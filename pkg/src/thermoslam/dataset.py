"""On-disk dataset layout and loaders.

Layout::

    <root>/images/<ns>.pgm           14-bit thermal frames (P5, big-endian)
    <root>/images/<ns>.corners.csv   optional chessboard corners ``u,v`` per line
    <root>/clouds/<ns>.csv           LiDAR scans, ``x,y,z`` meters per line, LiDAR frame
    <root>/calib.txt                 intrinsics, raw-to-Celsius map, camera->LiDAR extrinsic
    <root>/calib_init.txt            optional extrinsic guess for ``calibrate``
    <root>/board.txt                 optional chessboard geometry
    <root>/groundtruth.txt           optional TUM trajectory of the camera
    <root>/vocabulary.bin            optional place-recognition vocabulary

File names are int64 nanosecond timestamps.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .calib import BoardGeometry
from .geom import CameraIntrinsics, Pose
from .imgproc import RawToCelsius

log = logging.getLogger(__name__)

SYNC_TOLERANCE_NS = 5_000_000


class DataError(RuntimeError):
    """Missing, malformed or unpairable dataset content."""


# -- key/value files ----------------------------------------------------------


def parse_kv(text: str, source: str = "<text>") -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataError(f"{source}:{lineno}: expected 'key = value'")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k] = v
    return out


@dataclass
class Calibration:
    K: CameraIntrinsics
    conv: RawToCelsius = field(default_factory=RawToCelsius)
    extrinsic: Pose = field(default_factory=Pose)  # camera -> LiDAR


def format_calibration(calib: Calibration) -> str:
    K, c, E = calib.K, calib.conv, calib.extrinsic
    rows = np.hstack([E.R, E.t[:, None]])
    lines = [
        "# camera intrinsics (pixels)",
        f"fx = {K.fx!r}",
        f"fy = {K.fy!r}",
        f"cx = {K.cx!r}",
        f"cy = {K.cy!r}",
        f"width = {K.width}",
        f"height = {K.height}",
        "# celsius = raw_scale * raw + raw_offset",
        f"raw_scale = {c.scale!r}",
        f"raw_offset = {c.offset!r}",
        "# camera -> LiDAR transform, row-major [R | t] (p_lidar = R p_cam + t)",
        "T_lidar_cam = " + " ".join(repr(float(x)) for x in rows.ravel()),
    ]
    return "\n".join(lines) + "\n"


def write_calibration(path: str | Path, calib: Calibration) -> None:
    Path(path).write_text(format_calibration(calib))


def read_calibration(path: str | Path) -> Calibration:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"{path}: calibration file missing")
    kv = parse_kv(path.read_text(), str(path))
    try:
        K = CameraIntrinsics(
            float(kv["fx"]), float(kv["fy"]), float(kv["cx"]), float(kv["cy"]), int(kv["width"]), int(kv["height"])
        )
        conv = RawToCelsius(float(kv.get("raw_scale", 0.04)), float(kv.get("raw_offset", -273.15)))
        E = Pose()
        if "T_lidar_cam" in kv:
            vals = np.array([float(x) for x in kv["T_lidar_cam"].split()])
            if vals.size != 12:
                raise DataError(f"{path}: T_lidar_cam needs 12 values, got {vals.size}")
            m = vals.reshape(3, 4)
            E = Pose(m[:, :3], m[:, 3])
    except KeyError as exc:
        raise DataError(f"{path}: missing key {exc.args[0]!r}") from None
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from None
    return Calibration(K, conv, E)


def write_board(path: str | Path, board: BoardGeometry) -> None:
    Path(path).write_text(
        f"# chessboard inner corners and square size (m)\nrows = {board.rows}\ncols = {board.cols}\nsquare = {board.square!r}\n"
    )


def read_board(path: str | Path) -> BoardGeometry:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"{path}: board description missing")
    kv = parse_kv(path.read_text(), str(path))
    try:
        return BoardGeometry(int(kv["rows"]), int(kv["cols"]), float(kv["square"]))
    except (KeyError, ValueError) as exc:
        raise DataError(f"{path}: bad board description ({exc})") from None


# -- CSV point files ----------------------------------------------------------


def write_points_csv(path: str | Path, points: np.ndarray, fmt: str = "%.6f") -> None:
    points = np.asarray(points, dtype=float)
    with open(path, "w") as fh:
        if len(points):
            np.savetxt(fh, points, fmt=fmt, delimiter=",")


def read_points_csv(path: str | Path, columns: int = 3) -> np.ndarray:
    """Parse ``columns`` comma-separated floats per line; errors name the line."""
    path = Path(path)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", UserWarning)  # empty scans are legitimate
            data = np.loadtxt(path, delimiter=",", comments="#", ndmin=2, dtype=float)
        if data.size == 0:
            return np.zeros((0, columns))
        if data.shape[1] == columns:
            return data
    except ValueError:
        pass
    # slow path: locate the offending line
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(",")
            if len(parts) != columns:
                raise DataError(f"{path}:{lineno}: expected {columns} values, got {len(parts)}")
            try:
                rows.append([float(p) for p in parts])
            except ValueError:
                raise DataError(f"{path}:{lineno}: malformed number in {line!r}") from None
    return np.array(rows, dtype=float).reshape(-1, columns)


# -- manifest -----------------------------------------------------------------


@dataclass
class FrameEntry:
    timestamp: int
    image: Path
    cloud: Path
    corners: Path | None = None


@dataclass
class DatasetManifest:
    root: Path
    frames: list[FrameEntry]
    calibration: Path
    groundtruth: Path | None = None
    vocabulary: Path | None = None
    board: Path | None = None
    calib_init: Path | None = None
    unpaired_images: list[int] = field(default_factory=list)
    unpaired_clouds: list[int] = field(default_factory=list)


def _stamped(directory: Path, suffix: str) -> dict[int, Path]:
    out = {}
    for p in sorted(directory.iterdir()):
        name = p.name
        if not name.endswith(suffix) or name.endswith(".corners.csv") and suffix == ".csv":
            continue
        stem = name[: -len(suffix)]
        try:
            out[int(stem)] = p
        except ValueError:
            log.warning("ignoring %s: file name is not a nanosecond timestamp", p)
    return out


def pair_streams(images: list[int], clouds: list[int], tolerance: int) -> tuple[list[tuple[int, int]], list[int], list[int]]:
    """Nearest-neighbor pairing within ``tolerance`` ns, each cloud used once."""
    clouds = sorted(clouds)
    arr = np.array(clouds, dtype=np.int64)
    pairs, used, lost_img = [], set(), []
    for ts in sorted(images):
        if not len(arr):
            lost_img.append(ts)
            continue
        k = int(np.searchsorted(arr, ts))
        best = None
        for j in (k - 1, k):
            if 0 <= j < len(arr) and j not in used and abs(int(arr[j]) - ts) <= tolerance:
                if best is None or abs(int(arr[j]) - ts) < abs(int(arr[best]) - ts):
                    best = j
        if best is None:
            lost_img.append(ts)
        else:
            used.add(best)
            pairs.append((ts, int(arr[best])))
    lost_cloud = [c for j, c in enumerate(clouds) if j not in used]
    return pairs, lost_img, lost_cloud


def load_dataset(root: str | Path, tolerance_ns: int = SYNC_TOLERANCE_NS, require_calibration: bool = True) -> DatasetManifest:
    root = Path(root)
    missing = [p for p in ("images", "clouds") if not (root / p).is_dir()]
    if require_calibration and not (root / "calib.txt").is_file():
        missing.append("calib.txt")
    if missing:
        raise DataError(f"{root}: missing {', '.join(missing)}")
    images = _stamped(root / "images", ".pgm")
    clouds = _stamped(root / "clouds", ".csv")
    if not images or not clouds:
        raise DataError(f"{root}: {'images/' if not images else 'clouds/'} contains no frames")
    pairs, lost_img, lost_cloud = pair_streams(list(images), list(clouds), tolerance_ns)
    if not pairs:
        raise DataError(
            f"{root}: no image/cloud pairs within {tolerance_ns / 1e6:g} ms; "
            f"dropped {len(lost_img)} images and {len(lost_cloud)} clouds"
        )
    if lost_img or lost_cloud:
        log.warning("%s: dropped %d unpaired images and %d unpaired clouds", root, len(lost_img), len(lost_cloud))
    frames = []
    for ts_img, ts_cloud in pairs:
        corners = images[ts_img].with_name(f"{ts_img}.corners.csv")
        frames.append(FrameEntry(ts_img, images[ts_img], clouds[ts_cloud], corners if corners.is_file() else None))

    def opt(name):
        p = root / name
        return p if p.is_file() else None

    return DatasetManifest(
        root,
        frames,
        root / "calib.txt",
        opt("groundtruth.txt"),
        opt("vocabulary.bin"),
        opt("board.txt"),
        opt("calib_init.txt"),
        lost_img,
        lost_cloud,
    )
