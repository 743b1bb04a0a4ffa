"""Temperature-attributed point map anchored to keyframes, PLY import/export."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import geom
from .geom import Pose
from .imgproc import MAX_COUNT, RawToCelsius, in_bounds, sample_bilinear_many

PLY_FIELDS = [("x", "f4"), ("y", "f4"), ("z", "f4"), ("temperature", "f4"), ("raw", "u2")]
COLOR_FIELDS = [("red", "u1"), ("green", "u1"), ("blue", "u1")]
_PLY_TYPES = {"f4": "float", "u2": "ushort", "u1": "uchar", "f8": "double", "i4": "int"}
_NP_TYPES = {
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8", "uchar": "u1", "uint8": "u1",
    "ushort": "u2", "uint16": "u2", "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "char": "i1", "short": "i2",
}


@dataclass
class KeyframeCloud:
    """Points of one keyframe, stored in that keyframe's camera frame."""

    keyframe_id: int
    points: np.ndarray  # (N, 3) camera frame
    raw: np.ndarray  # (N,) interpolated raw counts


@dataclass
class ThermoMap:
    conv: RawToCelsius = field(default_factory=RawToCelsius)
    clouds: dict[int, KeyframeCloud] = field(default_factory=dict)
    trajectory: dict[int, Pose] = field(default_factory=dict)  # keyframe id -> world pose

    def __len__(self) -> int:
        return sum(len(c.points) for c in self.clouds.values())

    def accumulate(
        self,
        kf_id: int,
        pose: Pose,
        cloud_cam: np.ndarray,
        image: np.ndarray,
        K: geom.CameraIntrinsics,
        in_keyframe: Pose | None = None,
    ) -> int:
        """Attach every in-view point with its bilinear raw count. Returns the count added.

        ``cloud_cam`` is in the frame that captured ``image``; ``in_keyframe``
        maps that frame into keyframe ``kf_id`` (identity for the keyframe
        itself). Points from several frames accumulate on the same keyframe.
        """
        cloud_cam = np.asarray(cloud_cam, dtype=float).reshape(-1, 3)
        image = np.asarray(image, dtype=float)
        uv, valid = geom.project_points(cloud_cam, K)
        valid &= in_bounds(image, uv)
        raw = sample_bilinear_many(image, uv[valid])
        pts = cloud_cam[valid] if in_keyframe is None else in_keyframe.apply(cloud_cam[valid])
        if kf_id in self.clouds:
            old = self.clouds[kf_id]
            pts, raw = np.concatenate([old.points, pts]), np.concatenate([old.raw, raw])
        else:
            self.trajectory[kf_id] = pose
        self.clouds[kf_id] = KeyframeCloud(kf_id, pts, raw)
        return int(valid.sum())

    def reanchor(self, poses: dict[int, Pose]) -> None:
        """Replace keyframe poses (e.g. after a loop correction); points follow rigidly."""
        for k, T in poses.items():
            if k in self.trajectory:
                self.trajectory[k] = T

    def world_points(self) -> tuple[np.ndarray, np.ndarray]:
        """(N, 3) world positions and (N,) raw counts, in keyframe-id order."""
        pts, raw = [np.zeros((0, 3))], [np.zeros(0)]
        for k in sorted(self.clouds):
            c = self.clouds[k]
            pts.append(self.trajectory[k].apply(c.points))
            raw.append(c.raw)
        return np.concatenate(pts), np.concatenate(raw)


def voxel_downsample(points: np.ndarray, values: np.ndarray, voxel: float) -> tuple[np.ndarray, np.ndarray]:
    """Average positions and values per occupied voxel (first-seen voxel order)."""
    if voxel <= 0 or len(points) == 0:
        return points, values
    keys = np.floor(points / voxel).astype(np.int64)
    _, first, inv = np.unique(keys, axis=0, return_index=True, return_inverse=True)
    inv = inv.ravel()
    n = len(first)
    cnt = np.bincount(inv, minlength=n).astype(float)
    p = np.stack([np.bincount(inv, points[:, d], n) for d in range(3)], axis=1) / cnt[:, None]
    v = np.bincount(inv, values, n) / cnt
    order = np.argsort(first)
    return p[order], v[order]


def diverging_colormap(t: np.ndarray, t_low: float = 0.0, t_high: float = 30.0) -> np.ndarray:
    """Blue - white - red ramp over [t_low, t_high]; (N, 3) uint8."""
    x = np.clip((np.asarray(t, dtype=float) - t_low) / (t_high - t_low), 0.0, 1.0)
    blue = np.array([59, 76, 192], float)
    white = np.array([221, 221, 221], float)
    red = np.array([180, 4, 38], float)
    lo = x[:, None] < 0.5
    f = np.where(lo, 2 * x[:, None], 2 * x[:, None] - 1)
    rgb = np.where(lo, blue + f * (white - blue), white + f * (red - white))
    return np.rint(rgb).astype(np.uint8)


def map_vertices(
    tmap: ThermoMap, voxel: float = 0.0, colored: bool = False, t_low: float = 0.0, t_high: float = 30.0
) -> np.ndarray:
    pts, raw = tmap.world_points()
    pts, raw = voxel_downsample(pts, raw, voxel)
    return make_vertices(pts, raw, tmap.conv, colored, t_low, t_high)


def make_vertices(pts, raw, conv: RawToCelsius = RawToCelsius(), colored=False, t_low=0.0, t_high=30.0) -> np.ndarray:
    dt = PLY_FIELDS + (COLOR_FIELDS if colored else [])
    v = np.zeros(len(pts), dtype=[(n, "<" + t) for n, t in dt])
    raw = np.clip(np.rint(raw), 0, MAX_COUNT)
    temp = conv.to_celsius(raw)
    v["x"], v["y"], v["z"] = pts[:, 0], pts[:, 1], pts[:, 2]
    v["temperature"], v["raw"] = temp, raw
    if colored:
        rgb = diverging_colormap(temp, t_low, t_high)
        v["red"], v["green"], v["blue"] = rgb[:, 0], rgb[:, 1], rgb[:, 2]
    return v


def write_ply(path: str | Path, vertices: np.ndarray, binary: bool = False) -> None:
    names = vertices.dtype.names or ()
    fmt = "binary_little_endian" if binary else "ascii"
    header = ["ply", f"format {fmt} 1.0", f"element vertex {len(vertices)}"]
    for n in names:
        header.append(f"property {_PLY_TYPES[vertices.dtype[n].str[1:]]} {n}")
    header.append("end_header")
    head = ("\n".join(header) + "\n").encode("ascii")
    if binary:
        Path(path).write_bytes(head + vertices.astype(vertices.dtype.newbyteorder("<")).tobytes())
        return
    fmts = ["%.9g" if vertices.dtype[n].kind == "f" else "%d" for n in names]
    with open(path, "wb") as fh:
        fh.write(head)
        if len(vertices):
            np.savetxt(fh, vertices, fmt=fmts)


def read_ply(path: str | Path) -> np.ndarray:
    """Read a vertex-only PLY (ascii or binary little-endian) into a structured array."""
    buf = Path(path).read_bytes()
    end = buf.find(b"end_header")
    if not buf.startswith(b"ply") or end < 0:
        raise ValueError(f"{path}: not a PLY file")
    body = buf.index(b"\n", end) + 1
    fmt, count, props = None, 0, []
    for line in buf[:end].decode("ascii").splitlines()[1:]:
        tok = line.split()
        if not tok or tok[0] == "comment":
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            if tok[1] != "vertex":
                raise ValueError(f"{path}: unsupported element {tok[1]!r}")
            count = int(tok[2])
        elif tok[0] == "property":
            props.append((tok[2], "<" + _NP_TYPES[tok[1]]))
    dt = np.dtype(props)
    if fmt == "binary_little_endian":
        need = body + count * dt.itemsize
        if len(buf) < need:
            raise ValueError(f"{path}: truncated at byte {len(buf)}, need {need}")
        return np.frombuffer(buf, dtype=dt, count=count, offset=body).copy()
    if fmt != "ascii":
        raise ValueError(f"{path}: unsupported format {fmt!r}")
    text = buf[body:].decode("ascii").split("\n", count)[:count]
    if count == 0:
        return np.zeros(0, dtype=dt)
    try:
        return np.loadtxt(text, dtype=dt, ndmin=1)
    except ValueError as exc:
        raise ValueError(f"{path}: malformed vertex data ({exc})") from None


def export_map(
    tmap: ThermoMap,
    path: str | Path,
    voxel: float = 0.05,
    binary: bool = False,
    colored_path: str | Path | None = None,
    t_low: float = 0.0,
    t_high: float = 30.0,
) -> int:
    """Write the map (and optionally a colormapped variant). Returns the vertex count."""
    v = map_vertices(tmap, voxel)
    write_ply(path, v, binary)
    if colored_path is not None:
        write_ply(colored_path, map_vertices(tmap, voxel, True, t_low, t_high), binary)
    return len(v)
