"""Thermal image container, subpixel sampling, pyramids and 8-bit rescale."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAX_COUNT = 16383
DEFAULT_LEVELS = 4
MIN_LEVEL_SIZE = 8


@dataclass(frozen=True)
class RawToCelsius:
    """Linear map from raw radiometric counts to degrees Celsius."""

    scale: float = 0.04
    offset: float = -273.15

    def to_celsius(self, raw):
        return self.scale * np.asarray(raw, dtype=float) + self.offset

    def to_raw(self, celsius):
        """Inverse map, rounded and clamped to the 14-bit range."""
        raw = np.rint((np.asarray(celsius, dtype=float) - self.offset) / self.scale)
        return np.clip(raw, 0, MAX_COUNT).astype(np.uint16)


@dataclass(frozen=True, eq=False)
class ThermalImage:
    data: np.ndarray  # (height, width) uint16
    timestamp: int = 0  # ns

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 2:
            raise ValueError("thermal image must be 2-D")
        if data.size and int(data.max()) > MAX_COUNT:
            raise ValueError(f"counts exceed 14-bit range (max {int(data.max())})")
        data = np.ascontiguousarray(data, dtype=np.uint16)
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]


class InvalidSample(ValueError):
    pass


def _bilinear(img: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    h, w = img.shape
    x0 = np.clip(np.floor(u).astype(np.intp), 0, w - 2)
    y0 = np.clip(np.floor(v).astype(np.intp), 0, h - 2)
    a = u - x0
    b = v - y0
    flat = img.ravel()
    idx = y0 * w + x0
    i00 = flat.take(idx)
    i01 = flat.take(idx + 1)
    i10 = flat.take(idx + w)
    i11 = flat.take(idx + w + 1)
    top = i00 + a * (i01 - i00)
    bot = i10 + a * (i11 - i10)
    return top + b * (bot - top)


def in_bounds(img: np.ndarray, uv: np.ndarray, margin: float = 0.0) -> np.ndarray:
    h, w = img.shape
    u, v = uv[..., 0], uv[..., 1]
    return (u >= margin) & (u <= w - 1 - margin) & (v >= margin) & (v <= h - 1 - margin)


def sample_bilinear_many(img: np.ndarray, uv: np.ndarray) -> np.ndarray:
    """Bilinear samples at (N, 2) subpixel locations. Caller checks bounds."""
    uv = np.asarray(uv, dtype=float)
    return _bilinear(img, uv[..., 0], uv[..., 1])


def sample_gradient_many(img: np.ndarray, uv: np.ndarray) -> np.ndarray:
    """Image gradient (dI/du, dI/dv) by central differences at half-pixel offsets."""
    uv = np.asarray(uv, dtype=float)
    u, v = uv[..., 0], uv[..., 1]
    gu = _bilinear(img, u + 0.5, v) - _bilinear(img, u - 0.5, v)
    gv = _bilinear(img, u, v + 0.5) - _bilinear(img, u, v - 0.5)
    return np.stack([gu, gv], axis=-1)


def sample_bilinear(img: np.ndarray, u) -> float:
    uv = np.asarray(u, dtype=float)
    if not in_bounds(img, uv):
        raise InvalidSample(f"sample {tuple(uv)} outside image")
    return float(sample_bilinear_many(img, uv[None])[0])


def sample_gradient(img: np.ndarray, u) -> np.ndarray:
    uv = np.asarray(u, dtype=float)
    if not in_bounds(img, uv, margin=0.5):
        raise InvalidSample(f"gradient at {tuple(uv)} outside image")
    return sample_gradient_many(img, uv[None])[0]


def downsample(img: np.ndarray) -> np.ndarray:
    """2x2 box average; odd trailing rows/columns are dropped."""
    h, w = img.shape[0] // 2, img.shape[1] // 2
    a = img[: 2 * h, : 2 * w]
    return 0.25 * (a[0::2, 0::2] + a[0::2, 1::2] + a[1::2, 0::2] + a[1::2, 1::2])


def build_pyramid(img: ThermalImage | np.ndarray, levels: int = DEFAULT_LEVELS) -> list[np.ndarray]:
    """Float pyramid of raw counts, level 0 = full resolution."""
    data = img.data if isinstance(img, ThermalImage) else np.asarray(img)
    if levels < 1:
        raise ValueError("levels must be >= 1")
    h, w = data.shape
    if (h >> (levels - 1)) < MIN_LEVEL_SIZE or (w >> (levels - 1)) < MIN_LEVEL_SIZE:
        raise ValueError(f"{w}x{h} image too small for {levels} pyramid levels")
    pyr = [data.astype(np.float64)]
    for _ in range(levels - 1):
        pyr.append(downsample(pyr[-1]))
    return pyr


def rescale_to_8bit(
    img: ThermalImage | np.ndarray,
    t_low: float = 0.0,
    t_high: float = 30.0,
    conv: RawToCelsius = RawToCelsius(),
) -> np.ndarray:
    """Map raw counts through a fixed Celsius window onto 0..255."""
    if not t_low < t_high:
        raise ValueError("t_low must be below t_high")
    data = img.data if isinstance(img, ThermalImage) else np.asarray(img)
    celsius = conv.to_celsius(data)
    out = np.floor(255.0 * (celsius - t_low) / (t_high - t_low) + 0.5)
    return np.clip(out, 0, 255).astype(np.uint8)


# -- PGM I/O ------------------------------------------------------------------


def write_pgm(path: str | Path, img: ThermalImage | np.ndarray, maxval: int = MAX_COUNT) -> None:
    data = img.data if isinstance(img, ThermalImage) else np.asarray(img)
    h, w = data.shape
    header = f"P5\n{w} {h}\n{maxval}\n".encode("ascii")
    Path(path).write_bytes(header + data.astype(">u2").tobytes())


def _pgm_tokens(buf: bytes, count: int) -> tuple[list[int], int]:
    tokens, pos = [], 2
    while len(tokens) < count:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"truncated PGM header at byte {pos}")
        try:
            tokens.append(int(buf[start:pos]))
        except ValueError:
            raise ValueError(f"malformed PGM header token at byte {start}") from None
    return tokens, pos + 1


def read_pgm(path: str | Path, timestamp: int | None = None) -> ThermalImage:
    """Read a binary 16-bit PGM. The timestamp defaults to the file stem."""
    path = Path(path)
    buf = path.read_bytes()
    if buf[:2] != b"P5":
        raise ValueError(f"{path}: not a binary PGM (byte 0)")
    (w, h, maxval), offset = _pgm_tokens(buf, 3)
    if maxval < 256:
        raise ValueError(f"{path}: expected 16-bit samples, maxval {maxval}")
    need = offset + 2 * w * h
    if len(buf) < need:
        raise ValueError(f"{path}: truncated pixel data at byte {len(buf)}, need {need}")
    data = np.frombuffer(buf, dtype=">u2", count=w * h, offset=offset).reshape(h, w)
    if maxval != MAX_COUNT and maxval != 65535:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    if timestamp is None:
        try:
            timestamp = int(path.stem)
        except ValueError:
            timestamp = 0
    return ThermalImage(data.astype(np.uint16), timestamp)
