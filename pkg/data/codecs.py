from __future__ import annotations

from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np

from ml.errors import CodecError

PathLike = Union[str, Path]

DEFAULT_DEPTH_SCALE = 1000.0
META_SUFFIX = ".meta"


# --- PFM ----------------------------------------------------------------------------------


def _read_line(buf: bytes, pos: int) -> Tuple[str, int]:
    end = buf.find(b"\n", pos)
    if end < 0:
        raise CodecError("Unterminated header line", pos)
    try:
        return buf[pos:end].decode("ascii").strip(), end + 1
    except UnicodeDecodeError as exc:
        raise CodecError("Header is not ASCII", pos) from exc


def _channels_last(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim == 3 and image.shape[0] in (1, 3):
        image = image[0] if image.shape[0] == 1 else np.transpose(image, (1, 2, 0))
    if image.ndim not in (2, 3) or (image.ndim == 3 and image.shape[2] != 3):
        raise CodecError(f"Expected a (H, W), (1, H, W) or (3, H, W) image, got {image.shape}")
    return image


def encode_pfm(image: np.ndarray) -> bytes:
    """Little-endian PFM bytes; 'Pf' for one channel, 'PF' for three."""
    data = _channels_last(image).astype(np.float32)
    if not np.isfinite(data).all():
        raise CodecError("PFM image contains non-finite values")
    height, width = data.shape[:2]
    magic = "PF" if data.ndim == 3 else "Pf"
    header = f"{magic}\n{width} {height}\n-1.0\n".encode("ascii")
    return header + np.ascontiguousarray(data[::-1]).astype("<f4").tobytes()


def decode_pfm(buf: bytes) -> np.ndarray:
    """Parse PFM bytes into a (C, H, W) float32 array."""
    magic, pos = _read_line(buf, 0)
    if magic not in ("Pf", "PF"):
        raise CodecError(f"Bad PFM magic {magic[:8]!r}", 0)
    channels = 3 if magic == "PF" else 1

    dims_at = pos
    dims, pos = _read_line(buf, pos)
    try:
        width, height = (int(v) for v in dims.split())
    except ValueError as exc:
        raise CodecError(f"Bad PFM dimensions {dims!r}", dims_at) from exc
    if width <= 0 or height <= 0:
        raise CodecError(f"Non-positive PFM dimensions {width}x{height}", dims_at)

    scale_at = pos
    scale_text, pos = _read_line(buf, pos)
    try:
        scale = float(scale_text)
    except ValueError as exc:
        raise CodecError(f"Bad PFM scale {scale_text!r}", scale_at) from exc
    if scale == 0:
        raise CodecError("PFM scale must be non-zero", scale_at)

    count = width * height * channels
    if len(buf) - pos < 4 * count:
        raise CodecError(f"PFM raster truncated, expected {4 * count} bytes", len(buf))
    dtype = "<f4" if scale < 0 else ">f4"
    raster = np.frombuffer(buf, dtype=dtype, count=count, offset=pos).astype(np.float32)
    raster = raster.reshape((height, width, channels))[::-1]
    return np.ascontiguousarray(np.transpose(raster, (2, 0, 1)))


def write_pfm(path: PathLike, image: np.ndarray) -> None:
    Path(path).write_bytes(encode_pfm(image))


def read_pfm(path: PathLike) -> np.ndarray:
    return decode_pfm(Path(path).read_bytes())


# --- PPM / PGM ----------------------------------------------------------------------------


def _maxval(bitdepth: int) -> int:
    if bitdepth not in (8, 16):
        raise CodecError(f"Unsupported bit depth {bitdepth}, expected 8 or 16")
    return 255 if bitdepth == 8 else 65535


def quantize(values: np.ndarray, bitdepth: int) -> np.ndarray:
    """Map [0, 1] to integers 0..maxval, rounding half up."""
    maxval = _maxval(bitdepth)
    values = np.asarray(values, dtype=np.float64)
    if not np.isfinite(values).all() or values.min() < 0 or values.max() > 1:
        raise CodecError("PNM values must lie in [0, 1]")
    return np.floor(values * maxval + 0.5).astype(np.int64)


def encode_pnm_raw(levels: np.ndarray, bitdepth: int = 8) -> bytes:
    """Binary P6 (3 channels) or P5 (1 channel) bytes of integer levels."""
    maxval = _maxval(bitdepth)
    levels = _channels_last(np.asarray(levels))
    if levels.min() < 0 or levels.max() > maxval:
        raise CodecError(f"Levels outside 0..{maxval}")
    height, width = levels.shape[:2]
    magic = "P6" if levels.ndim == 3 else "P5"
    header = f"{magic}\n{width} {height}\n{maxval}\n".encode("ascii")
    dtype = "u1" if bitdepth == 8 else ">u2"
    return header + np.ascontiguousarray(levels).astype(dtype).tobytes()


def _header_tokens(buf: bytes, count: int) -> Tuple[List[Tuple[str, int]], int]:
    """Read `count` whitespace-separated header tokens, skipping # comments."""
    tokens = []
    pos = 0
    while len(tokens) < count:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if pos >= len(buf):
            raise CodecError("PNM header truncated", pos)
        if buf[pos : pos + 1] == b"#":
            end = buf.find(b"\n", pos)
            pos = len(buf) if end < 0 else end + 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        tokens.append((buf[start:pos].decode("ascii", errors="replace"), start))
    if pos >= len(buf):
        raise CodecError("PNM header is not followed by a raster", pos)
    # exactly one whitespace byte separates the header from the raster
    return tokens, pos + 1


def decode_pnm_raw(buf: bytes, bitdepth: Optional[int] = None) -> Tuple[np.ndarray, int]:
    """Parse P5/P6 bytes into (C, H, W) integer levels and their maxval."""
    tokens, pos = _header_tokens(buf, 4)
    (magic, _), (w_text, w_at), (h_text, h_at), (m_text, m_at) = tokens
    if magic not in ("P5", "P6"):
        raise CodecError(f"Bad PNM magic {magic[:8]!r}", 0)
    try:
        width, height, maxval = int(w_text), int(h_text), int(m_text)
    except ValueError as exc:
        raise CodecError("Bad PNM header numbers", w_at) from exc
    if width <= 0 or height <= 0:
        raise CodecError(f"Non-positive PNM dimensions {width}x{height}", h_at)
    if maxval not in (255, 65535):
        raise CodecError(f"Unsupported PNM maxval {maxval}", m_at)
    if bitdepth is not None and maxval != _maxval(bitdepth):
        raise CodecError(f"PNM maxval {maxval} does not match bit depth {bitdepth}", m_at)

    channels = 3 if magic == "P6" else 1
    dtype = np.dtype("u1") if maxval == 255 else np.dtype(">u2")
    count = width * height * channels
    if len(buf) - pos < count * dtype.itemsize:
        raise CodecError("PNM raster truncated", len(buf))
    raster = np.frombuffer(buf, dtype=dtype, count=count, offset=pos).astype(np.int64)
    levels = np.transpose(raster.reshape((height, width, channels)), (2, 0, 1))
    return np.ascontiguousarray(levels), maxval


def write_pnm(path: PathLike, image: np.ndarray, bitdepth: int = 8) -> None:
    """Write a [0, 1] image as P6 (3, H, W) or P5 (H, W) / (1, H, W)."""
    Path(path).write_bytes(encode_pnm_raw(quantize(image, bitdepth), bitdepth))


def read_pnm(path: PathLike, bitdepth: Optional[int] = None) -> np.ndarray:
    levels, maxval = decode_pnm_raw(Path(path).read_bytes(), bitdepth)
    return (levels / maxval).astype(np.float32)


# --- 16-bit depth PGM with a scale sidecar ------------------------------------------------


def _meta_path(path: PathLike) -> Path:
    return Path(f"{path}{META_SUFFIX}")


def write_depth_pgm(path: PathLike, depth: np.ndarray, scale: float = DEFAULT_DEPTH_SCALE) -> None:
    """Store round-half-up(depth * scale) as 16-bit gray; the scale goes to <path>.meta."""
    if scale <= 0:
        raise CodecError(f"Depth scale must be positive, got {scale}")
    values = np.asarray(depth, dtype=np.float64)
    levels = np.floor(values * scale + 0.5)
    if not np.isfinite(levels).all() or levels.min() < 0 or levels.max() > 65535:
        raise CodecError(f"Depth not representable in 16 bits at scale {scale}")
    Path(path).write_bytes(encode_pnm_raw(levels.astype(np.int64), 16))
    _meta_path(path).write_text(f"depth_scale = {scale!r}\n", encoding="ascii")


def read_depth_scale(path: PathLike) -> float:
    meta = _meta_path(path)
    if not meta.exists():
        return DEFAULT_DEPTH_SCALE
    for line in meta.read_text(encoding="ascii").splitlines():
        key, _, value = line.partition("=")
        if key.strip() == "depth_scale":
            return float(value)
    raise CodecError(f"{meta} has no depth_scale entry")


def read_depth_pgm(path: PathLike) -> np.ndarray:
    levels, _ = decode_pnm_raw(Path(path).read_bytes(), 16)
    return (levels / read_depth_scale(path)).astype(np.float32)
