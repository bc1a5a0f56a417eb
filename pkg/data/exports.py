from __future__ import annotations

from pathlib import Path
from typing import Optional, Union

import numpy as np

from data.codecs import write_pnm
from ml.autodiff.tensor import Tensor
from ml.config import CameraIntrinsics
from ml.errors import ShapeError


def pca_principal_channel(features: Union[Tensor, np.ndarray]) -> np.ndarray:
    """
    Project (C, H, W) features onto their first principal direction.

    Pixels are observations of C variables. The direction is the leading eigenvector
    of the C x C covariance, signed so that the largest-variance channel
    loads non-negatively. Constant features give all zeros.

    Returns:
        (1, H, W) map min-max normalized to [0, 1]
    """
    data = features.data if isinstance(features, Tensor) else features
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 3 or data.shape[0] < 1:
        raise ShapeError(f"Expected (C, H, W) features, got {data.shape}")
    channels, height, width = data.shape
    if np.all(np.ptp(data.reshape(channels, -1), axis=1) == 0):
        return np.zeros((1, height, width))
    observations = data.reshape(channels, -1).T
    centered = observations - observations.mean(axis=0)
    covariance = centered.T @ centered / centered.shape[0]
    variances = np.diag(covariance)
    lead = int(np.argmax(variances))
    if variances[lead] <= 0:
        return np.zeros((1, height, width))

    _, vectors = np.linalg.eigh(covariance)
    direction = vectors[:, -1]
    if direction[lead] < 0:
        direction = -direction

    projection = (centered @ direction).reshape(height, width)
    span = projection.max() - projection.min()
    if span <= 0:
        return np.zeros((1, height, width))
    return ((projection - projection.min()) / span)[None]


def export_heatmap(path: Union[str, Path], features: Union[Tensor, np.ndarray]) -> np.ndarray:
    """Write the principal channel of one feature map as an 8-bit PGM."""
    heatmap = pca_principal_channel(features)
    write_pnm(path, heatmap, bitdepth=8)
    return heatmap


def depth_to_points(
    depth: np.ndarray,
    rgb: np.ndarray,
    intrinsics: CameraIntrinsics,
    mask: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Unproject valid pixels to rows (x, y, z, red, green, blue), colors in 0..255."""
    depth = np.asarray(depth, dtype=np.float64).reshape(np.shape(depth)[-2:])
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.shape != (3,) + depth.shape:
        raise ShapeError(f"rgb {rgb.shape} does not match depth {depth.shape}")
    valid = depth > 0
    if mask is not None:
        valid &= np.asarray(mask, dtype=bool).reshape(depth.shape)
    v, u = np.nonzero(valid)
    z = depth[v, u]
    x = (u - intrinsics.cx) * z / intrinsics.fx
    y = (v - intrinsics.cy) * z / intrinsics.fy
    colors = np.floor(np.clip(rgb[:, v, u], 0.0, 1.0) * 255 + 0.5).T
    return np.column_stack([x, y, z, colors])


def write_ply(path: Union[str, Path], points: np.ndarray) -> None:
    header = (
        "ply\n"
        "format ascii 1.0\n"
        f"element vertex {len(points)}\n"
        "property float x\n"
        "property float y\n"
        "property float z\n"
        "property uchar red\n"
        "property uchar green\n"
        "property uchar blue\n"
        "end_header\n"
    )
    lines = [
        f"{x:.6f} {y:.6f} {z:.6f} {int(r)} {int(g)} {int(b)}\n" for x, y, z, r, g, b in points
    ]
    Path(path).write_text(header + "".join(lines), encoding="ascii")


def depth_to_pointcloud(
    depth: np.ndarray,
    rgb: np.ndarray,
    intrinsics: CameraIntrinsics,
    path: Union[str, Path],
    mask: Optional[np.ndarray] = None,
) -> int:
    """Write valid pixels as an ASCII PLY point cloud; returns the point count."""
    points = depth_to_points(depth, rgb, intrinsics, mask)
    write_ply(path, points)
    return len(points)
