from __future__ import annotations

import logging
from typing import List, Optional, Tuple

import numpy as np

from data.samples import DepthSample
from ml.config import CameraIntrinsics, PrimitiveKind, SceneConfig, ShiftConfig

logger = logging.getLogger(__name__)

# Streams of the per-sample seed sequence
TRAIN_STREAM = 0
TEST_STREAM = 1
SHIFTED_STREAM = 2


def _rays(height: int, width: int, camera: CameraIntrinsics) -> Tuple[np.ndarray, np.ndarray]:
    """Normalized image coordinates x = (u - cx) / fx, y = (v - cy) / fy of every pixel."""
    v, u = np.mgrid[0:height, 0:width].astype(np.float64)
    return (u - camera.cx) / camera.fx, (v - camera.cy) / camera.fy


def _draw_plane(x, y, near, background, rng) -> Tuple[np.ndarray, np.ndarray]:
    # inverse depth of a 3D plane is affine in the normalized coordinates
    z0 = rng.uniform(near, background)
    grad = rng.uniform(-0.6, 0.6, size=2) / z0
    inv = 1.0 / z0 + grad[0] * x + grad[1] * y
    angle = rng.uniform(0, 2 * np.pi)
    offset = rng.uniform(-0.2, 0.2)
    side = np.cos(angle) * x + np.sin(angle) * y > offset
    hit = side & (inv > 0)
    depth = np.where(hit, 1.0 / np.where(inv > 0, inv, 1.0), np.inf)
    return depth, hit


def _draw_box(x, y, near, background, rng) -> Tuple[np.ndarray, np.ndarray]:
    z = rng.uniform(near, background)
    x0, x1 = np.sort(rng.uniform(x.min(), x.max(), size=2))
    y0, y1 = np.sort(rng.uniform(y.min(), y.max(), size=2))
    hit = (x >= x0) & (x <= x1) & (y >= y0) & (y <= y1)
    tilt = rng.uniform(-0.3, 0.3) * z
    depth = np.where(hit, z + tilt * (x - x0), np.inf)
    return depth, hit


def _draw_sphere(x, y, near, background, rng) -> Tuple[np.ndarray, np.ndarray]:
    center_z = rng.uniform(near, background)
    radius = rng.uniform(0.1, 0.35) * center_z
    radius = min(radius, center_z - near)
    cx = rng.uniform(x.min(), x.max()) * center_z
    cy = rng.uniform(y.min(), y.max()) * center_z
    # ray p = t * (x, y, 1), depth Z = t
    a = x * x + y * y + 1.0
    b = x * cx + y * cy + center_z
    c = cx * cx + cy * cy + center_z * center_z - radius * radius
    disc = b * b - a * c
    hit = disc > 0
    depth = np.where(hit, (b - np.sqrt(np.where(hit, disc, 0.0))) / a, np.inf)
    return depth, hit


_PRIMITIVES = {
    PrimitiveKind.PLANE: _draw_plane,
    PrimitiveKind.BOX: _draw_box,
    PrimitiveKind.SPHERE: _draw_sphere,
}


def render_scene(
    cfg: SceneConfig, rng: np.random.Generator, camera: Optional[CameraIntrinsics] = None
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Render layered primitives in front of a background plane with a z-buffer.

    Returns:
        rgb of shape (3, H, W) in [0, 1] and depth of shape (1, H, W) inside
        (0.1 * max_depth, max_depth]
    """
    camera = camera or CameraIntrinsics.for_image(cfg.height, cfg.width, cfg.focal_scale)
    x, y = _rays(cfg.height, cfg.width, camera)
    max_depth = cfg.max_depth
    near = 0.15 * max_depth

    background = rng.uniform(0.6, 0.95) * max_depth
    depth = np.full((cfg.height, cfg.width), background)
    albedo = np.empty((3, cfg.height, cfg.width))
    albedo[:] = rng.uniform(cfg.albedo_min, cfg.albedo_max, size=3)[:, None, None]

    count = int(rng.integers(0, cfg.max_primitives + 1)) if cfg.primitives else 0
    for _ in range(count):
        kind = cfg.primitives[int(rng.integers(0, len(cfg.primitives)))]
        surface, hit = _PRIMITIVES[PrimitiveKind(kind)](x, y, near, background, rng)
        color = rng.uniform(cfg.albedo_min, cfg.albedo_max, size=3)
        closer = hit & (surface < depth) & (surface > near)
        depth = np.where(closer, surface, depth)
        albedo = np.where(closer[None], color[:, None, None], albedo)

    depth = np.clip(depth, near, max_depth)
    shading = 0.25 + 0.75 * (1.0 - depth / max_depth)
    rgb = np.clip(albedo * shading[None], 0.0, 1.0)
    return rgb.astype(np.float32), depth[None].astype(np.float32)


def generate_synthetic_dataset(
    cfg: SceneConfig,
    count: Optional[int] = None,
    stream: int = TRAIN_STREAM,
    prefix: str = "train",
) -> List[DepthSample]:
    """
    Deterministic synthetic scenes; sample i is a pure function of (cfg.seed, stream, i).

    Args:
        cfg: Resolution, depth range, primitive mix and seed
        count: Number of samples (defaults to cfg.count)
        stream: Separates train, test and shifted samples drawn from the same seed
        prefix: Sample id prefix

    Returns:
        List of DepthSample with every pixel valid
    """
    count = cfg.count if count is None else count
    camera = CameraIntrinsics.for_image(cfg.height, cfg.width, cfg.focal_scale)
    samples = []
    for i in range(count):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, stream, i]))
        rgb, depth = render_scene(cfg, rng, camera)
        samples.append(DepthSample.from_arrays(f"{prefix}_{i:05d}", rgb, depth))
    logger.debug("Generated %d synthetic samples (stream %d)", count, stream)
    return samples


def shifted_scene_config(cfg: SceneConfig, shift: ShiftConfig) -> SceneConfig:
    """Scene config of the distribution-shifted evaluation split."""
    return cfg.model_copy(
        update={
            "count": shift.count,
            "focal_scale": shift.focal_scale,
            "primitives": list(shift.primitives),
            "albedo_min": shift.albedo_min,
            "albedo_max": shift.albedo_max,
            "seed": (cfg.seed + shift.seed_offset) % 2**64,
        }
    )


def generate_splits(
    cfg: SceneConfig, shift: Optional[ShiftConfig] = None
) -> Tuple[List[DepthSample], List[DepthSample], List[DepthSample]]:
    """Training, test and (when enabled) shifted samples of one experiment."""
    train = generate_synthetic_dataset(cfg, stream=TRAIN_STREAM, prefix="train")
    test = generate_synthetic_dataset(cfg, count=cfg.test_count, stream=TEST_STREAM, prefix="test")
    shifted: List[DepthSample] = []
    if shift is not None and shift.enabled:
        shifted = generate_synthetic_dataset(
            shifted_scene_config(cfg, shift), stream=SHIFTED_STREAM, prefix="shifted"
        )
    return train, test, shifted
