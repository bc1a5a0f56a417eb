from __future__ import annotations

import numpy as np
from scipy import ndimage

from data.samples import DepthSample
from ml.config import AugmentationPolicy
from ml.errors import ShapeError


def hflip_sample(sample: DepthSample) -> DepthSample:
    return sample.replace(
        rgb=np.ascontiguousarray(sample.rgb[:, :, ::-1]),
        depth=np.ascontiguousarray(sample.depth[:, :, ::-1]),
        mask=np.ascontiguousarray(sample.mask[:, :, ::-1]),
    )


def rotate_sample(sample: DepthSample, degrees: float) -> DepthSample:
    """
    Rotate about the image center, keeping the size.

    RGB is interpolated bilinearly; depth and validity use nearest neighbour so no
    depth is invented across occlusion edges. Pixels rotated in from outside the
    frame become invalid.
    """
    if degrees == 0:
        return sample
    rotate = dict(angle=degrees, axes=(2, 1), reshape=False, mode="constant", cval=0.0)
    rgb = ndimage.rotate(sample.rgb, order=1, **rotate)
    depth = ndimage.rotate(sample.depth, order=0, **rotate)
    inside = ndimage.rotate(sample.mask.astype(np.float32), order=0, **rotate) > 0.5
    mask = inside & (depth > 0)
    return sample.replace(
        rgb=np.clip(rgb, 0.0, 1.0).astype(np.float32),
        depth=np.where(mask, depth, 0.0).astype(np.float32),
        mask=mask,
    )


def crop_sample(sample: DepthSample, top: int, left: int, height: int, width: int) -> DepthSample:
    if height > sample.height or width > sample.width:
        raise ShapeError(
            f"Crop {height}x{width} is larger than the {sample.height}x{sample.width} image"
        )
    window = (slice(None), slice(top, top + height), slice(left, left + width))
    return sample.replace(
        rgb=sample.rgb[window].copy(),
        depth=sample.depth[window].copy(),
        mask=sample.mask[window].copy(),
    )


def random_crop(
    sample: DepthSample, height: int, width: int, rng: np.random.Generator
) -> DepthSample:
    if height > sample.height or width > sample.width:
        raise ShapeError(
            f"Crop {height}x{width} is larger than the {sample.height}x{sample.width} image"
        )
    top = int(rng.integers(0, sample.height - height + 1))
    left = int(rng.integers(0, sample.width - width + 1))
    return crop_sample(sample, top, left, height, width)


def photometric_jitter(
    sample: DepthSample, policy: AugmentationPolicy, rng: np.random.Generator
) -> DepthSample:
    """Contrast, brightness and per-channel color scaling, each applied with its own coin flip."""
    lo, hi = 1.0 - policy.photometric_range, 1.0 + policy.photometric_range
    rgb = sample.rgb.astype(np.float64)
    if rng.random() < policy.photometric_prob:
        mean = rgb.mean()
        rgb = (rgb - mean) * rng.uniform(lo, hi) + mean
    if rng.random() < policy.photometric_prob:
        rgb = rgb * rng.uniform(lo, hi)
    if rng.random() < policy.photometric_prob:
        rgb = rgb * rng.uniform(lo, hi, size=3)[:, None, None]
    return sample.replace(rgb=np.clip(rgb, 0.0, 1.0).astype(np.float32))


def augment_sample(
    sample: DepthSample, policy: AugmentationPolicy, rng: np.random.Generator
) -> DepthSample:
    """
    Random training-time augmentation.

    Args:
        sample: Input sample
        policy: Flip probability, rotation range in degrees, crop size and jitter settings
        rng: Random stream of the owning training task

    Returns:
        Augmented DepthSample; geometry moves rgb, depth and mask together
    """
    if not policy.enabled:
        return sample
    if rng.random() < policy.flip_prob:
        sample = hflip_sample(sample)
    if policy.rotation_degrees > 0:
        sample = rotate_sample(
            sample, float(rng.uniform(-policy.rotation_degrees, policy.rotation_degrees))
        )
    if policy.crop_height or policy.crop_width:
        sample = random_crop(
            sample, policy.crop_height or sample.height, policy.crop_width or sample.width, rng
        )
    return photometric_jitter(sample, policy, rng)
