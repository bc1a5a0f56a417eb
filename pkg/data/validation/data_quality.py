from __future__ import annotations

from typing import Any, Dict, List, Sequence

import numpy as np

from data.samples import DepthSample


class DepthSampleValidator:
    """Data quality validation for RGB-depth samples."""

    def __init__(self, rgb_tolerance: float = 0.0):
        self.rgb_tolerance = rgb_tolerance

    def validate(self, sample: DepthSample) -> Dict[str, Any]:
        """Validate one sample against the DepthSample invariants."""
        results = {
            "sample_id": sample.id,
            "issues": [],
            "warnings": [],
            "passed": True,
        }

        def fail(message: str) -> None:
            results["issues"].append(message)
            results["passed"] = False

        rgb, depth, mask = sample.rgb, sample.depth, sample.mask
        if rgb.ndim != 3 or rgb.shape[0] != 3:
            fail(f"rgb must be (3, H, W), got {rgb.shape}")
        if depth.ndim != 3 or depth.shape[0] != 1:
            fail(f"depth must be (1, H, W), got {depth.shape}")
        if mask.shape != depth.shape:
            fail(f"mask shape {mask.shape} differs from depth shape {depth.shape}")
        if rgb.ndim == 3 and depth.ndim == 3 and rgb.shape[1:] != depth.shape[1:]:
            fail(f"rgb size {rgb.shape[1:]} differs from depth size {depth.shape[1:]}")
        if not results["passed"]:
            return results

        if not np.isfinite(rgb).all():
            fail("Non-finite values in rgb")
        elif rgb.min() < -self.rgb_tolerance or rgb.max() > 1 + self.rgb_tolerance:
            fail(f"rgb outside [0, 1]: [{rgb.min():.4f}, {rgb.max():.4f}]")
        if not np.isfinite(depth).all():
            fail("Non-finite values in depth")
        elif (depth < 0).any():
            fail("Negative depth values")
        if not np.array_equal(mask.astype(bool), depth > 0):
            fail("mask does not match depth > 0")

        valid_fraction = float(np.mean(depth > 0))
        if valid_fraction == 0:
            results["warnings"].append("No valid depth pixel")
        elif valid_fraction < 0.5:
            results["warnings"].append(f"Only {valid_fraction:.1%} of pixels have valid depth")
        return results

    def validate_all(self, samples: Sequence[DepthSample]) -> List[Dict[str, Any]]:
        return [self.validate(sample) for sample in samples]

    def generate_quality_report(self, results: Sequence[Dict[str, Any]]) -> str:
        """Human-readable summary of validate_all results."""
        failed = [r for r in results if not r["passed"]]
        lines = [f"Validated {len(results)} samples: {len(failed)} failed"]
        for r in failed:
            lines.append(f"  {r['sample_id']}: {'; '.join(r['issues'])}")
        warned = sum(1 for r in results if r["warnings"])
        if warned:
            lines.append(f"  {warned} samples with warnings")
        return "\n".join(lines)
