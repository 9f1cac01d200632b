"""Camera model and depth <-> disparity conversions.

A rectified stereo rig maps disparity d (pixels) to depth Z (meters) via
Z = baseline * focal_x / d. All conversions here are pure functions over
ScalarField grids; degenerate pixels (d <= 0, Z <= 0, already invalid)
become invalid output pixels rather than infinities.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class CameraRig:
    """Rectified stereo rig constants."""

    baseline_m: float   # horizontal distance between camera centers [m]
    focal_x_px: float   # horizontal focal length [px]

    def __post_init__(self):
        if not (self.baseline_m > 0):
            raise ValueError(f"baseline_m must be > 0, got {self.baseline_m}")
        if not (self.focal_x_px > 0):
            raise ValueError(f"focal_x_px must be > 0, got {self.focal_x_px}")

    @property
    def bf(self) -> float:
        """Product baseline_m * focal_x_px [m*px], the triangulation constant."""
        return self.baseline_m * self.focal_x_px


@dataclass
class ScalarField:
    """A 2-D grid of real values with a paired validity mask.

    Used for disparity maps (pixels), depth maps (meters) and network
    residual outputs. `values` and `valid` are (H, W) arrays; values at
    valid pixels must be finite. Invalid pixels conventionally carry 0.
    """

    values: np.ndarray
    valid: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError(f"values must be 2-D, got shape {self.values.shape}")
        if self.valid is None:
            self.valid = np.ones(self.values.shape, dtype=bool)
        else:
            self.valid = np.asarray(self.valid, dtype=bool)
        if self.valid.shape != self.values.shape:
            raise ValueError(
                f"valid shape {self.valid.shape} != values shape {self.values.shape}"
            )
        if not np.all(np.isfinite(self.values[self.valid])):
            raise ValueError("non-finite value at a valid pixel")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def copy(self) -> "ScalarField":
        return ScalarField(self.values.copy(), self.valid.copy())


def _reciprocal_map(f: ScalarField, bf: float) -> ScalarField:
    # Shared core of both conversions: out = bf / in where in > 0.
    ok = f.valid & (f.values > 0)
    out = np.zeros_like(f.values)
    np.divide(bf, f.values, out=out, where=ok)
    return ScalarField(out, ok)


def disparity_to_depth(d: ScalarField, rig: CameraRig) -> ScalarField:
    """Triangulate depth [m] from disparity [px]: Z = b * f_x / d.

    Pixels with d <= 0 or invalid input are invalid in the output; no
    infinities are ever produced.
    """
    return _reciprocal_map(d, rig.bf)


def depth_to_disparity(z: ScalarField, rig: CameraRig) -> ScalarField:
    """Invert triangulation: d = b * f_x / Z, invalid where Z <= 0."""
    return _reciprocal_map(z, rig.bf)


def predicted_depth_error(d_gt: float, eps_d: float, rig: CameraRig) -> float:
    """Approximate depth error [m] for a disparity error eps_d at d_gt.

    Returns b * f_x * eps_d / d_gt**2, i.e. eps_d * Z_gt**2 / (b * f_x):
    the quadratic-in-depth growth law, valid when d_gt >> eps_d.
    """
    if d_gt <= 0:
        raise ValueError(f"d_gt must be > 0, got {d_gt}")
    return rig.bf * eps_d / (d_gt * d_gt)


def exact_depth_error(d_gt: float, eps_d: float, rig: CameraRig) -> float:
    """Exact depth error [m]: b*f_x/d_gt - b*f_x/(d_gt + eps_d), simplified.

    Equals b * f_x * eps_d / (d_gt * (d_gt + eps_d)). The approximation in
    predicted_depth_error drops the factor d_gt / (d_gt + eps_d).
    """
    if d_gt <= 0:
        raise ValueError(f"d_gt must be > 0, got {d_gt}")
    if d_gt + eps_d <= 0:
        raise ValueError(f"d_gt + eps_d must be > 0, got {d_gt + eps_d}")
    return rig.bf * eps_d / (d_gt * (d_gt + eps_d))
