"""Images, bilinear sampling, disparity-guided warping and depth shading.

Images hold float values in [0, 1], shape (H, W, C) with C in {1, 3}.
Warping resamples the right view into the left image plane: left pixel x
corresponds to right subpixel position x - d(x, y) under the standard
rectified convention.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .geometry import ScalarField


@dataclass
class Image:
    """Dense image, values in [0, 1], shape (H, W, C)."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim == 2:
            self.values = self.values[:, :, None]
        if self.values.ndim != 3:
            raise ValueError(f"image must be (H, W, C), got shape {self.values.shape}")
        h, w, c = self.values.shape
        if h < 1 or w < 1:
            raise ValueError(f"image dimensions must be positive, got {h}x{w}")
        if c not in (1, 3):
            raise ValueError(f"channels must be 1 or 3, got {c}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("image contains non-finite values")
        if self.values.min() < 0.0 or self.values.max() > 1.0:
            raise ValueError("image values must lie in [0, 1]")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]

    def gray(self) -> np.ndarray:
        """Grayscale view, mean over channels, shape (H, W)."""
        return self.values.mean(axis=2)


@dataclass
class WarpedImage:
    """Warp result: resampled image plus a per-pixel validity mask.

    `valid` is False where the source coordinate fell outside the right
    image or the driving disparity was invalid; those pixels carry 0.
    """

    image: Image
    valid: np.ndarray

    def __post_init__(self):
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.valid.shape != (self.image.height, self.image.width):
            raise ValueError("valid mask must match image spatial dimensions")


def bilinear_sample(img: Image, x: float, y: float, c: int = 0) -> Optional[float]:
    """Bilinear interpolation at (x, y) for channel c.

    Returns None when the sample point lies outside [0, W-1] x [0, H-1]
    (an out-of-bounds indicator, not a fault). Integer coordinates return
    the stored pixel exactly.
    """
    h, w = img.height, img.width
    if not (0.0 <= x <= w - 1 and 0.0 <= y <= h - 1):
        return None
    # Clamp the base corner so weight-0 neighbors at the far edge are never read.
    x0 = min(int(np.floor(x)), w - 2) if w > 1 else 0
    y0 = min(int(np.floor(y)), h - 2) if h > 1 else 0
    fx = x - x0
    fy = y - y0
    v = img.values
    x1 = min(x0 + 1, w - 1)
    y1 = min(y0 + 1, h - 1)
    return float(
        (1 - fy) * ((1 - fx) * v[y0, x0, c] + fx * v[y0, x1, c])
        + fy * ((1 - fx) * v[y1, x0, c] + fx * v[y1, x1, c])
    )


def _sample_rows(values: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Linear interpolation along x within each row. xs is (H, W), may be
    out of range; caller masks. Returns (H, W, C)."""
    h, w, _ = values.shape
    xc = np.clip(xs, 0.0, w - 1.0)
    x0 = np.minimum(np.floor(xc).astype(np.intp), max(w - 2, 0))
    fx = (xc - x0)[:, :, None]
    rows = np.arange(h)[:, None]
    a = values[rows, x0]
    b = values[rows, np.minimum(x0 + 1, w - 1)]
    return (1.0 - fx) * a + fx * b


def warp_right_to_left(right: Image, d: ScalarField) -> WarpedImage:
    """Resample the right image at x - d(x, y) for every left pixel.

    Rectified pairs share rows, so the warp is horizontal-only. Pixels
    whose disparity is invalid or whose source falls outside the right
    image are masked invalid and filled with 0.
    """
    h, w = right.height, right.width
    if (d.height, d.width) != (h, w):
        raise ValueError(
            f"disparity {d.height}x{d.width} does not match image {h}x{w}"
        )
    xs = np.arange(w, dtype=np.float64)[None, :] - d.values
    inside = (xs >= 0.0) & (xs <= w - 1.0)
    valid = d.valid & inside
    out = _sample_rows(right.values, xs)
    out[~valid] = 0.0
    return WarpedImage(Image(out), valid)


def shading_image(z: ScalarField, eps: float = 0.01) -> Image:
    """Depth-gradient shading: 1 / (|grad Z| + eps), rescaled to [0, 1].

    Central differences in the interior, one-sided at borders. The affine
    rescale uses the min/max over valid pixels; invalid pixels output 0.
    Flat regions appear bright, depth edges dark.
    """
    if eps <= 0:
        raise ValueError(f"eps must be > 0, got {eps}")
    gy, gx = np.gradient(z.values)
    raw = 1.0 / (np.hypot(gx, gy) + eps)
    out = np.zeros_like(raw)
    if z.valid.any():
        lo = raw[z.valid].min()
        hi = raw[z.valid].max()
        if hi > lo:
            out[z.valid] = (raw[z.valid] - lo) / (hi - lo)
        else:
            out[z.valid] = 1.0
    return Image(out[:, :, None])
