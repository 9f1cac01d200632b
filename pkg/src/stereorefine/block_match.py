"""Classical census block matching: the non-learned disparity baseline.

Census codes + Hamming cost, box aggregation, winner-take-all with
parabolic subpixel refinement, and a left-right consistency check. Meant
to be simple and replaceable; externally produced disparity maps can be
ingested instead (see io_formats.ingest_external_disparity).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import ScalarField
from .imaging import Image

_COST_INVALID = np.inf


@dataclass(frozen=True)
class MatchParams:
    d_max: int                  # largest disparity candidate [px]
    census_window: int = 5      # odd, <= 7 (codes are 64-bit)
    agg_window: int = 7         # odd cost-aggregation box size
    lr_threshold: float = 1.0   # left-right consistency tolerance [px]

    def __post_init__(self):
        if self.d_max < 1:
            raise ValueError(f"d_max must be >= 1, got {self.d_max}")
        for name in ("census_window", "agg_window"):
            v = getattr(self, name)
            if v < 3 or v % 2 == 0:
                raise ValueError(f"{name} must be odd and >= 3, got {v}")
        if self.census_window > 7:
            raise ValueError("census_window above 7 exceeds 64 code bits")


def census_transform(img: Image, window: int = 5) -> np.ndarray:
    """Census bitfields, one uint64 per pixel.

    The image is first reduced to grayscale (channel mean). Bits follow
    row-major neighbor order within the window, center excluded; bit k is
    set when that neighbor is strictly darker than the center. Borders
    clamp coordinates (edge replication).
    """
    if window < 3 or window % 2 == 0 or window > 7:
        raise ValueError(f"window must be odd, in [3, 7], got {window}")
    gray = img.gray()
    h, w = gray.shape
    r = window // 2
    padded = np.pad(gray, r, mode="edge")
    code = np.zeros((h, w), dtype=np.uint64)
    bit = np.uint64(0)
    one = np.uint64(1)
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            if dy == 0 and dx == 0:
                continue
            neigh = padded[r + dy:r + dy + h, r + dx:r + dx + w]
            code |= (neigh < gray).astype(np.uint64) << bit
            bit += one
    return code


def _box_sum(cost: np.ndarray, size: int) -> np.ndarray:
    """Box-filter sum with edge-replicated borders, exact in float64."""
    r = size // 2
    padded = np.pad(cost, r, mode="edge")
    c = padded.cumsum(axis=0).cumsum(axis=1)
    c = np.pad(c, ((1, 0), (1, 0)))
    h, w = cost.shape
    return (c[size:size + h, size:size + w] - c[size:size + h, :w]
            - c[:h, size:size + w] + c[:h, :w])


def _wta_subpixel(volume: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Winner-take-all over axis 0 plus parabola subpixel offset.

    Ties break to the smallest disparity (np.argmin convention). The
    offset from the three costs around the winner is clamped to
    [-0.5, 0.5]; boundary winners and non-convex triples get offset 0.
    """
    finite = np.isfinite(volume)
    vol = np.where(finite, volume, 1e30)
    best = vol.argmin(axis=0)
    any_valid = finite.any(axis=0)

    dmax = volume.shape[0] - 1
    if dmax < 2:
        return best.astype(np.float64), any_valid
    interior = (best > 0) & (best < dmax)
    bi = np.clip(best, 1, dmax - 1)
    rows, cols = np.indices(best.shape)
    c0 = vol[bi - 1, rows, cols]
    c1 = vol[bi, rows, cols]
    c2 = vol[bi + 1, rows, cols]
    denom = c0 - 2.0 * c1 + c2
    offset = np.zeros_like(c1)
    good = interior & (denom > 0)
    np.divide(c0 - c2, 2.0 * denom, out=offset, where=good)
    np.clip(offset, -0.5, 0.5, out=offset)
    return best.astype(np.float64) + offset, any_valid


def compute_disparity(left: Image, right: Image, p: MatchParams) -> ScalarField:
    """Dense disparity of the left view with validity from an LR check.

    For each candidate d in [0, d_max], the Hamming distance between left
    and right census codes (right sampled at x - d, coordinates clamped at
    the border) is box-aggregated; winner-take-all plus parabolic subpixel
    gives the left disparity. The right-view disparity reuses the same
    aggregated volume; pixels whose two estimates disagree by more than
    lr_threshold are invalid.
    """
    if (left.height, left.width) != (right.height, right.width):
        raise ValueError(
            f"image dimensions differ: {left.height}x{left.width} vs "
            f"{right.height}x{right.width}"
        )
    h, w = left.height, left.width
    cl = census_transform(left, p.census_window)
    cr = census_transform(right, p.census_window)
    n_cand = p.d_max + 1

    agg_left = np.empty((n_cand, h, w))
    for d in range(n_cand):
        shifted = np.empty_like(cr)
        shifted[:, d:] = cr[:, :w - d]
        shifted[:, :d] = cr[:, :1]  # clamp x - d below 0; LR check cleans up
        cost = np.bitwise_count(cl ^ shifted).astype(np.float64)
        agg_left[d] = _box_sum(cost, p.agg_window)

    d_left, ok_left = _wta_subpixel(agg_left)

    # Right-referenced volume: agg_r(x_r, d) = agg_l(x_r + d, d).
    agg_right = np.full_like(agg_left, _COST_INVALID)
    for d in range(n_cand):
        agg_right[d, :, :w - d] = agg_left[d, :, d:]
    d_right, ok_right = _wta_subpixel(agg_right)

    xr = np.arange(w)[None, :] - np.rint(d_left).astype(np.intp)
    in_range = (xr >= 0) & (xr < w)
    xr_c = np.clip(xr, 0, w - 1)
    rows = np.arange(h)[:, None]
    consistent = np.abs(d_left - d_right[rows, xr_c]) <= p.lr_threshold
    valid = ok_left & in_range & consistent & ok_right[rows, xr_c]

    return ScalarField(np.where(valid, d_left, 0.0), valid)


def fill_invalid(d: ScalarField) -> ScalarField:
    """Extend each row's nearest valid value into invalid runs (left first,
    then right for leading gaps). Rows with no valid pixel stay 0. The
    validity mask is returned unchanged; only values are filled."""
    values = d.values.copy()
    h, w = values.shape
    col = np.arange(w)[None, :]
    # forward fill: index of the most recent valid column
    fwd = np.where(d.valid, col, -1)
    fwd = np.maximum.accumulate(fwd, axis=1)
    # backward fill: index of the next valid column
    bwd = np.where(d.valid, col, w)
    bwd = np.minimum.accumulate(bwd[:, ::-1], axis=1)[:, ::-1]
    pick = np.where(fwd >= 0, fwd, np.where(bwd < w, bwd, 0))
    rows = np.arange(h)[:, None]
    filled = values[rows, pick]
    filled[~(d.valid.any(axis=1))] = 0.0
    return ScalarField(np.where(d.valid, values, filled), d.valid.copy())
