"""Metrics and analyses: depth error, EPE, D1 outlier rates, distance-binned
median errors and the quadratic trend fit.

The evaluation mask is the AND of: valid ground truth, valid estimate,
ground-truth disparity within the matcher's search range (d_max), and
ground-truth depth within 100 m. Disparity metrics for every variant are
computed from the variant's depth via d = b*f_x / Z, so the baseline and a
zero-residual refinement produce bit-identical numbers.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .block_match import MatchParams, compute_disparity, fill_invalid
from .geometry import CameraRig, ScalarField, depth_to_disparity, disparity_to_depth
from .imaging import warp_right_to_left
from .io_formats import load_checkpoint, read_manifest, write_pfm
from .refine import HeadMode, apply_head, prepare_inputs, residual_field

logger = logging.getLogger(__name__)

DEPTH_CAP_M = 100.0


def eval_mask(z_gt: ScalarField, d_gt: ScalarField, est_valid: np.ndarray,
              d_max: float) -> np.ndarray:
    return (z_gt.valid & d_gt.valid & np.asarray(est_valid, dtype=bool)
            & (d_gt.values <= d_max) & (z_gt.values <= DEPTH_CAP_M))


def _masked(values: np.ndarray, mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("empty evaluation mask")
    return values[mask]


def mean_abs_depth_error(z: ScalarField, z_gt: ScalarField, mask: np.ndarray) -> float:
    """Mean |Z - Z_gt| in meters over the mask."""
    return float(np.abs(_masked(z.values - z_gt.values, mask)).mean())


def epe(d: ScalarField, d_gt: ScalarField, mask: np.ndarray) -> float:
    """End-point error: mean |d - d_gt| in pixels over the mask."""
    return float(np.abs(_masked(d.values - d_gt.values, mask)).mean())


def d1_rate(d: ScalarField, d_gt: ScalarField, mask: np.ndarray,
            threshold_px: float) -> float:
    """Fraction of masked pixels with disparity error strictly above the
    threshold ("more than k pixels")."""
    if threshold_px <= 0:
        raise ValueError(f"threshold must be > 0, got {threshold_px}")
    err = np.abs(_masked(d.values - d_gt.values, mask))
    return float((err > threshold_px).mean())


def refined_disparity(z: ScalarField, rig: CameraRig) -> ScalarField:
    """Back-convert refined depth to disparity for disparity-domain metrics."""
    return depth_to_disparity(z, rig)


def bin_median_errors(z: ScalarField, z_gt: ScalarField, mask: np.ndarray,
                      bin_width_m: float = 1.0) -> list[tuple[float, float, int]]:
    """Median |Z - Z_gt| (in mm) per ground-truth-distance bin.

    Pixels fall into bin floor(z_gt / width); centers are reported at
    (k + 0.5) * width; empty bins are omitted. Even-count medians average
    the two middle values.
    """
    if bin_width_m <= 0:
        raise ValueError(f"bin width must be > 0, got {bin_width_m}")
    zs = _masked(z_gt.values, mask)
    errs = np.abs(_masked(z.values - z_gt.values, mask)) * 1000.0
    return _bin_series(zs, errs, bin_width_m)


def _bin_series(zs: np.ndarray, errs_mm: np.ndarray,
                bin_width_m: float) -> list[tuple[float, float, int]]:
    idx = np.floor(zs / bin_width_m).astype(np.int64)
    series = []
    for k in np.unique(idx):
        sel = errs_mm[idx == k]
        series.append(((k + 0.5) * bin_width_m, float(np.median(sel)), int(sel.size)))
    return series


def quadfit(series: list[tuple[float, float]]) -> tuple[float, float, float]:
    """Least-squares fit of y = a2 x^2 + a1 x + a0 via normal equations."""
    xs = np.array([p[0] for p in series], dtype=np.float64)
    ys = np.array([p[1] for p in series], dtype=np.float64)
    if np.unique(xs).size < 3:
        raise ValueError(f"need >= 3 distinct x values, got {np.unique(xs).size}")
    a = np.stack([xs * xs, xs, np.ones_like(xs)], axis=1)
    ata = a.T @ a
    aty = a.T @ ys
    try:
        coeffs = np.linalg.solve(ata, aty)
    except np.linalg.LinAlgError:
        raise ValueError("rank-deficient design matrix") from None
    return float(coeffs[0]), float(coeffs[1]), float(coeffs[2])


@dataclass
class EvalReport:
    """Aggregate (pixel-pooled) metrics for one variant."""

    variant: str
    depth_error_m: float
    epe_px: float
    d1_1px: float
    d1_3px: float
    bin_series: list[tuple[float, float, int]]
    quad_coeffs: tuple[float, float, float]
    pixel_count: int
    per_sample_depth_error: list[float]


class _Pool:
    """Pixel pools accumulated in fixed sample order."""

    def __init__(self, variant: str):
        self.variant = variant
        self.z_gt: list[np.ndarray] = []
        self.depth_err: list[np.ndarray] = []
        self.disp_err: list[np.ndarray] = []
        self.per_sample: list[float] = []

    def add(self, z: ScalarField, d: ScalarField, z_gt: ScalarField,
            d_gt: ScalarField, mask: np.ndarray) -> None:
        de = np.abs((z.values - z_gt.values)[mask])
        self.z_gt.append(z_gt.values[mask])
        self.depth_err.append(de)
        self.disp_err.append(np.abs((d.values - d_gt.values)[mask]))
        self.per_sample.append(float(de.mean()) if de.size else 0.0)

    def report(self, bin_width_m: float = 1.0) -> EvalReport:
        zs = np.concatenate(self.z_gt)
        de = np.concatenate(self.depth_err)
        pe = np.concatenate(self.disp_err)
        if zs.size == 0:
            raise ValueError("empty evaluation mask over the whole dataset")
        series = _bin_series(zs, de * 1000.0, bin_width_m)
        try:
            coeffs = quadfit([(c, m) for c, m, _ in series])
        except ValueError:
            logger.warning("quadratic fit skipped for %s: fewer than 3 bins", self.variant)
            coeffs = (float("nan"),) * 3
        return EvalReport(
            variant=self.variant,
            depth_error_m=float(de.mean()),
            epe_px=float(pe.mean()),
            d1_1px=float((pe > 1.0).mean()),
            d1_3px=float((pe > 3.0).mean()),
            bin_series=series,
            quad_coeffs=coeffs,
            pixel_count=int(zs.size),
            per_sample_depth_error=self.per_sample,
        )

    def error_pairs(self) -> np.ndarray:
        """(N, 2) float32 rows of (z_gt_m, abs_depth_err_m), for re-binning."""
        return np.stack([np.concatenate(self.z_gt),
                         np.concatenate(self.depth_err)], axis=1).astype("<f4")


def evaluate(manifest_path, d_max: Optional[int] = None, checkpoint=None,
             report_dir=None, match_params: Optional[MatchParams] = None) -> list[EvalReport]:
    """Evaluate baseline (and, given a checkpoint, refined) depth on a dataset.

    Baselines missing from the manifest are computed on the fly when
    match_params is given. With report_dir set, writes report.csv,
    bins_<variant>.csv and errors_<variant>.bin underneath it.
    """
    from .io_formats import load_sample

    manifest_path = Path(manifest_path)
    manifest = read_manifest(manifest_path)
    if not manifest.entries:
        raise ValueError("empty dataset manifest")
    if d_max is None:
        d_max = manifest.d_max
    if d_max is None:
        raise ValueError("no d_max: pass one or run the baseline step first")
    rig = manifest.rig

    net = load_checkpoint(checkpoint) if checkpoint is not None else None
    pools = [_Pool("baseline")]
    if net is not None:
        pools.append(_Pool("refined"))

    for entry in manifest.entries:
        sample = load_sample(manifest_path.parent, entry)
        d_base = sample.d_baseline
        if d_base is None:
            if match_params is None:
                raise ValueError(f"sample {entry.sample_dir} has no baseline "
                                 f"disparity; run the baseline step first")
            d_base = compute_disparity(sample.left, sample.right, match_params)
        z_a = disparity_to_depth(d_base, rig)
        mask = eval_mask(sample.z_gt, sample.d_gt, z_a.valid, d_max) & sample.valid
        z_dense = fill_invalid(z_a)

        d_from_z = refined_disparity(ScalarField(z_dense.values, z_a.valid), rig)
        pools[0].add(ScalarField(z_dense.values, z_a.valid), d_from_z,
                     sample.z_gt, sample.d_gt, mask)

        if net is not None:
            warped = warp_right_to_left(sample.right, d_base)
            x = prepare_inputs(z_a, sample.left, warped)
            f = residual_field(net.infer(x.data), z_dense)
            z_ref = apply_head(z_dense, f, net.head)
            d_ref = refined_disparity(z_ref, rig)
            pools[1].add(z_ref, d_ref, sample.z_gt, sample.d_gt, mask)

    reports = [p.report() for p in pools]
    if report_dir is not None:
        write_reports(reports, pools, report_dir)
    return reports


def write_reports(reports: list[EvalReport], pools: list[_Pool], report_dir) -> None:
    report_dir = Path(report_dir)
    report_dir.mkdir(parents=True, exist_ok=True)
    lines = ["variant,depth_error_m,epe_px,d1_1px,d1_3px,a2,a1,a0"]
    for r in reports:
        a2, a1, a0 = r.quad_coeffs
        lines.append(f"{r.variant},{r.depth_error_m!r},{r.epe_px!r},"
                     f"{r.d1_1px!r},{r.d1_3px!r},{a2!r},{a1!r},{a0!r}")
    (report_dir / "report.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    for r, pool in zip(reports, pools):
        blines = ["bin_center_m,median_error_mm,count"]
        blines += [f"{c!r},{m!r},{n}" for c, m, n in r.bin_series]
        (report_dir / f"bins_{r.variant}.csv").write_text(
            "\n".join(blines) + "\n", encoding="utf-8")
        (report_dir / f"errors_{r.variant}.bin").write_bytes(
            pool.error_pairs().tobytes())


def analyze(report_dir, bin_width_m: float = 1.0) -> dict[str, tuple[float, float, float]]:
    """Re-bin raw per-pixel errors and fit the quadratic trend per variant.

    Reads errors_<variant>.bin files written by evaluate(); writes
    analysis.csv plus analysis_bins_<variant>.csv and returns the fitted
    coefficients keyed by variant.
    """
    if bin_width_m <= 0:
        raise ValueError(f"bin width must be > 0, got {bin_width_m}")
    report_dir = Path(report_dir)
    files = sorted(report_dir.glob("errors_*.bin"))
    if not files:
        raise FileNotFoundError(f"no errors_<variant>.bin files under {report_dir}")
    results: dict[str, tuple[float, float, float]] = {}
    lines = ["variant,a2,a1,a0,bin_width_m,n_bins"]
    for f in files:
        variant = f.stem[len("errors_"):]
        pairs = np.frombuffer(f.read_bytes(), dtype="<f4").reshape(-1, 2)
        series = _bin_series(pairs[:, 0].astype(np.float64),
                             pairs[:, 1].astype(np.float64) * 1000.0, bin_width_m)
        coeffs = quadfit([(c, m) for c, m, _ in series])
        results[variant] = coeffs
        blines = ["bin_center_m,median_error_mm,count"]
        blines += [f"{c!r},{m!r},{n}" for c, m, n in series]
        (report_dir / f"analysis_bins_{variant}.csv").write_text(
            "\n".join(blines) + "\n", encoding="utf-8")
        a2, a1, a0 = coeffs
        lines.append(f"{variant},{a2!r},{a1!r},{a0!r},{bin_width_m!r},{len(series)}")
    (report_dir / "analysis.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return results
