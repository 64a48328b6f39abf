"""Depth-error metrics, Table-style decompositions, and hydrographic banding.

Error convention throughout: error = predicted - reference, both in meters,
negative down. Region masks select which pixels are scored, so the same
machinery produces non-gap, gap, combined, whole, and per-depth-bin rows.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rasters import DepthRaster, check_coregistered


class EmptyRegionError(ValueError):
    """No pixels selected; metrics are undefined rather than zero."""


@dataclass
class MetricsResult:
    count: int
    rmse: float
    mae: float
    std: float
    bias: float

    @classmethod
    def empty(cls):
        return cls(count=0, rmse=float("nan"), mae=float("nan"), std=float("nan"), bias=float("nan"))


def _selected_errors(pred: DepthRaster, ref: DepthRaster, region_mask=None):
    check_coregistered(pred, ref)
    select = (pred.values != pred.nodata) & (ref.values != ref.nodata)
    if region_mask is not None:
        select &= np.asarray(region_mask, dtype=bool)
    return pred.values[select] - ref.values[select], select


def compute_metrics(pred: DepthRaster, ref: DepthRaster, region_mask=None) -> MetricsResult:
    """RMSE / MAE / Std / bias over pixels valid in both rasters and selected."""
    errors, _ = _selected_errors(pred, ref, region_mask)
    if errors.size == 0:
        return MetricsResult.empty()
    bias = float(errors.mean())
    return MetricsResult(
        count=int(errors.size),
        rmse=float(np.sqrt(np.mean(errors**2))),
        mae=float(np.mean(np.abs(errors))),
        std=float(np.sqrt(np.mean((errors - bias) ** 2))),
        bias=bias,
    )


def threshold_exceedance(pred, ref, thresholds=(1.0, 0.5), region_mask=None):
    """Percentage of evaluated pixels with |error| above each threshold."""
    errors, _ = _selected_errors(pred, ref, region_mask)
    if errors.size == 0:
        return {float(t): float("nan") for t in thresholds}
    return {float(t): float(100.0 * np.mean(np.abs(errors) > t)) for t in thresholds}


def coverage(dsm: DepthRaster) -> float:
    """Percentage of cells holding a depth."""
    return float(100.0 * dsm.mask.mean())


# -- hydrographic banding -------------------------------------------------------


@dataclass
class HydroBand:
    name: str
    a: float  # fixed component, meters
    b: float  # depth-proportional component

    def catzoc_tolerance(self, depth_mag):
        return self.a + self.b * depth_mag

    def s44_tvu(self, depth_mag):
        return np.sqrt(self.a**2 + (self.b * depth_mag) ** 2)


# Vertical-uncertainty coefficients from the IHO standards (S-57/S-101 ZOC
# table and S-44 ed. 6); shipped as defaults, overridable via config.
CATZOC_DEFAULT = (
    HydroBand("A1", 0.5, 0.01),
    HydroBand("A2", 1.0, 0.02),
    HydroBand("C", 2.0, 0.05),
)
S44_DEFAULT = (
    HydroBand("Exclusive", 0.15, 0.0075),
    HydroBand("Special", 0.25, 0.0075),
    HydroBand("Order1", 0.5, 0.013),
    HydroBand("Order2", 1.0, 0.023),
)
OUTSIDE_BAND = "Outside"


@dataclass
class HydroBandingConfig:
    catzoc: tuple = CATZOC_DEFAULT
    s44: tuple = S44_DEFAULT

    def __post_init__(self):
        for bands in (self.catzoc, self.s44):
            for tighter, looser in zip(bands, bands[1:]):
                if not (tighter.a < looser.a and tighter.b <= looser.b):
                    raise ValueError(
                        f"bands must be ordered strictly by tightness: {tighter.name} vs {looser.name}"
                    )


def _band_percentages(errors, depth_mag, bands, tolerance_fn):
    names = [band.name for band in bands] + [OUTSIDE_BAND]
    if errors.size == 0:
        return {name: float("nan") for name in names}
    assigned = np.full(errors.shape, len(bands), dtype=int)
    for idx in reversed(range(len(bands))):
        tol = tolerance_fn(bands[idx], depth_mag)
        assigned = np.where(np.abs(errors) <= tol, idx, assigned)  # boundary counts inside
    return {name: float(100.0 * np.mean(assigned == idx)) for idx, name in enumerate(names)}


def hydro_banding(pred: DepthRaster, ref: DepthRaster, cfg: HydroBandingConfig | None = None,
                  region_mask=None):
    """Assign each pixel the tightest band admitting its error; report percentages.

    CATZOC tolerance is a + b*depth; S-44 total vertical uncertainty is
    sqrt(a^2 + (b*depth)^2), with depth taken from the reference raster.
    """
    cfg = cfg or HydroBandingConfig()
    errors, select = _selected_errors(pred, ref, region_mask)
    depth_mag = np.abs(ref.values[select])
    return {
        "catzoc": _band_percentages(errors, depth_mag, cfg.catzoc, HydroBand.catzoc_tolerance),
        "s44": _band_percentages(errors, depth_mag, cfg.s44, HydroBand.s44_tvu),
    }


def classify_error(error, depth_mag, bands, scheme="catzoc"):
    """Band name for one |error| at one depth (boundary equality is inside)."""
    fn = HydroBand.catzoc_tolerance if scheme == "catzoc" else HydroBand.s44_tvu
    for band in bands:
        if abs(error) <= fn(band, depth_mag):
            return band.name
    return OUTSIDE_BAND


# -- histograms -------------------------------------------------------------------


def histogram(diffs, bins=40):
    """Normalized histogram: per-bin probability mass (densities sum to 1)."""
    diffs = np.asarray(diffs, dtype=np.float64).ravel()
    if diffs.size == 0:
        raise EmptyRegionError("no differences to histogram")
    counts, edges = np.histogram(diffs, bins=bins)
    return edges, counts / diffs.size


def write_histogram_csv(path, named_diffs, bins=40):
    """One CSV with shared bins: source,bin_lo,bin_hi,density rows."""
    all_values = np.concatenate([np.asarray(d).ravel() for d in named_diffs.values()])
    lo, hi = float(all_values.min()), float(all_values.max())
    if lo == hi:
        lo, hi = lo - 0.5, hi + 0.5
    edges = np.linspace(lo, hi, bins + 1)
    with open(path, "w") as fh:
        fh.write("source,bin_lo,bin_hi,density\n")
        for name, diffs in named_diffs.items():
            _, densities = histogram(diffs, bins=edges)
            for b_lo, b_hi, dens in zip(edges[:-1], edges[1:], densities):
                fh.write(f"{name},{b_lo!r},{b_hi!r},{dens!r}\n")


# -- pipeline-level decomposition ---------------------------------------------------


@dataclass
class EvalRow:
    label: str
    count: int
    rmse: float
    mae: float
    std: float
    bias: float
    pct_gt_1m: float
    pct_gt_0p5m: float
    coverage: float


def _row(label, pred, ref, region_mask, cov):
    m = compute_metrics(pred, ref, region_mask)
    exb = threshold_exceedance(pred, ref, (1.0, 0.5), region_mask)
    return EvalRow(
        label=label,
        count=m.count,
        rmse=m.rmse,
        mae=m.mae,
        std=m.std,
        bias=m.bias,
        pct_gt_1m=exb[1.0],
        pct_gt_0p5m=exb[0.5],
        coverage=cov,
    )


def evaluate_pipeline(ref: DepthRaster, sfm=None, corrected=None, predicted=None,
                      combined=None, depth_bins=(0.0, 5.0, 10.0, 20.0)):
    """Build the standard decomposition against reference depths.

    ``non-gaps`` are cells measured by the survey (sfm/corrected valid),
    ``gaps`` the rest; the whole prediction is additionally split into
    depth bins by |reference depth|.
    """
    rows = []
    gap_src = corrected if corrected is not None else sfm
    if sfm is not None:
        rows.append(_row("sfm", sfm, ref, None, coverage(sfm)))
    if corrected is not None:
        rows.append(_row("corrected_sfm", corrected, ref, None, coverage(corrected)))
    if predicted is not None:
        if gap_src is not None:
            non_gap = gap_src.mask.astype(bool)
            rows.append(_row("pred_non_gaps", predicted, ref, non_gap, coverage(predicted)))
            rows.append(_row("pred_gaps", predicted, ref, ~non_gap, coverage(predicted)))
    if combined is not None:
        rows.append(_row("combined", combined, ref, None, coverage(combined)))
    if predicted is not None:
        rows.append(_row("whole", predicted, ref, None, coverage(predicted)))
        for lo, hi in zip(depth_bins[:-1], depth_bins[1:]):
            in_bin = (np.abs(ref.values) >= lo) & (np.abs(ref.values) < hi)
            rows.append(_row(f"whole_{lo:g}-{hi:g}m", predicted, ref, in_bin, coverage(predicted)))
    return rows


def write_metrics_csv(rows, path):
    with open(path, "w") as fh:
        fh.write("row,count,rmse,mae,std,bias,pct_err_gt_1m,pct_err_gt_0p5m,coverage\n")
        for r in rows:
            fh.write(
                f"{r.label},{r.count},{r.rmse!r},{r.mae!r},{r.std!r},{r.bias!r},"
                f"{r.pct_gt_1m!r},{r.pct_gt_0p5m!r},{r.coverage!r}\n"
            )


def format_metrics_table(rows):
    header = f"{'row':<16}{'count':>8}{'rmse':>9}{'mae':>9}{'std':>9}{'bias':>9}{'>1m%':>8}{'>0.5m%':>8}{'cov%':>8}"
    lines = [header, "-" * len(header)]
    for r in rows:
        lines.append(
            f"{r.label:<16}{r.count:>8}{r.rmse:>9.3f}{r.mae:>9.3f}{r.std:>9.3f}{r.bias:>9.3f}"
            f"{r.pct_gt_1m:>8.2f}{r.pct_gt_0p5m:>8.2f}{r.coverage:>8.2f}"
        )
    return "\n".join(lines)


def write_banding_csv(banding, path):
    with open(path, "w") as fh:
        fh.write("scheme,band,percent\n")
        for scheme, table in banding.items():
            for band, pct in table.items():
                fh.write(f"{scheme},{band},{pct!r}\n")
