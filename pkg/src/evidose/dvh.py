"""Dose-volume histograms with predictive-uncertainty confidence bands.

V(d) is the percentage of a structure receiving at least dose d. Bands come
from shifting every voxel dose by +-1.96 times the predictive standard
deviation, the square root of the summed aleatoric and epistemic variances
(law of total variance). The figure-caption variant that combines the two
variances in quadrature is kept behind a flag for comparison; it is not the
default because the derivation sums them.
"""

import dataclasses

import numpy as np

from evidose import phantom

Z_95 = 1.96


@dataclasses.dataclass
class DVHCurve:
    roi: str
    dose_gy: np.ndarray
    volume_pct: np.ndarray
    band_low_pct: object = None  # arrays when a band is attached
    band_high_pct: object = None


def default_dose_grid(step=0.5, top=phantom.DOSE_CAP):
    return np.arange(0.0, top + step / 2, step)


def _volume_curve(doses, grid):
    doses = np.sort(np.asarray(doses, dtype=np.float64))
    n = doses.size
    counts = n - np.searchsorted(doses, grid, side="left")
    return 100.0 * counts / n


def _check_grid(grid):
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 1 or grid.size == 0:
        raise ValueError("dose grid must be a non-empty 1-D array")
    if np.any(np.diff(grid) <= 0):
        raise ValueError("dose grid must be strictly increasing")
    return grid


def dvh(dose, roi_mask, dose_grid=None, roi="roi"):
    """Plain cumulative DVH of a dose volume over one structure."""
    mask = np.asarray(roi_mask, dtype=bool)
    if not mask.any():
        raise ValueError(f"structure {roi} is empty")
    grid = _check_grid(default_dose_grid() if dose_grid is None else dose_grid)
    values = np.asarray(dose, dtype=np.float64)[mask]
    return DVHCurve(roi=roi, dose_gy=grid, volume_pct=_volume_curve(values, grid))


def predictive_std(bundle):
    """Per-voxel predictive standard deviation in Gy: sqrt(U_alea + U_epis)."""
    ua = np.asarray(bundle.aleatoric, dtype=np.float64)
    ue = np.asarray(bundle.epistemic, dtype=np.float64)
    if (ua < 0).any() or (ue < 0).any():
        raise ValueError("uncertainty maps must be non-negative")
    return np.sqrt(ua + ue)


def dvh_with_band(bundle, roi_mask, dose_grid=None, roi="roi", quadrature_band=False):
    """DVH of the predicted dose with a 95% band from the predictive std.

    band_high rescores every voxel at dose + 1.96 sigma, band_low at
    dose - 1.96 sigma clamped to 0 Gy. `quadrature_band` switches to
    combining the two uncertainty maps in quadrature instead of summing.
    """
    mask = np.asarray(roi_mask, dtype=bool)
    if not mask.any():
        raise ValueError(f"structure {roi} is empty")
    grid = _check_grid(default_dose_grid() if dose_grid is None else dose_grid)
    if quadrature_band:
        ua = np.asarray(bundle.aleatoric, dtype=np.float64)
        ue = np.asarray(bundle.epistemic, dtype=np.float64)
        if (ua < 0).any() or (ue < 0).any():
            raise ValueError("uncertainty maps must be non-negative")
        delta = np.sqrt(ua * ua + ue * ue)
    else:
        delta = predictive_std(bundle)
    dose = np.asarray(bundle.dose, dtype=np.float64)
    nominal = dose[mask]
    shift = Z_95 * delta[mask]
    return DVHCurve(
        roi=roi,
        dose_gy=grid,
        volume_pct=_volume_curve(nominal, grid),
        band_low_pct=_volume_curve(np.maximum(nominal - shift, 0.0), grid),
        band_high_pct=_volume_curve(nominal + shift, grid),
    )


def roi_criteria(doses, target):
    """Clinical summary criteria for one structure's voxel doses.

    Targets report D1/D95/D99 (dose covering at least x% of the volume,
    linear interpolation); organs at risk report the mean and the maximum
    (the near-maximum 0.1cc criterion collapses to the maximum on synthetic
    voxels that carry no physical volume).
    """
    doses = np.asarray(doses, dtype=np.float64)
    if doses.size == 0:
        raise ValueError("empty structure has no criteria")
    if target:
        return {
            "d1": float(np.percentile(doses, 99.0)),
            "d95": float(np.percentile(doses, 5.0)),
            "d99": float(np.percentile(doses, 1.0)),
        }
    return {"d_mean": float(doses.mean()), "d_0.1cc": float(doses.max())}


def dvh_score(pred_doses, cases):
    """Mean absolute difference of DVH criteria between prediction and truth.

    Criteria pool over every non-empty structure of every case; empty
    structures are skipped.
    """
    pred_doses = list(pred_doses)
    cases = list(cases)
    if len(pred_doses) != len(cases):
        raise ValueError("pred_doses and cases must align")
    diffs = []
    for pred, case in zip(pred_doses, cases):
        pred = np.asarray(pred, dtype=np.float64)
        gt = np.asarray(case.dose_gt, dtype=np.float64)
        for roi in phantom.ROI_NAMES:
            sel = case.roi_masks[roi] & case.valid_mask
            if not sel.any():
                continue
            target = roi.startswith("ptv")
            cp = roi_criteria(pred[sel], target)
            cg = roi_criteria(gt[sel], target)
            diffs.extend(abs(cp[k] - cg[k]) for k in cp)
    if not diffs:
        raise ValueError("no structure with voxels; score undefined")
    return float(np.mean(diffs))


def write_dvh_csv(path, curve: DVHCurve):
    """One row per grid dose: dose_gy, volume_pct, band_low_pct, band_high_pct."""
    has_band = curve.band_low_pct is not None
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("dose_gy,volume_pct,band_low_pct,band_high_pct\n")
        for i, d in enumerate(curve.dose_gy):
            low = "%.10g" % curve.band_low_pct[i] if has_band else ""
            high = "%.10g" % curve.band_high_pct[i] if has_band else ""
            fh.write(f"{'%.10g' % d},{'%.10g' % curve.volume_pct[i]},{low},{high}\n")
