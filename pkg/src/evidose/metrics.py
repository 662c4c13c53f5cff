"""Uncertainty-quality evaluation: rank correlation, mutual information,
error-vs-threshold curves, noise-sensitivity divergences, and per-structure
summaries.

Every function here is a pure mapping from arrays to numbers, so reports are
reproducible byte for byte. Orchestration helpers at the bottom pool voxels
across cases and serialize the results as a key=value scalar section with
CSV siblings.
"""

import dataclasses
import logging
import os

import numpy as np

from evidose import phantom

log = logging.getLogger(__name__)

_FMT = "%.10g"  # stable float formatting for on-disk artifacts


def _average_ranks(a):
    """1-based ranks with ties sharing the average of their rank span."""
    a = np.asarray(a, dtype=np.float64)
    n = a.size
    order = np.argsort(a, kind="stable")
    sa = a[order]
    new_group = np.empty(n, dtype=bool)
    new_group[0] = True
    new_group[1:] = sa[1:] != sa[:-1]
    gid = np.cumsum(new_group) - 1
    counts = np.bincount(gid)
    starts = np.concatenate(([0], np.cumsum(counts)[:-1]))
    avg = starts + (counts + 1) / 2.0
    ranks = np.empty(n, dtype=np.float64)
    ranks[order] = avg[gid]
    return ranks


def spearman(x, y):
    """Rank correlation with average-rank ties; returns (rho, two-sided p).

    The p-value uses the large-sample t approximation with n-2 degrees of
    freedom.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if x.size != y.size:
        raise ValueError(f"length mismatch: {x.size} vs {y.size}")
    if x.size < 3:
        raise ValueError("need at least 3 samples")
    if not (np.isfinite(x).all() and np.isfinite(y).all()):
        raise ValueError("inputs must be finite")
    rx = _average_ranks(x)
    ry = _average_ranks(y)
    sx = rx.std()
    sy = ry.std()
    if sx == 0.0 or sy == 0.0:
        raise ValueError("rank correlation undefined for constant input")
    rho = float(((rx - rx.mean()) * (ry - ry.mean())).mean() / (sx * sy))
    rho = min(1.0, max(-1.0, rho))

    n = x.size
    if abs(rho) >= 1.0:
        return rho, 0.0
    from scipy.special import stdtr

    t = rho * np.sqrt((n - 2) / (1.0 - rho * rho))
    p = 2.0 * float(stdtr(n - 2, -abs(t)))
    return rho, p


def mutual_information(x, y, bins=64):
    """Histogram mutual information in nats over equal-width bins."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if x.size != y.size:
        raise ValueError(f"length mismatch: {x.size} vs {y.size}")
    if x.size == 0:
        raise ValueError("need at least one sample")
    if bins < 2:
        raise ValueError("need at least 2 bins")
    if not (np.isfinite(x).all() and np.isfinite(y).all()):
        raise ValueError("inputs must be finite")
    if x.max() == x.min() or y.max() == y.min():
        raise ValueError("mutual information undefined for degenerate range")
    joint, _, _ = np.histogram2d(x, y, bins=bins)
    pxy = joint / joint.sum()
    px = pxy.sum(axis=1, keepdims=True)
    py = pxy.sum(axis=0, keepdims=True)
    nz = pxy > 0
    mi = float((pxy[nz] * np.log(pxy[nz] / (px * py)[nz])).sum())
    return max(mi, 0.0)


@dataclasses.dataclass
class ThresholdSample:
    threshold: float
    median_error: float  # nan when no voxel survives
    retained_fraction: float
    empty: bool


def threshold_curve_from_arrays(u, err, thresholds):
    """Median error and retained fraction among voxels with U <= threshold."""
    u = np.asarray(u, dtype=np.float64).reshape(-1)
    err = np.asarray(err, dtype=np.float64).reshape(-1)
    if u.size != err.size:
        raise ValueError("uncertainty and error arrays must align")
    if u.size == 0:
        raise ValueError("need at least one voxel")
    thresholds = [float(t) for t in thresholds]
    if any(b <= a for a, b in zip(thresholds, thresholds[1:])):
        raise ValueError("thresholds must be strictly increasing")
    order = np.argsort(u, kind="stable")
    su = u[order]
    serr = err[order]
    samples = []
    n = u.size
    for t in thresholds:
        k = int(np.searchsorted(su, t, side="right"))
        if k == 0:
            samples.append(ThresholdSample(t, float("nan"), 0.0, True))
        else:
            samples.append(ThresholdSample(t, float(np.median(serr[:k])), k / n, False))
    return samples


def normalize_curve(samples):
    """Scale thresholds and medians by their maxima, for shape comparison."""
    t_max = max((s.threshold for s in samples), default=0.0)
    m_max = max((s.median_error for s in samples if not s.empty), default=0.0)
    t_den = t_max if t_max > 0 else 1.0
    m_den = m_max if m_max > 0 else 1.0
    return [
        ThresholdSample(
            s.threshold / t_den,
            s.median_error / m_den if not s.empty else float("nan"),
            s.retained_fraction,
            s.empty,
        )
        for s in samples
    ]


def _bundle_uncertainties(bundle):
    """Map a prediction bundle to its named uncertainty fields."""
    if bundle.tag == "evidential":
        return {"aleatoric": bundle.aleatoric, "epistemic": bundle.epistemic}
    return {bundle.tag: bundle.epistemic}


def threshold_curve(bundle, truth, mask, thresholds, which="total"):
    """Single-case convenience wrapper around threshold_curve_from_arrays."""
    mask = np.asarray(mask, dtype=bool)
    err = np.abs(np.asarray(bundle.dose, dtype=np.float64) - np.asarray(truth, dtype=np.float64))
    if which == "total":
        u = bundle.total_variance
    elif which == "aleatoric":
        u = bundle.aleatoric
    elif which == "epistemic":
        u = bundle.epistemic
    else:
        raise ValueError(f"unknown uncertainty selector {which!r}")
    return threshold_curve_from_arrays(np.asarray(u)[mask], err[mask], thresholds)


def ecdf(values):
    """Sorted sample values with cumulative fractions; F(max) = 1."""
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    if values.size == 0:
        raise ValueError("need at least one value")
    xs = np.sort(values)
    return xs, np.arange(1, xs.size + 1, dtype=np.float64) / xs.size


def kl_from_uniform(values, bins=64):
    """KL divergence (nats) of the max-normalized value histogram from uniform.

    Counts get one smoothing pseudo-count per bin so empty bins stay finite.
    """
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    if values.size == 0:
        raise ValueError("need at least one value")
    if not np.isfinite(values).all():
        raise ValueError("values must be finite")
    vmax = values.max()
    if vmax <= 0.0:
        raise ValueError("all-zero values: max-normalization undefined")
    scaled = values / vmax
    counts, _ = np.histogram(scaled, bins=bins, range=(0.0, 1.0))
    p = (counts + 1.0) / (counts.sum() + bins)
    return float((p * np.log(p * bins)).sum())


@dataclasses.dataclass
class NoiseSensitivityResult:
    name: str
    kl_clean: float
    kl_noisy: float
    fractional_change: float
    ecdf_clean: tuple
    ecdf_noisy: tuple


def noise_sensitivity(predictors, cases, sigma=0.5, bins=64, seed=0):
    """Fractional KL-from-uniform change per uncertainty type under CT noise.

    `predictors` maps a family name to a callable(case) -> PredictionBundle.
    Each case is re-predicted after Gaussian CT perturbation; uncertainty
    values are pooled over valid voxels per type.
    """
    cases = list(cases)
    if not cases:
        raise ValueError("need at least one case")
    rng = np.random.default_rng(seed)
    noisy_cases = [phantom.add_ct_noise(c, sigma, rng) for c in cases]

    pools = {}
    for name in sorted(predictors):
        predict = predictors[name]
        for case, noisy in zip(cases, noisy_cases):
            cb = predict(case)
            nb = predict(noisy)
            cu = _bundle_uncertainties(cb)
            nu = _bundle_uncertainties(nb)
            for utype in cu:
                clean_pool, noisy_pool = pools.setdefault(utype, ([], []))
                clean_pool.append(np.asarray(cu[utype])[case.valid_mask])
                noisy_pool.append(np.asarray(nu[utype])[case.valid_mask])

    results = []
    for utype in sorted(pools):
        clean = np.concatenate(pools[utype][0]).astype(np.float64)
        noisy = np.concatenate(pools[utype][1]).astype(np.float64)
        kc = kl_from_uniform(clean, bins)
        kn = kl_from_uniform(noisy, bins)
        if kc > 0.0:
            frac = abs(kn - kc) / kc
        else:
            frac = 0.0 if kn == 0.0 else float("inf")
        results.append(
            NoiseSensitivityResult(utype, kc, kn, frac, ecdf(clean), ecdf(noisy))
        )
    return results


@dataclasses.dataclass
class RoiRow:
    roi: str
    voxels: int
    mean_alea: float
    mean_epis: float
    rs_alea: object  # (rho, p) or None when degenerate
    rs_epis: object
    mean_error: float
    degenerate: bool


@dataclasses.dataclass
class RoiTable:
    rows: list
    cross_spearman_epis: object  # (rho, p) over ROI means, or None
    cross_spearman_alea: object


def _try_spearman(u, err):
    try:
        return spearman(u, err)
    except ValueError:
        return None


def roi_table(bundles, cases):
    """Pool voxels per structure across cases; one row per non-empty ROI."""
    bundles = list(bundles)
    cases = list(cases)
    if len(bundles) != len(cases):
        raise ValueError("bundles and cases must align")
    if not cases:
        raise ValueError("need at least one case")
    rows = []
    for roi in phantom.ROI_NAMES:
        ua, ue, de = [], [], []
        for bundle, case in zip(bundles, cases):
            sel = case.roi_masks[roi] & case.valid_mask
            if not sel.any():
                continue
            ua.append(np.asarray(bundle.aleatoric, dtype=np.float64)[sel])
            ue.append(np.asarray(bundle.epistemic, dtype=np.float64)[sel])
            err = np.abs(
                np.asarray(bundle.dose, dtype=np.float64)
                - np.asarray(case.dose_gt, dtype=np.float64)
            )
            de.append(err[sel])
        if not ua:
            log.warning("structure %s empty in every case; row omitted", roi)
            continue
        ua = np.concatenate(ua)
        ue = np.concatenate(ue)
        de = np.concatenate(de)
        rs_a = _try_spearman(ua, de)
        rs_e = _try_spearman(ue, de)
        rows.append(
            RoiRow(
                roi=roi,
                voxels=int(de.size),
                mean_alea=float(ua.mean()),
                mean_epis=float(ue.mean()),
                rs_alea=rs_a,
                rs_epis=rs_e,
                mean_error=float(de.mean()),
                degenerate=rs_a is None or rs_e is None,
            )
        )
    cross_e = cross_a = None
    if len(rows) >= 3:
        cross_e = _try_spearman([r.mean_epis for r in rows], [r.mean_error for r in rows])
        cross_a = _try_spearman([r.mean_alea for r in rows], [r.mean_error for r in rows])
    return RoiTable(rows=rows, cross_spearman_epis=cross_e, cross_spearman_alea=cross_a)


@dataclasses.dataclass
class MetricsReport:
    tag: str
    mae_gy: float
    u_avg: dict
    spearman_voxelwise: dict
    spearman_patient_avg: dict
    mutual_information: dict
    threshold_curve: dict
    threshold_curve_normalized: dict
    dvh_score_gy: float = None  # filled in by callers that run the DVH stage


def percentile_thresholds(u, count=40):
    """Strictly increasing threshold grid at evenly spaced percentiles of U."""
    qs = np.linspace(0.0, 100.0, count + 1)[1:]
    return np.unique(np.percentile(np.asarray(u, dtype=np.float64), qs)).tolist()


def build_report(bundles, cases, bins=64, threshold_count=40):
    """Assemble the per-family report from per-case bundles and ground truth."""
    bundles = list(bundles)
    cases = list(cases)
    if len(bundles) != len(cases):
        raise ValueError("bundles and cases must align")
    if not cases:
        raise ValueError("need at least one case")
    tags = {b.tag for b in bundles}
    if len(tags) != 1:
        raise ValueError(f"bundles mix tags: {sorted(tags)}")
    tag = tags.pop()

    err_pool = []
    u_pools = {}
    case_err_means = []
    case_u_means = {}
    for bundle, case in zip(bundles, cases):
        sel = case.valid_mask
        err = np.abs(
            np.asarray(bundle.dose, dtype=np.float64)
            - np.asarray(case.dose_gt, dtype=np.float64)
        )[sel]
        err_pool.append(err)
        case_err_means.append(float(err.mean()))
        for utype, field in _bundle_uncertainties(bundle).items():
            vals = np.asarray(field, dtype=np.float64)[sel]
            u_pools.setdefault(utype, []).append(vals)
            case_u_means.setdefault(utype, []).append(float(vals.mean()))

    err_pool = np.concatenate(err_pool)
    report = MetricsReport(
        tag=tag,
        mae_gy=float(err_pool.mean()),
        u_avg={},
        spearman_voxelwise={},
        spearman_patient_avg={},
        mutual_information={},
        threshold_curve={},
        threshold_curve_normalized={},
    )
    for utype in sorted(u_pools):
        u = np.concatenate(u_pools[utype])
        report.u_avg[utype] = float(u.mean())
        report.spearman_voxelwise[utype] = _try_spearman(u, err_pool)
        report.spearman_patient_avg[utype] = (
            _try_spearman(case_u_means[utype], case_err_means)
            if len(cases) >= 3
            else None
        )
        try:
            report.mutual_information[utype] = mutual_information(u, err_pool, bins)
        except ValueError:
            report.mutual_information[utype] = None
        thresholds = percentile_thresholds(u, threshold_count)
        curve = threshold_curve_from_arrays(u, err_pool, thresholds)
        report.threshold_curve[utype] = curve
        report.threshold_curve_normalized[utype] = normalize_curve(curve)
    return report


def _fmt(value):
    if value is None:
        return ""
    return _FMT % value


def write_summary(path, reports, noise_results=None, roi=None):
    """Scalar key=value section per model family, UTF-8, deterministic order."""
    lines = []
    for report in reports:
        lines.append(f"[{report.tag}]")
        lines.append(f"mae_gy = {_fmt(report.mae_gy)}")
        if report.dvh_score_gy is not None:
            lines.append(f"dvh_score_gy = {_fmt(report.dvh_score_gy)}")
        for utype in sorted(report.u_avg):
            lines.append(f"u_avg.{utype} = {_fmt(report.u_avg[utype])}")
        for utype in sorted(report.spearman_voxelwise):
            rs = report.spearman_voxelwise[utype]
            lines.append(f"spearman_voxelwise.{utype}.rho = {_fmt(rs and rs[0])}")
            lines.append(f"spearman_voxelwise.{utype}.p = {_fmt(rs and rs[1])}")
        for utype in sorted(report.spearman_patient_avg):
            rs = report.spearman_patient_avg[utype]
            lines.append(f"spearman_patient_avg.{utype}.rho = {_fmt(rs and rs[0])}")
            lines.append(f"spearman_patient_avg.{utype}.p = {_fmt(rs and rs[1])}")
        for utype in sorted(report.mutual_information):
            mi = report.mutual_information[utype]
            lines.append(f"mutual_information.{utype} = {_fmt(mi)}")
        lines.append("")
    if noise_results:
        lines.append("[noise_sensitivity]")
        for res in noise_results:
            lines.append(f"kl_clean.{res.name} = {_fmt(res.kl_clean)}")
            lines.append(f"kl_noisy.{res.name} = {_fmt(res.kl_noisy)}")
            lines.append(f"fractional_change.{res.name} = {_fmt(res.fractional_change)}")
        lines.append("")
    if roi is not None:
        lines.append("[roi_cross_correlation]")
        for label, rs in (
            ("epistemic", roi.cross_spearman_epis),
            ("aleatoric", roi.cross_spearman_alea),
        ):
            lines.append(f"spearman_roi_means.{label}.rho = {_fmt(rs and rs[0])}")
            lines.append(f"spearman_roi_means.{label}.p = {_fmt(rs and rs[1])}")
        lines.append("")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines))


def write_threshold_csv(path, samples, normalized):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("threshold,median_error,retained_fraction,empty,threshold_norm,median_error_norm\n")
        for s, sn in zip(samples, normalized):
            med = "" if s.empty else _FMT % s.median_error
            med_n = "" if sn.empty else _FMT % sn.median_error
            fh.write(
                f"{_FMT % s.threshold},{med},{_FMT % s.retained_fraction},"
                f"{int(s.empty)},{_FMT % sn.threshold},{med_n}\n"
            )


def write_ecdf_csv(path, result):
    xs_c, fs_c = result.ecdf_clean
    xs_n, fs_n = result.ecdf_noisy
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("clean_value,clean_cum_frac,noisy_value,noisy_cum_frac\n")
        for vc, fc, vn, fn in zip(xs_c, fs_c, xs_n, fs_n):
            fh.write(f"{_FMT % vc},{_FMT % fc},{_FMT % vn},{_FMT % fn}\n")


def write_roi_csv(path, table):
    cols = (
        "roi,voxels,mean_u_alea_gy2,mean_u_epis_gy2,rs_alea,p_alea,"
        "rs_epis,p_epis,mean_error_gy,degenerate"
    )
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(cols + "\n")
        for r in table.rows:
            ra = r.rs_alea or (None, None)
            re = r.rs_epis or (None, None)
            fh.write(
                f"{r.roi},{r.voxels},{_fmt(r.mean_alea)},{_fmt(r.mean_epis)},"
                f"{_fmt(ra[0])},{_fmt(ra[1])},{_fmt(re[0])},{_fmt(re[1])},"
                f"{_fmt(r.mean_error)},{int(r.degenerate)}\n"
            )


def write_report_files(out_dir, reports, noise_results=None, roi=None):
    """Write summary.txt plus the per-type CSV siblings; returns the paths."""
    os.makedirs(out_dir, exist_ok=True)
    written = []
    summary = os.path.join(out_dir, "summary.txt")
    write_summary(summary, reports, noise_results, roi)
    written.append(summary)
    for report in reports:
        for utype in sorted(report.threshold_curve):
            path = os.path.join(out_dir, f"threshold_curve_{utype}.csv")
            write_threshold_csv(
                path,
                report.threshold_curve[utype],
                report.threshold_curve_normalized[utype],
            )
            written.append(path)
    for res in noise_results or ():
        path = os.path.join(out_dir, f"ecdf_{res.name}.csv")
        write_ecdf_csv(path, res)
        written.append(path)
    if roi is not None:
        path = os.path.join(out_dir, "roi_table.csv")
        write_roi_csv(path, roi)
        written.append(path)
    return written
