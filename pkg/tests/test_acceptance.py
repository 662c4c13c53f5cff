"""End-to-end acceptance gate.

One test per criterion, named and ordered `test_criterion_XX_*`, each
finishing with a single PASS/FAIL line (visible with `pytest -s`, or on
failure; with `-v` the test name itself gives the per-criterion verdict).
Training-dependent criteria share one module-scoped fixture that fits every
model family on the desk-scale phantom set, so the expensive part runs once.
"""

import os
import subprocess
import sys
import time
from types import SimpleNamespace

import numpy as np
import pytest

from _helpers import gradcheck, nig_marginal_quadrature, sample_nig, scalarize
from evidose import autodiff as ad
from evidose import baselines, losses, metrics, network, phantom

DESK_SEED = 0
DESK_LR = 1e-3
DOSE_NOISE = 1.0
EPOCHS_EVIDENTIAL = 30
EPOCHS_MEMBER = 30
MEMBER_SEEDS = (1, 2, 3)


def _verdict(num, name, ok, detail=""):
    status = "PASS" if ok else "FAIL"
    suffix = f" ({detail})" if detail else ""
    print(f"[criterion {num:>2}] {name}: {status}{suffix}", flush=True)
    return ok


def _param(shape, rng, dtype=np.float32, positive=False, scale=1.0):
    a = rng.standard_normal(shape) * scale
    if positive:
        a = np.abs(a) + 0.5
    return ad.parameter(a.astype(dtype))


# ---------------------------------------------------------------------------
# criterion 1: gradient correctness, float32, every differentiable op


def _gradcheck_configs():
    """One (label, params, build) triple per configuration."""
    rng = np.random.default_rng(11)
    configs = []

    def scalar_build(node_fn, params, seed):
        return lambda: scalarize(node_fn(), np.random.default_rng(seed))

    for i in range(2):
        x = _param((2, 4, 4, 4), rng)
        w = _param((3, 2, 3, 3, 3), rng, scale=0.5)
        b = _param((3,), rng)
        configs.append(
            (f"conv3d_same_{i}", [x, w, b],
             scalar_build(lambda x=x, w=w, b=b: ad.conv3d(x, w, b, "same"), None, 20 + i))
        )
    x = _param((2, 5, 5, 5), rng)
    w = _param((2, 2, 3, 3, 3), rng, scale=0.5)
    b = _param((2,), rng)
    configs.append(
        ("conv3d_valid", [x, w, b],
         scalar_build(lambda x=x, w=w, b=b: ad.conv3d(x, w, b, "valid"), None, 30))
    )
    for i in range(2):
        x = _param((2, 4, 4, 4), rng)
        configs.append(
            (f"maxpool3d_{i}", [x],
             scalar_build(lambda x=x: ad.maxpool3d(x, 2), None, 40 + i))
        )
    for i in range(2):
        low = _param((2, 2, 2, 2), rng)
        skip = _param((3, 4, 4, 4), rng)
        configs.append(
            (f"upsample_concat_{i}", [low, skip],
             scalar_build(lambda a=low, s=skip: ad.upsample_concat(a, s), None, 50 + i))
        )
    x = _param((4, 3, 3, 3), rng)
    configs.append(
        ("channel_slice", [x],
         scalar_build(lambda x=x: ad.channel_slice(x, 1, 3), None, 60))
    )
    x = _param((2, 4, 4, 4), rng)
    mask = np.random.default_rng(61).random((2, 4, 4, 4)) < 0.6
    mask.flat[0] = True
    configs.append(
        ("masked_mean", [x], lambda x=x, m=mask: ad.masked_mean(ad.square(x), m))
    )
    x = _param((2, 4, 4, 4), rng)
    configs.append(
        ("dropout_fixed_mask", [x],
         # rebuilt rng per call keeps the mask identical across FD evals
         scalar_build(
             lambda x=x: ad.dropout(x, 0.3, np.random.default_rng(62), True),
             None, 63,
         ))
    )

    unary = [
        ("relu", ad.relu, False), ("sigmoid", ad.sigmoid, False),
        ("softplus", ad.softplus, False), ("exp", ad.exp, False),
        ("log", ad.log, True), ("lgamma", ad.lgamma, True),
        ("absval", ad.absval, False), ("square", ad.square, False),
    ]
    for j, (label, fn, positive) in enumerate(unary):
        x = _param((2, 3, 3, 3), rng, positive=positive)
        if label in ("relu", "absval"):
            # keep clear of the subgradient kink at zero
            x.data = x.data + np.where(x.data >= 0, 0.2, -0.2).astype(np.float32)
        configs.append((label, [x], scalar_build(lambda x=x, f=fn: f(x), None, 70 + j)))

    for label, fn in (("add", ad.add), ("sub", ad.sub), ("mul", ad.mul)):
        a = _param((2, 3, 3, 3), rng)
        b = _param((2, 3, 3, 3), rng)
        configs.append(
            (label, [a, b], scalar_build(lambda a=a, b=b, f=fn: f(a, b), None, 80))
        )
    a = _param((2, 3, 3, 3), rng)
    b = _param((1,), rng)  # scalar broadcast is the only supported mismatch
    configs.append(
        ("mul_scalar_broadcast", [a, b],
         scalar_build(lambda a=a, b=b: ad.mul(a, b), None, 81))
    )

    for i in range(2):
        raw = _param((4, 4, 4, 4), rng, scale=0.4)
        target = (0.7 * np.random.default_rng(90 + i).standard_normal((4, 4, 4))
                  - 1.2).astype(np.float32)
        mask = np.random.default_rng(92 + i).random((4, 4, 4)) < 0.7
        mask.flat[0] = True
        cfg = losses.LossConfig()
        configs.append(
            (f"refined_loss_full_{i}", [raw],
             lambda r=raw, t=target, m=mask, c=cfg: losses.batch_loss(r, t, m, c))
        )
    return configs


def test_criterion_01_gradient_correctness():
    t0 = time.perf_counter()
    configs = _gradcheck_configs()
    failures = []
    for label, params, build in configs:
        try:
            gradcheck(build, params, rtol=1e-3)
        except AssertionError as exc:
            failures.append(f"{label}: {exc}")
    elapsed = time.perf_counter() - t0
    ok = not failures and len(configs) >= 20 and elapsed < 60.0
    detail = f"{len(configs)} configs, {elapsed:.1f}s"
    if failures:
        detail += "; " + failures[0]
    assert _verdict(1, "gradient correctness", ok, detail), failures


# ---------------------------------------------------------------------------
# criterion 2: marginal density vs adaptive double quadrature


def test_criterion_02_marginal_vs_quadrature():
    rng = np.random.default_rng(202)
    worst = 0.0
    n_draws = 50
    t0 = time.perf_counter()
    for _ in range(n_draws):
        alpha = rng.uniform(1.0 + 1e-6, 10.0)
        beta = float(np.exp(rng.uniform(np.log(1e-3), np.log(10.0))))
        nu = float(np.exp(rng.uniform(np.log(1e-3), np.log(10.0))))
        gamma = rng.uniform(-3.0, 3.0)
        scale = np.sqrt(beta * (1.0 + nu) / (nu * alpha))
        L = gamma + rng.uniform(-3.0, 3.0) * scale
        closed = losses.student_t_marginal(L, gamma, nu, alpha, beta)
        quad = nig_marginal_quadrature(L, gamma, nu, alpha, beta)
        worst = max(worst, abs(closed - quad) / abs(quad))
    ok = worst < 1e-4
    detail = f"{n_draws} draws, max rel err {worst:.3g}, {time.perf_counter() - t0:.1f}s"
    assert _verdict(2, "marginal density vs quadrature", ok, detail)


# ---------------------------------------------------------------------------
# criterion 3: posterior moment formulas against Monte Carlo
# alpha is drawn above 2.2 so the sampled moments that enter the error bars
# (sigma^2 variance, mu fourth moment) are finite


def test_criterion_03_nig_moments_monte_carlo():
    rng = np.random.default_rng(303)
    n = 1_000_000
    worst = 0.0
    ok = True
    for _ in range(10):
        alpha = rng.uniform(2.2, 10.0)
        beta = float(np.exp(rng.uniform(np.log(1e-3), np.log(10.0))))
        nu = float(np.exp(rng.uniform(np.log(0.05), np.log(10.0))))
        gamma = rng.uniform(-3.0, 3.0)
        mu, s2 = sample_nig(gamma, nu, alpha, beta, n, rng)

        se_mu = mu.std(ddof=1) / np.sqrt(n)
        ok &= abs(mu.mean() - gamma) < 3 * se_mu

        se_s2 = s2.std(ddof=1) / np.sqrt(n)
        ok &= abs(s2.mean() - beta / (alpha - 1)) < 3 * se_s2

        v = mu.var(ddof=1)
        m2 = np.mean((mu - mu.mean()) ** 2)
        m4 = np.mean((mu - mu.mean()) ** 4)
        se_v = np.sqrt(max(m4 - m2**2, 0.0) / n)
        ok &= abs(v - beta / (nu * (alpha - 1))) < 3 * se_v
        worst = max(
            worst,
            abs(mu.mean() - gamma) / se_mu,
            abs(s2.mean() - beta / (alpha - 1)) / se_s2,
            abs(v - beta / (nu * (alpha - 1))) / se_v,
        )
    detail = f"10 sets x 1e6 draws, worst deviation {worst:.2f} SE"
    assert _verdict(3, "posterior moments vs Monte Carlo", ok, detail)


# ---------------------------------------------------------------------------
# criterion 4: variance decomposition (law of total variance)


def test_criterion_04_total_variance_identity():
    rng = np.random.default_rng(404)

    worst_exact = 0.0
    for _ in range(10):
        alpha = rng.uniform(1.0 + 1e-6, 10.0)
        beta = float(np.exp(rng.uniform(np.log(1e-3), np.log(10.0))))
        nu = float(np.exp(rng.uniform(np.log(1e-3), np.log(10.0))))
        ua = beta / (alpha - 1)
        ue = beta / (nu * (alpha - 1))
        total = (beta / (alpha - 1)) * (1.0 + 1.0 / nu)
        worst_exact = max(worst_exact, abs((ua + ue) - total) / total)
    exact_ok = worst_exact < 1e-12

    mc_ok = True
    worst_mc = 0.0
    n = 500_000
    for _ in range(4):
        alpha = rng.uniform(2.2, 10.0)
        beta = float(np.exp(rng.uniform(np.log(1e-2), np.log(10.0))))
        nu = float(np.exp(rng.uniform(np.log(0.05), np.log(10.0))))
        gamma = rng.uniform(-3.0, 3.0)
        mu, s2 = sample_nig(gamma, nu, alpha, beta, n, rng)
        L = rng.normal(mu, np.sqrt(s2))
        v = L.var(ddof=1)
        m2 = np.mean((L - L.mean()) ** 2)
        m4 = np.mean((L - L.mean()) ** 4)
        se_v = np.sqrt(max(m4 - m2**2, 0.0) / n)
        expect = (beta / (alpha - 1)) * (1.0 + 1.0 / nu)
        mc_ok &= abs(v - expect) < 3 * se_v
        worst_mc = max(worst_mc, abs(v - expect) / se_v)

    ok = exact_ok and mc_ok
    detail = (
        f"closed form max rel err {worst_exact:.2g}; "
        f"hierarchical MC worst deviation {worst_mc:.2f} SE"
    )
    assert _verdict(4, "total variance decomposition", ok, detail)


# ---------------------------------------------------------------------------
# shared trained models for criteria 5-8


@pytest.fixture(scope="module")
def desk():
    # the irreducible dose noise is what makes the unbounded-likelihood
    # variant pay for collapsing its predictive variance
    cfg = phantom.PhantomConfig(
        grid_extent=32, train_cases=40, val_cases=8, test_cases=16,
        seed=DESK_SEED, noise_sigma=DOSE_NOISE,
    )
    ds = phantom.generate(cfg)

    t0 = time.perf_counter()
    nets, traces, diverged = {}, {}, {}
    for variant in ("refined", "original"):
        net = network.Network(network.NetConfig(seed=DESK_SEED))
        try:
            trace = network.train(
                net, ds.train, ds.val,
                losses.LossConfig(variant=variant),
                network.TrainConfig(
                    epochs=EPOCHS_EVIDENTIAL, lr=DESK_LR, seed=DESK_SEED
                ),
            )
            div = False
        except network.TrainingDiverged as exc:
            trace, div = exc.trace, True
        nets[variant], traces[variant], diverged[variant] = net, trace, div

    members = []
    for seed in MEMBER_SEEDS:
        net = network.Network(network.NetConfig(head_out=1, seed=seed))
        network.train(
            net, ds.train, ds.val, losses.LossConfig(),
            network.TrainConfig(epochs=EPOCHS_MEMBER, lr=DESK_LR, seed=seed),
        )
        members.append(net)
    train_secs = time.perf_counter() - t0

    refined = nets["refined"]
    dropout_cfg = baselines.DropoutConfig(passes=30, seed=1000)
    predictors = {
        "evidential": lambda c: refined.predict_dose(c.input_channels(), "infer"),
        "dropout": lambda c: baselines.mc_dropout_predict(members[0], c, dropout_cfg),
        "ensemble": lambda c: baselines.ensemble_predict(members, c),
    }
    return SimpleNamespace(
        ds=ds, nets=nets, traces=traces, diverged=diverged,
        members=members, predictors=predictors, train_secs=train_secs,
    )


def _running_median_excursion(values):
    for i in range(1, len(values)):
        med = float(np.median(values[:i]))
        if med > 0 and values[i] > 2.0 * med:
            return True
    return False


def test_criterion_05_loss_stability(desk):
    refined_vals = [r.val_mae for r in desk.traces["refined"]]
    original_vals = [r.val_mae for r in desk.traces["original"]]

    refined_ok = (
        not desk.diverged["refined"]
        and len(refined_vals) == EPOCHS_EVIDENTIAL
        and all(np.isfinite(v) for v in refined_vals)
    )
    orig_nonfinite = desk.diverged["original"] or any(
        not np.isfinite(v) for v in original_vals
    )
    orig_final = (
        float("inf")
        if orig_nonfinite or not original_vals
        else original_vals[-1]
    )
    refined_final = refined_vals[-1] if refined_vals else float("inf")
    finite_orig = [v for v in original_vals if np.isfinite(v)]
    orig_unstable = (
        orig_nonfinite
        or _running_median_excursion(finite_orig)
        or orig_final > refined_final
    )

    ok = (
        refined_ok
        and refined_final < orig_final
        and orig_unstable
        and desk.train_secs < 7200.0
    )
    detail = (
        f"refined final {refined_final:.3f} Gy vs original "
        f"{orig_final:.3f} Gy; original non-finite={orig_nonfinite}; "
        f"training {desk.train_secs / 60:.1f} min"
    )
    assert _verdict(5, "loss stability", ok, detail)


def _pooled_uncertainty_error(bundles, cases):
    err = np.concatenate(
        [np.abs(b.dose - c.dose_gt)[c.valid_mask] for b, c in zip(bundles, cases)]
    ).astype(np.float64)
    ua = np.concatenate(
        [np.asarray(b.aleatoric)[c.valid_mask] for b, c in zip(bundles, cases)]
    ).astype(np.float64)
    ue = np.concatenate(
        [np.asarray(b.epistemic)[c.valid_mask] for b, c in zip(bundles, cases)]
    ).astype(np.float64)
    return err, ua, ue


def test_criterion_06_uncertainty_error_correlation(desk):
    bundles = [desk.predictors["evidential"](c) for c in desk.ds.test]
    err, ua, ue = _pooled_uncertainty_error(bundles, desk.ds.test)
    rho_e, p_e = metrics.spearman(ue, err)
    rho_a, _ = metrics.spearman(ua, err)
    ok = rho_e > 0 and p_e < 0.01 and rho_e > rho_a
    detail = f"rs_epis={rho_e:.3f} (p={p_e:.2g}), rs_alea={rho_a:.3f}, n={err.size}"
    assert _verdict(6, "uncertainty-error correlation", ok, detail)


def _smoothed_nondecreasing(medians, window):
    sm = np.convolve(medians, np.ones(window) / window, mode="valid")
    return bool(np.all(np.diff(sm) >= -1e-9))


def test_criterion_07_threshold_curve_monotone(desk):
    # exact synthetic part: with U = |error| the raw curve must be monotone
    rng = np.random.default_rng(707)
    err = np.abs(rng.standard_normal(20_000))
    ths = metrics.percentile_thresholds(err, 40)
    samples = metrics.threshold_curve_from_arrays(err, err, ths)
    meds = [s.median_error for s in samples if not s.empty]
    exact_ok = bool(np.all(np.diff(meds) >= 0))

    family_ok = {}
    for family in ("evidential", "dropout", "ensemble"):
        predict = desk.predictors[family]
        bundles = [predict(c) for c in desk.ds.test]
        u = np.concatenate(
            [np.asarray(b.total_variance)[c.valid_mask] for b, c in zip(bundles, desk.ds.test)]
        ).astype(np.float64)
        e = np.concatenate(
            [np.abs(b.dose - c.dose_gt)[c.valid_mask] for b, c in zip(bundles, desk.ds.test)]
        ).astype(np.float64)
        ths = metrics.percentile_thresholds(u, 40)
        samples = metrics.threshold_curve_from_arrays(u, e, ths)
        meds = np.array([s.median_error for s in samples if not s.empty])
        # thresholds sit on a 2.5-percentile grid: a 10-percentile smoothing
        # window covers four adjacent samples
        family_ok[family] = _smoothed_nondecreasing(meds, window=4)

    ok = exact_ok and all(family_ok.values())
    detail = f"exact={exact_ok}, " + ", ".join(
        f"{k}={v}" for k, v in family_ok.items()
    )
    assert _verdict(7, "threshold-curve monotonicity", ok, detail)


def test_criterion_08_noise_sensitivity_ordering(desk):
    results = metrics.noise_sensitivity(
        desk.predictors, desk.ds.test, sigma=0.5, bins=64, seed=DESK_SEED
    )
    fc = {r.name: r.fractional_change for r in results}
    ok = fc["aleatoric"] > fc["epistemic"] and fc["ensemble"] > fc["dropout"]
    detail = ", ".join(f"{k}={fc[k]:.3f}" for k in sorted(fc))
    assert _verdict(8, "noise-sensitivity ordering", ok, detail)


# ---------------------------------------------------------------------------
# criterion 9: metric oracles


def test_criterion_09_metric_oracles():
    rho, _ = metrics.spearman([1.0, 2.0, 3.0], [2.0, 3.0, 1.0])
    spearman_ok = abs(rho - (-0.5)) < 1e-10

    x = np.repeat([0.0, 1.0, 2.0, 3.0], 25)
    mi = metrics.mutual_information(x, x, bins=4)
    mi_ok = abs(mi - np.log(4.0)) < 1e-10

    ok = spearman_ok and mi_ok
    detail = f"rs err {abs(rho + 0.5):.2g}, MI err {abs(mi - np.log(4.0)):.2g}"
    assert _verdict(9, "metric oracles", ok, detail)


# ---------------------------------------------------------------------------
# criterion 10: paper-scale parameter count


def test_criterion_10_paper_scale_parameter_count():
    t0 = time.perf_counter()
    net = network.Network(network.paper_scale_config())
    count = net.parameter_count()
    elapsed = time.perf_counter() - t0
    ok = abs(count / 6e6 - 1.0) <= 0.20 and elapsed < 10.0
    detail = f"{count:,} params ({count / 6e6 - 1.0:+.1%} vs 6e6), {elapsed:.2f}s"
    assert _verdict(10, "paper-scale parameter count", ok, detail)


# ---------------------------------------------------------------------------
# criterion 11: end-to-end determinism through the CLI

_DETERMINISM_INI = """\
[experiment]
seed = 5

[phantom]
grid_extent = 16
train_cases = 3
val_cases = 1
test_cases = 2

[net]
depth = 2
filters = 4 8
bottleneck = 16
dropout = 0.1 0.15
bottleneck_dropout = 0.2
head_hidden = 4

[train]
epochs = 1

[ensemble]
member_count = 2

[dropout]
passes = 4

[eval]
bins = 16
threshold_count = 10
heatmap_cases = 1
"""


def _dir_contents(root):
    out = {}
    for dirpath, _, files in os.walk(root):
        for name in files:
            path = os.path.join(dirpath, name)
            with open(path, "rb") as fh:
                out[os.path.relpath(path, root)] = fh.read()
    return out


def test_criterion_11_pipeline_determinism(tmp_path):
    ini = tmp_path / "exp.ini"
    ini.write_text(_DETERMINISM_INI, encoding="utf-8")
    outs = [str(tmp_path / "run_a"), str(tmp_path / "run_b")]
    t0 = time.perf_counter()
    for out in outs:
        for cmd in ("generate", "train", "eval"):
            proc = subprocess.run(
                [sys.executable, "-m", "evidose.cli", cmd,
                 "--config", str(ini), "--out", out],
                capture_output=True, text=True,
            )
            assert proc.returncode == 0, (cmd, proc.stderr)
    a = _dir_contents(os.path.join(outs[0], "report"))
    b = _dir_contents(os.path.join(outs[1], "report"))
    files_match = set(a) == set(b) and all(a[k] == b[k] for k in a)
    ok = files_match and len(a) > 0
    detail = f"{len(a)} report files byte-identical, {time.perf_counter() - t0:.1f}s"
    assert _verdict(11, "pipeline determinism", ok, detail)
