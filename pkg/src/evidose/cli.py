"""Command line driver for the full desk-scale experiment.

Five subcommands cover the pipeline: `generate` writes the phantom dataset,
`train` fits one or all model families, `eval` produces the report artifacts
(and runs the noise study and DVH export unless skipped), while `noise-test`
and `dvh` run those two stages standalone.

Every output lands under the configured output directory:

    dataset/   manifests + one EVDV volume per case
    models/    EVDW checkpoints per family
    traces/    per-epoch training CSVs
    report/    summary.txt, curve/ecdf/roi CSVs, heatmaps/, dvh/

All writers use stable float formatting and sorted iteration, so a rerun
with the same seed reproduces every artifact byte for byte.
"""

import argparse
import dataclasses
import os
import sys

import numpy as np

from evidose import baselines, dvh, metrics, network, phantom
from evidose.config import load_config

_FMT = "%.10g"
FAMILIES = ("evidential", "dropout", "ensemble")


class StageError(Exception):
    """A pipeline stage failed; the message names the stage."""

    def __init__(self, stage, message, code=1):
        super().__init__(f"{stage}: {message}")
        self.stage = stage
        self.code = code


def _paths(cfg):
    out = cfg.out_dir
    report = os.path.join(out, "report")
    return {
        "dataset": os.path.join(out, "dataset"),
        "models": os.path.join(out, "models"),
        "traces": os.path.join(out, "traces"),
        "report": report,
        "heatmaps": os.path.join(report, "heatmaps"),
        "dvh": os.path.join(report, "dvh"),
    }


def _evidential_name(cfg):
    return f"evidential_{cfg.loss.variant}"


def _checkpoint_files(cfg, family):
    models = _paths(cfg)["models"]
    if family == "evidential":
        return [os.path.join(models, _evidential_name(cfg) + ".evdw")]
    if family == "dropout":
        return [os.path.join(models, "dropout.evdw")]
    return [
        os.path.join(models, baselines.member_checkpoint_name(k))
        for k in range(cfg.ensemble.member_count)
    ]


# ---------------------------------------------------------------------------
# config resolution

def resolve_config(args):
    """Load the config file and fold in CLI/env overrides.

    Seed precedence: --seed beats EVIDENTIAL_SEED beats the config file.
    """
    path = getattr(args, "config", None)
    if path is not None and not os.path.exists(path):
        raise StageError("config", f"config file not found: {path}", code=2)
    try:
        cfg = load_config(path)
    except ValueError as exc:
        raise StageError("config", str(exc))

    seed = None
    env = os.environ.get("EVIDENTIAL_SEED")
    if env is not None:
        try:
            seed = int(env)
        except ValueError:
            raise StageError("config", f"EVIDENTIAL_SEED must be an integer, got {env!r}")
    if getattr(args, "seed", None) is not None:
        seed = args.seed
    if seed is not None:
        cfg = cfg.reseed(seed)

    if getattr(args, "out", None) is not None:
        cfg = dataclasses.replace(cfg, out_dir=args.out)
    if getattr(args, "threads", None) is not None:
        cfg = dataclasses.replace(cfg, threads=args.threads)
    if getattr(args, "epochs", None) is not None:
        if args.epochs < 0:
            raise StageError("config", "--epochs must be non-negative")
        cfg = dataclasses.replace(
            cfg, train=dataclasses.replace(cfg.train, epochs=args.epochs)
        )
    if getattr(args, "loss_variant", None) is not None:
        cfg = dataclasses.replace(
            cfg, loss=dataclasses.replace(cfg.loss, variant=args.loss_variant)
        )
    return cfg


def _selected_families(args):
    model = getattr(args, "model", "all")
    return FAMILIES if model == "all" else (model,)


# ---------------------------------------------------------------------------
# generate

def cmd_generate(cfg):
    dataset = phantom.generate(cfg.phantom)
    out = _paths(cfg)["dataset"]
    phantom.save_dataset(dataset, out)
    print(f"wrote dataset under {out}")
    return 0


def _load_splits(cfg, stage, splits):
    dataset_dir = _paths(cfg)["dataset"]
    loaded = []
    for split in splits:
        manifest = os.path.join(dataset_dir, f"manifest_{split}.txt")
        if not os.path.exists(manifest):
            raise StageError(
                stage, f"dataset split {split!r} not found at {manifest}; run generate first"
            )
        loaded.append(phantom.load_split(dataset_dir, split))
    return loaded


# ---------------------------------------------------------------------------
# train

def _write_trace(path, trace):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("epoch,train_loss,train_mae,val_mae\n")
        for row in trace:
            fh.write(
                f"{row.epoch},{_FMT % row.train_loss},"
                f"{_FMT % row.train_mae},{_FMT % row.val_mae}\n"
            )


def _fit(stage, net, train_cases, val_cases, loss_cfg, train_cfg, ckpt, trace_path):
    try:
        trace = network.train(net, train_cases, val_cases, loss_cfg, train_cfg)
    except network.TrainingDiverged as exc:
        _write_trace(trace_path, exc.trace)
        raise StageError(
            stage,
            f"diverged at epoch {exc.epoch} on case {exc.case_id} "
            f"(loss {exc.value}); partial trace at {trace_path}",
        )
    network.save_checkpoint(ckpt, net)
    _write_trace(trace_path, trace)
    final = trace[-1].val_mae if trace else float("nan")
    print(f"{stage}: {len(trace)} epochs, final val MAE {final:.4g} Gy -> {ckpt}")


def cmd_train(cfg, families):
    train_cases, val_cases = _load_splits(cfg, "train", ("train", "val"))
    paths = _paths(cfg)
    os.makedirs(paths["models"], exist_ok=True)
    os.makedirs(paths["traces"], exist_ok=True)

    for family in families:
        stage = f"train[{family}]"
        if family == "evidential":
            net = network.Network(cfg.net_config(head_out=4))
            name = _evidential_name(cfg)
            _fit(
                stage, net, train_cases, val_cases, cfg.loss, cfg.train,
                os.path.join(paths["models"], name + ".evdw"),
                os.path.join(paths["traces"], name + ".csv"),
            )
        elif family == "dropout":
            net = network.Network(cfg.net_config(head_out=1))
            _fit(
                stage, net, train_cases, val_cases, cfg.loss, cfg.train,
                os.path.join(paths["models"], "dropout.evdw"),
                os.path.join(paths["traces"], "dropout.csv"),
            )
        else:
            for k, seed in enumerate(cfg.ensemble.seeds):
                net = network.Network(cfg.net_config(head_out=1, seed=seed))
                member_train = dataclasses.replace(cfg.train, seed=seed)
                _fit(
                    f"{stage} member {k}", net, train_cases, val_cases,
                    cfg.loss, member_train,
                    os.path.join(paths["models"], baselines.member_checkpoint_name(k)),
                    os.path.join(paths["traces"], f"member_{k}.csv"),
                )
    return 0


# ---------------------------------------------------------------------------
# prediction plumbing shared by eval / noise-test / dvh

def _load_family(cfg, stage, family):
    """Load the checkpoint(s) for one family, erroring by family name."""
    nets = []
    for path in _checkpoint_files(cfg, family):
        if not os.path.exists(path):
            raise StageError(
                stage, f"missing checkpoint for model family '{family}': {path}"
            )
        nets.append(network.load_checkpoint(path))
    return nets


def _family_predictor(cfg, family, nets):
    if family == "evidential":
        net = nets[0]
        return lambda case: net.predict_dose(case.input_channels(), "infer")
    if family == "dropout":
        net = nets[0]
        return lambda case: baselines.mc_dropout_predict(net, case, cfg.dropout)
    return lambda case: baselines.ensemble_predict(nets, case)


def _predictors(cfg, stage, families):
    return {
        family: _family_predictor(cfg, family, _load_family(cfg, stage, family))
        for family in families
    }


def _bundles(predictor, cases):
    return [predictor(case) for case in cases]


# ---------------------------------------------------------------------------
# heatmap + DVH exports

def _write_pgm(path, image):
    """8-bit binary portable graymap, normalized over this image alone."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError("heatmap image must be rank 2")
    lo, hi = float(img.min()), float(img.max())
    if hi > lo:
        scaled = (img - lo) / (hi - lo)
    else:
        scaled = np.zeros_like(img)
    data = np.round(255.0 * scaled).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (img.shape[1], img.shape[0]))
        fh.write(data.tobytes())


def _export_heatmaps(out_dir, cases, bundles):
    """Middle axial slice of error and both uncertainty maps per case."""
    os.makedirs(out_dir, exist_ok=True)
    written = []
    for case, bundle in zip(cases, bundles):
        mid = case.ct.shape[2] // 2
        panes = (
            ("error", np.abs(bundle.dose - case.dose_gt)),
            ("alea", bundle.aleatoric),
            ("epis", bundle.epistemic),
        )
        for label, vol in panes:
            path = os.path.join(out_dir, f"{case.id}_{label}.pgm")
            _write_pgm(path, np.asarray(vol)[:, :, mid])
            written.append(path)
    return written


def _export_dvh_bands(out_dir, cases, bundles, quadrature_band=False):
    os.makedirs(out_dir, exist_ok=True)
    written = []
    for case, bundle in zip(cases, bundles):
        for roi in phantom.ROI_NAMES:
            mask = case.roi_masks[roi] & case.valid_mask
            if not mask.any():
                continue
            curve = dvh.dvh_with_band(
                bundle, mask, roi=roi, quadrature_band=quadrature_band
            )
            path = os.path.join(out_dir, f"{case.id}_{roi}.csv")
            dvh.write_dvh_csv(path, curve)
            written.append(path)
    return written


def _family_scores(families, family_bundles, cases):
    scores = {}
    for family in families:
        doses = [b.dose for b in family_bundles[family]]
        try:
            scores[family] = dvh.dvh_score(doses, cases)
        except ValueError:
            scores[family] = None
    return scores


# ---------------------------------------------------------------------------
# eval / noise-test / dvh

def cmd_eval(cfg, families, run_noise=True, run_dvh=True):
    (test_cases,) = _load_splits(cfg, "eval", ("test",))
    if not test_cases:
        raise StageError("eval", "test split is empty")
    paths = _paths(cfg)
    predictors = _predictors(cfg, "eval", families)
    family_bundles = {f: _bundles(predictors[f], test_cases) for f in families}

    reports = []
    scores = _family_scores(families, family_bundles, test_cases) if run_dvh else {}
    for family in families:
        report = metrics.build_report(
            family_bundles[family],
            test_cases,
            bins=cfg.eval.bins,
            threshold_count=cfg.eval.threshold_count,
        )
        report.dvh_score_gy = scores.get(family)
        reports.append(report)

    noise_results = None
    if run_noise:
        noise_results = metrics.noise_sensitivity(
            predictors,
            test_cases,
            sigma=cfg.eval.noise_sigma,
            bins=cfg.eval.bins,
            seed=cfg.seed,
        )

    roi = None
    if "evidential" in families:
        roi = metrics.roi_table(family_bundles["evidential"], test_cases)

    written = metrics.write_report_files(paths["report"], reports, noise_results, roi)

    if "evidential" in families:
        k = min(cfg.eval.heatmap_cases, len(test_cases))
        head_cases = test_cases[:k]
        head_bundles = family_bundles["evidential"][:k]
        written += _export_heatmaps(paths["heatmaps"], head_cases, head_bundles)
        if run_dvh:
            written += _export_dvh_bands(paths["dvh"], head_cases, head_bundles)

    print(f"eval: wrote {len(written)} files under {paths['report']}")
    return 0


def cmd_noise_test(cfg, families):
    (test_cases,) = _load_splits(cfg, "noise-test", ("test",))
    if not test_cases:
        raise StageError("noise-test", "test split is empty")
    paths = _paths(cfg)
    predictors = _predictors(cfg, "noise-test", families)
    results = metrics.noise_sensitivity(
        predictors,
        test_cases,
        sigma=cfg.eval.noise_sigma,
        bins=cfg.eval.bins,
        seed=cfg.seed,
    )
    os.makedirs(paths["report"], exist_ok=True)
    summary = os.path.join(paths["report"], "noise_summary.txt")
    metrics.write_summary(summary, [], noise_results=results)
    for res in results:
        metrics.write_ecdf_csv(
            os.path.join(paths["report"], f"ecdf_{res.name}.csv"), res
        )
    for res in results:
        print(
            f"noise[{res.name}]: kl {res.kl_clean:.4g} -> {res.kl_noisy:.4g} "
            f"(fractional change {res.fractional_change:.4g})"
        )
    return 0


def cmd_dvh(cfg, families, quadrature_band=False):
    (test_cases,) = _load_splits(cfg, "dvh", ("test",))
    if not test_cases:
        raise StageError("dvh", "test split is empty")
    paths = _paths(cfg)
    predictors = _predictors(cfg, "dvh", families)
    family_bundles = {f: _bundles(predictors[f], test_cases) for f in families}
    scores = _family_scores(families, family_bundles, test_cases)

    os.makedirs(paths["report"], exist_ok=True)
    if "evidential" in families:
        k = min(cfg.eval.heatmap_cases, len(test_cases))
        _export_dvh_bands(
            paths["dvh"],
            test_cases[:k],
            family_bundles["evidential"][:k],
            quadrature_band=quadrature_band,
        )
    lines = ["[dvh]"]
    for family in sorted(scores):
        value = scores[family]
        text = "" if value is None else _FMT % value
        lines.append(f"dvh_score_gy.{family} = {text}")
        print(f"dvh[{family}]: score {text or 'undefined'} Gy")
    with open(os.path.join(paths["report"], "dvh_summary.txt"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    return 0


# ---------------------------------------------------------------------------
# argument parsing

def build_parser():
    parser = argparse.ArgumentParser(
        prog="evidose",
        description="Volumetric dose regression with evidential uncertainty.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="INI experiment config; defaults apply if omitted")
        p.add_argument("--out", help="output directory (overrides config)")
        p.add_argument("--seed", type=int, help="experiment seed (overrides env and config)")
        p.add_argument(
            "--threads", type=int,
            help="worker thread cap; stages run sequentially, so 1 is typical",
        )

    def model_flag(p, with_all=True):
        choices = FAMILIES + (("all",) if with_all else ())
        p.add_argument(
            "--model", choices=choices, default="all" if with_all else None,
            help="model family to operate on",
        )

    def variant_flag(p):
        p.add_argument(
            "--loss-variant", choices=("original", "refined"),
            help="evidential loss variant (overrides config)",
        )

    p = sub.add_parser("generate", help="write the phantom dataset")
    common(p)

    p = sub.add_parser("train", help="train one or all model families")
    common(p)
    model_flag(p)
    variant_flag(p)
    p.add_argument("--epochs", type=int, help="override epoch count (0 = initial checkpoint only)")

    p = sub.add_parser("eval", help="evaluate trained families and write the report")
    common(p)
    model_flag(p)
    variant_flag(p)
    p.add_argument("--skip-noise", action="store_true", help="skip the CT-noise study")
    p.add_argument("--skip-dvh", action="store_true", help="skip DVH export and score")

    p = sub.add_parser("noise-test", help="run only the CT-noise sensitivity study")
    common(p)
    model_flag(p)
    variant_flag(p)

    p = sub.add_parser("dvh", help="export DVH bands and scores")
    common(p)
    model_flag(p)
    variant_flag(p)
    p.add_argument(
        "--quadrature-band", action="store_true",
        help="combine uncertainties in quadrature instead of adding variances",
    )
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        if args.command == "generate":
            return cmd_generate(cfg)
        families = _selected_families(args)
        if args.command == "train":
            return cmd_train(cfg, families)
        if args.command == "eval":
            return cmd_eval(
                cfg, families,
                run_noise=not args.skip_noise,
                run_dvh=not args.skip_dvh,
            )
        if args.command == "noise-test":
            return cmd_noise_test(cfg, families)
        return cmd_dvh(cfg, families, quadrature_band=args.quadrature_band)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except OSError as exc:
        print(f"error: {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
