"""Experiment configuration: one INI-style file drives every stage.

Every key has a default, so an absent or empty file yields a runnable
desk-scale experiment. Unknown sections or keys are rejected rather than
silently ignored. Cross-module constraints (grid extent vs network depth)
are validated at load time by building a probe network config.
"""

from __future__ import annotations

import configparser
import dataclasses

from evidose import baselines, losses, network, phantom


@dataclasses.dataclass
class EvalConfig:
    bins: int = 64
    threshold_count: int = 40
    noise_sigma: float = 0.5
    heatmap_cases: int = 4  # how many test cases get slice exports

    def __post_init__(self):
        if self.bins < 2:
            raise ValueError("bins must be at least 2")
        if self.threshold_count < 2:
            raise ValueError("threshold_count must be at least 2")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if self.heatmap_cases < 0:
            raise ValueError("heatmap_cases must be non-negative")


_SCHEMA = {
    "experiment": ("out_dir", "seed", "threads"),
    "phantom": (
        "grid_extent",
        "train_cases",
        "val_cases",
        "test_cases",
        "noise_sigma",
    ),
    "net": (
        "depth",
        "filters",
        "bottleneck",
        "dropout",
        "bottleneck_dropout",
        "head_hidden",
    ),
    "train": ("epochs", "lr"),
    "loss": ("lambda_kl", "lambda_mse", "variant"),
    "dropout": ("passes",),
    "ensemble": ("member_count",),
    "eval": ("bins", "threshold_count", "noise_sigma", "heatmap_cases"),
}


@dataclasses.dataclass
class ExperimentConfig:
    out_dir: str = "runs/exp"
    seed: int = 0
    threads: int = 1
    phantom: phantom.PhantomConfig = None
    net_depth: int = 4
    net_filters: tuple = (8, 16, 32, 64)
    net_bottleneck: int = 128
    net_dropout: tuple = (0.10, 0.15, 0.20, 0.25)
    net_bottleneck_dropout: float = 0.30
    net_head_hidden: int = 8
    train: network.TrainConfig = None
    loss: losses.LossConfig = None
    dropout: baselines.DropoutConfig = None
    ensemble: baselines.EnsembleConfig = None
    eval: EvalConfig = None

    def __post_init__(self):
        if self.threads < 1:
            raise ValueError("threads must be at least 1")
        if self.phantom is None:
            self.phantom = phantom.PhantomConfig(seed=self.seed)
        if self.train is None:
            self.train = network.TrainConfig(seed=self.seed)
        if self.loss is None:
            self.loss = losses.LossConfig()
        if self.dropout is None:
            self.dropout = baselines.DropoutConfig(seed=self.seed + 1000)
        if self.ensemble is None:
            self.ensemble = baselines.EnsembleConfig(
                member_count=5, seeds=tuple(self.seed + k for k in range(5))
            )
        if self.eval is None:
            self.eval = EvalConfig()
        self.net_config(head_out=4)  # cross-module extent/depth validation

    def net_config(self, head_out, seed=None):
        """Network config for one model family; baselines use head_out=1."""
        return network.NetConfig(
            input_channels=11,
            grid_extent=self.phantom.grid_extent,
            depth=self.net_depth,
            filters=self.net_filters,
            bottleneck=self.net_bottleneck,
            dropout=self.net_dropout,
            bottleneck_dropout=self.net_bottleneck_dropout,
            head_hidden=self.net_head_hidden,
            head_out=head_out,
            seed=self.seed if seed is None else seed,
        )

    def reseed(self, seed):
        """Rebuild every derived seed from a new experiment seed."""
        return dataclasses.replace(
            self,
            seed=seed,
            phantom=dataclasses.replace(self.phantom, seed=seed),
            train=dataclasses.replace(self.train, seed=seed),
            dropout=dataclasses.replace(self.dropout, seed=seed + 1000),
            ensemble=baselines.EnsembleConfig(
                member_count=self.ensemble.member_count,
                seeds=tuple(seed + k for k in range(self.ensemble.member_count)),
            ),
        )


def _floats(raw):
    return tuple(float(v) for v in raw.replace(",", " ").split())


def _ints(raw):
    return tuple(int(v) for v in raw.replace(",", " ").split())


def load_config(path=None):
    """Parse an INI file into an ExperimentConfig; None loads pure defaults."""
    parser = configparser.ConfigParser()
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            parser.read_file(fh)

    for section in parser.sections():
        if section not in _SCHEMA:
            raise ValueError(f"unknown config section [{section}]")
        for key in parser[section]:
            if key not in _SCHEMA[section]:
                raise ValueError(f"unknown config key {key!r} in [{section}]")

    def get(section, key, default, convert):
        if parser.has_option(section, key):
            return convert(parser.get(section, key))
        return default

    seed = get("experiment", "seed", 0, int)
    pc = phantom.PhantomConfig(
        grid_extent=get("phantom", "grid_extent", 32, int),
        train_cases=get("phantom", "train_cases", 40, int),
        val_cases=get("phantom", "val_cases", 8, int),
        test_cases=get("phantom", "test_cases", 16, int),
        seed=seed,
        noise_sigma=get("phantom", "noise_sigma", 0.0, float),
    )
    depth = get("net", "depth", 4, int)
    member_count = get("ensemble", "member_count", 5, int)
    return ExperimentConfig(
        out_dir=get("experiment", "out_dir", "runs/exp", str),
        seed=seed,
        threads=get("experiment", "threads", 1, int),
        phantom=pc,
        net_depth=depth,
        net_filters=get("net", "filters", (8, 16, 32, 64), _ints),
        net_bottleneck=get("net", "bottleneck", 128, int),
        net_dropout=get("net", "dropout", (0.10, 0.15, 0.20, 0.25), _floats),
        net_bottleneck_dropout=get("net", "bottleneck_dropout", 0.30, float),
        net_head_hidden=get("net", "head_hidden", 8, int),
        train=network.TrainConfig(
            epochs=get("train", "epochs", 60, int),
            lr=get("train", "lr", 1e-4, float),
            seed=seed,
        ),
        loss=losses.LossConfig(
            lambda_kl=get("loss", "lambda_kl", 0.01, float),
            lambda_mse=get("loss", "lambda_mse", 0.05, float),
            variant=get("loss", "variant", "refined", str),
        ),
        dropout=baselines.DropoutConfig(
            passes=get("dropout", "passes", 30, int), seed=seed + 1000
        ),
        ensemble=baselines.EnsembleConfig(
            member_count=member_count,
            seeds=tuple(seed + k for k in range(member_count)),
        ),
        eval=EvalConfig(
            bins=get("eval", "bins", 64, int),
            threshold_count=get("eval", "threshold_count", 40, int),
            noise_sigma=get("eval", "noise_sigma", 0.5, float),
            heatmap_cases=get("eval", "heatmap_cases", 4, int),
        ),
    )
