"""Sampling-based uncertainty baselines over the shared backbone.

Both estimators emit the same PredictionBundle shape as the evidential
path so downstream evaluation is indifferent to how a bundle was made.
The whole sample variance lands in the epistemic slot; neither baseline
can separate noise from model ignorance on its own.
"""

import dataclasses

import numpy as np

from evidose import evidential


@dataclasses.dataclass
class DropoutConfig:
    passes: int = 30
    seed: int = 0

    def __post_init__(self):
        if self.passes < 2:
            raise ValueError("passes must be at least 2 for a sample variance")


@dataclasses.dataclass
class EnsembleConfig:
    member_count: int = 5
    seeds: tuple = (0, 1, 2, 3, 4)

    def __post_init__(self):
        self.seeds = tuple(self.seeds)
        if self.member_count < 2:
            raise ValueError("member_count must be at least 2")
        if len(self.seeds) != self.member_count:
            raise ValueError(
                f"need exactly {self.member_count} seeds, got {len(self.seeds)}"
            )
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError("member seeds must be distinct")


def member_checkpoint_name(k):
    """Filename convention for the k-th ensemble member's weights."""
    return f"member_{k}.evdw"


def _aggregate(doses, tag):
    stack = np.stack([d.astype(np.float64) for d in doses], axis=0)
    mean = stack.mean(axis=0)
    var = stack.var(axis=0, ddof=1)
    zeros = np.zeros_like(mean, dtype=np.float32)
    return evidential.PredictionBundle(
        dose=mean.astype(np.float32),
        aleatoric=zeros,
        epistemic=var.astype(np.float32),
        tag=tag,
    )


def mc_dropout_predict(net, case, cfg: DropoutConfig):
    """Mean and unbiased variance of physical dose over stochastic passes.

    Dropout stays active; each pass draws fresh masks from a stream seeded
    by cfg.seed, so the bundle is a deterministic function of (net, case, cfg).
    """
    if cfg.passes < 2:
        raise ValueError("passes must be at least 2 for a sample variance")
    x = case.input_channels()
    rng = np.random.default_rng(cfg.seed)
    doses = [net.predict_dose(x, mode="train", rng=rng).dose for _ in range(cfg.passes)]
    return _aggregate(doses, "dropout")


def ensemble_predict(members, case):
    """Mean and unbiased variance of physical dose across trained members.

    Members must share one architecture (config equal up to the seed) and
    carry weights from distinct seeds; inference runs with dropout off.
    """
    members = list(members)
    if len(members) < 2:
        raise ValueError("an ensemble needs at least 2 members")
    ref = dataclasses.replace(members[0].cfg, seed=0)
    for m in members[1:]:
        if dataclasses.replace(m.cfg, seed=0) != ref:
            raise ValueError("ensemble members must share an identical architecture")
    seeds = [m.cfg.seed for m in members]
    if len(set(seeds)) != len(seeds):
        raise ValueError("ensemble member seeds must be distinct")
    x = case.input_channels()
    doses = [m.predict_dose(x, mode="infer").dose for m in members]
    return _aggregate(doses, "ensemble")


def mixture_variance(means, variances):
    """Total mean/variance of an equally weighted mixture of Gaussians.

    Conservation of total variance: the mixture variance is the mean of the
    member variances plus the variance of the member means. Useful when
    treating ensemble members as one predictive distribution.
    """
    means = np.asarray(means, dtype=np.float64)
    variances = np.asarray(variances, dtype=np.float64)
    if means.shape != variances.shape:
        raise ValueError("means and variances must align")
    total_mean = means.mean(axis=0)
    within = variances.mean(axis=0)
    between = means.var(axis=0)  # population variance over members
    return total_mean, within + between
