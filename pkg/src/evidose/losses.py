"""Training objectives for the evidential head.

Two variants exist. The refined loss squashes the per-voxel Student-t
marginal density g through f_s(g) = 1/(1+g), then adds an evidence
regularizer lambda_kl * |L - gamma| * (2 nu + alpha) and a logit-space MSE
term lambda_mse * (L - gamma)^2. The original loss is the plain negative
log marginal likelihood (including its 1/(y(1-y)) prefactor) plus the same
regularizer; it is kept for the stability comparison.

Numerics: f_s(g) = 1/(1+g) = sigmoid(-log g), so the refined loss is
evaluated entirely from the log-density.  Gamma ratios go through lgamma and
all powers through logs, which keeps everything finite for alpha up to the
hundreds and beta down to its 1e-3 floor.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import evidential
from . import special

_LOG_PI = float(np.log(np.pi))


@dataclass
class LossConfig:
    lambda_kl: float = 0.01
    lambda_mse: float = 0.05
    variant: str = "refined"

    def __post_init__(self):
        if self.lambda_kl < 0 or self.lambda_mse < 0:
            raise ValueError("loss weights must be non-negative")
        if self.variant not in ("original", "refined"):
            raise ValueError(f"loss variant must be 'original' or 'refined', got {self.variant!r}")


def _check_field_params(nu, alpha, beta):
    # the density exists for any alpha > 0 (df = 2 alpha); the stricter
    # alpha > 1 bound is only needed for the posterior moment formulas
    if not (np.all(nu > 0) and np.all(alpha > 0) and np.all(beta > 0)):
        raise ValueError("NIG parameters out of range: need nu > 0, alpha > 0, beta > 0")


def log_student_t_marginal(L, gamma, nu, alpha, beta):
    """Log of the marginal density of the logit value under the NIG prior.

    This is the Student-t density St(L; gamma, beta (1+nu) / (nu alpha), 2 alpha)
    evaluated in log space.
    """
    L, gamma, nu, alpha, beta = (
        np.asarray(v, dtype=np.float64) for v in (L, gamma, nu, alpha, beta)
    )
    _check_field_params(nu, alpha, beta)
    log_denom = np.log(2.0 * beta * (1.0 + nu))
    ratio = nu * np.square(L - gamma) * np.exp(-log_denom)
    out = (
        special.lgamma(alpha + 0.5)
        - special.lgamma(alpha)
        - 0.5 * (log_denom - np.log(nu) + _LOG_PI)
        - (alpha + 0.5) * np.log1p(ratio)
    )
    if not np.all(np.isfinite(out)):
        k = int(np.argmin(np.isfinite(np.atleast_1d(out))))
        raise FloatingPointError(f"non-finite log marginal density at voxel {k}")
    return out


def student_t_marginal(L, gamma, nu, alpha, beta):
    return np.exp(log_student_t_marginal(L, gamma, nu, alpha, beta))


def refined_loss(L, gamma, nu, alpha, beta, cfg=None):
    """Per-voxel refined objective (density squashing + regularizer + MSE)."""
    cfg = cfg or LossConfig()
    if cfg.variant != "refined":
        raise ValueError("refined_loss called with a non-refined config")
    log_st = log_student_t_marginal(L, gamma, nu, alpha, beta)
    L, gamma = np.asarray(L, dtype=np.float64), np.asarray(gamma, dtype=np.float64)
    nu, alpha = np.asarray(nu, dtype=np.float64), np.asarray(alpha, dtype=np.float64)
    err = L - gamma
    f_s = special.sigmoid(-log_st)
    return f_s + cfg.lambda_kl * np.abs(err) * (2.0 * nu + alpha) + cfg.lambda_mse * np.square(err)


def original_loss(y, gamma, nu, alpha, beta, cfg=None):
    """Per-voxel negative log marginal likelihood with the logit prefactor."""
    cfg = cfg or LossConfig(variant="original")
    if cfg.variant != "original":
        raise ValueError("original_loss called with a non-original config")
    y = np.asarray(y, dtype=np.float64)
    if np.any(y <= 0) or np.any(y >= 1):
        raise ValueError("normalized dose must lie strictly inside (0, 1)")
    L = special.logit(y)
    log_st = log_student_t_marginal(L, gamma, nu, alpha, beta)
    gamma = np.asarray(gamma, dtype=np.float64)
    nu, alpha = np.asarray(nu, dtype=np.float64), np.asarray(alpha, dtype=np.float64)
    err = np.abs(L - gamma)
    nll = -log_st + np.log(y) + np.log1p(-y)
    return nll + cfg.lambda_kl * err * (2.0 * nu + alpha)


def _log_student_t_nodes(sq_err, nu, alpha, beta):
    denom = ad.mul(ad.mul(beta, ad.add(nu, 1.0)), 2.0)
    log_denom = ad.log(denom)
    ratio = ad.mul(ad.mul(nu, sq_err), ad.exp(ad.mul(log_denom, -1.0)))
    gamma_ratio = ad.sub(ad.lgamma(ad.add(alpha, 0.5)), ad.lgamma(alpha))
    norm = ad.mul(ad.add(ad.sub(log_denom, ad.log(nu)), _LOG_PI), -0.5)
    tail = ad.mul(ad.mul(ad.add(alpha, 0.5), ad.log(ad.add(ratio, 1.0))), -1.0)
    return ad.add(ad.add(gamma_ratio, norm), tail)


def batch_loss(raw, target_logit, valid_mask, cfg):
    """Masked-mean training loss over a 4-channel raw head output Node.

    Gradients flow to all four head channels through the constraint mapping.
    """
    target_logit = np.asarray(target_logit, dtype=raw.data.dtype).reshape(raw.data.shape[1:])
    mask = np.asarray(valid_mask).reshape(raw.data.shape[1:])
    if not mask.any():
        raise ValueError("batch_loss needs at least one valid voxel")
    gamma, nu, alpha, beta = evidential.constrain_nodes(raw)
    target = ad.constant(target_logit[None])
    err = ad.sub(target, gamma)
    sq_err = ad.square(err)
    log_st = _log_student_t_nodes(sq_err, nu, alpha, beta)
    regularizer = ad.mul(ad.absval(err), ad.add(ad.mul(nu, 2.0), alpha))

    if cfg.variant == "refined":
        f_s = ad.sigmoid(ad.mul(log_st, -1.0))
        per_voxel = ad.add(f_s, ad.mul(regularizer, cfg.lambda_kl))
        if cfg.lambda_mse:
            per_voxel = ad.add(per_voxel, ad.mul(sq_err, cfg.lambda_mse))
    else:
        y = special.sigmoid(target_logit.astype(np.float64))
        prefactor = (np.log(y) + np.log1p(-y)).astype(raw.data.dtype)
        nll = ad.sub(ad.constant(prefactor[None]), log_st)
        per_voxel = ad.add(nll, ad.mul(regularizer, cfg.lambda_kl))

    return ad.masked_mean(per_voxel, mask[None])
