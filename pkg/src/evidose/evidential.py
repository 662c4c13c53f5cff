"""Normal-inverse-gamma head: constrained parameter maps, dose representation,
and closed-form uncertainty extraction.

Dose representation. Physical dose D_p in [0, 100] Gy maps to a normalized
value y = (0.9 * D_p + 10) / 100 in [0.1, 1.0], so zero dose sits at y = 0.1
rather than at the logit singularity. Network targets live in logit space,
L = log(y / (1 - y)); the zero-dose floor is L = -log 9.

Uncertainty. The NIG posterior gives, per voxel, mean logit gamma, aleatoric
variance U_a = beta / (alpha - 1) and epistemic variance
U_e = beta / (nu * (alpha - 1)), both in logit units. Physical-unit maps are
obtained with the delta-method factor ((100 / 0.9) * y * (1 - y))^2.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import special

EPSILON_FLOOR = 0.1                     # normalized value assigned to zero dose
GAMMA_FLOOR = -float(np.log(9.0))       # logit of the zero-dose floor
LOGIT_CLAMP = 1.0 - 1e-6                # upper clamp on y before the logit
DOSE_SCALE = 100.0 / 0.9                # dD_p/dy, the inverse-map slope

NU_FLOOR = 1e-6
ALPHA_FLOOR = 1.0 + 1e-6
BETA_FLOOR = 1e-3


@dataclass
class NIGField:
    """Per-voxel NIG parameter maps in logit units, rank-3 (D, H, W)."""

    gamma: np.ndarray
    nu: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray

    def validate(self):
        if not np.all(self.nu > 0):
            raise ValueError("NIGField invariant breach: nu must be > 0")
        if not np.all(self.alpha > 1):
            raise ValueError("NIGField invariant breach: alpha must be > 1")
        if not np.all(self.beta >= BETA_FLOOR):
            raise ValueError("NIGField invariant breach: beta must be >= 1e-3")
        if not np.all(self.gamma >= GAMMA_FLOOR - 1e-6):
            raise ValueError("NIGField invariant breach: gamma below -log 9")


@dataclass
class PredictionBundle:
    """Physical-space prediction: dose in Gy, uncertainty maps in Gy^2.

    Baseline estimators place their whole sample variance in `epistemic`
    and a zero map in `aleatoric`; the evidential path fills both.
    """

    dose: np.ndarray
    aleatoric: np.ndarray
    epistemic: np.ndarray
    tag: str

    @property
    def total_variance(self):
        return self.aleatoric + self.epistemic


def constrain_raw_outputs(raw):
    """Map an unconstrained 4-channel grid onto valid NIG parameters.

    gamma = -log 9 + softplus(r0), nu = softplus(r1) + 1e-6,
    alpha = 1 + softplus(r2) + 1e-6, beta = 1e-3 + softplus(r3).
    """
    raw = np.asarray(raw)
    if raw.ndim != 4 or raw.shape[0] != 4:
        raise ValueError(f"expected a 4-channel rank-4 grid, got shape {raw.shape}")
    sp = special.softplus(raw.astype(np.float64))
    return NIGField(
        gamma=GAMMA_FLOOR + sp[0],
        nu=sp[1] + NU_FLOOR,
        alpha=ALPHA_FLOOR + sp[2],
        beta=BETA_FLOOR + sp[3],
    )


def constrain_nodes(raw):
    """Graph twin of constrain_raw_outputs: Node in, four Nodes out."""
    if raw.data.ndim != 4 or raw.data.shape[0] != 4:
        raise ValueError(f"expected a 4-channel rank-4 grid, got shape {raw.data.shape}")
    gamma = ad.add(ad.softplus(ad.channel_slice(raw, 0, 1)), GAMMA_FLOOR)
    nu = ad.add(ad.softplus(ad.channel_slice(raw, 1, 2)), NU_FLOOR)
    alpha = ad.add(ad.softplus(ad.channel_slice(raw, 2, 3)), ALPHA_FLOOR)
    beta = ad.add(ad.softplus(ad.channel_slice(raw, 3, 4)), BETA_FLOOR)
    return gamma, nu, alpha, beta


def nig_uncertainties(field):
    """Closed-form posterior moments: (mean logit, U_a, U_e) per voxel."""
    if not np.all(field.alpha > 1):
        raise ValueError("nig_uncertainties needs alpha > 1 everywhere")
    u_a = field.beta / (field.alpha - 1.0)
    u_e = u_a / field.nu
    return field.gamma, u_a, u_e


def dose_to_normalized(dose_gy):
    dose_gy = np.asarray(dose_gy, dtype=np.float64)
    if np.any(dose_gy < 0) or np.any(dose_gy > 100):
        raise ValueError("physical dose must lie in [0, 100] Gy")
    return (0.9 * dose_gy + 10.0) / 100.0


def normalized_to_dose(y):
    return (100.0 * np.asarray(y, dtype=np.float64) - 10.0) / 0.9


def dose_to_logit(dose_gy):
    """Logit-space target for a physical dose, clamped below the singularity."""
    y = np.minimum(dose_to_normalized(dose_gy), LOGIT_CLAMP)
    return special.logit(y)


def logit_to_dose(logit):
    return normalized_to_dose(special.sigmoid(np.asarray(logit, dtype=np.float64)))


def to_physical(field):
    """Convert an NIGField into a PredictionBundle in physical units."""
    mean_logit, u_a, u_e = nig_uncertainties(field)
    y = special.sigmoid(np.asarray(mean_logit, dtype=np.float64))
    jac2 = np.square(DOSE_SCALE * y * (1.0 - y))
    dose = (100.0 * y - 10.0) / 0.9
    return PredictionBundle(
        dose=dose.astype(np.float32),
        aleatoric=(jac2 * u_a).astype(np.float32),
        epistemic=(jac2 * u_e).astype(np.float32),
        tag="evidential",
    )
