"""Closed-form Renyi-DP budgets for the three smashed-data mechanisms.

All three budgets are sequential compositions of the Gaussian Renyi
divergence bound applied to the smashed-data term and the label term:

    eps_o      = (alpha/2) * (Delta^2 D_s / sigma_s^2 + D_y / sigma_y^2)
    eps_mix    = (max lambda)^2 * eps_o
    eps_cutmix = (alpha * max lambda / 2)
                 * (Delta^2 D_s / sigma_s^2 + max lambda * D_y / sigma_y^2)

which always satisfy eps_mix <= eps_cutmix <= eps_o, with all three equal
exactly when max lambda = 1 (a single client). A zero noise scale yields an
infinite budget sentinel rather than an error so noiseless runs still work.
"""

import math
from dataclasses import dataclass

from .dp import PrivacyParams
from .errors import InternalConsistencyError, ParameterError
from .mixer import MixingRatios


def gaussian_renyi_bound(mean_diff_sq_norm: float, sigma: float, alpha: float) -> float:
    """Order-alpha Renyi divergence bound between equal-variance Gaussians:
    alpha * ||mu - mu'||^2 / (2 sigma^2)."""
    if mean_diff_sq_norm < 0:
        raise ParameterError(f"squared norm must be nonnegative, got {mean_diff_sq_norm}")
    if sigma < 0:
        raise ParameterError(f"sigma must be nonnegative, got {sigma}")
    if alpha <= 1:
        raise ParameterError(f"Renyi order alpha must exceed 1, got {alpha}")
    if sigma == 0:
        return 0.0 if mean_diff_sq_norm == 0 else math.inf
    return alpha * mean_diff_sq_norm / (2.0 * sigma * sigma)


def eps_baseline(p: PrivacyParams) -> float:
    """Budget of the plain Gaussian mechanism on full smashed data plus label."""
    smashed = gaussian_renyi_bound(p.delta_bound**2 * p.d_s, p.sigma_s, p.alpha)
    label = gaussian_renyi_bound(float(p.d_y), p.sigma_y, p.alpha)
    return smashed + label


def eps_mixup(p: PrivacyParams, ratios: MixingRatios) -> float:
    """Mixup budget: the baseline scaled by (max lambda)^2."""
    return ratios.max_lambda**2 * eps_baseline(p)


def eps_cutmix(p: PrivacyParams, ratios: MixingRatios) -> float:
    """Patch-cutmix budget: max lambda on the smashed term, squared on the label term."""
    m = ratios.max_lambda
    smashed = gaussian_renyi_bound(m * p.delta_bound**2 * p.d_s, p.sigma_s, p.alpha)
    label = gaussian_renyi_bound(m * m * float(p.d_y), p.sigma_y, p.alpha)
    return smashed + label


@dataclass(frozen=True)
class RdpReport:
    """The three budgets at one order, ordered eps_mix <= eps_cutmix <= eps_o."""

    alpha: float
    eps_o: float
    eps_mix: float
    eps_cutmix: float
    max_lambda: float
    params: PrivacyParams

    def to_json_dict(self) -> dict:
        def enc(v):
            return "inf" if math.isinf(v) else v

        return {
            "alpha": self.alpha,
            "eps_o": enc(self.eps_o),
            "eps_mix": enc(self.eps_mix),
            "eps_cutmix": enc(self.eps_cutmix),
            "max_lambda": self.max_lambda,
        }


def verify_theorem1(p: PrivacyParams, ratios: MixingRatios) -> RdpReport:
    """Compute all three budgets and check their ordering holds."""
    e_o = eps_baseline(p)
    e_mix = eps_mixup(p, ratios)
    e_cut = eps_cutmix(p, ratios)
    if not (e_mix <= e_cut <= e_o):
        raise InternalConsistencyError(
            f"budget ordering violated: mix={e_mix!r} cutmix={e_cut!r} o={e_o!r}")
    if ratios.max_lambda == 1.0 and not (e_mix == e_cut == e_o):
        raise InternalConsistencyError("single-client budgets must coincide")
    return RdpReport(alpha=p.alpha, eps_o=e_o, eps_mix=e_mix, eps_cutmix=e_cut,
                     max_lambda=ratios.max_lambda, params=p)
