"""Sensitivity enforcement and the Gaussian mechanism on smashed data and labels.

Clamping runs before masking and noise so the per-element bound the privacy
accounting assumes is literally true of what leaves a client. Noise is added
only to mask-retained patches; punched patches stay exactly zero. Labels are
noised on every coordinate and never re-clipped, keeping the mechanism's
Gaussian shape (downstream losses handle soft targets linearly).
"""

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError, ShapeError
from .mixer import PatchMask
from .numeric import SeededRng, as_tensor, sample_gaussian


@dataclass(frozen=True)
class PrivacyParams:
    """Gaussian-mechanism and accounting parameters.

    delta_bound is the per-element upper bound enforced on smashed data;
    d_s and d_y are the accounting dimensions (config knobs, deliberately
    independent of actual tensor shapes); alpha is the Renyi order.
    """

    delta_bound: float
    sigma_s: float
    sigma_y: float
    d_s: int
    d_y: int
    alpha: float

    def __post_init__(self):
        if self.delta_bound <= 0:
            raise ParameterError(f"delta_bound must be positive, got {self.delta_bound}")
        if self.sigma_s < 0 or self.sigma_y < 0:
            raise ParameterError("noise standard deviations must be nonnegative")
        if self.d_s < 1 or self.d_y < 1:
            raise ParameterError("accounting dimensions must be positive integers")
        if self.alpha <= 1:
            raise ParameterError(f"Renyi order alpha must exceed 1, got {self.alpha}")


def clamp_smashed(s, delta_bound: float) -> np.ndarray:
    """Hard-clip every element into [0, delta_bound]; idempotent."""
    if delta_bound <= 0:
        raise ParameterError(f"delta_bound must be positive, got {delta_bound}")
    return np.clip(as_tensor(s), 0.0, delta_bound)


def gaussianize_smashed(rng: SeededRng, s_masked, mask: PatchMask, sigma_s: float) -> np.ndarray:
    """Add sigma_s Gaussian noise to the retained patches of masked smashed data.

    Expects input already clamped and masked; rows outside mask.selected are
    left untouched (exactly zero in, exactly zero out).
    """
    if sigma_s < 0:
        raise ParameterError(f"sigma_s must be nonnegative, got {sigma_s}")
    s = as_tensor(s_masked).copy()
    if s.ndim != 2:
        raise ShapeError(f"smashed data must be 2-D [patches, features], got {s.shape}")
    if s.shape[0] != mask.num_patches:
        raise ShapeError(f"mask covers {mask.num_patches} patches, tensor has {s.shape[0]}")
    if sigma_s == 0 or not mask.selected:
        return s
    rows = sorted(mask.selected)
    noise = sample_gaussian(rng, (len(rows), s.shape[1]), sigma_s)
    s[rows, :] += noise
    return s


def gaussianize_label(rng: SeededRng, y, sigma_y: float) -> np.ndarray:
    """Add i.i.d. sigma_y Gaussian noise to every label coordinate; no clipping."""
    if sigma_y < 0:
        raise ParameterError(f"sigma_y must be nonnegative, got {sigma_y}")
    y = as_tensor(y)
    if y.ndim != 1:
        raise ShapeError(f"label must be 1-D, got shape {y.shape}")
    if sigma_y == 0:
        return y.copy()
    return y + sample_gaussian(rng, y.shape, sigma_y)
