"""Interpolation schemes on patchified data: cutout, patch-level cutmix
aggregation, mixup, and bounding-box cutmix.

Smashed data is any [N, F] tensor of N patches with F features each.
Raw images participate through the same code paths by treating each pixel
as a patch (patch side 1, F = channels).
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import ParameterError, ProtocolError, ShapeError
from .mixer import PatchMask, check_partition
from .numeric import SeededRng, as_tensor

LAMBDA_SUM_TOL = 1e-9


@dataclass(frozen=True)
class SmashedData:
    """Patchified cut-layer tensor: [num_patches, features] plus owner id."""

    patches: np.ndarray
    client_id: int = -1

    def __post_init__(self):
        p = as_tensor(self.patches)
        if p.ndim != 2:
            raise ShapeError(f"patches must be 2-D [N, F], got shape {p.shape}")
        object.__setattr__(self, "patches", p)

    @property
    def num_patches(self) -> int:
        return self.patches.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.patches.shape[1]


@dataclass(frozen=True)
class MixedBatchItem:
    """One server-side mixed sample: smashed tensor, soft label, provenance.

    contributors holds (client_id, lambda, mask-or-None) triples whose
    lambdas sum to 1.
    """

    smashed: SmashedData
    label: np.ndarray
    contributors: tuple

    def __post_init__(self):
        object.__setattr__(self, "label", as_tensor(self.label))
        total = sum(lam for _, lam, _ in self.contributors)
        if abs(total - 1.0) > LAMBDA_SUM_TOL:
            raise ParameterError(f"contributor lambdas must sum to 1, got {total!r}")


def cutout(s: SmashedData, mask: PatchMask) -> SmashedData:
    """Zero every patch outside mask.selected; retained patches are copied."""
    if mask.num_patches != s.num_patches:
        raise ShapeError(f"mask covers {mask.num_patches} patches, data has {s.num_patches}")
    out = np.zeros_like(s.patches)
    if mask.selected:
        rows = sorted(mask.selected)
        out[rows, :] = s.patches[rows, :]
    return SmashedData(out, client_id=s.client_id)


def patch_cutmix_aggregate(items) -> SmashedData:
    """Sum cutout uploads whose masks partition the patch set.

    With disjoint, covering masks every output patch equals exactly one
    contributor's patch; there are no blank patches.
    """
    items = list(items)
    if not items:
        raise ParameterError("nothing to aggregate")
    masks = [mask for _, mask in items]
    if not check_partition(masks):
        raise ProtocolError("masks do not form a partition of the patch indices")
    first = items[0][0]
    total = first.patches.copy()
    for s, _ in items[1:]:
        if s.patches.shape != first.patches.shape:
            raise ShapeError("aggregation inputs must share one shape")
        total = total + s.patches
    return SmashedData(total, client_id=-1)


def mixup(items) -> SmashedData:
    """Convex combination of whole tensors: sum of lambda_i * s_i."""
    items = list(items)
    if not items:
        raise ParameterError("nothing to mix")
    total_lam = sum(lam for _, lam in items)
    if abs(total_lam - 1.0) > LAMBDA_SUM_TOL:
        raise ParameterError(f"mixing ratios must sum to 1, got {total_lam!r}")
    first = items[0][0]
    out = np.zeros_like(first.patches)
    for s, lam in items:
        if s.patches.shape != first.patches.shape:
            raise ShapeError("mixup inputs must share one shape")
        out = out + lam * s.patches
    return SmashedData(out, client_id=-1)


def mix_labels(labels) -> np.ndarray:
    """Lambda-weighted sum of label vectors."""
    labels = [(as_tensor(y), lam) for y, lam in labels]
    if not labels:
        raise ParameterError("nothing to mix")
    dim = labels[0][0].shape
    out = np.zeros(dim)
    for y, lam in labels:
        if y.shape != dim:
            raise ShapeError(f"label dimensions differ: {y.shape} vs {dim}")
        out = out + lam * y
    return out


def cutmix_box(grid_side: int, lambda_a: float, rng: SeededRng):
    """Original-CutMix box on a grid_side x grid_side cell grid.

    Cut side = floor(grid_side * sqrt(1 - lambda_a)); the center is uniform
    on the grid and the box is clipped at the borders. Returns half-open
    bounds (r1, r2, c1, c2).
    """
    cut = int(grid_side * math.sqrt(max(0.0, 1.0 - lambda_a)))
    gen = rng.generator()
    cr = int(gen.integers(grid_side))
    cc = int(gen.integers(grid_side))
    r1 = int(np.clip(cr - cut // 2, 0, grid_side))
    r2 = int(np.clip(cr + cut // 2, 0, grid_side))
    c1 = int(np.clip(cc - cut // 2, 0, grid_side))
    c2 = int(np.clip(cc + cut // 2, 0, grid_side))
    return r1, r2, c1, c2


def vanilla_cutmix(a: SmashedData, b: SmashedData, lambda_a: float, rng: SeededRng):
    """Bounding-box cutmix of two samples on their square patch grid.

    A clipped box of area fraction about (1 - lambda_a) is replaced by b's
    content. Returns the mixed data and the realized area-based lambda.
    """
    if a.patches.shape != b.patches.shape:
        raise ShapeError("cutmix inputs must share one shape")
    if not 0.0 <= lambda_a <= 1.0:
        raise ParameterError(f"lambda_a must lie in [0,1], got {lambda_a}")
    n = a.num_patches
    side = math.isqrt(n)
    if side * side != n:
        raise ParameterError(f"patch count {n} is not a square grid")
    r1, r2, c1, c2 = cutmix_box(side, lambda_a, rng)
    out = a.patches.copy()
    grid = out.reshape(side, side, a.feature_dim)
    grid[r1:r2, c1:c2, :] = b.patches.reshape(side, side, b.feature_dim)[r1:r2, c1:c2, :]
    area = (r2 - r1) * (c2 - c1)
    lam_eff = 1.0 - area / n
    return SmashedData(out, client_id=-1), lam_eff
