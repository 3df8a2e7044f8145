"""Mixing-ratio draws and pseudorandom patch-mask generation.

The mixer draws one ratio per client in a mixing group and turns the ratios
into a family of per-client patch masks that exactly partitions the patch
index set: pairwise disjoint, jointly covering, each mask within one patch
of its ratio's share.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError
from .numeric import SeededRng, sample_dirichlet

RATIO_SUM_TOL = 1e-12


@dataclass(frozen=True)
class MixingRatios:
    """Per-client shares on the simplex: each in [0,1], summing to 1."""

    lambdas: tuple

    def __post_init__(self):
        lams = tuple(float(v) for v in self.lambdas)
        object.__setattr__(self, "lambdas", lams)
        if not lams:
            raise ParameterError("ratios must be nonempty")
        if any(v < 0.0 or v > 1.0 for v in lams):
            raise ParameterError(f"ratios must lie in [0,1], got {lams}")
        if abs(sum(lams) - 1.0) > RATIO_SUM_TOL:
            raise ParameterError(f"ratios must sum to 1, got sum {sum(lams)!r}")

    def __len__(self):
        return len(self.lambdas)

    @property
    def max_lambda(self) -> float:
        return max(self.lambdas)


@dataclass(frozen=True)
class PatchMask:
    """Binary per-patch selector for one client."""

    client_id: int
    selected: frozenset
    num_patches: int

    def __post_init__(self):
        sel = frozenset(int(i) for i in self.selected)
        object.__setattr__(self, "selected", sel)
        if self.num_patches <= 0:
            raise ParameterError(f"num_patches must be positive, got {self.num_patches}")
        if any(i < 0 or i >= self.num_patches for i in sel):
            raise ParameterError("selected indices out of range")

    def indicator(self) -> np.ndarray:
        """Length-N 0/1 vector form of the mask."""
        m = np.zeros(self.num_patches)
        if self.selected:
            m[sorted(self.selected)] = 1.0
        return m


def draw_mixing_ratios(rng: SeededRng, group_size: int, mode: str = "uniform",
                       concentration: float = 1.0) -> MixingRatios:
    """Draw mixing ratios for a group: exact 1/n in uniform mode, Dirichlet otherwise."""
    if group_size < 1:
        raise ParameterError(f"group_size must be >= 1, got {group_size}")
    if mode == "uniform":
        return MixingRatios(tuple([1.0 / group_size] * group_size))
    if mode == "dirichlet":
        if concentration <= 0:
            raise ParameterError(f"concentration must be positive, got {concentration}")
        if group_size == 1:
            return MixingRatios((1.0,))
        draw = sample_dirichlet(rng, [concentration] * group_size)
        return MixingRatios(tuple(draw))
    raise ParameterError(f"unknown ratio mode {mode!r}")


def apportion(quotas) -> list:
    """Largest-remainder rounding of nonnegative quotas to integers with the same sum.

    Each client gets floor(quota); leftover units go one each to the largest
    fractional remainders, ties broken by ascending index. Every result is
    within 1 of its quota.
    """
    quotas = [float(q) for q in quotas]
    total = round(sum(quotas))
    base = [int(np.floor(q)) for q in quotas]
    remainder = total - sum(base)
    if remainder < 0 or remainder > len(quotas):
        raise ParameterError(f"quotas {quotas} do not round to a value near {total}")
    order = sorted(range(len(quotas)), key=lambda i: (base[i] - quotas[i], i))
    for i in order[:remainder]:
        base[i] += 1
    return base


def build_patch_masks(rng: SeededRng, ratios: MixingRatios, num_patches: int,
                      client_ids=None) -> list:
    """Partition {0..N-1} into per-client masks sized by largest-remainder quotas.

    A single random permutation of patch indices is sliced by quota, so every
    partition with the given sizes is equally likely.
    """
    if num_patches <= 0:
        raise ParameterError(f"num_patches must be positive, got {num_patches}")
    if client_ids is None:
        client_ids = list(range(len(ratios)))
    if len(client_ids) != len(ratios):
        raise ParameterError("client_ids and ratios lengths differ")
    sizes = apportion([lam * num_patches for lam in ratios.lambdas])
    perm = rng.generator().permutation(num_patches)
    masks = []
    start = 0
    for cid, size in zip(client_ids, sizes):
        chunk = perm[start:start + size]
        masks.append(PatchMask(client_id=cid, selected=frozenset(int(i) for i in chunk),
                               num_patches=num_patches))
        start += size
    return masks


def check_partition(masks) -> bool:
    """True iff the mask family is pairwise disjoint and covers all patches."""
    if not masks:
        return False
    n = masks[0].num_patches
    seen = set()
    for m in masks:
        if m.num_patches != n:
            return False
        if seen & m.selected:
            return False
        seen |= m.selected
    return seen == set(range(n))
