"""Dense float64 tensor arithmetic, seeded randomness, and gradient checking.

Tensors are plain C-contiguous ``numpy.ndarray`` objects with dtype float64
throughout the package. Randomness always flows through :class:`SeededRng`
so that every (seed, stream_id) pair maps to one reproducible Philox stream.
"""

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ParameterError, ShapeError


@dataclass(frozen=True)
class SeededRng:
    """A reproducible, counter-based random stream.

    Identical (seed, stream_id) pairs yield identical draw sequences across
    runs and platforms; distinct stream_ids are statistically independent.
    """

    seed: int
    stream_id: int = 0

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=(self.stream_id,))
        return np.random.Generator(np.random.Philox(ss))

    def stream(self, purpose: int, a: int = 0, b: int = 0) -> "SeededRng":
        """Derive an independent sub-stream keyed by (purpose, a, b)."""
        return SeededRng(self.seed, pack_stream_id(purpose, a, b))


def pack_stream_id(purpose: int, a: int = 0, b: int = 0) -> int:
    """Pack a purpose tag and two indices into a 64-bit stream id."""
    if not 0 <= purpose < 0x100:
        raise ParameterError(f"purpose tag {purpose} out of range")
    if not 0 <= a < 0x100000000 or not 0 <= b < 0x1000000:
        raise ParameterError(f"stream indices ({a}, {b}) out of range")
    return (purpose << 56) | (a << 24) | b


def as_tensor(values) -> np.ndarray:
    return np.ascontiguousarray(values, dtype=np.float64)


def matmul(a, b) -> np.ndarray:
    """Matrix product of two 2-D tensors."""
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions disagree: {a.shape} x {b.shape}")
    return kernels.matmul(a, b)


def softmax_rows(x) -> np.ndarray:
    """Row-wise softmax with max-subtraction for overflow safety."""
    x = as_tensor(x)
    if x.ndim != 2:
        raise ShapeError(f"softmax_rows expects a 2-D tensor, got shape {x.shape}")
    return kernels.softmax_rows(x)


def sample_gaussian(rng: SeededRng, shape, sigma: float) -> np.ndarray:
    """I.i.d. zero-mean Gaussian tensor with standard deviation sigma."""
    if sigma < 0:
        raise ParameterError(f"sigma must be nonnegative, got {sigma}")
    if sigma == 0:
        return np.zeros(shape)
    return rng.generator().normal(0.0, sigma, size=shape)


def sample_dirichlet(rng: SeededRng, concentration) -> np.ndarray:
    """Dirichlet draw via per-coordinate Gamma samples, then normalization."""
    conc = as_tensor(concentration)
    if conc.ndim != 1 or conc.size == 0:
        raise ParameterError("concentration must be a nonempty 1-D sequence")
    if np.any(conc <= 0):
        raise ParameterError("all concentration parameters must be positive")
    gen = rng.generator()
    for _ in range(100):
        g = gen.standard_gamma(conc)
        total = g.sum()
        if total > 0:
            return g / total
    raise ParameterError("gamma draws underflowed to zero; concentration too small")


@dataclass(frozen=True)
class GradCheckReport:
    passed: bool
    max_rel_error: float
    worst_index: int
    tol: float


def finite_diff_check(f, grad_f, x, h: float = 1e-5, tol: float = 1e-6) -> GradCheckReport:
    """Compare an analytic gradient against central finite differences.

    The relative error at coordinate k uses |analytic| + |numeric| + 1e-12
    as denominator; the check passes iff the max over coordinates is <= tol.
    """
    if h <= 0:
        raise ParameterError(f"step h must be positive, got {h}")
    x = as_tensor(x)
    analytic = as_tensor(grad_f(x))
    if analytic.shape != x.shape:
        raise ShapeError(f"gradient shape {analytic.shape} != input shape {x.shape}")
    max_rel = 0.0
    worst = 0
    flat = x.ravel()
    for k in range(flat.size):
        saved = flat[k]
        flat[k] = saved + h
        f_plus = float(f(x))
        flat[k] = saved - h
        f_minus = float(f(x))
        flat[k] = saved
        numeric = (f_plus - f_minus) / (2.0 * h)
        a = float(analytic.ravel()[k])
        rel = abs(a - numeric) / (abs(a) + abs(numeric) + 1e-12)
        if rel > max_rel:
            max_rel = rel
            worst = k
    return GradCheckReport(passed=max_rel <= tol, max_rel_error=max_rel, worst_index=worst, tol=tol)
