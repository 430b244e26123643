"""
Finite-difference gradient checking for anything built from the tensor core.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from src.errors import GradCheckError, NonFiniteError
from src.tensor import Tape, Tensor

logger = logging.getLogger(__name__)

FD_STEP = 1e-5
DEFAULT_TOLERANCE = 1e-4


@dataclass
class GradCheckReport:
    max_relative_error: float
    tolerance: float
    per_input: list[float] = field(default_factory=list)
    checked_elements: int = 0

    @property
    def passed(self) -> bool:
        return self.max_relative_error < self.tolerance


def _relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.linalg.norm(analytic) + np.linalg.norm(numeric)
    if denom == 0:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / denom)


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    tolerance: float = DEFAULT_TOLERANCE,
    step: float = FD_STEP,
    max_elements: Optional[int] = None,
    seed: int = 0,
) -> GradCheckReport:
    """
    Compare backprop gradients of sum(fn(*inputs)) against central differences.

    Only inputs with requires_grad are checked. With `max_elements`, that many
    coordinates per input are sampled (seeded) instead of sweeping all of them.
    """
    checked = [t for t in inputs if t.requires_grad]
    if not checked:
        raise GradCheckError("no input requires a gradient")
    for t in checked:
        if t.dtype != np.float64:
            raise GradCheckError(f"gradient checks need float64 inputs, got {t.dtype}")

    for t in checked:
        t.zero_grad()
    with Tape() as tape:
        out = fn(*inputs)
    tape.backward(out, np.ones_like(out.data))

    rng = np.random.default_rng(seed)
    errors = []
    total = 0
    for t in checked:
        analytic_full = np.zeros_like(t.data) if t.grad is None else t.grad
        if not np.all(np.isfinite(analytic_full)):
            raise NonFiniteError("backprop gradient is non-finite")
        flat_idx = np.arange(t.size)
        if max_elements is not None and t.size > max_elements:
            flat_idx = np.sort(rng.choice(t.size, size=max_elements, replace=False))

        numeric = np.empty(len(flat_idx))
        if not t.data.flags.c_contiguous:
            t.data = np.ascontiguousarray(t.data)
        view = t.data.reshape(-1)
        for n, i in enumerate(flat_idx):
            orig = view[i]
            view[i] = orig + step
            f_plus = float(fn(*inputs).data.sum())
            view[i] = orig - step
            f_minus = float(fn(*inputs).data.sum())
            view[i] = orig
            numeric[n] = (f_plus - f_minus) / (2 * step)
        if not np.all(np.isfinite(numeric)):
            raise NonFiniteError("finite-difference gradient is non-finite")

        analytic = analytic_full.reshape(-1)[flat_idx]
        errors.append(_relative_error(analytic, numeric))
        total += len(flat_idx)

    report = GradCheckReport(max(errors), tolerance, errors, total)
    logger.debug(f"GradCheck: {total} elements, max relative error {report.max_relative_error:.3e}")
    return report
