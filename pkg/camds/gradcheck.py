"""Central finite-difference oracle for the autodiff engine."""

import logging
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from camds.tensor import Parameter, Tensor, backward, record_kinks

logger = logging.getLogger(__name__)

# Gradients smaller than this are compared on an absolute scale.
DENOMINATOR_FLOOR = 1e-4


@dataclass
class GradCheckReport:
    """Outcome of comparing autodiff gradients with central differences."""

    max_rel_error: float
    checked: int
    excluded: int
    tolerance: float
    worst: Optional[str] = None

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


class _Tally:
    def __init__(self, tolerance: float) -> None:
        self.tolerance = tolerance
        self.max_rel_error = 0.0
        self.checked = 0
        self.excluded = 0
        self.worst: Optional[str] = None

    def compare(self, label: str, analytic: float, numeric: float) -> None:
        denominator = max(abs(analytic), abs(numeric), DENOMINATOR_FLOOR)
        error = abs(analytic - numeric) / denominator
        self.checked += 1
        if error > self.max_rel_error or self.worst is None:
            self.max_rel_error = max(error, self.max_rel_error)
            self.worst = label

    def report(self) -> GradCheckReport:
        return GradCheckReport(
            self.max_rel_error, self.checked, self.excluded, self.tolerance, self.worst
        )


def _same_pattern(reference: list[np.ndarray], candidate: list[np.ndarray]) -> bool:
    return len(reference) == len(candidate) and all(
        np.array_equal(a, b) for a, b in zip(reference, candidate)
    )


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    point: np.ndarray,
    h: float = 1e-5,
    tol: float = 1e-4,
) -> GradCheckReport:
    """Check df/dx of a scalar tensor function at ``point`` coordinate by coordinate.

    A coordinate is excluded when |x_i| < 10*h, or when stepping it by +-h
    changes the activation pattern of any relu inside ``f``.
    """
    x0 = np.array(point, dtype=np.float64)
    x = Tensor(x0.copy(), requires_grad=True)
    backward(f(x))
    analytic = x.grad if x.grad is not None else np.zeros_like(x0)

    with record_kinks() as reference:
        f(Tensor(x0.copy()))

    tally = _Tally(tol)
    for index in np.ndindex(*x0.shape):
        if abs(x0[index]) < 10 * h:
            tally.excluded += 1
            continue
        values = []
        patterns = []
        for step in (h, -h):
            shifted = x0.copy()
            shifted[index] += step
            with record_kinks() as log:
                values.append(f(Tensor(shifted)).item())
            patterns.append(log)
        if not all(_same_pattern(reference, p) for p in patterns):
            tally.excluded += 1
            continue
        numeric = (values[0] - values[1]) / (2 * h)
        tally.compare(f"x{list(index)}", float(analytic[index]), numeric)
    return tally.report()


def check_parameter_gradients(
    loss_fn: Callable[[], Tensor],
    parameters: Sequence[Parameter],
    h: float = 1e-5,
    tol: float = 1e-4,
) -> GradCheckReport:
    """Finite-difference check of every coordinate of every parameter.

    ``loss_fn`` rebuilds the scalar loss from the current parameter values.
    Parameters are perturbed in place and restored afterwards.
    """
    if any(p.dtype != np.float64 for p in parameters):
        logger.warning("Gradient check on non-64-bit parameters; expect large errors")

    for p in parameters:
        p.zero_grad()
    backward(loss_fn())
    analytic = {p.name: p.grad.copy() for p in parameters}

    with record_kinks() as reference:
        loss_fn()

    tally = _Tally(tol)
    for p in parameters:
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            values = []
            patterns = []
            for step in (h, -h):
                flat[i] = original + step
                with record_kinks() as log:
                    values.append(loss_fn().item())
                patterns.append(log)
            flat[i] = original
            if not all(_same_pattern(reference, log) for log in patterns):
                tally.excluded += 1
                continue
            numeric = (values[0] - values[1]) / (2 * h)
            tally.compare(f"{p.name}[{i}]", float(analytic[p.name].reshape(-1)[i]), numeric)

    report = tally.report()
    logger.info(
        "Gradient check: %d coordinates, %d excluded, max rel err %.3g (%s)",
        report.checked, report.excluded, report.max_rel_error, report.worst,
    )
    return report
