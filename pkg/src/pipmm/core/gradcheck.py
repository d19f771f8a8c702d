"""
Central finite-difference gradient checking.
"""

from dataclasses import dataclass, field
from typing import Callable, Dict, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from ..errors import ContractError
from .tensor import Tensor, no_grad

ParamSpec = Union[Sequence[Tensor], Mapping[str, Tensor]]


@dataclass
class GradCheckReport:
    max_relative_error: float
    worst_parameter: Optional[str] = None
    per_parameter: Dict[str, float] = field(default_factory=dict)


def _named(params: ParamSpec) -> Sequence[Tuple[str, Tensor]]:
    if isinstance(params, Mapping):
        return list(params.items())
    return [(p.name or f"param{i}", p) for i, p in enumerate(params)]


def finite_diff_report(f: Callable[[], Tensor], params: ParamSpec, h: float = 1e-5,
                       analytic: Optional[Sequence[np.ndarray]] = None) -> GradCheckReport:
    """
    Compare analytic gradients of a scalar function against central differences.

    The error per coordinate is |analytic - central| / max(|analytic|, |central|, 1e-12).

    Args:
        f: Zero-argument callable returning a scalar Tensor built from ``params``
        params: Leaf tensors to perturb
        h: Step size in [1e-7, 1e-3]
        analytic: Optional gradients to check instead of running backward

    Returns:
        GradCheckReport with the maximum over all coordinates
    """
    if not 1e-7 <= h <= 1e-3:
        raise ContractError(f"finite-difference step {h} outside [1e-7, 1e-3]")
    named = _named(params)

    if analytic is None:
        for _, p in named:
            p.grad = None
        f().backward()
        analytic = [p.grad if p.grad is not None else np.zeros_like(p.data) for _, p in named]

    report = GradCheckReport(max_relative_error=0.0)
    for (name, p), grad in zip(named, analytic):
        worst = 0.0
        p.data = np.ascontiguousarray(p.data)
        flat = p.data.reshape(-1)
        grad_flat = np.asarray(grad, dtype=np.float64).reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            with no_grad():
                flat[i] = original + h
                plus = f().item()
                flat[i] = original - h
                minus = f().item()
            flat[i] = original
            central = (plus - minus) / (2.0 * h)
            a = grad_flat[i]
            denom = max(abs(a), abs(central), 1e-12)
            worst = max(worst, abs(a - central) / denom)
        report.per_parameter[name] = worst
        if worst >= report.max_relative_error:
            report.max_relative_error = worst
            report.worst_parameter = name
    return report


def finite_diff_check(f: Callable[[], Tensor], params: ParamSpec, h: float = 1e-5,
                      analytic: Optional[Sequence[np.ndarray]] = None) -> float:
    """Maximum relative error between analytic and central-difference gradients."""
    return finite_diff_report(f, params, h=h, analytic=analytic).max_relative_error
