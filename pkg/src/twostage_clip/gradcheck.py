"""Central finite-difference verification of the reverse pass."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .tensor import Tensor, backward, no_grad

GraphBuilder = Callable[[np.random.Generator], tuple[dict[str, Tensor], Callable[[], Tensor]]]


@dataclass
class GradCheckReport:
    tolerance: float
    errors: dict[str, float] = field(default_factory=dict)

    @property
    def failed(self) -> list[str]:
        return [name for name, err in self.errors.items() if not err <= self.tolerance]

    @property
    def passed(self) -> bool:
        return not self.failed

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, scale: float = 0.0,
                   floor: float = 1e-12) -> float:
    """Largest elementwise deviation, relative to the gradient's own scale.

    The scale is the largest magnitude among both gradients (and `scale`,
    typically the full analytic gradient's max-abs when only some entries
    are compared), so tiny entries of an otherwise large gradient do not
    dominate the measure.
    """
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), scale, floor)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def numerical_gradient(loss_fn: Callable[[], Tensor], param: Tensor, epsilon: float,
                       coords: np.ndarray | None = None) -> np.ndarray:
    """Central differences at the flat indices `coords` (all elements by default)."""
    if not param.data.flags.c_contiguous:
        param.data = np.ascontiguousarray(param.data)
    flat = param.data.reshape(-1)
    if coords is None:
        coords = np.arange(flat.size)
    out = np.zeros(len(coords))
    with no_grad():
        for j, i in enumerate(coords):
            orig = flat[i]
            flat[i] = orig + epsilon
            up = loss_fn().item()
            flat[i] = orig - epsilon
            down = loss_fn().item()
            flat[i] = orig
            out[j] = (up - down) / (2.0 * epsilon)
    return out


def check_gradients(
    builder: GraphBuilder,
    epsilon: float = 1e-5,
    tolerance: float = 1e-4,
    seed: int = 0,
    max_coords: int | None = None,
) -> GradCheckReport:
    """Compare analytic and central-difference gradients for every parameter.

    `builder(rng)` returns the parameters (requires-grad leaves, by name) and
    a zero-argument function that rebuilds the loss graph from them. With
    `max_coords`, only that many randomly chosen entries per parameter are
    differenced.
    """
    rng = np.random.default_rng(seed)
    params, loss_fn = builder(rng)
    for p in params.values():
        p.grad = None
    grads = backward(loss_fn(), leaves=params.values())
    report = GradCheckReport(tolerance=tolerance)
    for name, p in params.items():
        analytic = grads[p.node_id].data.reshape(-1)
        coords = None
        if max_coords is not None and p.size > max_coords:
            coords = np.sort(rng.choice(p.size, size=max_coords, replace=False))
        numeric = numerical_gradient(loss_fn, p, epsilon, coords)
        picked = analytic if coords is None else analytic[coords]
        report.errors[name] = relative_error(picked, numeric, np.abs(analytic).max(initial=0.0))
    return report
