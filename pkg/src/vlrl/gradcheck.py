"""Central-finite-difference verification of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    n_checked: int
    # (input index, flat coordinate) pairs where one-sided slopes disagree
    excluded: list[tuple[int, int]] = field(default_factory=list)
    worst: tuple[int, int] | None = None

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def rel_error(a: float, b: float, floor: float = 1e-6) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def grad_check(f: Callable[..., Tensor], inputs: Tensor | Sequence[Tensor],
               tolerance: float = 1e-4, eps: float = 1e-5, max_coords: int | None = None,
               rng: np.random.Generator | None = None, floor: float = 1e-6) -> GradCheckReport:
    """Compare autodiff gradients of scalar ``f(*inputs)`` with central differences.

    Relative error per coordinate is ``|a - n| / max(|a|, |n|, floor)``.
    A coordinate whose autodiff and central values disagree, and whose forward
    and backward one-sided slopes differ by at least that much, sits on a kink
    (relu at 0 and the like) and is reported in ``excluded`` instead of
    counting toward the error. ``max_coords`` samples a subset of coordinates.
    """
    xs = [inputs] if isinstance(inputs, Tensor) else list(inputs)
    for x in xs:
        x.grad = None
    out = f(*xs)
    T.backward(out)
    analytic = [np.zeros_like(x.data) if x.grad is None else x.grad.copy() for x in xs]

    coords = [(i, j) for i, x in enumerate(xs) for j in range(x.size)]
    if max_coords is not None and max_coords < len(coords):
        rng = rng or np.random.default_rng(0)
        pick = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[k] for k in sorted(pick)]

    def value() -> float:
        with T.no_grad():
            return f(*xs).item()

    f0 = value()
    worst_err, worst = 0.0, None
    excluded = []
    for i, j in coords:
        flat = xs[i].data.reshape(-1)
        orig = flat[j]
        flat[j] = orig + eps
        fp = value()
        flat[j] = orig - eps
        fm = value()
        flat[j] = orig
        num = (fp - fm) / (2 * eps)
        a = float(analytic[i].reshape(-1)[j])
        err = rel_error(a, num, floor)
        if err >= tolerance:
            one_sided_gap = abs((fp - f0) / eps - (f0 - fm) / eps)
            if one_sided_gap >= abs(a - num):
                excluded.append((i, j))
                continue
        if err > worst_err:
            worst_err, worst = err, (i, j)
    return GradCheckReport(worst_err, tolerance, len(coords) - len(excluded), excluded, worst)
