"""Central finite-difference checks of the analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .tensor import Tensor, grad, no_grad


@dataclass
class GradCheckReport:
    tolerance: float
    errors: dict = field(default_factory=dict)  # name -> max relative error
    n_probes: int = 0

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance

    def __str__(self) -> str:
        lines = [f"{'PASS' if self.passed else 'FAIL'} max_rel_err={self.max_error:.3e} tol={self.tolerance:g}"]
        lines += [f"  {k}: {v:.3e}" for k, v in self.errors.items()]
        return "\n".join(lines)


def relative_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    """|a - n| / max(|a|, |n|, floor); the floor keeps near-zero gradients from dominating."""
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def check_gradients(
    loss_fn: Callable[[], Tensor],
    params: dict,
    tolerance: float = 1e-4,
    h: float = 1e-5,
    max_probes: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare backprop against central differences for every named parameter.

    ``loss_fn`` must rebuild the graph on each call and return a scalar.
    With ``max_probes`` set, at most that many entries per tensor are probed,
    chosen by a seeded RNG; otherwise every entry is probed.
    """
    names = list(params)
    tensors = [params[n] for n in names]
    analytic = grad(loss_fn(), tensors)
    rng = np.random.default_rng(seed)
    report = GradCheckReport(tolerance)
    for name, p, g in zip(names, tensors, analytic):
        data = p.data
        idx = np.arange(data.size)
        if max_probes is not None and data.size > max_probes:
            idx = rng.choice(data.size, size=max_probes, replace=False)
        worst = 0.0
        for i in idx:
            pos = np.unravel_index(i, data.shape)
            orig = data[pos]
            with no_grad():
                data[pos] = orig + h
                up = loss_fn().item()
                data[pos] = orig - h
                down = loss_fn().item()
            data[pos] = orig
            worst = max(worst, relative_error(g[pos], (up - down) / (2 * h)))
        report.errors[name] = worst
        report.n_probes += len(idx)
    return report
