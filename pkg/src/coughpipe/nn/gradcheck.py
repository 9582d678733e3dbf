"""Central-difference gradient check for a Network."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .network import Network


@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float]
    tolerance: float

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.worst < self.tolerance


def _loss(net: Network, batch, labels) -> float:
    probs = net.forward(batch, training=True, dropout=False)
    value = net.loss(probs, labels)
    if not np.isfinite(value):
        raise FloatingPointError("non-finite loss during gradient check")
    return value


def gradient_check(net: Network, batch, labels, epsilon: float = 1e-5, tolerance: float = 1e-4,
                   floor: float = 1e-6, max_params: int = 100_000) -> GradCheckReport:
    """Compare analytic gradients with central differences, per parameter block.

    Runs in training mode (batch statistics) with dropout disabled. The
    relative error of an entry is ``|a - n| / max(|a|, |n|, floor)``.
    BatchNorm running statistics are restored afterwards.
    """
    if net.dtype != np.float64:
        raise TypeError("gradient checks need a float64 network")
    params = net.parameters()
    if sum(p.size for p in params.values()) >= max_params:
        raise ValueError("too many parameters to enumerate")
    saved = {k: v.copy() for k, v in net.buffers().items()}
    _loss(net, batch, labels)
    analytic = {k: g.copy() for k, g in net.backward(labels).items()}
    report = {}
    for name, p in params.items():
        worst = 0.0
        flat = p.reshape(-1)
        ga = analytic[name].reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + epsilon
            up = _loss(net, batch, labels)
            flat[j] = orig - epsilon
            down = _loss(net, batch, labels)
            flat[j] = orig
            num = (up - down) / (2.0 * epsilon)
            err = abs(ga[j] - num) / max(abs(ga[j]), abs(num), floor)
            worst = max(worst, err)
        report[name] = worst
    net.set_parameters(net.parameters(), saved)
    return GradCheckReport(report, tolerance)
