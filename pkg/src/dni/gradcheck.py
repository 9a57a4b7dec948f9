"""Central finite-difference check of ``netgraph.backward``.

ReLU makes the loss piecewise smooth. A central difference whose two
probes land on different sides of a kink measures neither one-sided
derivative, so such coordinates are detected (the ReLU masks at +h and
-h differ) and reported separately instead of being compared.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from .netgraph import RELU, ArchSpec, backward, forward


@dataclasses.dataclass
class GradCheckReport:
    max_rel_error: float
    checked: int
    kinks: int
    worst: tuple[str, tuple[int, ...]] | None

    @property
    def kink_fraction(self) -> float:
        total = self.checked + self.kinks
        return self.kinks / total if total else 0.0


def _loss(spec, params, x, target, mode):
    p = {k: v.copy() for k, v in params.items()}
    y, cache = forward(spec, p, x, mode)
    masks = [s[0] for s, layer in zip(cache["steps"], spec.layers) if layer.kind == RELU]
    return float(np.sum((y - target) ** 2)), masks


def check_gradients(spec: ArchSpec, params: dict[str, np.ndarray], x: np.ndarray, target: np.ndarray,
                    h: float = 1e-3, mode: str = "train", floor: float = 1e-6) -> GradCheckReport:
    """Compare analytic and central-difference gradients of sum((y - target)^2).

    Everything runs in float64. Relative error is |fd - an| / max(|fd|, |an|, floor).
    """
    P = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    x = np.asarray(x, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    work = {k: v.copy() for k, v in P.items()}
    y, cache = forward(spec, work, x, mode)
    grads = backward(spec, P, cache, 2.0 * (y - target))
    worst_err, worst, checked, kinks = 0.0, None, 0, 0
    for name, value in P.items():
        if not spec.trainable(name):
            continue
        for idx in np.ndindex(value.shape):
            plus = {k: v.copy() for k, v in P.items()}
            minus = {k: v.copy() for k, v in P.items()}
            plus[name][idx] += h
            minus[name][idx] -= h
            f_plus, m_plus = _loss(spec, plus, x, target, mode)
            f_minus, m_minus = _loss(spec, minus, x, target, mode)
            if any(np.any(a != b) for a, b in zip(m_plus, m_minus)):
                kinks += 1
                continue
            fd = (f_plus - f_minus) / (2.0 * h)
            an = float(grads[name][idx])
            err = abs(fd - an) / max(abs(fd), abs(an), floor)
            checked += 1
            if err > worst_err:
                worst_err, worst = err, (name, idx)
    return GradCheckReport(worst_err, checked, kinks, worst)
