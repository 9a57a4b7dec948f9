"""Filter correlation analysis.

The correlation index between two filters is their centered cosine
similarity (Pearson form), so it ignores per-filter scale and shift.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import os
from typing import Any, Iterable, Sequence

import numpy as np

from .checkpoint import ParamSet, checksum
from .interpolator import convex_sum
from .tensor import ShapeError

DEGENERATE_NORM = 1e-12
POSITIONWISE = "positionwise"
FIRST = "first"


class DegenerateFilterError(ValueError):
    pass


@dataclasses.dataclass(frozen=True)
class FilterRef:
    layer_name: str
    out_index: int
    in_index: int


def corr_index(f1: np.ndarray, f2: np.ndarray) -> float:
    a = np.asarray(f1, dtype=np.float64).reshape(-1)
    b = np.asarray(f2, dtype=np.float64).reshape(-1)
    if np.shape(f1) != np.shape(f2):
        raise ShapeError(f"filter shapes differ: {np.shape(f1)} vs {np.shape(f2)}")
    a = a - a.mean()
    b = b - b.mean()
    aa, bb = a @ a, b @ b
    if np.sqrt(aa) <= DEGENERATE_NORM or np.sqrt(bb) <= DEGENERATE_NORM:
        raise DegenerateFilterError("correlation index undefined for a constant filter")
    # sqrt(aa * bb) rather than sqrt(aa) * sqrt(bb): exact 1 for identical filters
    return float(np.clip((a @ b) / np.sqrt(aa * bb), -1.0, 1.0))


def _rowwise_corr(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Correlation per row; returns (rho, valid) with invalid rows set to nan."""
    a = a - a.mean(axis=1, keepdims=True)
    b = b - b.mean(axis=1, keepdims=True)
    aa = np.einsum("ij,ij->i", a, a)
    bb = np.einsum("ij,ij->i", b, b)
    valid = (np.sqrt(aa) > DEGENERATE_NORM) & (np.sqrt(bb) > DEGENERATE_NORM)
    rho = np.full(a.shape[0], np.nan)
    rho[valid] = np.clip(np.einsum("ij,ij->i", a[valid], b[valid]) / np.sqrt(aa[valid] * bb[valid]), -1.0, 1.0)
    return rho, valid


def layer_filters(model: ParamSet, layer: str) -> np.ndarray:
    """The [out, in, kh, kw] weight of conv layer ``layer`` (``conv3`` or ``conv3.weight``)."""
    key = layer if layer.endswith(".weight") else f"{layer}.weight"
    if key not in model.entries:
        raise KeyError(f"layer {layer!r} not found in model {model.arch_id!r}")
    w = model.entries[key]
    if w.ndim != 4:
        raise ShapeError(f"{key} is not a convolution weight")
    return w


def _summary(rho: np.ndarray) -> tuple[float, dict[str, float]]:
    q = np.quantile(rho, [0.5, 0.10, 0.25, 0.75, 0.90])
    return float(q[0]), {"q10": float(q[1]), "q25": float(q[2]), "q75": float(q[3]), "q90": float(q[4])}


@dataclasses.dataclass
class CorrelationReport:
    reference: dict[str, Any]
    layer: str
    per_filter: list[tuple[FilterRef, float]]
    median: float
    quantiles: dict[str, float]
    skipped: int = 0
    label: str | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "reference": self.reference,
            "layer": self.layer,
            "label": self.label,
            "median": self.median,
            "quantiles": self.quantiles,
            "skipped": self.skipped,
            "per_filter": [
                {"out_index": f.out_index, "in_index": f.in_index, "rho": r} for f, r in self.per_filter
            ],
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "CorrelationReport":
        per = [(FilterRef(d["layer"], e["out_index"], e["in_index"]), e["rho"]) for e in d["per_filter"]]
        return cls(d["reference"], d["layer"], per, d["median"], d["quantiles"], d.get("skipped", 0), d.get("label"))


def model_corr(model: ParamSet, ref: ParamSet, layer: str, mode: str = POSITIONWISE,
               label: str | None = None) -> CorrelationReport:
    """Correlate every filter of ``layer`` in ``model`` against ``ref``.

    ``positionwise`` pairs filter (o, i) with the reference's filter (o, i).
    ``first`` compares every filter with the reference's filter (0, 0).
    Constant filters are skipped and counted.
    """
    if model.arch_id != ref.arch_id:
        raise ShapeError(f"arch mismatch: {model.arch_id!r} vs {ref.arch_id!r}")
    w = layer_filters(model, layer).astype(np.float64)
    wr = layer_filters(ref, layer).astype(np.float64)
    if w.shape != wr.shape:
        raise ShapeError(f"{layer}: shapes differ {w.shape} vs {wr.shape}")
    o, i = w.shape[:2]
    a = w.reshape(o * i, -1)
    if mode == POSITIONWISE:
        b = wr.reshape(o * i, -1)
    elif mode == FIRST:
        b = np.broadcast_to(wr[0, 0].reshape(1, -1), a.shape)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    rho, valid = _rowwise_corr(a, b)
    if not valid.any():
        raise DegenerateFilterError(f"{layer}: every filter is constant")
    name = layer[: -len(".weight")] if layer.endswith(".weight") else layer
    per = [(FilterRef(name, k // i, k % i), float(rho[k])) for k in range(o * i) if valid[k]]
    median, quantiles = _summary(rho[valid])
    return CorrelationReport(
        reference={"checksum": checksum(ref), "task_tag": ref.meta.get("task_tag"), "policy": mode},
        layer=name,
        per_filter=per,
        median=median,
        quantiles=quantiles,
        skipped=int((~valid).sum()),
        label=label,
    )


def alpha_grid(step: float) -> list[float]:
    n = int(round(1.0 / step))
    if n < 1 or abs(n * step - 1.0) > 1e-9:
        raise ValueError(f"grid step {step} does not divide 1")
    return [round(k / n, 12) for k in range(n + 1)]


def corr_curve(a: ParamSet, b: ParamSet, target: ParamSet, layer: str,
               step: float = 0.05) -> list[tuple[float, float]]:
    """Median positionwise correlation of the interpolated layer vs ``target``, per alpha."""
    wa = layer_filters(a, layer).astype(np.float64)
    wb = layer_filters(b, layer).astype(np.float64)
    wt = layer_filters(target, layer).astype(np.float64)
    if not (wa.shape == wb.shape == wt.shape):
        raise ShapeError(f"{layer}: shapes differ")
    rows = wt.shape[0] * wt.shape[1]
    t = wt.reshape(rows, -1)
    curve = []
    for alpha in alpha_grid(step):
        w = convex_sum([wa, wb], [alpha, 1.0 - alpha]).astype(np.float64)
        rho, valid = _rowwise_corr(w.reshape(rows, -1), t)
        if not valid.any():
            raise DegenerateFilterError(f"{layer}: every filter is constant")
        curve.append((alpha, float(np.median(rho[valid]))))
    return curve


def fit_alpha_by_corr(a: ParamSet, b: ParamSet, target: ParamSet, layer: str, step: float = 0.05) -> float:
    """Grid alpha maximizing the median filter correlation with ``target``.
    Ties go to the larger alpha."""
    best_alpha, best = 0.0, -np.inf
    for alpha, med in corr_curve(a, b, target, layer, step):
        if med >= best:
            best_alpha, best = alpha, med
    return best_alpha


def reports_to_json(reports: Iterable[CorrelationReport], path: str | os.PathLike) -> None:
    with open(path, "w") as fh:
        json.dump([r.to_dict() for r in reports], fh, indent=2)


def write_curve_csv(rows: Sequence[tuple[Any, CorrelationReport]], path: str | os.PathLike) -> None:
    """Rows of (level, median, q10, q90) for external plotting."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["level", "median", "q10", "q90"])
        for level, rep in rows:
            w.writerow([level, f"{rep.median:.6f}", f"{rep.quantiles['q10']:.6f}", f"{rep.quantiles['q90']:.6f}"])
