"""Parameter-space interpolation of correlated networks.

Every entry of the ParamSets is combined, learned and statistic alike:
conv weights and biases, BN gamma/beta and BN running mean/variance.
Variances are interpolated in variance space.

Sums run in float64 in recipe order and are rounded to float32 once.
Terms with a zero coefficient are skipped, which keeps the endpoints
bit-exact (signed zeros included).
"""

from __future__ import annotations

import dataclasses
import warnings
from typing import Sequence

import numpy as np

from .checkpoint import ParamSet, checksum, lineage_check, now_iso8601
from .tensor import DTYPE, ShapeError

ALPHA_SUM_TOL = 1e-6


class RecipeError(ValueError):
    pass


class UnrelatedModelsWarning(UserWarning):
    """Interpolating models with no fine-tune lineage between them."""


@dataclasses.dataclass
class InterpolationRecipe:
    terms: list[tuple[ParamSet, float]]

    def __post_init__(self):
        if not self.terms:
            raise RecipeError("empty recipe")
        alphas = [float(a) for _, a in self.terms]
        if any(not np.isfinite(a) or a < 0 for a in alphas):
            raise RecipeError(f"coefficients must be finite and >= 0, got {alphas}")
        if abs(sum(alphas) - 1.0) > ALPHA_SUM_TOL:
            raise RecipeError(f"coefficients sum to {sum(alphas)!r}, expected 1")
        first = self.terms[0][0]
        for p, _ in self.terms[1:]:
            if p.arch_id != first.arch_id:
                raise RecipeError(f"arch mismatch: {first.arch_id!r} vs {p.arch_id!r}")
            if p.signature() != first.signature():
                raise ShapeError("parameter names or shapes differ between models")

    @property
    def alphas(self) -> list[float]:
        return [float(a) for _, a in self.terms]


def convex_sum(arrays: Sequence[np.ndarray], alphas: Sequence[float]) -> np.ndarray:
    acc = None
    for arr, a in zip(arrays, alphas):
        if a == 0.0:
            continue
        term = float(a) * arr.astype(np.float64)
        acc = term if acc is None else acc + term
    if acc is None:
        raise RecipeError("all coefficients are zero")
    return acc.astype(DTYPE)


def _warn_unrelated(models: Sequence[ParamSet]) -> None:
    for i in range(len(models)):
        for j in range(i + 1, len(models)):
            if not lineage_check(models[i], models[j]).fine_tune_related:
                warnings.warn(
                    f"models {models[i].meta.get('task_tag')!r} and {models[j].meta.get('task_tag')!r} "
                    "are not fine-tune related; interpolation may be meaningless",
                    UnrelatedModelsWarning,
                    stacklevel=3,
                )
                return


def interpN(recipe: InterpolationRecipe, created: str | None = None, warn: bool = True) -> ParamSet:
    """Convex combination sum_i alpha_i * theta_i over every entry."""
    models = [p for p, _ in recipe.terms]
    alphas = recipe.alphas
    if warn and len(models) > 1:
        _warn_unrelated(models)
    base = models[0]
    entries = {name: convex_sum([m.entries[name] for m in models], alphas) for name in base.entries}
    tags = ",".join(str(m.meta.get("task_tag", "?")) for m in models)
    meta = {
        "task_tag": f"interp({tags},{','.join(f'{a:g}' for a in alphas)})",
        "parent_checksum": None,
        "seed": base.meta.get("seed", 0),
        "created_iso8601": created or now_iso8601(),
        "recipe": [
            {"checksum": checksum(m), "task_tag": m.meta.get("task_tag"), "alpha": a}
            for m, a in zip(models, alphas)
        ],
    }
    return ParamSet(base.arch_id, entries, meta, base.arch)


def interp2(a: ParamSet, b: ParamSet, alpha: float, created: str | None = None, warn: bool = True) -> ParamSet:
    """alpha * theta_a + (1 - alpha) * theta_b."""
    alpha = float(alpha)
    if not 0.0 <= alpha <= 1.0:
        raise RecipeError(f"alpha must lie in [0, 1], got {alpha}")
    report = lineage_check(a, b)
    if not report.same_names_shapes:
        raise ShapeError("parameter names or shapes differ between models")
    if warn and not report.fine_tune_related:
        warnings.warn(
            f"models {a.meta.get('task_tag')!r} and {b.meta.get('task_tag')!r} are not fine-tune related; "
            "interpolation may be meaningless",
            UnrelatedModelsWarning,
            stacklevel=2,
        )
    out = interpN(InterpolationRecipe([(a, alpha), (b, 1.0 - alpha)]), created=created, warn=False)
    out.meta["task_tag"] = f"interp({a.meta.get('task_tag')},{b.meta.get('task_tag')},{alpha:g})"
    return out


def _check_convex(alphas: Sequence[float], n: int) -> list[float]:
    alphas = [float(a) for a in alphas]
    if len(alphas) != n:
        raise RecipeError(f"{n} inputs but {len(alphas)} coefficients")
    if any(a < 0 for a in alphas) or abs(sum(alphas) - 1.0) > ALPHA_SUM_TOL:
        raise RecipeError(f"coefficients {alphas} are not convex")
    return alphas


def pixel_interp(images: Sequence[np.ndarray], alphas: Sequence[float]) -> np.ndarray:
    """Convex combination of output images, pixel by pixel."""
    alphas = _check_convex(alphas, len(images))
    shape = np.shape(images[0])
    for im in images[1:]:
        if np.shape(im) != shape:
            raise ShapeError(f"shape mismatch: {shape} vs {np.shape(im)}")
    return convex_sum([np.asarray(im) for im in images], alphas)


def spatial_blend(out_a: np.ndarray, out_b: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """mask * out_a + (1 - mask) * out_b; ``mask`` may be (h, w) or full shape."""
    if np.shape(out_a) != np.shape(out_b):
        raise ShapeError(f"shape mismatch: {np.shape(out_a)} vs {np.shape(out_b)}")
    m = np.asarray(mask, dtype=np.float64)
    if m.shape != np.shape(out_a):
        if m.shape != np.shape(out_a)[-2:]:
            raise ShapeError(f"mask shape {m.shape} does not match image {np.shape(out_a)}")
        m = np.broadcast_to(m, np.shape(out_a))
    if np.any(~np.isfinite(m)) or m.min() < 0.0 or m.max() > 1.0:
        raise ValueError("mask values must lie in [0, 1]")
    a = np.asarray(out_a, dtype=np.float64)
    b = np.asarray(out_b, dtype=np.float64)
    return (m * a + (1.0 - m) * b).astype(DTYPE)
