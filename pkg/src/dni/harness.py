"""Experiment driver: alpha sweeps, the unseen-noise-level study and the
filter-correlation study.

Study stages are cached as checkpoints in the work directory, keyed by a
fingerprint of everything that determines them, so an interrupted study
resumes where it stopped and a changed config retrains only what changed.
"""

from __future__ import annotations

import concurrent.futures
import dataclasses
import hashlib
import json
import logging
import math
import os
import time
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from . import analysis
from . import checkpoint as ckpt
from .checkpoint import ParamSet
from .imaging import PEAK, NoiseModel, add_noise, load_image, load_manifest, psnr, read_manifest, save_image
from .interpolator import interp2, pixel_interp
from .netgraph import ArchSpec, build_arch, predict, spec_of
from .trainer import TrainConfig, finetune, train

log = logging.getLogger(__name__)


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage


def thread_count() -> int:
    n = int(os.environ.get("DNI_THREADS", "0") or 0)
    return n if n > 0 else (os.cpu_count() or 1)


# -- evaluation ----------------------------------------------------------------

def noisy_copies(clean: Sequence[np.ndarray], sigma: float, seed: int) -> list[np.ndarray]:
    """Image i gets the noise field of seed ``seed + i``."""
    return [add_noise(c, NoiseModel(sigma, seed + i)) for i, c in enumerate(clean)]


def denoise_images(model: ParamSet, noisy: Sequence[np.ndarray], spec: ArchSpec | None = None) -> list[np.ndarray]:
    """Eval-mode forward on 0..255 images; outputs clamped to [0, 255]."""
    spec = spec or spec_of(model)
    out: list[np.ndarray | None] = [None] * len(noisy)
    groups: dict[tuple[int, ...], list[int]] = {}
    for i, img in enumerate(noisy):
        groups.setdefault(tuple(img.shape), []).append(i)
    for idx in groups.values():
        x = (np.concatenate([noisy[i] for i in idx]) / PEAK).astype(np.float32)
        y = np.clip(predict(spec, model, x) * PEAK, 0.0, PEAK).astype(np.float32)
        for k, i in enumerate(idx):
            out[i] = y[k:k + 1]
    return out  # type: ignore[return-value]


def mean_psnr(clean: Sequence[np.ndarray], outputs: Sequence[np.ndarray]) -> float:
    return float(np.mean([psnr(c, o) for c, o in zip(clean, outputs)]))


def _as_images(test) -> list[np.ndarray]:
    if isinstance(test, (str, os.PathLike)):
        return load_manifest(test)
    return list(test)


def _pick_best(row: Sequence[tuple[float, float]]) -> tuple[float, float]:
    # ascending grid, >= so ties go to the larger alpha
    best = row[0]
    for alpha, value in row:
        if value >= best[1]:
            best = (alpha, value)
    return best


@dataclasses.dataclass
class SweepResult:
    alpha_grid: list[float]
    per_level: dict[float, list[tuple[float, float]]] = dataclasses.field(default_factory=dict)
    best: dict[float, tuple[float, float]] = dataclasses.field(default_factory=dict)
    pixel: dict[float, list[tuple[float, float]]] = dataclasses.field(default_factory=dict)
    noisy_psnr: dict[float, float] = dataclasses.field(default_factory=dict)

    def merge(self, other: "SweepResult") -> None:
        if other.alpha_grid != self.alpha_grid:
            raise ValueError("cannot merge sweeps over different grids")
        for field in ("per_level", "best", "pixel", "noisy_psnr"):
            getattr(self, field).update(getattr(other, field))

    def best_pixel(self, sigma: float) -> tuple[float, float]:
        return _pick_best(self.pixel[sigma])

    def to_dict(self) -> dict[str, Any]:
        key = lambda s: f"{s:g}"
        return {
            "alpha_grid": self.alpha_grid,
            "per_level": {key(s): [list(r) for r in rows] for s, rows in self.per_level.items()},
            "best": {key(s): list(b) for s, b in self.best.items()},
            "pixel": {key(s): [list(r) for r in rows] for s, rows in self.pixel.items()},
            "noisy_psnr": {key(s): v for s, v in self.noisy_psnr.items()},
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "SweepResult":
        rows = lambda m: {float(s): [tuple(r) for r in v] for s, v in m.items()}
        return cls(
            alpha_grid=list(d["alpha_grid"]),
            per_level=rows(d["per_level"]),
            best={float(s): tuple(v) for s, v in d["best"].items()},
            pixel=rows(d.get("pixel", {})),
            noisy_psnr={float(s): v for s, v in d.get("noisy_psnr", {}).items()},
        )


def sweep(a: ParamSet, b: ParamSet, grid_step: float, test, sigma: float, *, seed: int = 1000,
          with_pixel: bool = True, created: str | None = None) -> SweepResult:
    """Evaluate interp2(a, b, alpha) on every grid alpha at noise level ``sigma``.

    ``test`` is a manifest path or a list of clean images. Each test image is
    corrupted with a fixed seed, so every alpha sees the same noisy inputs.
    """
    grid = analysis.alpha_grid(grid_step)
    clean = _as_images(test)
    noisy = noisy_copies(clean, sigma, seed)
    spec = spec_of(a)
    stamp = created or a.meta.get("created_iso8601")

    def evaluate(alpha: float) -> float:
        model = interp2(a, b, alpha, created=stamp, warn=False)
        return mean_psnr(clean, denoise_images(model, noisy, spec))

    with concurrent.futures.ThreadPoolExecutor(max_workers=thread_count()) as pool:
        scores = list(pool.map(evaluate, grid))
    row = list(zip(grid, scores))
    result = SweepResult(alpha_grid=grid)
    result.per_level[sigma] = row
    result.best[sigma] = _pick_best(row)
    result.noisy_psnr[sigma] = mean_psnr(clean, [np.clip(n, 0.0, PEAK) for n in noisy])
    if with_pixel:
        out_a = denoise_images(a, noisy, spec)
        out_b = denoise_images(b, noisy, spec)
        result.pixel[sigma] = [
            (alpha, mean_psnr(clean, [pixel_interp([oa, ob], [alpha, 1.0 - alpha]) for oa, ob in zip(out_a, out_b)]))
            for alpha in grid
        ]
    return result


def sweep_levels(a: ParamSet, b: ParamSet, grid_step: float, test, sigmas: Sequence[float], *,
                 seed: int = 1000, with_pixel: bool = True) -> SweepResult:
    clean = _as_images(test)
    total = None
    for s in sigmas:
        r = sweep(a, b, grid_step, clean, float(s), seed=seed, with_pixel=with_pixel)
        if total is None:
            total = r
        else:
            total.merge(r)
    return total


# -- single-image denoising -------------------------------------------------------

def denoise(model: ParamSet, in_path, out_path, ref_path=None, mask_path=None,
            model_b: ParamSet | None = None) -> float | None:
    """Denoise one image file; with ``mask_path`` and ``model_b`` the two model
    outputs are blended per pixel (mask 1 selects ``model``)."""
    from .interpolator import spatial_blend

    noisy = load_image(in_path)
    out = denoise_images(model, [noisy])[0]
    if mask_path is not None:
        if model_b is None:
            raise ValueError("a mask needs a second model")
        mask = load_image(mask_path)[0, 0] / PEAK
        out = spatial_blend(out, denoise_images(model_b, [noisy])[0], mask)
    save_image(out, out_path)
    if ref_path is None:
        return None
    return psnr(load_image(ref_path), load_image(out_path))


# -- studies -----------------------------------------------------------------------

@dataclasses.dataclass
class StudyConfig:
    train_manifest: str
    test_manifest: str
    work_dir: str
    arch: str = "dncnn7"
    width: int = 32
    levels: list[float] = dataclasses.field(default_factory=lambda: [20, 30, 40, 50, 60])
    endpoints: tuple[float, float] = (20, 60)
    train: dict[str, Any] = dataclasses.field(default_factory=dict)
    finetune_iterations: int | None = None
    seeds: dict[str, int] = dataclasses.field(default_factory=dict)
    upper_bound_levels: list[float] = dataclasses.field(default_factory=lambda: [40])
    grid_step: float = 0.1
    corr_grid_step: float = 0.05
    test_seed: int = 1000
    created: str = "2000-01-01T00:00:00Z"

    DEFAULT_SEEDS = {"base": 1, "finetune": 2, "baseline": 3, "upper": 4, "control": 5}

    def __post_init__(self):
        self.levels = [float(s) for s in self.levels]
        self.endpoints = tuple(float(s) for s in self.endpoints)
        self.upper_bound_levels = [float(s) for s in self.upper_bound_levels]
        self.seeds = {**self.DEFAULT_SEEDS, **self.seeds}
        lo, hi = self.endpoints
        if lo not in self.levels or hi not in self.levels:
            raise ValueError("endpoint levels must be among the study levels")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "StudyConfig":
        path = Path(path)
        d = json.loads(path.read_text())
        for key in ("train_manifest", "test_manifest", "work_dir"):
            if key in d and not Path(d[key]).is_absolute():
                d[key] = str((path.parent / d[key]).resolve())
        return cls(**d)

    def spec(self) -> ArchSpec:
        return build_arch(self.arch, self.width)

    def train_config(self, sigma, seed_key: str, finetune_stage: bool = False) -> TrainConfig:
        d = dict(self.train)
        if finetune_stage and self.finetune_iterations is not None:
            d["iterations"] = self.finetune_iterations
        d["noise_sigma"] = sigma
        d["seed"] = self.seeds[seed_key]
        return TrainConfig.from_dict(d)


def analysis_layers(spec: ArchSpec) -> dict[str, str]:
    """Front and back conv layers, scaled from the 5th and 12th of a 17-layer net."""
    convs = spec.conv_names()
    depth = len(convs)
    front = min(max(2, round(5 * depth / 17)), depth - 1)
    back = min(max(front, round(12 * depth / 17)), depth - 1)
    return {"front": convs[front - 1], "back": convs[back - 1]}


def _file_digest(paths: Sequence[Path]) -> str:
    h = hashlib.sha256()
    for p in paths:
        h.update(Path(p).name.encode())
        h.update(Path(p).read_bytes())
    return h.hexdigest()


class _Zoo:
    """Stage checkpoints in ``work_dir``, rebuilt only when their fingerprint changes."""

    def __init__(self, cfg: StudyConfig):
        self.cfg = cfg
        self.dir = Path(cfg.work_dir)
        (self.dir / "logs").mkdir(parents=True, exist_ok=True)
        self.spec = cfg.spec()
        self._data = None
        self.data_digest = _file_digest(read_manifest(cfg.train_manifest))
        self.timings: dict[str, float] = {}

    @property
    def data(self) -> list[np.ndarray]:
        if self._data is None:
            self._data = load_manifest(self.cfg.train_manifest)
        return self._data

    def stage(self, name: str, inputs: dict[str, Any], build: Callable[[Path], ParamSet]) -> ParamSet:
        fp = hashlib.sha256(
            json.dumps({"arch": self.spec.to_dict(), "data": self.data_digest, **inputs}, sort_keys=True).encode()
        ).hexdigest()
        path = self.dir / f"{name}.ck"
        if path.exists():
            try:
                cached = ckpt.load(path)
                if cached.meta.get("stage_fingerprint") == fp:
                    log.info("stage %s: reusing %s", name, path)
                    return cached
            except ckpt.CheckpointError:
                log.warning("stage %s: unreadable checkpoint, rebuilding", name)
        log.info("stage %s: building", name)
        t0 = time.perf_counter()
        try:
            model = build(self.dir / "logs" / f"{name}.log")
        except Exception as exc:
            raise StageError(name, exc) from exc
        self.timings[name] = time.perf_counter() - t0
        model.meta["stage"] = name
        model.meta["stage_fingerprint"] = fp
        ckpt.save(model, path)
        return model

    def _fresh_log(self, path: Path) -> Path:
        path.unlink(missing_ok=True)
        return path

    def scratch(self, name: str, sigma, seed_key: str) -> ParamSet:
        cfg = self.cfg.train_config(sigma, seed_key)
        return self.stage(name, {"kind": "train", "train": cfg.to_dict()},
                          lambda lp: train(self.spec, cfg, self.data, created=self.cfg.created,
                                           log_path=self._fresh_log(lp)))

    def base(self) -> ParamSet:
        return self.scratch(f"n{self.cfg.endpoints[0]:g}", self.cfg.endpoints[0], "base")

    def tuned(self, sigma: float) -> ParamSet:
        if sigma == self.cfg.endpoints[0]:
            return self.base()
        parent = self.base()
        cfg = self.cfg.train_config(sigma, "finetune", finetune_stage=True)
        inputs = {"kind": "finetune", "parent": ckpt.checksum(parent), "train": cfg.to_dict()}
        return self.stage(f"ft{sigma:g}", inputs,
                          lambda lp: finetune(parent, cfg, self.data, spec=self.spec, created=self.cfg.created,
                                              log_path=self._fresh_log(lp)))

    def baseline(self) -> ParamSet:
        return self.scratch("baseline", tuple(self.cfg.endpoints), "baseline")

    def upper(self, sigma: float) -> ParamSet:
        return self.scratch(f"upper{sigma:g}", sigma, "upper")

    def control(self) -> ParamSet:
        return self.scratch(f"n{self.cfg.endpoints[0]:g}-control", self.cfg.endpoints[0], "control")

    def write_timings(self, name: str) -> None:
        # wall-clock data lives apart from the reports so reports stay reproducible
        path = self.dir / f"{name}_timings.json"
        path.write_text(json.dumps(self.timings, indent=2, sort_keys=True))


@dataclasses.dataclass
class StudyReport:
    rows: list[dict[str, Any]]
    with_bn: bool
    arch_id: str
    sweep: SweepResult

    def row(self, sigma: float) -> dict[str, Any]:
        for r in self.rows:
            if r["sigma"] == sigma:
                return r
        raise KeyError(sigma)

    def to_dict(self) -> dict[str, Any]:
        return {"arch_id": self.arch_id, "with_bn": self.with_bn, "rows": self.rows, "sweep": self.sweep.to_dict()}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "StudyReport":
        return cls(d["rows"], d["with_bn"], d["arch_id"], SweepResult.from_dict(d["sweep"]))

    def table(self) -> str:
        def fmt(v, spec="{:.2f}"):
            return "-" if v is None else spec.format(v)

        heads = [f"N{r['sigma']:g}" + ("*" if r["unseen"] else "") for r in self.rows]
        lines = [
            f"PSNR (dB), {self.arch_id} {'w/ BN' if self.with_bn else 'w/o BN'}; * = unseen level",
            ["Noise level"] + heads,
            ["Noisy input"] + [fmt(r["noisy_psnr"]) for r in self.rows],
            ["Upper bound"] + [fmt(r["upper_bound_psnr"]) for r in self.rows],
            ["Baseline"] + [fmt(r["baseline_psnr"]) for r in self.rows],
            ["DNI"] + [fmt(r["dni_psnr"]) for r in self.rows],
            ["alpha"] + [fmt(r["dni_alpha"], "{:g}") for r in self.rows],
            ["Pixel interp"] + [fmt(r["pixel_interp_psnr"]) for r in self.rows],
            ["pixel alpha"] + [fmt(r["pixel_alpha"], "{:g}") for r in self.rows],
        ]
        out = [lines[0]]
        for cells in lines[1:]:
            out.append(f"{cells[0]:<14}" + "".join(f"{c:>9}" for c in cells[1:]))
        return "\n".join(out) + "\n"


def _dump(obj: Any, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def run_unseen_noise_study(config: StudyConfig | str | os.PathLike) -> StudyReport:
    """Train base (low endpoint), fine-tune to the high endpoint, train the
    mixed baseline and requested upper bounds, then sweep DNI at every level."""
    cfg = config if isinstance(config, StudyConfig) else StudyConfig.load(config)
    zoo = _Zoo(cfg)
    lo, hi = cfg.endpoints
    model_a = zoo.base()
    model_b = zoo.tuned(hi)
    baseline = zoo.baseline()
    uppers = {s: zoo.upper(s) for s in cfg.upper_bound_levels}
    clean = load_manifest(cfg.test_manifest)
    try:
        result = sweep_levels(model_a, model_b, cfg.grid_step, clean, cfg.levels, seed=cfg.test_seed)
    except Exception as exc:
        raise StageError("sweep", exc) from exc
    rows = []
    for s in cfg.levels:
        noisy = noisy_copies(clean, s, cfg.test_seed)
        alpha, score = result.best[s]
        p_alpha, p_score = result.best_pixel(s)
        rows.append({
            "sigma": s,
            "unseen": s not in cfg.endpoints,
            "noisy_psnr": result.noisy_psnr[s],
            "upper_bound_psnr": mean_psnr(clean, denoise_images(uppers[s], noisy)) if s in uppers else None,
            "baseline_psnr": mean_psnr(clean, denoise_images(baseline, noisy)),
            "dni_psnr": score,
            "dni_alpha": alpha,
            "pixel_interp_psnr": p_score,
            "pixel_alpha": p_alpha,
        })
    report = StudyReport(rows=rows, with_bn=zoo.spec.has_bn, arch_id=zoo.spec.arch_id, sweep=result)
    _dump(report.to_dict(), zoo.dir / "unseen_noise_report.json")
    (zoo.dir / "unseen_noise_report.txt").write_text(report.table())
    zoo.write_timings("unseen_noise")
    return report


def run_correlation_study(config: StudyConfig | str | os.PathLike) -> dict[str, Any]:
    """Filter correlations of the fine-tuned level chain against the base model,
    the scratch-pair control, the interpolated-filter curve and the
    correlation-fitted alpha per intermediate level."""
    cfg = config if isinstance(config, StudyConfig) else StudyConfig.load(config)
    zoo = _Zoo(cfg)
    lo, hi = cfg.endpoints
    ref = zoo.base()
    chain = {s: zoo.tuned(s) for s in cfg.levels}
    control = zoo.control()
    layers = analysis_layers(zoo.spec)
    out: dict[str, Any] = {"layers": layers, "levels": cfg.levels, "reference": ckpt.checksum(ref)}
    curves, first, ctrl, parent, interp_curves, fits, endpoint_fits = {}, {}, {}, {}, {}, {}, {}
    all_reports = []
    for role, layer in layers.items():
        rows = []
        for s in cfg.levels:
            rep = analysis.model_corr(chain[s], ref, layer, label=f"N{s:g}")
            all_reports.append(rep)
            rows.append({"level": s, "median": rep.median, **rep.quantiles, "skipped": rep.skipped})
        curves[layer] = rows
        analysis.write_curve_csv(
            [(r["level"], rep) for r, rep in zip(rows, all_reports[-len(rows):])],
            zoo.dir / f"correlation_{layer}.csv",
        )
        w_ref = analysis.layer_filters(ref, layer)[0, 0]
        first[layer] = [
            {"level": s, "rho": analysis.corr_index(analysis.layer_filters(chain[s], layer)[0, 0], w_ref)}
            for s in cfg.levels
        ]
        ctrl_rep = analysis.model_corr(control, ref, layer, label="scratch-control")
        all_reports.append(ctrl_rep)
        ctrl[layer] = ctrl_rep.median
        parent[layer] = analysis.model_corr(chain[hi], ref, layer).median
        interp_curves[layer] = [list(r) for r in analysis.corr_curve(ref, chain[hi], ref, layer, cfg.corr_grid_step)]
        fits[layer] = {
            f"{s:g}": analysis.fit_alpha_by_corr(ref, chain[hi], chain[s], layer, cfg.corr_grid_step)
            for s in cfg.levels if s not in cfg.endpoints
        }
        endpoint_fits[layer] = {
            f"{lo:g}": analysis.fit_alpha_by_corr(ref, chain[hi], ref, layer, cfg.corr_grid_step),
            f"{hi:g}": analysis.fit_alpha_by_corr(ref, chain[hi], chain[hi], layer, cfg.corr_grid_step),
        }
    out.update({
        "curves": curves,
        "first_filter": first,
        "scratch_control_median": ctrl,
        "finetune_vs_parent_median": parent,
        "interp_curve_vs_reference": interp_curves,
        "fit_alpha": fits,
        "fit_alpha_endpoints": endpoint_fits,
    })
    _dump(out, zoo.dir / "correlation_study.json")
    analysis.reports_to_json(all_reports, zoo.dir / "correlation_reports.json")
    zoo.write_timings("correlation")
    return out
