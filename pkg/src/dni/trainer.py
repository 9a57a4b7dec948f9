"""Deterministic training and fine-tuning of residual denoisers.

Networks see images scaled to [0, 1] (pixel / 255); noise sigma stays in
8-bit units in configs and metadata.

Per iteration the PRNG stream is consumed in a fixed order: the batch
sigma index (mixed-level configs only), then for each sample the image
index, crop row, crop column (and augmentation code when enabled), then
the batch's Gaussian noise field.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import checkpoint as ckpt
from .checkpoint import ParamSet, ancestry
from .imaging import PEAK
from .netgraph import ArchSpec, backward, forward, init_params, spec_of
from .prng import Rng
from .tensor import DTYPE

log = logging.getLogger(__name__)

FINETUNE_LR_FACTOR = 0.1


class TrainingDiverged(RuntimeError):
    def __init__(self, iteration: int, loss: float):
        super().__init__(f"loss became {loss} at iteration {iteration}")
        self.iteration = iteration


@dataclasses.dataclass
class TrainConfig:
    iterations: int
    batch_size: int = 16
    patch_size: int = 40
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    loss: str = "mse"
    seed: int = 0
    noise_sigma: float | tuple[float, ...] = 20.0
    augment: bool = False
    lr_step: int = 0
    lr_gamma: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    log_every: int = 50
    checkpoint_every: int = 0

    def __post_init__(self):
        if isinstance(self.noise_sigma, (list, tuple)):
            self.noise_sigma = tuple(float(s) for s in self.noise_sigma)
            if len(self.noise_sigma) == 1:
                self.noise_sigma = self.noise_sigma[0]
        else:
            self.noise_sigma = float(self.noise_sigma)
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.batch_size <= 0 or self.patch_size <= 0:
            raise ValueError("batch_size and patch_size must be positive")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.loss != "mse":
            raise ValueError("only the mse loss is supported")
        if any(s < 0 for s in self.sigmas):
            raise ValueError("noise sigma must be >= 0")

    @property
    def sigmas(self) -> tuple[float, ...]:
        s = self.noise_sigma
        return s if isinstance(s, tuple) else (s,)

    def task_tag(self) -> str:
        return "denoise-n" + "+".join(f"{s:g}" for s in self.sigmas)

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["noise_sigma"] = list(self.sigmas) if len(self.sigmas) > 1 else self.sigmas[0]
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


def _augment(patch: np.ndarray, code: int) -> np.ndarray:
    if code >= 4:
        patch = patch[:, ::-1]
    return np.rot90(patch, code % 4)


def sample_batch(rng: Rng, images: Sequence[np.ndarray], cfg: TrainConfig) -> tuple[np.ndarray, np.ndarray, float]:
    """Draw (noisy, clean, sigma); both arrays are [batch, 1, p, p] in [0, 1] units."""
    sigmas = cfg.sigmas
    sigma = sigmas[rng.randint(len(sigmas))] if len(sigmas) > 1 else sigmas[0]
    p = cfg.patch_size
    clean = np.empty((cfg.batch_size, 1, p, p), dtype=np.float64)
    for b in range(cfg.batch_size):
        img = images[rng.randint(len(images))]
        h, w = img.shape[-2:]
        y0 = rng.randint(h - p + 1)
        x0 = rng.randint(w - p + 1)
        patch = img[0, 0, y0:y0 + p, x0:x0 + p]
        if cfg.augment:
            patch = _augment(patch, rng.randint(8))
        clean[b, 0] = patch
    noise = rng.normal(clean.size).reshape(clean.shape)
    noisy = clean + sigma * noise
    return (noisy / PEAK).astype(DTYPE), (clean / PEAK).astype(DTYPE), sigma


class _Adam:
    def __init__(self, params: dict[str, np.ndarray], cfg: TrainConfig):
        self.b1, self.b2, self.eps = cfg.beta1, cfg.beta2, cfg.adam_eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k in self.m:
            g = grads[k]
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            step = (lr / c1) * self.m[k] / (np.sqrt(self.v[k] / c2) + self.eps)
            params[k] = (params[k] - step).astype(DTYPE)


class _SGD:
    def __init__(self, params, cfg):
        pass

    def step(self, params, grads, lr: float) -> None:
        for k in grads:
            params[k] = (params[k] - lr * grads[k]).astype(DTYPE)


def _check_dataset(images: Sequence[np.ndarray], patch: int) -> None:
    if not images:
        raise ValueError("dataset is empty")
    for i, img in enumerate(images):
        if img.ndim != 4 or img.shape[:2] != (1, 1):
            raise ValueError(f"image {i}: expected [1, 1, h, w], got {img.shape}")
        if min(img.shape[-2:]) < patch:
            raise ValueError(f"image {i} is smaller than the {patch}px patch size")


def _run(spec: ArchSpec, params: ParamSet, cfg: TrainConfig, images: Sequence[np.ndarray], lr: float,
         log_path: str | os.PathLike | None, checkpoint_dir: str | os.PathLike | None) -> list[tuple[int, float, float]]:
    _check_dataset(images, cfg.patch_size)
    rng = Rng(cfg.seed)
    P = params.entries
    trainable = [k for k in P if spec.trainable(k)]
    opt = (_Adam if cfg.optimizer == "adam" else _SGD)({k: P[k] for k in trainable}, cfg)
    history: list[tuple[int, float, float]] = []
    fh = open(log_path, "a") if log_path else None
    try:
        for it in range(1, cfg.iterations + 1):
            cur_lr = lr * (cfg.lr_gamma ** ((it - 1) // cfg.lr_step) if cfg.lr_step else 1.0)
            noisy, clean, _ = sample_batch(rng, images, cfg)
            y, cache = forward(spec, P, noisy, "train")
            diff = y - clean
            loss = float(np.mean(diff.astype(np.float64) ** 2))
            if not math.isfinite(loss):
                raise TrainingDiverged(it, loss)
            grads = backward(spec, P, cache, (2.0 / diff.size) * diff)
            opt.step(P, {k: grads[k] for k in trainable}, cur_lr)
            if it % cfg.log_every == 0 or it == cfg.iterations:
                history.append((it, loss, cur_lr))
                if fh:
                    fh.write(f"{it},{loss:.8g},{cur_lr:.8g}\n")
                log.debug("iter %d loss %.6g", it, loss)
            if checkpoint_dir and cfg.checkpoint_every and it % cfg.checkpoint_every == 0:
                ckpt.save(params, Path(checkpoint_dir) / f"{params.meta['task_tag']}-iter{it}.ck")
    finally:
        if fh:
            fh.close()
    if log_path:
        summary = {
            "task_tag": params.meta["task_tag"],
            "iterations": cfg.iterations,
            "final_loss": history[-1][1] if history else None,
            "config": cfg.to_dict(),
        }
        Path(log_path).with_suffix(".json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return history


def train(spec: ArchSpec, config: TrainConfig, dataset: Sequence[np.ndarray], *, created: str | None = None,
          log_path: str | os.PathLike | None = None, checkpoint_dir: str | os.PathLike | None = None) -> ParamSet:
    """Train from a fresh ``init_params(spec, config.seed)``."""
    params = init_params(spec, config.seed, created=created)
    params.meta.update({"task_tag": config.task_tag(), "parent_checksum": None, "train": config.to_dict()})
    _run(spec, params, config, dataset, config.learning_rate, log_path, checkpoint_dir)
    return params


def finetune(base: ParamSet, config: TrainConfig, dataset: Sequence[np.ndarray], *, spec: ArchSpec | None = None,
             lr_factor: float = FINETUNE_LR_FACTOR, created: str | None = None,
             log_path: str | os.PathLike | None = None,
             checkpoint_dir: str | os.PathLike | None = None) -> ParamSet:
    """Continue training ``base`` on ``config``'s noise level at
    ``config.learning_rate * lr_factor`` with a fresh optimizer state."""
    spec = spec or spec_of(base)
    if base.arch_id != spec.arch_id or base.signature() != list(spec.param_shapes().items()):
        raise ValueError(f"base model {base.arch_id!r} does not match architecture {spec.arch_id!r}")
    parent = ckpt.checksum(base)
    params = base.copy()
    params.meta = {
        "task_tag": config.task_tag(),
        "parent_checksum": parent,
        "lineage": [parent] + ancestry(base),
        "seed": config.seed,
        "created_iso8601": created or ckpt.now_iso8601(),
        "train": config.to_dict(),
        "finetune_lr_factor": lr_factor,
    }
    _run(spec, params, config, dataset, config.learning_rate * lr_factor, log_path, checkpoint_dir)
    return params
