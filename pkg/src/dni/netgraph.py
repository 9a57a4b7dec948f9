"""Small CNN graphs: architecture description, forward, backward, BN folding.

Tensors at the API boundary are NCHW. Internally activations are kept
NHWC so that im2col gathers contiguous channel runs before the GEMM.
Conv weights are stored [out_ch, in_ch, kh, kw].

Parameter names follow stages: every Conv opens a new stage ``s``
(1-based) and the BatchNorm that follows it shares the index, giving
``conv3.weight``, ``conv3.bias``, ``bn3.gamma``, ``bn3.beta``,
``bn3.running_mean``, ``bn3.running_var``.
"""

from __future__ import annotations

import dataclasses
import math
import re
from typing import Any, Mapping

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .checkpoint import ParamSet, now_iso8601
from .prng import Rng
from .tensor import DTYPE, NonFiniteError, ShapeError

CONV = "conv"
RELU = "relu"
BN = "bn"
_KINDS = (CONV, RELU, BN)
BN_STATS = ("running_mean", "running_var")


class ArchError(ValueError):
    pass


class CacheError(ValueError):
    pass


@dataclasses.dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_ch: int = 0
    out_ch: int = 0
    kernel: int = 0
    has_bias: bool = True
    channels: int = 0
    eps: float = 1e-5
    momentum: float = 0.1

    @property
    def padding(self) -> int:
        return self.kernel // 2

    def to_dict(self) -> dict[str, Any]:
        if self.kind == CONV:
            return {"kind": CONV, "in_ch": self.in_ch, "out_ch": self.out_ch,
                    "kernel": self.kernel, "has_bias": self.has_bias}
        if self.kind == BN:
            return {"kind": BN, "channels": self.channels, "eps": self.eps, "momentum": self.momentum}
        return {"kind": self.kind}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "LayerSpec":
        return cls(**d)


def conv(in_ch: int, out_ch: int, kernel: int, has_bias: bool = True) -> LayerSpec:
    return LayerSpec(CONV, in_ch=in_ch, out_ch=out_ch, kernel=kernel, has_bias=has_bias)


def relu() -> LayerSpec:
    return LayerSpec(RELU)


def batchnorm(channels: int, eps: float = 1e-5, momentum: float = 0.1) -> LayerSpec:
    return LayerSpec(BN, channels=channels, eps=eps, momentum=momentum)


@dataclasses.dataclass(frozen=True)
class ArchSpec:
    arch_id: str
    layers: tuple[LayerSpec, ...]
    residual_output: bool = False

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        self.validate()

    def validate(self) -> None:
        if not self.layers or self.layers[0].kind != CONV:
            raise ArchError("first layer must be a Conv")
        ch = self.layers[0].in_ch
        seen = set()
        for i, layer in enumerate(self.layers):
            if layer.kind not in _KINDS:
                raise ArchError(f"layer {i}: unknown kind {layer.kind!r}")
            if layer.kind == CONV:
                if layer.in_ch != ch:
                    raise ArchError(f"layer {i}: expects {layer.in_ch} channels, receives {ch}")
                if layer.kernel < 1 or layer.kernel % 2 == 0:
                    raise ArchError(f"layer {i}: kernel must be odd, got {layer.kernel}")
                if layer.out_ch < 1:
                    raise ArchError(f"layer {i}: out_ch must be positive")
                ch = layer.out_ch
            elif layer.kind == BN:
                if layer.channels != ch:
                    raise ArchError(f"layer {i}: BatchNorm over {layer.channels} channels, receives {ch}")
        for name in self.layer_names():
            if name is not None and name in seen:
                raise ArchError(f"duplicate layer name {name}")
            seen.add(name)
        if self.residual_output and ch != self.in_channels:
            raise ArchError("residual output needs out channels == in channels")

    @property
    def in_channels(self) -> int:
        return self.layers[0].in_ch

    @property
    def out_channels(self) -> int:
        return [l for l in self.layers if l.kind == CONV][-1].out_ch

    def layer_names(self) -> list[str | None]:
        names: list[str | None] = []
        stage = 0
        for layer in self.layers:
            if layer.kind == CONV:
                stage += 1
                names.append(f"conv{stage}")
            elif layer.kind == BN:
                names.append(f"bn{stage}")
            else:
                names.append(None)
        return names

    def conv_names(self) -> list[str]:
        return [n for n, l in zip(self.layer_names(), self.layers) if l.kind == CONV]

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes: dict[str, tuple[int, ...]] = {}
        for name, layer in zip(self.layer_names(), self.layers):
            if layer.kind == CONV:
                shapes[f"{name}.weight"] = (layer.out_ch, layer.in_ch, layer.kernel, layer.kernel)
                if layer.has_bias:
                    shapes[f"{name}.bias"] = (layer.out_ch,)
            elif layer.kind == BN:
                for p in ("gamma", "beta", *BN_STATS):
                    shapes[f"{name}.{p}"] = (layer.channels,)
        return shapes

    def param_names(self) -> list[str]:
        return list(self.param_shapes())

    @staticmethod
    def trainable(name: str) -> bool:
        return name.rsplit(".", 1)[-1] not in BN_STATS

    @property
    def has_bn(self) -> bool:
        return any(l.kind == BN for l in self.layers)

    def to_dict(self) -> dict[str, Any]:
        return {
            "arch_id": self.arch_id,
            "residual_output": self.residual_output,
            "layers": [l.to_dict() for l in self.layers],
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ArchSpec":
        return cls(
            arch_id=d["arch_id"],
            layers=tuple(LayerSpec.from_dict(l) for l in d["layers"]),
            residual_output=bool(d.get("residual_output", False)),
        )


def srcnn3(in_ch: int = 1, widths: tuple[int, int] = (64, 32), kernels: tuple[int, int, int] = (9, 5, 9),
           residual_output: bool = False) -> ArchSpec:
    """Three-layer analysis net: conv9 -> ReLU -> conv5 -> ReLU -> conv9."""
    w1, w2 = widths
    k1, k2, k3 = kernels
    return ArchSpec(
        "srcnn3",
        (conv(in_ch, w1, k1), relu(), conv(w1, w2, k2), relu(), conv(w2, in_ch, k3)),
        residual_output=residual_output,
    )


def dncnn(depth: int = 7, width: int = 32, bn: bool = False, in_ch: int = 1) -> ArchSpec:
    """DnCNN-style residual denoiser with ``depth`` 3x3 convolutions."""
    if depth < 2:
        raise ArchError("dncnn depth must be >= 2")
    layers = [conv(in_ch, width, 3), relu()]
    for _ in range(depth - 2):
        if bn:
            layers += [conv(width, width, 3, has_bias=False), batchnorm(width), relu()]
        else:
            layers += [conv(width, width, 3), relu()]
    layers.append(conv(width, in_ch, 3))
    arch_id = f"dncnn{depth}" + ("-bn" if bn else "")
    return ArchSpec(arch_id, tuple(layers), residual_output=True)


_DNCNN_RE = re.compile(r"^dncnn(\d+)(-bn)?$")


def build_arch(arch_id: str, width: int | None = None) -> ArchSpec:
    """Canonical architectures by id: ``srcnn3``, ``dncnn{D}``, ``dncnn{D}-bn``."""
    if arch_id == "srcnn3":
        return srcnn3() if width is None else srcnn3(widths=(width, width // 2))
    m = _DNCNN_RE.match(arch_id)
    if m:
        return dncnn(int(m.group(1)), 32 if width is None else width, bn=bool(m.group(2)))
    raise ArchError(f"unknown arch id {arch_id!r}")


def spec_of(p: ParamSet) -> ArchSpec:
    if p.arch is None:
        raise ArchError(f"ParamSet for {p.arch_id!r} carries no arch block")
    return ArchSpec.from_dict(p.arch)


def check_params(spec: ArchSpec, params: Mapping[str, np.ndarray]) -> None:
    expected = spec.param_shapes()
    if list(params) != list(expected):
        raise ArchError(f"parameter names {list(params)} do not match architecture {list(expected)}")
    for name, shape in expected.items():
        if tuple(params[name].shape) != shape:
            raise ArchError(f"{name}: shape {tuple(params[name].shape)}, expected {shape}")


def init_params(spec: ArchSpec, seed: int, created: str | None = None) -> ParamSet:
    """Conv weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), drawn row-major in
    parameter order from one stream; biases 0; BN (gamma, beta, mean, var) = (1, 0, 0, 1)."""
    rng = Rng(seed)
    entries: dict[str, np.ndarray] = {}
    for name, shape in spec.param_shapes().items():
        kind = name.rsplit(".", 1)[-1]
        if kind == "weight":
            fan_in = shape[1] * shape[2] * shape[3]
            bound = 1.0 / math.sqrt(fan_in)
            u = rng.uniform(int(np.prod(shape)))
            entries[name] = ((2.0 * u - 1.0) * bound).astype(DTYPE).reshape(shape)
        elif kind in ("gamma", "running_var"):
            entries[name] = np.ones(shape, dtype=DTYPE)
        else:
            entries[name] = np.zeros(shape, dtype=DTYPE)
    meta = {
        "task_tag": "init",
        "parent_checksum": None,
        "seed": int(seed),
        "created_iso8601": created or now_iso8601(),
    }
    return ParamSet(spec.arch_id, entries, meta, spec.to_dict())


# -- kernels ---------------------------------------------------------------

def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """NHWC -> (n*h*w, k*k*c) with zero 'same' padding, tap-major then channel."""
    n, h, w, c = x.shape
    if k == 1:
        return x.reshape(n * h * w, c)
    p = k // 2
    xp = np.zeros((n, h + 2 * p, w + 2 * p, c), dtype=x.dtype)
    xp[:, p:p + h, p:p + w, :] = x
    win = sliding_window_view(xp, (k, k), axis=(1, 2))  # n, h, w, c, k, k
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n * h * w, k * k * c)


def _wmat(w: np.ndarray, dtype) -> np.ndarray:
    o = w.shape[0]
    return np.ascontiguousarray(w.transpose(0, 2, 3, 1).reshape(o, -1), dtype=dtype)


def _wmat_flipped(w: np.ndarray, dtype) -> np.ndarray:
    # adjoint of a 'same' conv: correlate with the spatially flipped,
    # channel-transposed kernel
    c = w.shape[1]
    return np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 2, 3, 0).reshape(c, -1), dtype=dtype)


def _params_of(params) -> Mapping[str, np.ndarray]:
    return params.entries if isinstance(params, ParamSet) else params


# -- forward / backward ------------------------------------------------------

def forward(spec: ArchSpec, params, x: np.ndarray, mode: str = "eval") -> tuple[np.ndarray, dict[str, Any]]:
    """Run the network on NCHW ``x``.

    Computation happens in ``x``'s floating dtype. In ``train`` mode
    BatchNorm normalizes with biased batch statistics and updates the
    running statistics stored in ``params`` in place.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    P = _params_of(params)
    check_params(spec, P)
    if x.ndim != 4 or x.shape[1] != spec.in_channels:
        raise ShapeError(f"input shape {x.shape} incompatible with {spec.in_channels} input channels")
    dtype = x.dtype if x.dtype in (np.float32, np.float64) else DTYPE
    x_in = np.asarray(x, dtype=dtype)
    a = np.ascontiguousarray(x_in.transpose(0, 2, 3, 1))
    steps: list[tuple] = []
    for i, (name, layer) in enumerate(zip(spec.layer_names(), spec.layers)):
        if layer.kind == CONV:
            n, h, w, _ = a.shape
            cols = _im2col(a, layer.kernel)
            with np.errstate(invalid="ignore", over="ignore"):  # reported below as NonFiniteError
                out = cols @ _wmat(P[f"{name}.weight"], dtype).T
            if layer.has_bias:
                out += P[f"{name}.bias"].astype(dtype)
            steps.append((cols, a.shape))
            a = out.reshape(n, h, w, layer.out_ch)
        elif layer.kind == RELU:
            mask = a > 0
            steps.append((mask,))
            a = a * mask
        else:
            gamma = P[f"{name}.gamma"].astype(np.float64)
            beta = P[f"{name}.beta"].astype(np.float64)
            if mode == "train":
                flat = a.reshape(-1, layer.channels).astype(np.float64)
                mean = flat.mean(axis=0)
                var = ((flat - mean) ** 2).mean(axis=0)
                m = layer.momentum
                rm_key, rv_key = f"{name}.running_mean", f"{name}.running_var"
                P[rm_key] = ((1 - m) * P[rm_key].astype(np.float64) + m * mean).astype(P[rm_key].dtype)
                P[rv_key] = ((1 - m) * P[rv_key].astype(np.float64) + m * var).astype(P[rv_key].dtype)
            else:
                mean = P[f"{name}.running_mean"].astype(np.float64)
                var = P[f"{name}.running_var"].astype(np.float64)
            inv_std = 1.0 / np.sqrt(var + layer.eps)
            xhat = ((a - mean.astype(dtype)) * inv_std.astype(dtype)).astype(dtype)
            steps.append((xhat, inv_std.astype(dtype), mode))
            a = xhat * gamma.astype(dtype) + beta.astype(dtype)
        if not np.all(np.isfinite(a)):
            raise NonFiniteError(f"non-finite activation after layer {i} ({layer.kind})")
    pred = a.transpose(0, 3, 1, 2)
    y = x_in - pred if spec.residual_output else np.ascontiguousarray(pred)
    cache = {
        "arch_id": spec.arch_id,
        "signature": [(k, tuple(v.shape)) for k, v in P.items()],
        "mode": mode,
        "steps": steps,
        "in_shape": x_in.shape,
        "dtype": dtype,
    }
    return y, cache


def backward(spec: ArchSpec, params, cache: Mapping[str, Any], grad_y: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss w.r.t. every parameter, given dL/dy.

    Running statistics are not learned; their gradient entries are zero.
    In eval mode BatchNorm is treated as the fixed affine map it is.
    """
    P = _params_of(params)
    if cache.get("arch_id") != spec.arch_id or cache.get("signature") != [
        (k, tuple(v.shape)) for k, v in P.items()
    ]:
        raise CacheError("cache was produced by a different architecture or parameter set")
    steps = cache["steps"]
    if len(steps) != len(spec.layers):
        raise CacheError("cache does not cover every layer")
    n, c, h, w = cache["in_shape"]
    out_shape = (n, spec.out_channels, h, w)
    if tuple(grad_y.shape) != out_shape:
        raise ShapeError(f"grad_y shape {grad_y.shape}, expected {out_shape}")
    dtype = cache["dtype"]
    g = np.ascontiguousarray(np.asarray(grad_y, dtype=dtype).transpose(0, 2, 3, 1))
    if spec.residual_output:
        g = -g
    grads: dict[str, np.ndarray] = {k: np.zeros(v.shape, dtype=dtype) for k, v in P.items()}
    names = spec.layer_names()
    for i in range(len(spec.layers) - 1, -1, -1):
        layer, name, step = spec.layers[i], names[i], steps[i]
        if layer.kind == CONV:
            cols, in_shape = step
            gm = g.reshape(-1, layer.out_ch)
            wkey = f"{name}.weight"
            k, cin = layer.kernel, layer.in_ch
            dw = (cols.T @ gm).T.reshape(layer.out_ch, k, k, cin).transpose(0, 3, 1, 2)
            grads[wkey] = np.ascontiguousarray(dw)
            if layer.has_bias:
                grads[f"{name}.bias"] = gm.sum(axis=0, dtype=np.float64).astype(dtype)
            if i > 0:
                g = (_im2col(g, k) @ _wmat_flipped(P[wkey], dtype).T).reshape(in_shape)
        elif layer.kind == RELU:
            g = g * step[0]
        else:
            xhat, inv_std, mode = step
            flat_g = g.reshape(-1, layer.channels)
            flat_x = xhat.reshape(-1, layer.channels)
            grads[f"{name}.gamma"] = (flat_g * flat_x).sum(axis=0, dtype=np.float64).astype(dtype)
            grads[f"{name}.beta"] = flat_g.sum(axis=0, dtype=np.float64).astype(dtype)
            gamma = P[f"{name}.gamma"].astype(dtype)
            dxhat = g * gamma
            if mode == "train":
                m = flat_g.shape[0]
                dflat = dxhat.reshape(-1, layer.channels)
                s1 = dflat.sum(axis=0, dtype=np.float64).astype(dtype)
                s2 = (dflat * flat_x).sum(axis=0, dtype=np.float64).astype(dtype)
                g = (dxhat - (s1 + xhat * s2) / m) * inv_std
            else:
                g = dxhat * inv_std
    return grads


def predict(spec: ArchSpec, params, x: np.ndarray, batch: int = 16) -> np.ndarray:
    """Eval-mode forward in chunks of ``batch`` samples."""
    outs = [forward(spec, params, x[i:i + batch], "eval")[0] for i in range(0, x.shape[0], batch)]
    return np.concatenate(outs, axis=0)


# -- BN folding --------------------------------------------------------------

def fold_bn(spec: ArchSpec, params: ParamSet) -> tuple[ArchSpec, ParamSet]:
    """Absorb every eval-mode BatchNorm into the Conv right before it."""
    if not spec.has_bn:
        raise ArchError("no BatchNorm layers to fold")
    P = _params_of(params)
    check_params(spec, P)
    names = spec.layer_names()
    new_layers: list[LayerSpec] = []
    folded: dict[str, np.ndarray] = {}
    for i, (name, layer) in enumerate(zip(names, spec.layers)):
        if layer.kind != BN:
            new_layers.append(layer)
            continue
        prev = spec.layers[i - 1] if i > 0 else None
        if prev is None or prev.kind != CONV:
            raise ArchError(f"layer {i}: BatchNorm is not immediately preceded by a Conv")
        cname = names[i - 1]
        var = P[f"{name}.running_var"].astype(np.float64)
        if np.any(var + layer.eps <= 0):
            raise ArchError(f"{name}: running_var + eps must be positive")
        scale = P[f"{name}.gamma"].astype(np.float64) / np.sqrt(var + layer.eps)
        w = P[f"{cname}.weight"].astype(np.float64)
        b = P[f"{cname}.bias"].astype(np.float64) if prev.has_bias else np.zeros(prev.out_ch)
        folded[f"{cname}.weight"] = (w * scale[:, None, None, None]).astype(DTYPE)
        folded[f"{cname}.bias"] = ((b - P[f"{name}.running_mean"]) * scale + P[f"{name}.beta"]).astype(DTYPE)
        new_layers[-1] = dataclasses.replace(prev, has_bias=True)
    new_spec = ArchSpec(spec.arch_id + "-folded", tuple(new_layers), spec.residual_output)
    entries = {}
    for key in new_spec.param_names():
        entries[key] = folded[key] if key in folded else np.array(P[key], dtype=DTYPE, copy=True)
    meta = dict(params.meta) if isinstance(params, ParamSet) else {}
    meta["task_tag"] = f"{meta.get('task_tag', 'model')}+folded"
    return new_spec, ParamSet(new_spec.arch_id, entries, meta, new_spec.to_dict())
