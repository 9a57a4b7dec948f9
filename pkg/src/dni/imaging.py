"""Grayscale image I/O, seeded Gaussian noise and PSNR.

Images are float32 tensors of shape [1, 1, h, w] on the 0..255 scale.
Noise level sigma is a standard deviation in 8-bit intensity units, so
"N20" means sigma = 20.
"""

from __future__ import annotations

import dataclasses
import math
import os
from pathlib import Path

import numpy as np
from PIL import Image as PILImage, UnidentifiedImageError

from .prng import Rng
from .tensor import DTYPE, ShapeError

PEAK = 255.0
_BT601 = (0.299, 0.587, 0.114)
_FORMATS = {".png": "PNG", ".pgm": "PPM"}


class ImageFormatError(ValueError):
    pass


@dataclasses.dataclass(frozen=True)
class NoiseModel:
    sigma: float
    seed: int

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")


def as_image(pixels: np.ndarray) -> np.ndarray:
    """Wrap an (h, w) array as a [1, 1, h, w] float32 image."""
    arr = np.asarray(pixels, dtype=DTYPE)
    if arr.ndim == 2:
        arr = arr[None, None]
    if arr.ndim != 4 or arr.shape[:2] != (1, 1):
        raise ShapeError(f"expected a grayscale image, got shape {arr.shape}")
    return np.ascontiguousarray(arr)


def luma(rgb: np.ndarray) -> np.ndarray:
    """ITU-R BT.601 luma of an (h, w, 3) array, rounded half-to-even."""
    rgb = np.asarray(rgb, dtype=np.float64)
    y = _BT601[0] * rgb[..., 0] + _BT601[1] * rgb[..., 1] + _BT601[2] * rgb[..., 2]
    return np.rint(y)


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(np.asarray(img, dtype=np.float64), 0.0, PEAK)).astype(np.uint8)


def load_image(path: str | os.PathLike) -> np.ndarray:
    try:
        with PILImage.open(path) as im:
            im.load()
            mode = im.mode
            if mode == "L":
                arr = np.asarray(im, dtype=np.float64)
            elif mode in ("RGB", "RGBA", "P", "LA", "CMYK", "YCbCr"):
                arr = luma(np.asarray(im.convert("RGB"), dtype=np.float64))
            elif mode == "1":
                arr = np.asarray(im.convert("L"), dtype=np.float64)
            else:
                raise ImageFormatError(f"{path}: unsupported image mode {mode}")
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise ImageFormatError(f"{path}: {exc}") from exc
    return as_image(np.clip(arr, 0.0, PEAK))


def save_image(img: np.ndarray, path: str | os.PathLike) -> None:
    """Clamp to [0, 255], round half-to-even and write 8-bit PNG or P5 PGM."""
    path = Path(path)
    fmt = _FORMATS.get(path.suffix.lower())
    if fmt is None:
        raise ImageFormatError(f"{path}: unsupported extension (use .png or .pgm)")
    pixels = to_uint8(as_image(img)[0, 0])
    PILImage.fromarray(pixels, mode="L").save(path, format=fmt)


def add_noise(img: np.ndarray, nm: NoiseModel) -> np.ndarray:
    """img + sigma * N(0, 1) per pixel; not clamped."""
    img = as_image(img)
    if nm.sigma == 0:
        return img.copy()
    g = Rng(nm.seed).normal(img.size).reshape(img.shape)
    return (img.astype(np.float64) + nm.sigma * g).astype(DTYPE)


def mse(ref: np.ndarray, test: np.ndarray) -> float:
    if np.shape(ref) != np.shape(test):
        raise ShapeError(f"shape mismatch: {np.shape(ref)} vs {np.shape(test)}")
    d = np.asarray(ref, dtype=np.float64) - np.asarray(test, dtype=np.float64)
    return float(np.mean(d * d))


def psnr(ref: np.ndarray, test: np.ndarray) -> float:
    """PSNR in dB for peak 255; identical images give +inf."""
    err = mse(ref, test)
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(PEAK * PEAK / err)


def read_manifest(path: str | os.PathLike) -> list[Path]:
    """One image path per line; blank lines and '#' comments ignored.
    Relative paths resolve against the manifest's directory."""
    path = Path(path)
    out = []
    for line in path.read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        p = Path(line)
        out.append(p if p.is_absolute() else path.parent / p)
    return out


def load_manifest(path: str | os.PathLike) -> list[np.ndarray]:
    images = [load_image(p) for p in read_manifest(path)]
    if not images:
        raise ValueError(f"{path}: manifest lists no images")
    return images
