"""Regenerate data/train and data/test from scikit-image's bundled samples.

Only images the scikit-image docs mark as public domain or CC0 are used.
Color sources go through BT.601 luma. Train and test crops come from
disjoint source images.
"""

from pathlib import Path

import numpy as np
from skimage import data

from dni.imaging import luma, save_image

ROOT = Path(__file__).resolve().parents[1] / "data"

TRAIN = ["camera", "coffee", "brick", "grass", "cell", "rocket", "retina", "text", "clock", "hubble_deep_field"]
TEST = ["astronaut", "chelsea", "gravel"]
TRAIN_SIZE = 128
TEST_SIZE = 96


def gray(name):
    img = np.asarray(getattr(data, name)(), dtype=np.float64)
    if img.ndim == 3:
        img = luma(img[..., :3])
    return img


def crops(img, size, count):
    h, w = img.shape
    # evenly spaced along the diagonal, away from borders
    out = []
    for k in range(count):
        t = (k + 1) / (count + 1)
        y = int(round(t * (h - size)))
        x = int(round((1 - t) * (w - size))) if k % 2 else int(round(t * (w - size)))
        out.append(img[y:y + size, x:x + size])
    return out


def write(split, names, size, per_image):
    folder = ROOT / split
    folder.mkdir(parents=True, exist_ok=True)
    lines = []
    for name in names:
        for k, c in enumerate(crops(gray(name), size, per_image[name] if isinstance(per_image, dict) else per_image)):
            fname = f"{name}_{k}.png"
            save_image(c, folder / fname)
            lines.append(f"{split}/{fname}")
    (ROOT / f"{split}.txt").write_text(f"# {split} corpus, scikit-image samples (public domain / CC0)\n"
                                      + "\n".join(lines) + "\n")


if __name__ == "__main__":
    write("train", TRAIN, TRAIN_SIZE, 2)
    write("test", TEST, TEST_SIZE, {"astronaut": 4, "chelsea": 3, "gravel": 3})
