import math

import numpy as np
import pytest
from PIL import Image as PILImage

from dni.imaging import (
    ImageFormatError,
    NoiseModel,
    add_noise,
    as_image,
    load_image,
    load_manifest,
    psnr,
    read_manifest,
    save_image,
)
from dni.tensor import ShapeError


def test_psnr_examples():
    a = as_image(np.full((4, 4), 100.0))
    assert psnr(a, a) == math.inf
    assert psnr(as_image(np.zeros((4, 4))), as_image(np.full((4, 4), 255.0))) == 0.0
    b = as_image(np.full((4, 4), 105.0))  # MSE 25
    assert psnr(a, b) == pytest.approx(10 * math.log10(65025 / 25))
    assert psnr(a, b) == pytest.approx(34.15, abs=0.005)
    assert psnr(a, b) == psnr(b, a)
    with pytest.raises(ShapeError):
        psnr(a, as_image(np.zeros((3, 3))))


def test_psnr_decreases_with_noise():
    clean = as_image(np.random.default_rng(0).uniform(50, 200, (64, 64)))
    for seed in range(3):
        scores = [psnr(clean, np.clip(add_noise(clean, NoiseModel(s, seed)), 0, 255)) for s in (5, 10, 20, 40)]
        assert scores == sorted(scores, reverse=True)


def test_noise_model():
    img = as_image(np.full((256, 256), 128.0))
    assert np.array_equal(add_noise(img, NoiseModel(0, 1)), img)
    noisy = add_noise(img, NoiseModel(25, 7))
    assert abs((noisy - img).std() / 25 - 1) < 0.03
    assert noisy.tobytes() == add_noise(img, NoiseModel(25, 7)).tobytes()
    assert noisy.tobytes() != add_noise(img, NoiseModel(25, 8)).tobytes()
    with pytest.raises(ValueError):
        NoiseModel(-1, 0)


def test_noise_not_clamped():
    img = as_image(np.full((32, 32), 250.0))
    assert add_noise(img, NoiseModel(30, 0)).max() > 255


@pytest.mark.parametrize("suffix", [".png", ".pgm"])
def test_round_trip(tmp_path, suffix):
    pixels = np.random.default_rng(1).integers(0, 256, (13, 17)).astype(np.float32)
    path = tmp_path / f"img{suffix}"
    save_image(as_image(pixels), path)
    back = load_image(path)
    assert back.shape == (1, 1, 13, 17)
    np.testing.assert_array_equal(back[0, 0], pixels)


def test_pgm_is_p5(tmp_path):
    save_image(as_image(np.zeros((2, 3))), tmp_path / "x.pgm")
    assert (tmp_path / "x.pgm").read_bytes().startswith(b"P5")


def test_save_clamps_and_rounds_half_even(tmp_path):
    save_image(as_image(np.array([[-5.0, 300.0, 2.5, 3.5]])), tmp_path / "c.png")
    np.testing.assert_array_equal(load_image(tmp_path / "c.png")[0, 0], [[0, 255, 2, 4]])


def test_rgb_converted_to_luma(tmp_path):
    rgb = np.zeros((2, 2, 3), np.uint8)
    rgb[..., 0] = 255
    PILImage.fromarray(rgb, "RGB").save(tmp_path / "red.png")
    np.testing.assert_array_equal(load_image(tmp_path / "red.png"), 76)


def test_bad_files(tmp_path):
    (tmp_path / "junk.png").write_bytes(b"not an image")
    with pytest.raises(ImageFormatError):
        load_image(tmp_path / "junk.png")
    with pytest.raises(ImageFormatError):
        save_image(as_image(np.zeros((2, 2))), tmp_path / "x.jpg")


def test_manifest(tmp_path):
    sub = tmp_path / "imgs"
    sub.mkdir()
    save_image(as_image(np.zeros((4, 4))), sub / "a.png")
    save_image(as_image(np.ones((4, 4))), sub / "b.pgm")
    (tmp_path / "list.txt").write_text("# test set\nimgs/a.png\n\nimgs/b.pgm  # second\n")
    assert read_manifest(tmp_path / "list.txt") == [sub / "a.png", sub / "b.pgm"]
    imgs = load_manifest(tmp_path / "list.txt")
    assert [float(i.max()) for i in imgs] == [0.0, 1.0]
    (tmp_path / "empty.txt").write_text("# nothing\n")
    with pytest.raises(ValueError):
        load_manifest(tmp_path / "empty.txt")
