import json

import numpy as np
import pytest

from dni import checkpoint as ck
from dni.harness import (
    StudyConfig,
    StudyReport,
    SweepResult,
    _pick_best,
    analysis_layers,
    denoise,
    denoise_images,
    mean_psnr,
    noisy_copies,
    run_correlation_study,
    run_unseen_noise_study,
    sweep,
    sweep_levels,
    thread_count,
)
from dni.imaging import as_image, load_image, save_image
from dni.netgraph import dncnn, init_params

from conftest import CREATED, random_model


@pytest.fixture
def models():
    spec = dncnn(3, 4)
    return random_model(spec, 1), random_model(spec, 2)


@pytest.fixture
def test_set():
    rng = np.random.default_rng(4)
    return [as_image(rng.uniform(20, 230, (12, 12))) for _ in range(3)]


def zero_predictor():
    """Residual net whose noise estimate is identically zero."""
    m = init_params(dncnn(3, 4), 0, created=CREATED)
    for k in m.entries:
        m.entries[k] = np.zeros_like(m[k])
    return m


def test_grid_evaluations(models, test_set):
    a, b = models
    r = sweep(a, b, 0.5, test_set, 20, seed=3)
    assert [row[0] for row in r.per_level[20]] == [0.0, 0.5, 1.0]
    assert r.best[20][1] == max(v for _, v in r.per_level[20])
    assert len(r.pixel[20]) == 3


def test_alpha_one_equals_model_a(models, test_set):
    a, b = models
    r = sweep(a, b, 0.5, test_set, 20, seed=3)
    direct = mean_psnr(test_set, denoise_images(a, noisy_copies(test_set, 20, 3)))
    assert r.per_level[20][-1][1] == direct
    assert r.pixel[20][-1][1] == direct


def test_ties_go_to_larger_alpha():
    assert _pick_best([(0.0, 1.0), (0.5, 2.0), (1.0, 2.0)]) == (1.0, 2.0)


def test_sweep_result_round_trip(models, test_set):
    a, b = models
    r = sweep_levels(a, b, 0.5, test_set, [20, 30], seed=3)
    assert set(r.best) == {20.0, 30.0}
    assert SweepResult.from_dict(json.loads(json.dumps(r.to_dict()))) == r


def test_thread_count(monkeypatch):
    monkeypatch.setenv("DNI_THREADS", "3")
    assert thread_count() == 3
    monkeypatch.setenv("DNI_THREADS", "0")
    assert thread_count() >= 1


def test_residual_identity(tmp_path):
    img = as_image(np.random.default_rng(0).integers(0, 256, (10, 10)))
    save_image(img, tmp_path / "in.png")
    value = denoise(zero_predictor(), tmp_path / "in.png", tmp_path / "out.png", ref_path=tmp_path / "in.png")
    assert value == float("inf")
    np.testing.assert_array_equal(load_image(tmp_path / "out.png"), img)


def test_denoise_with_mask(tmp_path, models):
    img = as_image(np.full((8, 8), 120.0))
    save_image(img, tmp_path / "in.png")
    mask = np.zeros((8, 8))
    mask[:, :4] = 255
    save_image(as_image(mask), tmp_path / "mask.png")
    a = zero_predictor()
    denoise(a, tmp_path / "in.png", tmp_path / "out.png", mask_path=tmp_path / "mask.png", model_b=models[1])
    out = load_image(tmp_path / "out.png")[0, 0]
    np.testing.assert_array_equal(out[:, :4], 120)
    other = denoise_images(models[1], [img])[0][0, 0]
    np.testing.assert_array_equal(out[:, 4:], np.rint(other[:, 4:]))
    with pytest.raises(ValueError):
        denoise(a, tmp_path / "in.png", tmp_path / "o.png", mask_path=tmp_path / "mask.png")


def test_analysis_layers():
    assert analysis_layers(dncnn(7, 4)) == {"front": "conv2", "back": "conv5"}
    assert analysis_layers(dncnn(17, 4)) == {"front": "conv5", "back": "conv12"}


def write_study(tmp_path, name="cfg.json", **over):
    rng = np.random.default_rng(5)
    for split, n, size in (("train", 3, 24), ("test", 2, 16)):
        (tmp_path / split).mkdir(exist_ok=True)
        lines = []
        for i in range(n):
            save_image(as_image(np.kron(rng.uniform(0, 255, (size // 4, size // 4)), np.ones((4, 4)))),
                       tmp_path / split / f"{i}.png")
            lines.append(f"{split}/{i}.png")
        (tmp_path / f"{split}.txt").write_text("\n".join(lines) + "\n")
    cfg = {
        "train_manifest": "train.txt",
        "test_manifest": "test.txt",
        "work_dir": "work",
        "arch": "dncnn3",
        "width": 4,
        "train": {"iterations": 4, "batch_size": 2, "patch_size": 12},
        "grid_step": 0.5,
        "corr_grid_step": 0.25,
    }
    cfg.update(over)
    (tmp_path / name).write_text(json.dumps(cfg))
    return tmp_path / name


def test_unseen_noise_study_small(tmp_path):
    path = write_study(tmp_path)
    report = run_unseen_noise_study(path)
    assert [r["sigma"] for r in report.rows] == [20, 30, 40, 50, 60]
    assert [r["unseen"] for r in report.rows] == [False, True, True, True, False]
    assert report.row(40)["upper_bound_psnr"] is not None and report.row(30)["upper_bound_psnr"] is None
    assert not report.with_bn
    work = tmp_path / "work"
    saved = json.loads((work / "unseen_noise_report.json").read_text())
    assert StudyReport.from_dict(saved).rows == report.rows
    assert "N30*" in (work / "unseen_noise_report.txt").read_text()
    assert {p.name for p in work.glob("*.ck")} == {"n20.ck", "ft60.ck", "baseline.ck", "upper40.ck"}
    ft = ck.load(work / "ft60.ck")
    assert ft.meta["parent_checksum"] == ck.checksum(ck.load(work / "n20.ck"))
    # cached stages are reused: checkpoints untouched by a second run
    stamp = (work / "n20.ck").stat().st_mtime_ns
    run_unseen_noise_study(path)
    assert (work / "n20.ck").stat().st_mtime_ns == stamp


def test_stage_failure_names_stage(tmp_path):
    path = write_study(tmp_path, train={"iterations": 2, "batch_size": 2, "patch_size": 64})
    with pytest.raises(RuntimeError, match="n20"):
        run_unseen_noise_study(path)


def test_correlation_study_small(tmp_path):
    path = write_study(tmp_path)
    out = run_correlation_study(path)
    assert out["layers"] == {"front": "conv2", "back": "conv2"}
    rows = out["curves"]["conv2"]
    assert [r["level"] for r in rows] == [20, 30, 40, 50, 60]
    assert rows[0]["median"] == 1.0
    assert out["fit_alpha_endpoints"]["conv2"] == {"20": 1.0, "60": 0.0}
    assert set(out["fit_alpha"]["conv2"]) == {"30", "40", "50"}
    assert (tmp_path / "work" / "correlation_conv2.csv").exists()


def test_config_rejects_bad_endpoints(tmp_path):
    with pytest.raises(ValueError):
        StudyConfig(train_manifest="a", test_manifest="b", work_dir="c", endpoints=(10, 60))
