import csv
import json

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dni.analysis import (
    DegenerateFilterError,
    alpha_grid,
    corr_curve,
    corr_index,
    fit_alpha_by_corr,
    model_corr,
    reports_to_json,
    write_curve_csv,
    CorrelationReport,
)
from dni.interpolator import interp2
from dni.netgraph import dncnn

from conftest import random_model

filters = arrays(np.float64, (3, 3), elements=st.floats(-10, 10))


def pearson_oracle(a, b):
    a = np.asarray(a, float).ravel()
    b = np.asarray(b, float).ravel()
    n = len(a)
    num = n * np.sum(a * b) - a.sum() * b.sum()
    den = np.sqrt(n * np.sum(a * a) - a.sum() ** 2) * np.sqrt(n * np.sum(b * b) - b.sum() ** 2)
    return num / den


def test_hand_example():
    assert corr_index([1, 2, 3, 4], [1, 3, 2, 4]) == pytest.approx(0.8, abs=1e-12)
    assert pearson_oracle([1, 2, 3, 4], [1, 3, 2, 4]) == pytest.approx(0.8, abs=1e-12)


def test_self_and_sign():
    f = np.random.default_rng(0).normal(size=(3, 3))
    assert corr_index(f, f) == 1.0
    assert corr_index(f, 2.5 * f + 7) == pytest.approx(1.0, abs=1e-12)
    assert corr_index(f, -0.3 * f + 1) == pytest.approx(-1.0, abs=1e-12)


@settings(max_examples=100)
@given(filters, filters, st.floats(0.01, 100), st.booleans(), st.floats(-50, 50))
def test_affine_invariance(f, g, a, negate, b):
    assume(np.ptp(f) > 1e-3 and np.ptp(g) > 1e-3)
    a = -a if negate else a
    base = corr_index(f, g)
    assert -1.0 <= base <= 1.0
    assert corr_index(a * f + b, g) == pytest.approx(np.sign(a) * base, abs=1e-9)
    assert base == pytest.approx(pearson_oracle(f, g), abs=1e-9)


def test_degenerate_and_shape_errors():
    with pytest.raises(DegenerateFilterError):
        corr_index(np.ones((3, 3)), np.eye(3))
    with pytest.raises(ValueError):
        corr_index(np.ones(4), np.ones(9))


def test_model_corr_self():
    m = random_model(dncnn(4, 5), 1)
    rep = model_corr(m, m, "conv2")
    assert rep.median == 1.0 and len(rep.per_filter) == 25
    assert all(r == 1.0 for _, r in rep.per_filter)
    assert rep.reference["policy"] == "positionwise"
    assert CorrelationReport.from_dict(json.loads(json.dumps(rep.to_dict()))) == rep


def test_model_corr_first_policy_and_skips():
    m = random_model(dncnn(3, 4), 1)
    rep = model_corr(m, m, "conv2", mode="first")
    assert rep.per_filter[0][1] == 1.0 and len(rep.per_filter) == 16
    other = m.copy()
    other.entries["conv2.weight"][1, 2] = 0.5
    assert model_corr(other, m, "conv2").skipped == 1
    with pytest.raises(KeyError):
        model_corr(m, m, "conv9")


def test_alpha_grid():
    assert alpha_grid(0.5) == [0.0, 0.5, 1.0]
    assert len(alpha_grid(0.05)) == 21
    with pytest.raises(ValueError):
        alpha_grid(0.3)


def test_fit_alpha_endpoints_and_middle():
    spec = dncnn(4, 6)
    a, b = random_model(spec, 1), random_model(spec, 2)
    assert fit_alpha_by_corr(a, b, a, "conv2") == 1.0
    assert fit_alpha_by_corr(a, b, b, "conv2") == 0.0
    mid = interp2(a, b, 0.35, warn=False)
    assert fit_alpha_by_corr(a, b, mid, "conv2") == pytest.approx(0.35)
    curve = corr_curve(a, b, a, "conv2", step=0.25)
    assert [c[0] for c in curve] == [0.0, 0.25, 0.5, 0.75, 1.0]
    assert curve[-1][1] == 1.0


def test_report_files(tmp_path):
    m = random_model(dncnn(3, 4), 1)
    reps = [model_corr(m, m, "conv2", label="self")]
    reports_to_json(reps, tmp_path / "r.json")
    assert json.loads((tmp_path / "r.json").read_text())[0]["label"] == "self"
    write_curve_csv([(20, reps[0])], tmp_path / "c.csv")
    rows = list(csv.reader(open(tmp_path / "c.csv")))
    assert rows[0] == ["level", "median", "q10", "q90"] and rows[1][0] == "20"
