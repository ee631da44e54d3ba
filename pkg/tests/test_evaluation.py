import csv
import io
import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spectral_hybrid import datagen as dg
from spectral_hybrid.correction_model import CorrectionConfig, Model
from spectral_hybrid.evaluation import (NEVER, ModelEntry, compare_models, correlation, first_below,
                                        mae, time_to_decorrelation, write_report)
from spectral_hybrid.integrators import StepperConfig
from spectral_hybrid.neural import EpdConfig, init_params
from spectral_hybrid.spectral_core import Grid, RealField

GEN = dg.GenerationConfig("ks", 64, 1 / 12, 5.0, 4.0, (32, 64), sample_count=3, filter=None)


@pytest.fixture(scope="module")
def ks():
    return dg.generate(GEN)


def test_mae_examples(rng):
    g = Grid(1, 32)
    u = rng.standard_normal((1, 32))
    assert mae(u, u) == 0.0
    assert mae(u + 0.3, u) == pytest.approx(32 * 0.3, rel=1e-12)
    assert mae(RealField(g, u + 0.3), RealField(g, u), normalize=True) == pytest.approx(0.3)
    a, b = rng.standard_normal((2, 16, 16)), rng.standard_normal((2, 16, 16))
    brute = 0.0
    for i in range(2):
        for j in range(16):
            for k in range(16):
                brute += abs(a[i, j, k] - b[i, j, k])
    assert abs(mae(a, b) - brute) < 1e-12
    with pytest.raises(ValueError, match="shape"):
        mae(a, b[:1])


def test_correlation_examples(rng):
    g = Grid(1, 64)
    (x,) = g.coords()
    u = rng.standard_normal(64)
    assert correlation(u, u) == pytest.approx(1.0, abs=1e-15)
    assert correlation(-u, u) == pytest.approx(-1.0, abs=1e-15)
    assert abs(correlation(np.sin(x), np.cos(x))) < 1e-12
    with pytest.raises(ValueError, match="zero-norm"):
        correlation(np.zeros(4), np.ones(4))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.floats(0.01, 100.0), st.floats(-5.0, 5.0))
def test_metric_invariances(seed, scale, shift):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal(32), rng.standard_normal(32)
    assert correlation(scale * a, b) == pytest.approx(correlation(a, b), abs=1e-12)
    assert correlation(a, scale * b) == pytest.approx(correlation(a, b), abs=1e-12)
    assert mae(a + shift, b + shift) == pytest.approx(mae(a, b), rel=1e-9, abs=1e-9)
    assert -1.0 - 1e-12 <= correlation(a, b) <= 1.0 + 1e-12


def test_first_dip_not_last():
    times = [0, 1, 2, 3]
    assert first_below([1.0, 0.99, 0.94, 0.99], times, 0.95) == 2
    assert first_below([1.0, 0.99, 0.99, 0.99], times, 0.95) == NEVER
    assert first_below([1.0, np.nan, 0.99, 0.99], times, 0.95) == 1
    with pytest.raises(ValueError, match="misaligned"):
        first_below([1.0, 0.9], times, 0.95)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=2, max_size=20), st.floats(0, 1), st.floats(0, 1))
def test_ttd_monotone_in_threshold(corr, t1, t2):
    lo, hi = sorted((t1, t2))
    times = list(range(len(corr)))
    assert first_below(corr, times, lo) >= first_below(corr, times, hi)


def test_time_to_decorrelation(rng):
    truth = rng.standard_normal((5, 1, 16))
    assert time_to_decorrelation(truth, truth, np.arange(5.0)) == NEVER
    pred = truth.copy()
    pred[3] = -truth[3]
    assert time_to_decorrelation(pred, truth, np.arange(5.0)) == 3.0
    with pytest.raises(ValueError):
        time_to_decorrelation(pred, truth, np.arange(4.0))


def _spectral(ds, n):
    spec = ds[n].spec()
    return Model("spectral", spec, StepperConfig(GEN.reference_dt * 64 / n, filter=None))


def test_self_comparison_is_perfectly_correlated(ks):
    entry = ModelEntry("spectral_64", _spectral(ks, 64), ks[64])
    report = compare_models([entry], ks[64], horizon=40)
    co = report.series("spectral_64", "corr")
    assert co.shape == (3, 41)
    assert np.abs(co - 1.0).max() < 1e-10
    assert all(t == NEVER for t in report.ttd("spectral_64"))


def test_coarse_models_on_a_coarse_grid(ks):
    # a 64-point model scored on the 32-point truth steps twice per frame
    entries = [ModelEntry("s32", _spectral(ks, 32), ks[32]),
               ModelEntry("s64", _spectral(ks, 64), ks[64])]
    report = compare_models(entries, ks[32], horizon=20)
    assert report.models() == ["s32", "s64"]
    assert report.series("s64").shape == (3, 21)
    assert report.median_mae("s64") < report.median_mae("s32")
    with pytest.raises(ValueError, match="multiple"):
        compare_models([entries[0]], ks[64], horizon=5)


def test_divergence_is_flagged(ks):
    cc = CorrectionConfig("identity_1d", output_scale=50.0, mode="pure_ml",
                          epd=EpdConfig.for_1d(channels=8))
    p = {k: v * 3 for k, v in init_params(cc.epd, 0).items()}
    model = Model("pure_ml", ks[32].spec(), StepperConfig(GEN.reference_dt * 2), cc, p)
    report = compare_models([ModelEntry("blowup", model, ks[32])], ks[32], horizon=40)
    rows = report.rows
    assert all(r[6] > 0 for r in rows)
    for r in rows:
        assert np.all(np.isinf(r[3][r[6]:])) and np.all(np.isnan(r[4][r[6]:]))
        assert r[5] <= report.times[r[6]]
    assert report.summary()["models"]["blowup"]["best_median_mae"] == "inf"


def test_report_schema(tmp_path, ks):
    # self-comparisons at 64 points, so every time-to-decorrelation is "never"
    entries = [ModelEntry("h", _spectral(ks, 64), ks[64], seed=s) for s in (0, 1)]
    entries.append(ModelEntry("s32", _spectral(ks, 64), ks[64]))
    report = compare_models(entries, ks[64], horizon=10)
    write_report(report, tmp_path)
    rows = list(csv.DictReader(io.StringIO((tmp_path / "metrics.csv").read_text())))
    assert list(rows[0]) == ["model", "seed", "sample", "t", "mae", "corr"]
    labels = {(r["model"], r["seed"], r["sample"]) for r in rows}
    assert ("h", "0", "0") in labels and ("h", "1", "2") in labels
    assert ("h", "all", "median") in labels and ("h", "0", "max") in labels
    assert ("s32", "-", "min") in labels and ("s32", "all", "median") not in labels
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert set(summary["models"]["h"]["seeds"]) == {"0", "1"}
    assert summary["models"]["s32"]["best_median_time_to_decorrelation"] == "never"
    ttd = list(csv.DictReader(io.StringIO((tmp_path / "ttd.csv").read_text())))
    assert len(ttd) == 9 and ttd[0]["time_to_decorrelation"] == "never"
    truth = np.load(tmp_path / "trajectories" / "truth.npy")
    assert truth.shape == (11, 1, 64)
    assert np.load(tmp_path / "trajectories" / "h.npy").shape == truth.shape


def test_mismatched_inputs_rejected(ks):
    other = dg.generate(replace(GEN, seed=50, sample_count=3))
    with pytest.raises(ValueError, match="share"):
        compare_models([ModelEntry("s", _spectral(ks, 32), other[32])], ks[32], horizon=5)
    bad_dt = replace(_spectral(ks, 32), stepper=StepperConfig(0.5))
    with pytest.raises(ValueError, match="time step"):
        compare_models([ModelEntry("s", bad_dt, ks[32])], ks[32], horizon=5)
