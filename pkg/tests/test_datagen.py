import json
import logging
from dataclasses import replace

import numpy as np
import pytest

from spectral_hybrid import datagen as dg
from spectral_hybrid.equations import make_equation
from spectral_hybrid.integrators import StepperConfig, advance
from spectral_hybrid.spectral_core import fwd, inv

BURGERS = dg.GenerationConfig("unstable_burgers", 64, 40 * np.pi / 64 / 2, 20.0, 16.0, (16, 32, 64),
                              sample_count=3, nonlinear_form="skew")


@pytest.fixture(scope="module")
def burgers():
    return dg.generate(BURGERS, workers=1)


@pytest.mark.parametrize("name", ["ks", "unstable_burgers", "kolmogorov"])
def test_initial_condition(name):
    spec = make_equation(name, 64)
    a = dg.random_initial_condition(spec, 5)
    np.testing.assert_array_equal(a, dg.random_initial_condition(spec, 5))
    assert not np.array_equal(a, dg.random_initial_condition(spec, 6))
    assert a[(0,) * (spec.grid.ndim + 1)] == 0
    u = inv(a, spec.grid.ndim)
    assert abs(np.sqrt((u ** 2).mean()) - 1.0) < 1e-10


def test_stride_arithmetic():
    ks = dg.GenerationConfig("ks", 1024, 0.0208333, 800.0, 800.0, (32, 64, 128, 256, 512, 1024))
    assert ks.stride(32) == 32
    m = dg._manifest(ks, 32, 2)
    assert m["temporal_stride"] == 32
    assert abs(m["dt"] - 0.6666656) < 1e-12
    assert m["domain_length"] == 64.0
    assert m["sample_count"] == 16
    for n in ks.target_resolutions:
        assert dg._manifest(ks, n, 2)["dt"] * n == pytest.approx(0.0208333 * 1024, rel=1e-15)
    assert ks.warmup_steps == round(800 / 0.0208333)


def test_config_validation():
    with pytest.raises(ValueError):
        replace(BURGERS, warmup_time=0.0)
    with pytest.raises(ValueError):
        replace(BURGERS, target_resolutions=(48,))
    with pytest.raises(ValueError):
        replace(BURGERS, target_resolutions=(128,))
    with pytest.raises(ValueError):
        replace(BURGERS, sample_count=0)


def test_dataset_shapes_and_times(burgers):
    assert sorted(burgers) == [16, 32, 64]
    steps = BURGERS.simulation_steps
    for n, ds in burgers.items():
        stride = 64 // n
        assert ds.data.shape == (3, steps // stride + 1, 1, n)
        dt = np.diff(ds.times)
        assert np.all(dt > 0) and np.allclose(dt, ds.dt, rtol=0, atol=1e-12)
        assert ds.dt * n == pytest.approx(BURGERS.reference_dt * 64)
        assert ds.manifest["split"] == "train"
        assert ds.manifest["sample_seeds"] == [0, 1, 2]


def test_no_energy_at_or_above_target_nyquist(burgers):
    for n, ds in burgers.items():
        if n == 64:
            continue
        c = fwd(ds.data, 1)
        assert np.abs(c[..., n // 2]).max() < 1e-14 * np.abs(c).max()


def test_filtered_downsample_matches_reference_frames(burgers):
    # a coarse frame is the truncated, filtered reference frame at the same time
    from spectral_hybrid.spectral_core import Grid, filter_factors, truncate
    fine, coarse = burgers[64], burgers[16]
    g64, g16 = Grid(1, 64, fine.grid.length), Grid(1, 16, fine.grid.length)
    # stored frames are filtered at their own resolution: undo the 64 filter, refilter at 16
    raw = fwd(fine.data[:, ::4], 1) / filter_factors(g64, BURGERS.filter)
    c = truncate(raw, g64, g16) * filter_factors(g16, BURGERS.filter)
    np.testing.assert_allclose(inv(c, 1), coarse.data, atol=1e-10)


def test_no_op_pipeline_equals_raw_solve():
    cfg = replace(BURGERS, target_resolutions=(64,), filter=None, sample_count=1,
                  simulation_time=BURGERS.reference_dt * 5)
    ds = dg.generate(cfg)[64]
    spec = cfg.spec()
    stepper = StepperConfig(cfg.reference_dt, filter=None)
    c = dg._warm_up(dg.random_initial_condition(spec, 0)[None], spec, stepper, cfg.warmup_steps)
    raw = [c]
    for _ in range(cfg.simulation_steps):
        c = advance(c, spec, stepper)
        raw.append(c)
    np.testing.assert_array_equal(ds.data[0], inv(np.stack(raw, axis=1), 1)[0])
    assert ds.manifest["filter"] is None


def test_sixteen_samples_and_ks_domain():
    cfg = dg.GenerationConfig("ks", 64, 1 / 12, 2.0, 1.0, (32,))
    ds = dg.generate(cfg)[32]
    assert ds.data.shape[0] == 16
    assert ds.manifest["domain_length"] == 64.0
    assert ds.manifest["fields"] == ["u"]
    assert ds.grid.length == 64.0


def test_worker_count_does_not_change_results(monkeypatch):
    cfg = replace(BURGERS, sample_count=6, target_resolutions=(32,))
    one = dg.generate(cfg, workers=1)[32]
    monkeypatch.setenv(dg.WORKERS_ENV, "2")
    two = dg.generate(cfg)[32]
    np.testing.assert_array_equal(one.data, two.data)
    assert one.manifest == two.manifest
    monkeypatch.setenv(dg.WORKERS_ENV, "many")
    with pytest.raises(ValueError):
        dg.generate(cfg)


def test_round_trip(tmp_path, burgers):
    ds = burgers[32]
    dg.write_dataset(tmp_path / "d", ds)
    back = dg.read_dataset(tmp_path / "d")
    np.testing.assert_array_equal(back.data, ds.data)
    assert back.manifest == json.loads(json.dumps(ds.manifest))
    assert back.data.dtype == np.float64
    dg.write_dataset(tmp_path / "e", back)
    for name in ("manifest.json", "data.bin", "checksums"):
        assert (tmp_path / "d" / name).read_bytes() == (tmp_path / "e" / name).read_bytes()
    raw = np.frombuffer((tmp_path / "d" / "data.bin").read_bytes(), dtype="<f8")
    np.testing.assert_array_equal(raw, ds.data.ravel())


def test_read_errors(tmp_path, burgers):
    path = tmp_path / "d"
    dg.write_dataset(path, burgers[16])
    data = bytearray((path / "data.bin").read_bytes())
    data[100] ^= 0x10
    (path / "data.bin").write_bytes(bytes(data))
    with pytest.raises(dg.DatasetError, match="checksum"):
        dg.read_dataset(path)
    dg.write_dataset(path, burgers[16])
    manifest = json.loads((path / "manifest.json").read_text())
    manifest["format_version"] = 99
    (path / "manifest.json").write_text(json.dumps(manifest))
    # fix up the checksum so the version check is what fails
    digest = dg._sha256(path / "manifest.json")
    lines = (path / "checksums").read_text().splitlines()
    lines[0] = f"{digest}  manifest.json"
    (path / "checksums").write_text("\n".join(lines) + "\n")
    with pytest.raises(dg.DatasetError, match="version"):
        dg.read_dataset(path)
    with pytest.raises(dg.DatasetError, match="no dataset"):
        dg.read_dataset(tmp_path / "missing")
    with pytest.raises(dg.DatasetError):
        dg.TrajectoryDataset(burgers[16].manifest, burgers[16].data[:, :2])


def test_divergence_is_reported_with_seeds(caplog, monkeypatch):
    cfg = replace(BURGERS, sample_count=2, target_resolutions=(32,))

    def explode(c, spec, stepper, tendency=None):
        return c * np.nan

    monkeypatch.setattr(dg, "advance", explode)
    with caplog.at_level(logging.ERROR, logger="spectral_hybrid.datagen"):
        with pytest.raises(RuntimeError, match=r"seed\(s\) \[0, 1\]"):
            dg.generate(cfg, workers=1)
    assert "[0, 1]" in caplog.text
