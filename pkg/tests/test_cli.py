import csv
import io
import json

import numpy as np
import pytest
import yaml

from spectral_hybrid import datagen
from spectral_hybrid.cli import CHECKPOINT, EXIT_OK, EXIT_RUNTIME, EXIT_USER, main

TINY = {
    "name": "tiny",
    "seed": 0,
    "data": {
        "equation": "unstable_burgers",
        "reference_resolution": 64,
        "reference_dt": 0.98174770424681,
        "warmup_time": 50.0,
        "simulation_time": 60.0,
        "target_resolutions": [32, 64],
        "nonlinear_form": "skew",
        "splits": {"train": {"seed_offset": 0, "samples": 4},
                   "validation": {"seed_offset": 100, "samples": 2}},
    },
    "model": {"kind": "hybrid", "resolution": 32, "nonlinear_form": "conservative",
              "epd": {"channels": 8}},
    "train": {"seeds": 2, "total_steps": 10, "eval_every": 5, "eval_horizon": 10,
              "eval_samples": 2, "batch_size": 2},
    "evaluate": {"horizon": 20, "models": [
        {"name": "spectral_32", "resolution": 32},
        {"name": "spectral_64", "resolution": 64},
        {"name": "hybrid_32", "kind": "hybrid"},
        {"name": "untrained_nf", "kind": "hybrid", "filter": False, "trained": False},
    ]},
}
STAGES = ("generate", "train", "evaluate", "plot")
# the learning curve records wall-clock time, so it (and the provenance that hashes it) varies
TIMED = ("curve.csv",)


def _write_cfg(path, **overrides):
    doc = json.loads(json.dumps(TINY))
    doc.update(overrides)
    path.write_text(yaml.safe_dump(doc))
    return str(path)


def _pipeline(cfg, out, *extra):
    for stage in STAGES:
        assert main([stage, "--config", cfg, "--out", str(out), *extra]) == EXIT_OK, stage


def _files(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file()}


def _untimed(files):
    out = {}
    for k, v in files.items():
        if k.endswith(TIMED):
            rows = list(csv.reader(io.StringIO(v.decode())))
            v = "\n".join(",".join(r[:-1]) for r in rows).encode()
        elif k.startswith("train/") and k.endswith("provenance.json"):
            doc = json.loads(v)
            doc["outputs"] = {n: d for n, d in doc["outputs"].items() if not n.endswith(TIMED)}
            v = json.dumps(doc, sort_keys=True).encode()
        out[k] = v
    return out


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = _write_cfg(root / "tiny.cfg")
    _pipeline(cfg, root / "a")
    return root, cfg


def test_pipeline_layout(run):
    root, _ = run
    files = _files(root / "a")
    for n in (32, 64):
        for split in ("train", "validation"):
            assert f"data/{split}/n{n}/data.bin" in files
    for s in (0, 1):
        assert f"train/seed{s}/{CHECKPOINT}" in files
        assert f"train/seed{s}/curve.csv" in files
    for name in ("metrics.csv", "summary.json", "ttd.csv", "trajectories/truth.npy"):
        assert f"eval/{name}" in files
    for name in ("truth", "spectral_32", "spectral_64", "hybrid_32", "untrained_nf"):
        assert f"plots/{name}.png" in files
    assert "plots/correlation.csv" in files
    summary = json.loads(files["eval/summary.json"])
    assert set(summary["models"]["hybrid_32"]["seeds"]) == {"0", "1"}


def test_outputs_are_byte_deterministic(run, monkeypatch):
    root, cfg = run
    monkeypatch.setenv(datagen.WORKERS_ENV, "3")
    _pipeline(cfg, root / "b")
    a, b = _files(root / "a"), _files(root / "b")
    assert sorted(a) == sorted(b)
    same = {k for k in a if a[k] == b[k]}
    assert set(a) - same <= {"train/seed0/curve.csv", "train/seed1/curve.csv",
                             "train/seed0/provenance.json", "train/seed1/provenance.json"}
    assert _untimed(a) == _untimed(b)


def test_provenance_contents(run):
    root, _ = run
    prov = json.loads((root / "a" / "data" / "provenance.json").read_text())
    for key in ("config_sha256", "code_version", "source_sha256", "seeds", "scheme",
                "conv_backend", "outputs", "inputs"):
        assert key in prov
    assert prov["command"] == "generate"
    assert prov["seeds"] == [0, 1, 2, 3, 100, 101]
    data = root / "a" / "data"
    import hashlib
    for name, digest in prov["outputs"].items():
        assert hashlib.sha256((data / name).read_bytes()).hexdigest() == digest
    ev = json.loads((root / "a" / "eval" / "provenance.json").read_text())
    assert "train/seed0/checkpoint.shck" in ev["inputs"]
    assert ev["seeds"] == [0, 1]
    assert "timestamp" not in json.dumps(prov).lower()


def test_seed_override_changes_data(run, tmp_path):
    _, cfg = run
    assert main(["generate", "--config", cfg, "--out", str(tmp_path / "s"), "--seed", "7"]) == 0
    prov = json.loads((tmp_path / "s" / "data" / "provenance.json").read_text())
    assert prov["seeds"][0] == 7


def test_dry_run_writes_nothing(run, tmp_path, capsys):
    _, cfg = run
    for stage in STAGES:
        assert main([stage, "--config", cfg, "--out", str(tmp_path / "d"), "--dry-run"]) == 0
    assert not (tmp_path / "d").exists()
    out = capsys.readouterr().out
    assert "config sha256" in out and "would write" in out
    assert yaml.safe_load(out.split("# config")[0])["name"] == "tiny"


def test_existing_outputs_need_force(run, capsys):
    root, cfg = run
    out = str(root / "a")
    before = (root / "a" / "data" / "train" / "n32" / "data.bin").read_bytes()
    assert main(["generate", "--config", cfg, "--out", out]) == EXIT_USER
    assert "--force" in capsys.readouterr().err
    assert main(["generate", "--config", cfg, "--out", out, "--force"]) == EXIT_OK
    assert (root / "a" / "data" / "train" / "n32" / "data.bin").read_bytes() == before


def test_resume_continues_training(run, tmp_path):
    root, cfg = run
    out = tmp_path / "r"
    assert main(["generate", "--config", cfg, "--out", str(out)]) == 0
    short = _write_cfg(tmp_path / "short.cfg",
                       train={**TINY["train"], "total_steps": 5})
    assert main(["train", "--config", short, "--out", str(out)]) == 0
    assert main(["train", "--config", cfg, "--out", str(out), "--resume"]) == 0
    for s in (0, 1):
        name = f"train/seed{s}/{CHECKPOINT}"
        assert (out / name).read_bytes() == (root / "a" / name).read_bytes()


def test_user_errors(run, tmp_path, capsys):
    _, cfg = run
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "none")]) == EXIT_USER
    assert "generate" in capsys.readouterr().err
    assert main(["plot", "--config", cfg, "--out", str(tmp_path / "none")]) == EXIT_USER
    assert main(["generate", "--config", str(tmp_path / "missing.cfg")]) == EXIT_USER
    bad = _write_cfg(tmp_path / "bad.cfg", data={**TINY["data"], "equation": "navier"})
    assert main(["generate", "--config", bad, "--out", str(tmp_path / "x")]) == EXIT_USER
    assert main(["frobnicate"]) == EXIT_USER
    assert main(["generate"]) == EXIT_USER
    assert main(["evaluate", "--config", cfg, "--out", str(tmp_path / "none"),
                 str(tmp_path / "nope.shck")]) == EXIT_USER


def test_runtime_failure_exit_code(run, tmp_path, monkeypatch, capsys):
    _, cfg = run

    def explode(c, spec, stepper, tendency=None):
        return c * np.nan

    monkeypatch.setattr(datagen, "advance", explode)
    assert main(["generate", "--config", cfg, "--out", str(tmp_path / "x")]) == EXIT_RUNTIME
    assert "runtime failure" in capsys.readouterr().err


def test_bad_worker_env_is_rejected(run, tmp_path, monkeypatch):
    _, cfg = run
    monkeypatch.setenv(datagen.WORKERS_ENV, "two")
    assert main(["generate", "--config", cfg, "--out", str(tmp_path / "x")]) == EXIT_USER
    assert not (tmp_path / "x").exists()


def test_packaged_config_by_name(capsys):
    assert main(["generate", "--config", "burgers_desk", "--dry-run"]) == 0
    assert "unstable_burgers" in capsys.readouterr().out
