"""``spectral-hybrid`` command line: generate, train, evaluate, plot.

Output layout under the run directory (``output_dir`` in the config, or ``--out``)::

    data/<split>/n<res>/     datasets (manifest.json, data.bin, checksums)
    train/seed<k>/           checkpoint.shck, curve.csv, summary.json
    eval/                    metrics.csv, ttd.csv, summary.json, trajectories/*.npy
    plots/                   <model>.png, correlation.csv

Every stage directory also gets a ``provenance.json``. Exit codes: 0 success,
1 user error (bad config, missing inputs, refusing to overwrite), 2 runtime
failure (divergence, aborted training).
"""

from __future__ import annotations

import hashlib
import json
import logging
import platform
import shutil
import sys
from importlib import metadata
from pathlib import Path

import click
import numpy as np
import yaml

from . import datagen, evaluation, kernels, plotting, training
from .config import ConfigError, RunConfig, load_config
from .integrators import SCHEME_ID
from .neural import init_params

log = logging.getLogger("spectral_hybrid")

EXIT_OK, EXIT_USER, EXIT_RUNTIME = 0, 1, 2
CHECKPOINT = "checkpoint.shck"


class UserError(Exception):
    pass


# -- helpers --------------------------------------------------------------------

def _source_digest() -> str:
    h = hashlib.sha256()
    root = Path(__file__).parent
    for p in sorted(root.rglob("*")):
        if p.suffix in (".py", ".pyx", ".cfg") and "__pycache__" not in p.parts:
            h.update(p.relative_to(root).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def _version() -> str:
    try:
        return metadata.version("spectral-hybrid")
    except metadata.PackageNotFoundError:
        return "unknown"


def _file_digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_provenance(directory: Path, command: str, cfg: RunConfig, seeds, inputs=(),
                     extra=None, root: Path = None) -> None:
    """Config hash, code version, seeds, scheme ids and checksums of inputs/outputs.

    Contains no timestamps or host names, so identical runs write identical bytes.
    """
    outputs = sorted(p for p in directory.rglob("*")
                     if p.is_file() and p.name != "provenance.json")
    doc = {
        "command": command,
        "config_name": cfg.name,
        "config_sha256": cfg.digest(),
        "config": cfg.to_dict(),
        "code_version": _version(),
        "source_sha256": _source_digest(),
        "conv_backend": kernels.BACKEND,
        "numpy_version": np.__version__,
        "python_version": platform.python_version(),
        "seeds": list(seeds),
        "scheme": SCHEME_ID[cfg.model.scheme],
        "reference_scheme": SCHEME_ID["imex_cn_rk4"],
        "inputs": {_relative(Path(p), root or directory): _file_digest(Path(p)) for p in inputs},
        "outputs": {p.relative_to(directory).as_posix(): _file_digest(p) for p in outputs},
    }
    if extra:
        doc.update(extra)
    (directory / "provenance.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n",
                                               encoding="utf-8")


def _relative(path: Path, root: Path) -> str:
    # inputs are recorded relative to the run directory so relocated runs match
    try:
        return path.resolve().relative_to(root.resolve()).as_posix()
    except ValueError:
        return path.as_posix()


def _prepare(directory: Path, force: bool) -> None:
    if directory.exists() and any(directory.iterdir()):
        if not force:
            raise UserError(f"{directory} already exists; pass --force to overwrite")
        shutil.rmtree(directory)
    directory.mkdir(parents=True, exist_ok=True)


def _run_dir(cfg: RunConfig, out) -> Path:
    return Path(out) if out else Path(cfg.output_dir)


def _dataset_dir(run: Path, split: str, n: int) -> Path:
    return run / "data" / split / f"n{n}"


def _read(run: Path, split: str, n: int):
    path = _dataset_dir(run, split, n)
    if not (path / "manifest.json").is_file():
        raise UserError(f"no dataset at {path}; run `generate` first")
    return datagen.read_dataset(path)


def _check_data(cfg: RunConfig, ds, path: str) -> None:
    if ds.equation != cfg.data.equation:
        raise UserError(f"dataset {path} is {ds.equation}, config expects {cfg.data.equation}")


def _init_seeds(cfg: RunConfig) -> list:
    return [cfg.seed + i for i in range(cfg.train.seeds)]


def _load(config: str, seed) -> RunConfig:
    cfg = load_config(config)
    return cfg if seed is None else cfg.with_seed(seed)


def _dry_run(cfg: RunConfig, plan: list) -> None:
    click.echo(yaml.safe_dump(cfg.to_dict(), sort_keys=True), nl=False)
    click.echo(f"# config sha256 {cfg.digest()}")
    for line in plan:
        click.echo(f"# would write {line}")


common = [
    click.option("--config", "config", required=True, help="Run config (.cfg, YAML)."),
    click.option("--seed", type=int, default=None, help="Override the run seed."),
    click.option("--out", type=click.Path(file_okay=False), default=None,
                 help="Run directory (default: output_dir from the config)."),
    click.option("--dry-run", is_flag=True, help="Print the resolved config; write nothing."),
    click.option("--force", is_flag=True, help="Overwrite existing outputs."),
]


def with_common(fn):
    for opt in reversed(common):
        fn = opt(fn)
    return fn


@click.group()
@click.option("-v", "--verbose", count=True, help="More log output (repeatable).")
def cli(verbose):
    """Pseudospectral solvers with learned corrections."""
    level = logging.WARNING - 10 * min(verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


# -- generate -------------------------------------------------------------------

@cli.command()
@with_common
def generate(config, seed, out, dry_run, force):
    """Reference solves, truncation and filtering for every configured split."""
    cfg = _load(config, seed)
    run = _run_dir(cfg, out)
    data_root = run / "data"
    plan = [str(_dataset_dir(run, s, n)) for s in cfg.data.splits for n in cfg.data.target_resolutions]
    if dry_run:
        _dry_run(cfg, plan)
        return
    try:
        datagen.worker_count()
    except ValueError as e:
        raise UserError(str(e)) from None
    _prepare(data_root, force)
    seeds = []
    for split in cfg.data.splits:
        gen = cfg.data.generation(split, cfg.seed)
        seeds += gen.sample_seeds()
        log.info("generating %s: %d samples", split, gen.sample_count)
        for n, ds in datagen.generate(gen).items():
            datagen.write_dataset(_dataset_dir(run, split, n), ds)
    write_provenance(data_root, "generate", cfg, seeds)
    click.echo(str(data_root))


# -- train ----------------------------------------------------------------------

@cli.command()
@with_common
@click.option("--resume", is_flag=True, help="Continue from existing checkpoints.")
def train(config, seed, out, dry_run, force, resume):
    """Train the configured correction, once per parameter-init seed."""
    cfg = _load(config, seed)
    run = _run_dir(cfg, out)
    seeds = _init_seeds(cfg)
    plan = [str(run / "train" / f"seed{s}") for s in seeds]
    if dry_run:
        _dry_run(cfg, plan)
        return
    n = cfg.model.resolution
    train_ds = _read(run, cfg.train.train_split, n)
    val_ds = _read(run, cfg.train.val_split, n)
    for ds, split in ((train_ds, cfg.train.train_split), (val_ds, cfg.train.val_split)):
        _check_data(cfg, ds, str(_dataset_dir(run, split, n)))
    model = cfg.trained_model()
    inputs = [_dataset_dir(run, s, n) / "checksums" for s in (cfg.train.train_split, cfg.train.val_split)]
    for s in seeds:
        d = run / "train" / f"seed{s}"
        if not resume:
            _prepare(d, force)
        d.mkdir(parents=True, exist_ok=True)
        tcfg = cfg.train.train_config(s)
        try:
            _, _, curve = training.train(tcfg, model, train_ds, val_ds, d / CHECKPOINT, resume)
        except ValueError as e:
            raise UserError(str(e)) from None
        training.write_curve(curve, d / "curve.csv")
        (d / "summary.json").write_text(training.dumps_summary(curve), encoding="utf-8")
        write_provenance(d, "train", cfg, [s], inputs, root=run)
        click.echo(str(d))


# -- evaluate -------------------------------------------------------------------

def _checkpoint_params(path: Path):
    if not path.is_file():
        raise UserError(f"checkpoint not found: {path}")
    _, _, ema, _, _ = training.load_training_checkpoint(path)
    return ema


@cli.command()
@with_common
@click.argument("checkpoints", nargs=-1, type=click.Path(dir_okay=False))
def evaluate(config, seed, out, dry_run, force, checkpoints):
    """Compare configured models on held-out data (EMA weights for trained models)."""
    cfg = _load(config, seed)
    run = _run_dir(cfg, out)
    ev = cfg.evaluate
    eval_dir = run / "eval"
    if dry_run:
        _dry_run(cfg, [str(eval_dir)])
        return
    if not ev.models:
        raise UserError("evaluate.models is empty")
    truth = _read(run, ev.split, ev.resolution)
    _check_data(cfg, truth, str(_dataset_dir(run, ev.split, ev.resolution)))
    if checkpoints:
        ckpts = [(i, Path(p)) for i, p in enumerate(checkpoints)]
    else:
        ckpts = [(s, run / "train" / f"seed{s}" / CHECKPOINT) for s in _init_seeds(cfg)]
    entries, inputs = [], [_dataset_dir(run, ev.split, ev.resolution) / "checksums"]
    for m in ev.models:
        initial = _read(run, ev.split, m.resolution)
        if m.kind == "spectral":
            entries.append(evaluation.ModelEntry(m.name, cfg.eval_model(m), initial))
            continue
        if m.trained:
            for s, path in ckpts:
                entries.append(evaluation.ModelEntry(
                    m.name, cfg.eval_model(m, _checkpoint_params(path)), initial, s))
                inputs.append(path)
        else:
            for s in _init_seeds(cfg):
                params = init_params(cfg.correction().epd, s)
                entries.append(evaluation.ModelEntry(m.name, cfg.eval_model(m, params), initial, s))
    _prepare(eval_dir, force)
    try:
        report = evaluation.compare_models(entries, truth, ev.horizon, ev.threshold)
    except ValueError as e:
        raise UserError(str(e)) from None
    evaluation.write_report(report, eval_dir)
    write_provenance(eval_dir, "evaluate", cfg, sorted({e.seed for e in entries if e.seed is not None}),
                     sorted(set(inputs)), root=run)
    click.echo(str(eval_dir))


# -- plot -----------------------------------------------------------------------

@cli.command()
@with_common
def plot(config, seed, out, dry_run, force):
    """Heatmaps (1D) or vorticity strips (2D) and correlation line data from ``eval/``."""
    cfg = _load(config, seed)
    run = _run_dir(cfg, out)
    eval_dir, plot_dir = run / "eval", run / "plots"
    if dry_run:
        _dry_run(cfg, [str(plot_dir)])
        return
    metrics = eval_dir / "metrics.csv"
    tdir = eval_dir / "trajectories"
    if not metrics.is_file() or not (tdir / "truth.npy").is_file():
        raise UserError(f"no evaluation output in {eval_dir}; run `evaluate` first")
    truth = np.load(tdir / "truth.npy")
    trajs = {p.stem: np.load(p) for p in sorted(tdir.glob("*.npy")) if p.stem != "truth"}
    grid = _read(run, cfg.evaluate.split, cfg.evaluate.resolution).grid
    _prepare(plot_dir, force)
    plotting.plot_trajectories(trajs, truth, grid, plot_dir)
    (plot_dir / "correlation.csv").write_text(
        plotting.correlation_lines(metrics.read_text(encoding="utf-8")), encoding="utf-8")
    write_provenance(plot_dir, "plot", cfg, [cfg.seed], [metrics] + sorted(tdir.glob("*.npy")),
                     {"colormap": plotting.COLORMAP}, root=run)
    click.echo(str(plot_dir))


def main(argv=None) -> int:
    try:
        cli.main(args=argv, prog_name="spectral-hybrid", standalone_mode=False)
    except click.exceptions.Exit as e:
        return e.exit_code
    except click.Abort:
        click.echo("aborted", err=True)
        return EXIT_USER
    except click.ClickException as e:
        e.show()
        return EXIT_USER
    except (UserError, ConfigError, datagen.DatasetError, FileNotFoundError) as e:
        click.echo(f"error: {e}", err=True)
        return EXIT_USER
    except Exception as e:  # noqa: BLE001 - any other failure is a runtime failure
        log.debug("runtime failure", exc_info=True)
        click.echo(f"runtime failure: {type(e).__name__}: {e}", err=True)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
