"""Ground-truth trajectories: random ICs, reference solve, truncation, filtering.

On-disk dataset layout (one directory per split and resolution)::

    manifest.json   generation parameters, grid, times, array layout (UTF-8 JSON)
    data.bin        float64 little-endian, C order, shape [sample, time, channel, x(, y)]
    checksums       "<sha256>  <file>" lines for manifest.json and data.bin

Stored fields are real-space samples of the prognostic variable (u in 1D,
vorticity in 2D).
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .equations import EquationSpec, make_equation, params_from_dict
from .integrators import (SCHEME_ID, StepperConfig, advance, diverged, max_velocity,
                          stable_time_step)
from .spectral_core import (FilterSpec, Grid, filter_factors, fwd, inv, truncate)

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
IC_VERSION = "ic-spectrum/v1"
IC_PEAK = 4.0
CHUNK = 4  # samples per reference-solve batch; fixed so results do not depend on worker count
WARMUP_CFL = 0.5
WORKERS_ENV = "SPECTRAL_HYBRID_WORKERS"


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class GenerationConfig:
    equation: str
    reference_resolution: int
    reference_dt: float
    warmup_time: float
    simulation_time: float
    target_resolutions: tuple
    sample_count: int = 16
    seed: int = 0
    params: dict = field(default_factory=dict)
    nonlinear_form: str = "advective"
    filter: Optional[FilterSpec] = field(default_factory=FilterSpec)
    split: str = "train"

    def __post_init__(self):
        object.__setattr__(self, "target_resolutions", tuple(int(n) for n in self.target_resolutions))
        if not (self.warmup_time > 0 and self.simulation_time > 0):
            raise ValueError("warmup_time and simulation_time must be positive")
        if not self.reference_dt > 0:
            raise ValueError("reference_dt must be positive")
        if self.sample_count < 1:
            raise ValueError("sample_count must be >= 1")
        for n in self.target_resolutions:
            if n > self.reference_resolution or self.reference_resolution % n:
                raise ValueError(f"target resolution {n} must divide {self.reference_resolution}")

    def spec(self, n: int = None) -> EquationSpec:
        n = self.reference_resolution if n is None else n
        return make_equation(self.equation, n, params_from_dict(self.equation, self.params),
                             self.nonlinear_form)

    def stride(self, n: int) -> int:
        return self.reference_resolution // n

    @property
    def warmup_steps(self) -> int:
        return int(round(self.warmup_time / self.reference_dt))

    @property
    def simulation_steps(self) -> int:
        """Reference steps recorded, rounded down to a multiple of the largest stride."""
        s = max(self.stride(n) for n in self.target_resolutions)
        return int(round(self.simulation_time / self.reference_dt)) // s * s

    def sample_seeds(self) -> list:
        return [self.seed + i for i in range(self.sample_count)]


@dataclass
class TrajectoryDataset:
    manifest: dict
    data: np.ndarray  # [sample, time, channel, *grid]

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        m = self.manifest
        shape = [m["sample_count"], len(m["times"]), 1] + [m["grid"]["n"]] * m["grid"]["ndim"]
        if list(self.data.shape) != shape:
            raise DatasetError(f"array shape {self.data.shape} does not match manifest {shape}")

    @property
    def grid(self) -> Grid:
        return Grid(**self.manifest["grid"])

    @property
    def times(self) -> np.ndarray:
        return np.asarray(self.manifest["times"])

    @property
    def dt(self) -> float:
        return float(self.manifest["dt"])

    @property
    def equation(self) -> str:
        return self.manifest["equation"]

    def spec(self) -> EquationSpec:
        m = self.manifest
        return make_equation(m["equation"], m["grid"]["n"],
                             params_from_dict(m["equation"], m["params"]), m["nonlinear_form"])

    def filter_spec(self) -> Optional[FilterSpec]:
        f = self.manifest["filter"]
        return None if f is None else FilterSpec(**f)


def random_initial_condition(spec: EquationSpec, seed: int) -> np.ndarray:
    """Seeded random coefficients ``(1, *grid)`` with zero mean and real-space RMS 1."""
    grid = spec.grid
    rng = np.random.default_rng(seed)
    noise = fwd(rng.standard_normal(grid.shape), grid.ndim)
    k = np.sqrt(grid.k2)
    amp = np.zeros(grid.shape)
    nz = k > 0
    if grid.ndim == 1:
        amp[nz] = 1.0 / k[nz]
    else:
        amp = k * np.exp(-k * k / (2 * IC_PEAK ** 2))
    c = noise * amp
    c[(0,) * grid.ndim] = 0.0
    for ax in range(grid.ndim):
        idx = [slice(None)] * grid.ndim
        idx[ax] = grid.n // 2
        c[tuple(idx)] = 0.0
    c = fwd(inv(c, grid.ndim), grid.ndim)  # drop the round-off imaginary part
    c[(0,) * grid.ndim] = 0.0
    rms = np.sqrt(np.mean(inv(c, grid.ndim) ** 2))
    return (c / rms)[None]


def _solve_chunk(cfg: GenerationConfig, seeds: list) -> dict:
    """Reference solve for a few samples; returns ``{n: real array [s, t, 1, *grid]}``."""
    spec = cfg.spec()
    grid = spec.grid
    stepper = StepperConfig(cfg.reference_dt, filter=cfg.filter)
    c = np.stack([random_initial_condition(spec, s) for s in seeds])
    targets = {n: Grid(grid.ndim, n, grid.length) for n in cfg.target_resolutions}
    factors = {n: (np.ones(g.shape) if cfg.filter is None else filter_factors(g, cfg.filter))
               for n, g in targets.items()}
    frames = {n: [] for n in targets}

    def record(x, i):
        for n, g in targets.items():
            if i % cfg.stride(n) == 0:
                frames[n].append(truncate(x, grid, g) * factors[n])

    with np.errstate(all="ignore"):
        try:
            c = _warm_up(c, spec, stepper, cfg.warmup_steps)
        except RuntimeError as e:
            log.error("%s for sample seed(s) %s", e, seeds)
            raise RuntimeError(f"{e} for sample seed(s) {seeds}") from None
        record(c, 0)
        for i in range(1, cfg.simulation_steps + 1):
            c = advance(c, spec, stepper)
            bad = diverged(c, grid.ndim)
            if np.any(bad):
                failed = [s for s, b in zip(seeds, bad) if b]
                log.error("reference solve diverged at step %d for seed(s) %s", i, failed)
                raise RuntimeError(f"reference solve diverged for sample seed(s) {failed}")
            record(c, i)
    return {n: inv(np.stack(f, axis=1), grid.ndim) for n, f in frames.items()}


def _warm_up(c, spec: EquationSpec, stepper: StepperConfig, n_steps: int):
    """Discarded spin-up; each reference step is split into CFL-limited substeps.

    Random ICs are rougher than the attractor, so the pinned reference step
    can violate the explicit stability limit during the initial transient.
    """
    grid = spec.grid
    for i in range(n_steps):
        vmax = max(max_velocity(c, grid), 1e-12)
        n_sub = max(1, math.ceil(stepper.dt / stable_time_step(grid, vmax, WARMUP_CFL)))
        sub = stepper if n_sub == 1 else replace(stepper, dt=stepper.dt / n_sub)
        for _ in range(n_sub):
            c = advance(c, spec, sub)
        if np.any(diverged(c, grid.ndim)):
            raise RuntimeError(f"warm-up diverged at reference step {i + 1}")
    return c


def worker_count() -> int:
    """Worker processes from the environment (default 1)."""
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        raise ValueError(f"{WORKERS_ENV} must be an integer") from None


def generate(cfg: GenerationConfig, workers: int = None) -> dict:
    """Run the pipeline; returns ``{resolution: TrajectoryDataset}``."""
    workers = worker_count() if workers is None else workers
    seeds = cfg.sample_seeds()
    chunks = [seeds[i:i + CHUNK] for i in range(0, len(seeds), CHUNK)]
    if workers > 1 and len(chunks) > 1:
        with ProcessPoolExecutor(min(workers, len(chunks))) as ex:
            parts = list(ex.map(_solve_chunk, [cfg] * len(chunks), chunks))
    else:
        parts = [_solve_chunk(cfg, ch) for ch in chunks]
    out = {}
    for n in cfg.target_resolutions:
        data = np.concatenate([p[n] for p in parts])
        out[n] = TrajectoryDataset(_manifest(cfg, n, data.shape[1]), data)
    return out


def _manifest(cfg: GenerationConfig, n: int, n_frames: int) -> dict:
    spec = cfg.spec()
    stride = cfg.stride(n)
    dt = cfg.reference_dt * stride
    return {
        "format_version": FORMAT_VERSION,
        "equation": cfg.equation,
        "params": {k: float(v) if isinstance(v, (int, float)) else v
                   for k, v in vars(spec.params).items()},
        "nonlinear_form": cfg.nonlinear_form,
        "split": cfg.split,
        "grid": Grid(spec.grid.ndim, n, spec.grid.length).to_dict(),
        "domain_length": float(spec.grid.length),
        "reference_resolution": cfg.reference_resolution,
        "reference_dt": cfg.reference_dt,
        "warmup_time": cfg.warmup_time,
        "simulation_time": cfg.simulation_time,
        "warmup_steps": cfg.warmup_steps,
        "warmup_cfl": WARMUP_CFL,
        "simulation_steps": cfg.simulation_steps,
        "temporal_stride": stride,
        "dt": dt,
        "times": [i * dt for i in range(n_frames)],
        "sample_count": cfg.sample_count,
        "sample_seeds": cfg.sample_seeds(),
        "filter": None if cfg.filter is None else {
            "alpha": cfg.filter.alpha, "p": cfg.filter.p, "mode": cfg.filter.mode},
        "scheme": SCHEME_ID["imex_cn_rk4"],
        "ic_distribution": IC_VERSION,
        "fields": ["u"] if spec.grid.ndim == 1 else ["vorticity"],
        "layout": "[sample, time, channel, " + ("x]" if spec.grid.ndim == 1 else "x, y]"),
        "dtype": "<f8",
    }


# -- I/O ----------------------------------------------------------------------

def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_dataset(path, ds: TrajectoryDataset) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    with open(path / "manifest.json", "w", encoding="utf-8") as f:
        json.dump(ds.manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    with open(path / "data.bin", "wb") as f:
        f.write(np.ascontiguousarray(ds.data, dtype="<f8").tobytes())
    lines = [f"{_sha256(path / name)}  {name}\n" for name in ("manifest.json", "data.bin")]
    with open(path / "checksums", "w", encoding="utf-8") as f:
        f.writelines(lines)


def read_dataset(path) -> TrajectoryDataset:
    path = Path(path)
    if not (path / "manifest.json").is_file():
        raise DatasetError(f"no dataset at {path}")
    expected = {}
    with open(path / "checksums", encoding="utf-8") as f:
        for line in f:
            digest, name = line.split()
            expected[name] = digest
    for name in ("manifest.json", "data.bin"):
        if _sha256(path / name) != expected.get(name):
            raise DatasetError(f"checksum mismatch for {path / name}")
    with open(path / "manifest.json", encoding="utf-8") as f:
        manifest = json.load(f)
    if manifest.get("format_version") != FORMAT_VERSION:
        raise DatasetError(f"unsupported dataset format version {manifest.get('format_version')}"
                           f" (expected {FORMAT_VERSION})")
    data = np.fromfile(path / "data.bin", dtype="<f8")
    shape = [manifest["sample_count"], len(manifest["times"]), 1]
    shape += [manifest["grid"]["n"]] * manifest["grid"]["ndim"]
    if data.size != np.prod(shape):
        raise DatasetError(f"data.bin holds {data.size} values, manifest implies {np.prod(shape)}")
    return TrajectoryDataset(manifest, data.reshape(shape).astype(np.float64))
