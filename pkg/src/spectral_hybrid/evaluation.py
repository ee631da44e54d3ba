"""Accuracy metrics and model comparison against filtered reference data.

Comparisons happen on an evaluation grid. A model running at a finer
resolution is truncated to that grid and filtered exactly like the reference
data; 2D fields are compared as velocity.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .correction_model import Model, observe_data
from .datagen import TrajectoryDataset
from .integrators import diverged
from .spectral_core import Grid, RealField, filter_factors, inv, truncate, velocity_from_vorticity

NEVER = math.inf


def _values(x) -> np.ndarray:
    return np.asarray(x.values if isinstance(x, RealField) else x, dtype=float)


def mae(pred, truth, normalize: bool = False) -> float:
    """Sum over grid points (and channels) of |pred - truth|; mean instead if ``normalize``."""
    p, t = _values(pred), _values(truth)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {t.shape}")
    d = np.abs(p - t)
    return float(d.mean() if normalize else d.sum())


def correlation(pred, truth) -> float:
    p, t = _values(pred).ravel(), _values(truth).ravel()
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {t.shape}")
    npn, ntn = np.linalg.norm(p), np.linalg.norm(t)
    if npn == 0 or ntn == 0:
        raise ValueError("correlation undefined for a zero-norm field")
    return float(np.dot(p, t) / (npn * ntn))


def mae_series(pred: np.ndarray, truth: np.ndarray, nd: int) -> np.ndarray:
    """Per-frame MAE over the trailing channel + grid axes; NaN predictions give inf."""
    axes = tuple(range(-nd - 1, 0))
    out = np.abs(pred - truth).sum(axis=axes)
    return np.where(np.isfinite(out), out, np.inf)


def correlation_series(pred: np.ndarray, truth: np.ndarray, nd: int) -> np.ndarray:
    """Per-frame correlation; NaN where the prediction is non-finite or zero."""
    axes = tuple(range(-nd - 1, 0))
    with np.errstate(all="ignore"):
        num = (pred * truth).sum(axis=axes)
        den = np.sqrt((pred * pred).sum(axis=axes) * (truth * truth).sum(axis=axes))
        out = num / den
    return np.where(np.isfinite(out), out, np.nan)


def first_below(corr: Sequence[float], times: Sequence[float], threshold: float) -> float:
    """First time whose correlation is below ``threshold`` (NaN counts as below); NEVER if none."""
    corr, times = np.asarray(corr, dtype=float), np.asarray(times, dtype=float)
    if corr.shape != times.shape:
        raise ValueError(f"misaligned times: {corr.shape} correlations vs {times.shape} times")
    below = ~(corr >= threshold)
    return float(times[np.argmax(below)]) if below.any() else NEVER


def time_to_decorrelation(pred_traj, truth_traj, times, threshold: float = 0.95) -> float:
    """``pred_traj``/``truth_traj`` are ``[time, channel, *grid]`` real arrays."""
    p, t = np.asarray(pred_traj, dtype=float), np.asarray(truth_traj, dtype=float)
    if p.shape != t.shape or p.shape[0] != len(times):
        raise ValueError("misaligned times: trajectories and times must share the time axis")
    nd = p.ndim - 2
    return first_below(correlation_series(p, t, nd), times, threshold)


# -- running models -------------------------------------------------------------

def observe_coeffs(c: np.ndarray, grid: Grid, velocity_state: bool = False) -> np.ndarray:
    if grid.ndim == 2 and not velocity_state:
        c = velocity_from_vorticity(c, grid)
    return inv(c, grid.ndim)


def run_model(model: Model, initial: np.ndarray, n_frames: int, steps_per_frame: int,
              eval_grid: Grid, filter_spec=None):
    """Roll a model from real-space ICs ``[sample, 1, *model grid]``.

    Returns ``(observed, diverged_at)``: observed fields on ``eval_grid`` of shape
    ``[sample, frame, channel, *eval grid]`` (NaN after divergence) and the
    first diverged frame per sample (-1 if none).
    """
    grid = model.grid
    nd = grid.ndim
    c = model.encode(initial)
    factors = None
    if grid.n != eval_grid.n and filter_spec is not None:
        factors = filter_factors(eval_grid, filter_spec)

    def project(x):
        if grid.n != eval_grid.n:
            x = truncate(x, grid, eval_grid)
            if factors is not None:
                x = x * factors
        return observe_coeffs(x, eval_grid, model.velocity_state)

    first = project(c)
    out = np.full((c.shape[0], n_frames) + first.shape[1:], np.nan)
    out[:, 0] = first
    bad_at = np.full(c.shape[0], -1)
    with np.errstate(all="ignore"):
        for f in range(1, n_frames):
            for _ in range(steps_per_frame):
                c = model.step(c)
            bad = diverged(c, nd) & (bad_at < 0)
            if bad.any():
                bad_at[bad] = f
                c = c.copy()
                c[bad] = 0.0  # keep the batch finite; these samples are masked below
            obs = project(c)
            obs[bad_at >= 0] = np.nan
            out[:, f] = obs
            if (bad_at >= 0).all():
                break
    return out, bad_at


@dataclass
class ModelEntry:
    name: str
    model: Model
    initial: TrajectoryDataset  # same samples as the truth, at the model's resolution
    seed: Optional[int] = None


@dataclass
class MetricsReport:
    times: np.ndarray
    threshold: float
    rows: list = field(default_factory=list)  # (model, seed, sample, mae[t], corr[t], ttd, diverged_at)
    # model -> observed frames [frame, channel, *grid] of the first sample (first seed only)
    trajectories: dict = field(default_factory=dict)
    truth: Optional[np.ndarray] = None

    def series(self, model: str, what: str = "mae") -> np.ndarray:
        key = 3 if what == "mae" else 4
        return np.array([r[key] for r in self.rows if r[0] == model])

    def ttd(self, model: str) -> np.ndarray:
        return np.array([r[5] for r in self.rows if r[0] == model])

    def models(self) -> list:
        seen = []
        for r in self.rows:
            if r[0] not in seen:
                seen.append(r[0])
        return seen

    def seeds(self, model: str) -> list:
        out = []
        for r in self.rows:
            if r[0] == model and r[1] not in out:
                out.append(r[1])
        return out

    def median_ttd(self, model: str, seed=None) -> float:
        v = [r[5] for r in self.rows if r[0] == model and (seed is None or r[1] == seed)]
        return float(np.median(v))

    def median_mae(self, model: str, seed=None) -> float:
        """Median over samples of the horizon-averaged MAE."""
        v = [np.mean(r[3]) for r in self.rows if r[0] == model and (seed is None or r[1] == seed)]
        return float(np.median(v))

    def summary(self) -> dict:
        out = {}
        for m in self.models():
            per_seed = {}
            for s in self.seeds(m):
                per_seed[_seed_label(s)] = {
                    "median_time_to_decorrelation": _num(self.median_ttd(m, s)),
                    "median_mae": _num(self.median_mae(m, s), "inf"),
                    "diverged_samples": int(sum(1 for r in self.rows
                                                if r[0] == m and r[1] == s and r[6] >= 0)),
                }
            ttds = [self.median_ttd(m, s) for s in self.seeds(m)]
            maes = [self.median_mae(m, s) for s in self.seeds(m)]
            out[m] = {"seeds": per_seed,
                      "best_median_time_to_decorrelation": _num(max(ttds)),
                      "median_of_seed_medians_time_to_decorrelation": _num(float(np.median(ttds))),
                      "best_median_mae": _num(min(maes), "inf"),
                      "median_of_seed_medians_mae": _num(float(np.median(maes)), "inf")}
        return {"threshold": self.threshold, "horizon_frames": len(self.times),
                "final_time": float(self.times[-1]), "models": out}

    def metrics_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["model", "seed", "sample", "t", "mae", "corr"])
        for m, s, i, ma, co, _, _ in self.rows:
            for t, a, c in zip(self.times, ma, co):
                w.writerow([m, _seed_label(s), i, _fmt(t), _fmt(a), _fmt(c)])
        for m in self.models():
            groups = [(_seed_label(s), [r for r in self.rows if r[0] == m and r[1] == s])
                      for s in self.seeds(m)]
            if len(groups) > 1:
                groups.append(("all", [r for r in self.rows if r[0] == m]))
            for label, rows in groups:
                ma = np.array([r[3] for r in rows])
                co = np.array([np.nan_to_num(r[4], nan=-1.0) for r in rows])
                for stat, fn in (("median", np.median), ("min", np.min), ("max", np.max)):
                    a, c = fn(ma, axis=0), fn(co, axis=0)
                    for t, x, y in zip(self.times, a, c):
                        w.writerow([m, label, stat, _fmt(t), _fmt(x), _fmt(y)])
        return buf.getvalue()

    def ttd_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["model", "seed", "sample", "time_to_decorrelation", "diverged_at_frame"])
        for m, s, i, _, _, ttd, bad in self.rows:
            w.writerow([m, _seed_label(s), i, "never" if ttd == NEVER else _fmt(ttd), bad])
        return buf.getvalue()


def _seed_label(s) -> str:
    return "-" if s is None else str(s)


def _fmt(x) -> str:
    x = float(x)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return repr(x)


def _num(x: float, infinite: str = "never"):
    return infinite if x == math.inf else (None if math.isnan(x) else float(x))


def compare_models(entries: Sequence[ModelEntry], truth: TrajectoryDataset, horizon: int,
                   threshold: float = 0.95) -> MetricsReport:
    """Run every model from every truth IC for ``horizon`` frames and score it."""
    eval_grid = truth.grid
    n_frames = min(horizon + 1, truth.data.shape[1])
    times = truth.times[:n_frames]
    truth_obs = np.stack([observe_data(truth.data[:, f], eval_grid) for f in range(n_frames)], axis=1)
    report = MetricsReport(times, threshold)
    report.truth = truth_obs[0]
    for e in entries:
        m = e.model
        if m.spec.name != truth.equation:
            raise ValueError(f"model {e.name} solves {m.spec.name}, data is {truth.equation}")
        if m.grid.n < eval_grid.n or m.grid.n % eval_grid.n:
            raise ValueError(f"model {e.name} resolution {m.grid.n} must be a multiple of "
                             f"the evaluation resolution {eval_grid.n}")
        ratio = m.grid.n // eval_grid.n
        if not np.isclose(m.stepper.dt * ratio, truth.dt, rtol=1e-9):
            raise ValueError(f"model {e.name} time step {m.stepper.dt} is inconsistent with "
                             f"data spacing {truth.dt} at ratio {ratio}")
        if e.initial.manifest["sample_seeds"] != truth.manifest["sample_seeds"]:
            raise ValueError(f"model {e.name} initial data does not share the truth samples")
        obs, bad_at = run_model(m, e.initial.data[:, 0], n_frames, ratio, eval_grid,
                                truth.filter_spec())
        ma = mae_series(obs, truth_obs, eval_grid.ndim)
        co = correlation_series(obs, truth_obs, eval_grid.ndim)
        report.trajectories.setdefault(e.name, obs[0])
        for i in range(obs.shape[0]):
            ttd = first_below(co[i], times, threshold)
            report.rows.append((e.name, e.seed, i, ma[i], co[i], ttd, int(bad_at[i])))
    return report


def write_report(report: MetricsReport, out_dir) -> None:
    """metrics.csv, ttd.csv, summary.json and ``trajectories/<model>.npy`` (first sample)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if report.trajectories:
        tdir = out / "trajectories"
        tdir.mkdir(exist_ok=True)
        for name, traj in [("truth", report.truth)] + list(report.trajectories.items()):
            if traj is not None:
                np.save(tdir / f"{name}.npy", np.ascontiguousarray(traj, dtype="<f8"))
    (out / "metrics.csv").write_text(report.metrics_csv(), encoding="utf-8")
    (out / "ttd.csv").write_text(report.ttd_csv(), encoding="utf-8")
    (out / "summary.json").write_text(json.dumps(report.summary(), indent=2, sort_keys=True) + "\n",
                                      encoding="utf-8")
