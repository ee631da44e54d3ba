"""Unrolled training of the learned correction.

The objective for a batch of windows ``u(., 0..T)`` is

    L = beta * sum_{x, 1<=t<=T} |u_pred(x, t) - u(x, t)|^2,
    1 / beta = sum_{x, 1<=t<=T} |u(x, 0) - u(x, t)|^2,

so a model that predicts "no change" scores exactly 1. Both sums run over
the compared quantity (u in 1D, velocity in 2D) and over the whole batch.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import autodiff as ad
from .correction_model import Model, observe_data
from .datagen import TrajectoryDataset
from .evaluation import correlation_series, run_model
from .neural import (AdamState, adam_update, ema_update, init_params, load_checkpoint,
                     save_checkpoint)

log = logging.getLogger(__name__)

CLAMP = 1e6
CURVE_COLUMNS = ("step", "train_loss", "val_loss", "val_loss_raw", "long_unroll_mse",
                 "corr_at_horizon", "wallclock_s")


class TrainingAborted(RuntimeError):
    def __init__(self, step: int, checkpoint: Optional[str]):
        where = f"; last finite state saved to {checkpoint}" if checkpoint else ""
        super().__init__(f"training aborted at step {step}: loss not finite{where}")
        self.step = step
        self.checkpoint = checkpoint


@dataclass(frozen=True)
class TrainConfig:
    unroll_steps: int = 8
    batch_size: int = 8
    total_steps: int = 5000
    learning_rate: float = 1e-3
    seed: int = 0
    eval_every: int = 500
    eval_horizon: int = 500      # coarse steps for the long validation unroll
    eval_samples: int = 8        # validation ICs used for the long unroll
    val_windows: int = 32        # fixed windows for the T-step validation loss
    ema_decay: float = 0.98
    patience: int = 20           # consecutive non-finite steps before aborting

    def __post_init__(self):
        if self.unroll_steps < 1:
            raise ValueError("unroll_steps must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.total_steps < 0:
            raise ValueError("total_steps must be >= 0")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.eval_every < 1 or self.eval_horizon < 1 or self.eval_samples < 1:
            raise ValueError("eval_every, eval_horizon and eval_samples must be >= 1")
        if not 0 <= self.ema_decay < 1:
            raise ValueError("ema_decay must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


def beta_constant(windows: np.ndarray) -> float:
    """``windows`` is ``[batch, T+1, channel, *grid]`` of compared quantities."""
    w = np.asarray(windows, dtype=float)
    if w.ndim < 4 or w.shape[1] < 2:
        raise ValueError("windows need shape [batch, T+1, channel, *grid] with T >= 1")
    denom = float(((w[:, 1:] - w[:, :1]) ** 2).sum())
    if denom == 0.0:
        raise ValueError("degenerate windows: trajectories are static, beta is undefined")
    return 1.0 / denom


def unrolled_loss(model: Model, params, initial: np.ndarray, targets: np.ndarray,
                  beta: float, unroll_steps: Optional[int] = None):
    """Beta-scaled squared error of a ``T``-step unroll; returns ``(loss, diverged)``.

    ``initial`` is stored data ``[batch, 1, *grid]``; ``targets`` are the compared
    quantities ``[batch, >=T, channel, *grid]`` for steps 1..T. Once a step's
    error exceeds ``CLAMP / beta`` (or is not finite) that cap is charged for
    it and every remaining step and the unroll stops.
    """
    t_max = targets.shape[1] if unroll_steps is None else unroll_steps
    if targets.shape[1] < t_max:
        raise ValueError(f"window holds {targets.shape[1]} targets, unroll needs {t_max}")
    cap = CLAMP / beta
    c = model.encode(initial)
    total = 0.0
    with np.errstate(all="ignore"):
        for t in range(t_max):
            c = model.step(c, params)
            err = ad.sum((model.observe(c) - targets[:, t]) ** 2)
            v = float(ad.value(err))
            if not v <= cap:
                return (total + cap * (t_max - t)) * beta, True
            total = total + err
    return total * beta, False


@dataclass
class LearningCurve:
    rows: list = field(default_factory=list)

    def append(self, **row) -> None:
        if self.rows and row["step"] <= self.rows[-1]["step"]:
            raise ValueError("learning-curve steps must increase")
        self.rows.append({k: row[k] for k in CURVE_COLUMNS})

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows], dtype=float)

    def to_csv(self, wallclock: bool = True) -> str:
        cols = CURVE_COLUMNS if wallclock else CURVE_COLUMNS[:-1]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for r in self.rows:
            w.writerow([r["step"]] + [_fmt(r[k]) for k in cols[1:]])
        return buf.getvalue()


def _fmt(x) -> str:
    x = float(x)
    return "nan" if math.isnan(x) else ("inf" if x == math.inf else repr(x))


class _Windows:
    """All (sample, start) windows of ``T + 1`` frames from one dataset."""

    def __init__(self, data: TrajectoryDataset, unroll_steps: int):
        self.raw = data.data                                   # [S, F, 1, *grid]
        grid = data.grid
        self.obs = np.stack([observe_data(self.raw[:, f], grid)
                             for f in range(self.raw.shape[1])], axis=1)
        self.t = unroll_steps
        starts = self.raw.shape[1] - unroll_steps
        if starts < 1:
            raise ValueError(f"trajectories of {self.raw.shape[1]} frames are too short "
                             f"for {unroll_steps} unroll steps")
        self.index = [(s, i) for s in range(self.raw.shape[0]) for i in range(starts)]

    def __len__(self) -> int:
        return len(self.index)

    def batch(self, picks):
        s = np.array([self.index[p][0] for p in picks])
        i = np.array([self.index[p][1] for p in picks])
        initial = self.raw[s, i]
        obs = np.stack([self.obs[s, i + k] for k in range(self.t + 1)], axis=1)
        return initial, obs


def _batch_loss(model: Model, params, initial, obs):
    beta = beta_constant(obs)
    return unrolled_loss(model, params, initial, obs[:, 1:], beta)


def evaluate_loss(model: Model, params, windows: _Windows, picks) -> float:
    initial, obs = windows.batch(picks)
    loss, _ = _batch_loss(model, params, initial, obs)
    return float(ad.value(loss))


def long_unroll(model: Model, params, data: TrajectoryDataset, horizon: int, samples: int):
    """Mean squared error over a ``horizon``-step unroll and median correlation at its end."""
    n_frames = min(horizon + 1, data.data.shape[1])
    truth = np.stack([observe_data(data.data[:samples, f], data.grid) for f in range(n_frames)],
                     axis=1)
    pred, _ = run_model(model.with_params(params), data.data[:samples, 0], n_frames, 1, data.grid)
    with np.errstate(all="ignore"):
        mse = float(np.mean((pred - truth) ** 2))
    corr = correlation_series(pred[:, -1], truth[:, -1], data.grid.ndim)
    return (mse if math.isfinite(mse) else math.inf), float(np.median(np.nan_to_num(corr, nan=-1.0)))


def _check_compatible(model: Model, data: TrajectoryDataset, what: str) -> None:
    if model.kind == "spectral":
        raise ValueError("a spectral-only model has nothing to train")
    if data.equation != model.spec.name:
        raise ValueError(f"{what} data is {data.equation}, model solves {model.spec.name}")
    if data.grid.n != model.grid.n or data.grid.ndim != model.grid.ndim:
        raise ValueError(f"{what} data resolution {data.grid.n} does not match model "
                         f"resolution {model.grid.n}")
    if not np.isclose(data.dt, model.stepper.dt, rtol=1e-9):
        raise ValueError(f"{what} data spacing {data.dt} differs from model step {model.stepper.dt}")


def _save(path, cfg, model, params, ema, opt, curve, step, train_seen):
    arrays = {f"params/{k}": v for k, v in params.items()}
    arrays.update({f"ema/{k}": v for k, v in ema.items()})
    arrays.update({f"adam_m/{k}": v for k, v in opt.m.items()})
    arrays.update({f"adam_v/{k}": v for k, v in opt.v.items()})
    header = {"kind": "training", "step": step, "train_config": cfg.to_dict(),
              "correction": model.correction.to_dict(), "model_kind": model.kind,
              "adam": {"lr": opt.lr, "beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps,
                       "step": opt.step},
              # wall-clock time is left out so checkpoints are byte-deterministic
              "curve": [{k: _fmt(v) if k != "step" else v for k, v in r.items()
                         if k != "wallclock_s"} for r in curve.rows],
              "train_losses_since_eval": [repr(x) for x in train_seen]}
    tmp = Path(str(path) + ".tmp")
    digest = save_checkpoint(tmp, arrays, header)
    tmp.replace(path)
    return digest


def load_training_checkpoint(path):
    header, arrays = load_checkpoint(path)
    if header.get("kind") != "training":
        raise ValueError(f"{path}: not a training checkpoint")

    def group(prefix):
        return {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}

    return header, group("params/"), group("ema/"), group("adam_m/"), group("adam_v/")


def train(cfg: TrainConfig, model: Model, train_data: TrajectoryDataset,
          val_data: Optional[TrajectoryDataset] = None, checkpoint=None, resume: bool = False):
    """Adam on shuffled ``T``-step windows with an EMA of the weights.

    Returns ``(params, ema_params, curve)``. With ``checkpoint`` set, the full
    optimizer state is written there at every evaluation, and ``resume``
    continues from it. Validation numbers in the curve use the EMA weights
    (``val_loss_raw`` uses the raw weights).
    """
    val_data = train_data if val_data is None else val_data
    _check_compatible(model, train_data, "training")
    _check_compatible(model, val_data, "validation")
    model.correction.epd.check_grid(model.grid.n)
    windows = _Windows(train_data, cfg.unroll_steps)
    val_windows = _Windows(val_data, cfg.unroll_steps)
    n_val = min(cfg.val_windows, len(val_windows))
    val_picks = np.linspace(0, len(val_windows) - 1, n_val).round().astype(int)
    batch = min(cfg.batch_size, len(windows))
    per_epoch = len(windows) // batch

    curve = LearningCurve()
    train_seen: list = []
    start = 0
    if resume and checkpoint is not None and Path(checkpoint).exists():
        header, params, ema, m, v = load_training_checkpoint(checkpoint)
        if header["train_config"]["seed"] != cfg.seed:
            raise ValueError("checkpoint was written with a different seed")
        start = int(header["step"])
        a = header["adam"]
        opt = AdamState(a["lr"], a["beta1"], a["beta2"], a["eps"], a["step"], m, v)
        for r in header["curve"]:
            row = {k: (int(x) if k == "step" else float(x)) for k, x in r.items()}
            curve.rows.append({**row, "wallclock_s": math.nan})
        train_seen = [float(x) for x in header["train_losses_since_eval"]]
        log.info("resumed from %s at step %d", checkpoint, start)
    else:
        params = init_params(model.correction.epd, cfg.seed)
        ema = {k: p.copy() for k, p in params.items()}
        opt = AdamState.create(params, cfg.learning_rate)

    t0 = time.perf_counter()
    last_finite = (params, ema, opt)
    bad_run = 0
    for step in range(start, cfg.total_steps):
        epoch, pos = divmod(step, per_epoch)
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(windows))
        picks = order[pos * batch:(pos + 1) * batch]
        initial, obs = windows.batch(picks)
        loss, grads, diverged = ad.value_and_grad(
            lambda p: _batch_loss(model, p, initial, obs), params)
        finite = math.isfinite(loss) and all(np.all(np.isfinite(g)) for g in grads.values())
        if not finite:
            bad_run += 1
            log.warning("step %d: non-finite loss or gradient (%d in a row)", step, bad_run)
            if bad_run >= cfg.patience:
                saved = None
                if checkpoint is not None:
                    p, e, o = last_finite
                    _save(checkpoint, cfg, model, p, e, o, curve, step, train_seen)
                    saved = str(checkpoint)
                raise TrainingAborted(step, saved)
            continue
        bad_run = 0
        params, opt = adam_update(opt, params, grads)
        ema = ema_update(ema, params, cfg.ema_decay)
        last_finite = (params, ema, opt)
        train_seen.append(loss)
        done = step + 1
        if done % cfg.eval_every == 0 or done == cfg.total_steps:
            val = evaluate_loss(model, ema, val_windows, val_picks)
            val_raw = evaluate_loss(model, params, val_windows, val_picks)
            mse, corr = long_unroll(model, ema, val_data, cfg.eval_horizon, cfg.eval_samples)
            curve.append(step=done, train_loss=float(np.mean(train_seen)), val_loss=val,
                         val_loss_raw=val_raw, long_unroll_mse=mse, corr_at_horizon=corr,
                         wallclock_s=time.perf_counter() - t0)
            log.info("step %d train %.4g val %.4g (raw %.4g) unroll mse %.4g corr %.3f",
                     done, np.mean(train_seen), val, val_raw, mse, corr)
            train_seen = []
            if checkpoint is not None:
                _save(checkpoint, cfg, model, params, ema, opt, curve, done, train_seen)
    return params, ema, curve


def curve_summary(curve: LearningCurve) -> dict:
    """Final numbers plus the EMA smoothing check on the validation loss."""
    if not curve.rows:
        return {}
    last = curve.rows[-1]
    return {"final_step": last["step"], "final_val_loss": last["val_loss"],
            "final_val_loss_raw": last["val_loss_raw"],
            "val_loss_variance": float(np.var(curve.column("val_loss"))),
            "val_loss_raw_variance": float(np.var(curve.column("val_loss_raw")))}


def write_curve(curve: LearningCurve, path) -> None:
    Path(path).write_text(curve.to_csv(), encoding="utf-8")


def dumps_summary(curve: LearningCurve) -> str:
    return json.dumps(curve_summary(curve), indent=2, sort_keys=True) + "\n"
