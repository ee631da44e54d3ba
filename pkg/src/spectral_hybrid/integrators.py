"""Time stepping: the IMEX physics step and the split-operator hybrid step.

The physics step treats the diagonal linear symbol with Crank-Nicolson and
the explicit tendency with the classical four-stage Runge-Kutta weights.
Stage ``i`` (node ``c_i`` in {0, 1/2, 1/2, 1}) is

    U_i = A(c_i h) u + B(c_i h) k_{i-1},
    A(s) = (1 + s lam / 2) / (1 - s lam / 2),   B(s) = s / (1 - s lam / 2),

with ``k_i = N(U_i)``, and the update is ``A(h) u + B(h) (k1 + 2 k2 + 2 k3 + k4) / 6``.
With lam = 0 this is exactly RK4; with N = 0 it is exactly Crank-Nicolson;
for the coupled problem it is second order. The exponential filter is
applied once to the result.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from .spectral_core import (FilterSpec, Grid, SpectralState, filter_factors, inv,
                            velocity_from_vorticity)

SCHEMES = ("imex_cn_rk4", "forward_euler")
SCHEME_ID = {
    "imex_cn_rk4": "imex-cn-rk4/classical-weights/v1",
    "forward_euler": "forward-euler/v1",
}
DIVERGENCE_THRESHOLD = 1e6


class SolverDivergedError(RuntimeError):
    def __init__(self, time: float):
        super().__init__(f"solver diverged at t={time:.6g}")
        self.time = time


class CflWarning(UserWarning):
    pass


@dataclass(frozen=True)
class StepperConfig:
    dt: float
    cfl_safety: float = 1.0
    filter: Optional[FilterSpec] = field(default_factory=FilterSpec)
    scheme: str = "imex_cn_rk4"

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("time step must be positive")
        if not 0 < self.cfl_safety <= 1:
            raise ValueError("cfl_safety must lie in (0, 1]")
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}; expected one of {SCHEMES}")


@dataclass(frozen=True)
class CorrectionFn:
    """A learned (or zero) correction acting on coefficient arrays."""

    fn: Optional[Callable] = None
    mode: str = "split_operator"

    def __post_init__(self):
        if self.mode not in ("split_operator", "nonlinear_term", "none"):
            raise ValueError(f"unknown correction mode {self.mode!r}")

    def __call__(self, c):
        return self.fn(c)


NO_CORRECTION = CorrectionFn(None, "none")


@lru_cache(maxsize=64)
def _cn_factors(spec, dt: float):
    # keyed on the (identity-hashed) equation object
    lam = spec.linear
    out = {}
    for s in (0.5, 1.0):
        denom = 1.0 - 0.5 * s * dt * lam
        out[s] = ((1.0 + 0.5 * s * dt * lam) / denom, s * dt / denom)
    return out


@lru_cache(maxsize=64)
def _filter(grid: Grid, spec: FilterSpec) -> np.ndarray:
    return filter_factors(grid, spec)


def imex_cn_rk4(c, spec, tendency: Callable, dt: float):
    f = _cn_factors(spec, dt)
    a_half, b_half = f[0.5]
    a_full, b_full = f[1.0]
    k1 = tendency(c)
    k2 = tendency(a_half * c + b_half * k1)
    k3 = tendency(a_half * c + b_half * k2)
    k4 = tendency(a_full * c + b_full * k3)
    return a_full * c + b_full * ((k1 + k4) + (k2 + k3) * 2.0) * (1.0 / 6.0)


def forward_euler(c, spec, tendency: Callable, dt: float):
    return c + (spec.linear * c + tendency(c)) * dt


_SCHEME_FN = {"imex_cn_rk4": imex_cn_rk4, "forward_euler": forward_euler}


def advance(c, spec, cfg: StepperConfig, tendency: Optional[Callable] = None):
    """One physics step on coefficient arrays (ndarray or Var), filter included."""
    tendency = spec.tendency if tendency is None else tendency
    out = _SCHEME_FN[cfg.scheme](c, spec, tendency, cfg.dt)
    if cfg.filter is not None:
        out = out * _filter(spec.grid, cfg.filter)
    return out


def hybrid_advance(c, spec, cfg: StepperConfig, correction: CorrectionFn = NO_CORRECTION):
    if correction.mode == "none":
        return advance(c, spec, cfg)
    if correction.mode == "nonlinear_term":
        return advance(c, spec, cfg, lambda u: spec.tendency(u, correction=correction))
    return advance(c, spec, cfg) + correction(c) * cfg.dt


def diverged(c: np.ndarray, ndim: int) -> np.ndarray:
    """Per-leading-index flag: non-finite or max |u| above the threshold."""
    c = np.asarray(c)
    axes = tuple(range(-ndim - 1, 0))
    bad = ~np.all(np.isfinite(c), axis=axes)
    bound = np.abs(c).sum(axis=axes)
    check = ~bad & (bound > DIVERGENCE_THRESHOLD)
    if np.any(check):
        u = np.abs(ad.irfft(c, ndim)).max(axis=axes)
        bad = bad | (check & (u > DIVERGENCE_THRESHOLD))
    return bad


def max_velocity(c: np.ndarray, grid: Grid) -> float:
    if grid.ndim == 1:
        return float(np.abs(inv(c, 1)).max())
    v = inv(velocity_from_vorticity(c[..., :1, :, :], grid), 2)
    return float(np.sqrt((v ** 2).sum(axis=-3)).max())


def check_cfl(c, spec, cfg: StepperConfig) -> bool:
    vmax = max_velocity(c, spec.grid)
    if vmax <= 0:
        return True
    limit = stable_time_step(spec.grid, vmax, cfg.cfl_safety)
    if cfg.dt > limit:
        warnings.warn(f"time step {cfg.dt:.4g} exceeds CFL limit {limit:.4g} "
                      f"(v_max={vmax:.3g})", CflWarning, stacklevel=3)
        return False
    return True


def _finish(spec, state: SpectralState, out: np.ndarray, cfg: StepperConfig) -> SpectralState:
    t = state.time + cfg.dt
    if diverged(out[None], spec.grid.ndim)[0]:
        raise SolverDivergedError(t)
    return SpectralState(spec.grid, out, t)


def physics_step(spec, state: SpectralState, cfg: StepperConfig) -> SpectralState:
    check_cfl(state.coeffs, spec, cfg)
    return _finish(spec, state, advance(state.coeffs, spec, cfg), cfg)


def hybrid_step(spec, state: SpectralState, cfg: StepperConfig,
                correction: CorrectionFn = NO_CORRECTION) -> SpectralState:
    if correction.mode not in ("split_operator", "none"):
        raise ValueError("hybrid_step needs a split_operator (or no) correction")
    return _finish(spec, state, hybrid_advance(state.coeffs, spec, cfg, correction), cfg)


def nonlinear_corrected_step(spec, state: SpectralState, cfg: StepperConfig,
                             correction: CorrectionFn) -> SpectralState:
    if spec.name != "kolmogorov":
        raise ValueError("nonlinear-term correction is defined for Kolmogorov flow only")
    if correction.mode != "nonlinear_term":
        raise ValueError("nonlinear_corrected_step needs a nonlinear_term correction")
    return _finish(spec, state, hybrid_advance(state.coeffs, spec, cfg, correction), cfg)


def stable_time_step(grid: Grid, v_max: float, c: float) -> float:
    if not v_max > 0:
        raise ValueError("v_max must be positive")
    return c * grid.dx / v_max


@dataclass
class Trajectory:
    states: list
    diverged: bool = False
    last_finite_step: int = 0
    message: str = ""


def unroll(spec, state: SpectralState, cfg: StepperConfig,
           correction: CorrectionFn = NO_CORRECTION, n_steps: int = 1,
           stride: int = 1) -> Trajectory:
    """Repeated hybrid steps; records the state after every ``stride``-th and the last step."""
    if n_steps < 1 or stride < 1:
        raise ValueError("n_steps and stride must be >= 1")
    c, t = state.coeffs, state.time
    out = []
    check_cfl(c, spec, cfg)
    for i in range(1, n_steps + 1):
        nxt = hybrid_advance(c, spec, cfg, correction)
        t = t + cfg.dt
        if diverged(nxt[None], spec.grid.ndim)[0]:
            return Trajectory(out, True, i - 1, f"solver diverged at t={t:.6g}")
        c = nxt
        if i % stride == 0 or i == n_steps:
            out.append(SpectralState(spec.grid, c, t))
    return Trajectory(out, False, n_steps)


def rollout(step: Callable, c: np.ndarray, n_steps: int, stride: int, ndim: int):
    """Batched unroll on arrays ``(batch, channels, *grid)``.

    Returns ``(frames, diverged_at)`` where ``frames`` has shape
    ``(batch, n_frames, channels, *grid)`` including the initial state, and
    ``diverged_at[b]`` is the first step index at which sample ``b`` diverged
    (``-1`` if never). Diverged samples are frozen as NaN from that point.
    """
    n_frames = n_steps // stride + 1
    frames = np.empty((c.shape[0], n_frames) + c.shape[1:], dtype=c.dtype)
    frames[:, 0] = c
    diverged_at = np.full(c.shape[0], -1)
    for i in range(1, n_steps + 1):
        with np.errstate(all="ignore"):
            c = step(c)
        bad = diverged(c, ndim) & (diverged_at < 0)
        if np.any(bad):
            diverged_at[bad] = i
            c = c.copy()
            c[bad] = np.nan
        if i % stride == 0:
            frames[:, i // stride] = c
    return frames, diverged_at


def richardson_order(errors) -> list:
    """Observed orders log2(e_h / e_{h/2}) for a sequence of halving step sizes."""
    return [math.log2(a / b) for a, b in zip(errors[:-1], errors[1:])]
