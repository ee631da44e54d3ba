"""The learned correction and the model variants built around it.

    Learned-Correction(c) = output_scale * FFT(EPD(input_scale * IFFT(transform(c))))

Array-level functions work on batched coefficients ``(batch, channels, *grid)``
and accept :class:`~spectral_hybrid.autodiff.Var` parameters, so the same code
is used for training (recorded) and evaluation (plain arrays).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import autodiff as ad
from .equations import EquationSpec, convection_inputs
from .integrators import CorrectionFn, StepperConfig, advance, hybrid_advance
from .neural import EpdConfig, epd_forward
from .spectral_core import Grid, RealField, SpectralState, fwd, inv, velocity_from_vorticity

REPRESENTATIONS = ("velocity", "vorticity", "velocity_and_vorticity", "identity_1d")
MODES = ("split_operator", "nonlinear_term", "pure_ml")
_REP_CHANNELS = {"velocity": 2, "vorticity": 1, "velocity_and_vorticity": 3, "identity_1d": 1}
DEFAULT_OUTPUT_SCALE = {"ks": 0.5, "unstable_burgers": 0.1, "kolmogorov": 0.01}


@dataclass(frozen=True)
class CorrectionConfig:
    representation: str = "identity_1d"
    input_scale: float = 1.0
    output_scale: float = 0.1
    mode: str = "split_operator"
    epd: EpdConfig = field(default_factory=EpdConfig)
    # pure_ml only: carry the state as 2D velocity instead of vorticity
    velocity_state: bool = False

    def __post_init__(self):
        if self.representation not in REPRESENTATIONS:
            raise ValueError(f"unknown representation {self.representation!r}")
        if self.mode not in MODES:
            raise ValueError(f"unknown correction mode {self.mode!r}")
        if not (self.input_scale > 0 and self.output_scale > 0):
            raise ValueError("input and output scales must be positive")
        if self.velocity_state and (self.mode != "pure_ml" or self.representation != "velocity"):
            raise ValueError("velocity_state needs mode pure_ml and representation velocity")
        want_in = 4 if self.mode == "nonlinear_term" else _REP_CHANNELS[self.representation]
        if self.epd.in_channels != want_in:
            raise ValueError(f"EPD expects {self.epd.in_channels} input channels, "
                             f"representation gives {want_in}")
        if self.epd.out_channels != self.state_channels:
            raise ValueError(f"EPD must output {self.state_channels} channel(s)")

    @property
    def state_channels(self) -> int:
        return 2 if self.velocity_state else 1

    def to_dict(self) -> dict:
        return {"representation": self.representation, "input_scale": self.input_scale,
                "output_scale": self.output_scale, "mode": self.mode,
                "velocity_state": self.velocity_state, "epd": self.epd.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "CorrectionConfig":
        d = dict(d)
        d["epd"] = EpdConfig.from_dict(d["epd"])
        return cls(**d)


def _check_dims(cfg: CorrectionConfig, grid: Grid) -> None:
    if grid.ndim != cfg.epd.ndim:
        raise ValueError(f"EPD is {cfg.epd.ndim}D but the grid is {grid.ndim}D")
    if grid.ndim == 1 and cfg.representation != "identity_1d":
        raise ValueError(f"representation {cfg.representation!r} requires a 2D grid")
    if grid.ndim == 2 and cfg.representation == "identity_1d":
        raise ValueError("identity_1d representation requires a 1D grid")
    if cfg.mode == "nonlinear_term" and grid.ndim != 2:
        raise ValueError("nonlinear_term correction requires a 2D grid")


def transform(cfg: CorrectionConfig, c, grid: Grid):
    """Batched coefficients -> scaled real-space network inputs ``(batch, ch, *grid)``."""
    _check_dims(cfg, grid)
    nd = grid.ndim
    if cfg.mode == "nonlinear_term":
        out = convection_inputs(c, grid)
    elif cfg.velocity_state:
        out = inv(c, nd)
    elif cfg.representation == "identity_1d" or cfg.representation == "vorticity":
        out = inv(c, nd)
    elif cfg.representation == "velocity":
        out = inv(velocity_from_vorticity(c, grid), nd)
    else:
        out = ad.concatenate([inv(velocity_from_vorticity(c, grid), nd), inv(c, nd)], axis=-3)
    return out * cfg.input_scale if cfg.input_scale != 1.0 else out


def _to_channel_last(x, nd: int):
    return ad.transpose(x, (0,) + tuple(range(2, nd + 2)) + (1,))


def _to_channel_first(x, nd: int):
    return ad.transpose(x, (0, nd + 1) + tuple(range(1, nd + 1)))


def correction(cfg: CorrectionConfig, params: dict, c, grid: Grid):
    """The learned correction on batched coefficients, returned as coefficients."""
    nd = grid.ndim
    x = _to_channel_last(transform(cfg, c, grid), nd)
    y = _to_channel_first(epd_forward(params, cfg.epd, x), nd)
    return fwd(y * cfg.output_scale, nd)


def correction_fn(cfg: CorrectionConfig, params: dict, grid: Grid) -> CorrectionFn:
    mode = "nonlinear_term" if cfg.mode == "nonlinear_term" else "split_operator"
    return CorrectionFn(lambda c: correction(cfg, params, c, grid), mode)


def pure_ml_advance(cfg: CorrectionConfig, params: dict, c, grid: Grid, h: float):
    return c + correction(cfg, params, c, grid) * h


# -- state level ------------------------------------------------------------

def state_transform(cfg: CorrectionConfig, state: SpectralState) -> RealField:
    out = transform(cfg, state.coeffs[None], state.grid)[0]
    return RealField(state.grid, out, state.time)


def learned_correction(cfg: CorrectionConfig, params: dict, state: SpectralState) -> SpectralState:
    return state.replace(correction(cfg, params, state.coeffs[None], state.grid)[0])


def pure_ml_step(cfg: CorrectionConfig, params: dict, state: SpectralState, h: float) -> SpectralState:
    if cfg.mode != "pure_ml":
        raise ValueError("pure_ml_step needs a pure_ml correction config")
    if state.channels != cfg.state_channels:
        raise ValueError(f"state has {state.channels} channel(s), model carries {cfg.state_channels}")
    out = pure_ml_advance(cfg, params, state.coeffs[None], state.grid, h)[0]
    return SpectralState(state.grid, out, state.time + h)


# -- models -------------------------------------------------------------------

KINDS = ("spectral", "hybrid", "nonlinear", "pure_ml")


@dataclass
class Model:
    """A coarse solver: spectral-only, hybrid, nonlinear-term corrected, or pure ML.

    ``step`` advances batched coefficients by ``stepper.dt``; ``encode`` maps
    stored real-space data (vorticity in 2D) to the model state and
    ``observe`` maps the state to the compared quantity (u in 1D, velocity in 2D).
    """

    kind: str
    spec: EquationSpec
    stepper: StepperConfig
    correction: Optional[CorrectionConfig] = None
    params: Optional[dict] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.kind != "spectral":
            if self.correction is None or self.params is None:
                raise ValueError(f"{self.kind} model needs a correction config and parameters")
            want = {"hybrid": "split_operator", "nonlinear": "nonlinear_term",
                    "pure_ml": "pure_ml"}[self.kind]
            if self.correction.mode != want:
                raise ValueError(f"{self.kind} model needs correction mode {want!r}")

    @property
    def grid(self) -> Grid:
        return self.spec.grid

    @property
    def velocity_state(self) -> bool:
        return self.correction is not None and self.correction.velocity_state

    def with_params(self, params) -> "Model":
        return replace(self, params=params)

    def step(self, c, params=None):
        params = self.params if params is None else params
        if self.kind == "spectral":
            return advance(c, self.spec, self.stepper)
        if self.kind == "pure_ml":
            return pure_ml_advance(self.correction, params, c, self.grid, self.stepper.dt)
        return hybrid_advance(c, self.spec, self.stepper,
                              correction_fn(self.correction, params, self.grid))

    def encode(self, u: np.ndarray) -> np.ndarray:
        c = fwd(np.asarray(u, dtype=float), self.grid.ndim)
        if self.velocity_state:
            c = velocity_from_vorticity(c, self.grid)
        return c

    def observe(self, c):
        nd = self.grid.ndim
        if nd == 2 and not self.velocity_state:
            c = velocity_from_vorticity(c, self.grid)
        return inv(c, nd)


def observe_data(u: np.ndarray, grid: Grid) -> np.ndarray:
    """Stored real-space data -> the compared quantity (velocity in 2D)."""
    if grid.ndim == 1:
        return np.asarray(u, dtype=float)
    return inv(velocity_from_vorticity(fwd(np.asarray(u, dtype=float), 2), grid), 2)
