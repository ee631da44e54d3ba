"""The three model PDEs written as du/dt = lambda_k u_k + N(u)_k.

``linear`` holds the diagonal symbol lambda_k (treated implicitly by the
integrators); ``tendency`` evaluates the explicit part pseudospectrally.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from .spectral_core import Grid, SpectralState, derivative, fwd, inv, velocity_from_vorticity

EQUATIONS = ("ks", "unstable_burgers", "kolmogorov")


@dataclass(frozen=True)
class KsParams:
    length: float = 64.0

    def __post_init__(self):
        if not self.length > 0:
            raise ValueError("KS domain length must be positive")


@dataclass(frozen=True)
class UnstableBurgersParams:
    nu: float = 0.01
    length: float = 40 * np.pi
    g_amp: float = 0.04
    g_width: float = 16.0

    def __post_init__(self):
        if not (self.nu > 0 and self.g_amp > 0 and self.g_width > 0):
            raise ValueError("nu, g_amp and g_width must be positive")

    def g_hat(self, k):
        """Fourier transform of the amplifying kernel, k the physical wavenumber."""
        return -self.g_amp * np.exp(-self.g_width * np.asarray(k) ** 2)


@dataclass(frozen=True)
class KolmogorovParams:
    nu: float = 1.0e-3
    drag: float = 0.1
    forcing_k: int = 4
    length: float = 2 * np.pi

    def __post_init__(self):
        if not self.nu > 0 or self.drag < 0:
            raise ValueError("need nu > 0 and drag >= 0")
        if int(self.forcing_k) != self.forcing_k or self.forcing_k < 1:
            raise ValueError("forcing wavenumber must be a positive integer")


_PARAMS = {"ks": KsParams, "unstable_burgers": UnstableBurgersParams, "kolmogorov": KolmogorovParams}
_NDIM = {"ks": 1, "unstable_burgers": 1, "kolmogorov": 2}
_FORMS = ("advective", "conservative", "skew")


def default_params(name: str):
    if name not in _PARAMS:
        raise ValueError(f"unknown equation {name!r}; expected one of {EQUATIONS}")
    return _PARAMS[name]()


def params_from_dict(name: str, d: dict):
    if name not in _PARAMS:
        raise ValueError(f"unknown equation {name!r}; expected one of {EQUATIONS}")
    return _PARAMS[name](**d)


@dataclass(frozen=True, eq=False)
class EquationSpec:
    name: str
    grid: Grid
    params: object
    nonlinear_form: str = "advective"
    linear: np.ndarray = field(init=False, repr=False)
    forcing: Optional[np.ndarray] = field(init=False, repr=False)

    def __post_init__(self):
        if self.name not in EQUATIONS:
            raise ValueError(f"unknown equation {self.name!r}; expected one of {EQUATIONS}")
        if self.grid.ndim != _NDIM[self.name]:
            raise ValueError(f"{self.name} is {_NDIM[self.name]}D, got a {self.grid.ndim}D grid")
        if not np.isclose(self.grid.length, self.params.length):
            raise ValueError(
                f"grid length {self.grid.length} does not match equation domain {self.params.length}")
        if self.nonlinear_form not in _FORMS:
            raise ValueError(f"nonlinear_form must be one of {_FORMS}")
        object.__setattr__(self, "linear", linear_symbol(self))
        forcing = None
        if self.name == "kolmogorov":
            forcing = kolmogorov_forcing(self.grid, self.params.forcing_k).coeffs
        object.__setattr__(self, "forcing", forcing)

    @property
    def channels(self) -> int:
        return 1

    def tendency(self, c, correction: Optional[Callable] = None):
        """Explicit right-hand side on coefficient arrays ``(..., 1, *grid)``.

        ``correction``, if given, is subtracted from the tendency; it receives
        the same coefficients and returns an array of the same shape.
        """
        if c.shape[-self.grid.ndim - 1] != 1:
            raise ValueError(
                f"channel-count mismatch: {self.name} has 1 channel, state has "
                f"{c.shape[-self.grid.ndim - 1]}")
        if self.name == "kolmogorov":
            out = -convection(c, self.grid) + self.forcing
        else:
            out = _burgers_term(c, self.grid, self.nonlinear_form)
        if correction is not None:
            out = out - correction(c)
        return out


def make_equation(name: str, n: int, params=None, nonlinear_form: str = "advective") -> EquationSpec:
    params = default_params(name) if params is None else params
    return EquationSpec(name, Grid(_NDIM[name], n, params.length), params, nonlinear_form)


def linear_symbol(spec: EquationSpec) -> np.ndarray:
    """lambda_k per mode (real) for the equation's implicit linear part."""
    g = spec.grid
    if spec.name == "ks":
        k2 = g.k2
        return k2 - k2 * k2
    if spec.name == "unstable_burgers":
        k = g.k[0]
        p = spec.params
        return -(p.g_hat(k) + p.nu) * k * k
    if spec.name == "kolmogorov":
        p = spec.params
        return -p.nu * g.k2 - p.drag
    raise ValueError(f"unknown equation {spec.name!r}")


def _burgers_term(c, grid: Grid, form: str):
    """-u u_x in one of three discretely different forms.

    ``skew`` is (u u_x + (u^2)_x) / 3, the split whose discrete energy
    contribution sum(u * N(u)) vanishes identically.
    """
    u = inv(c, 1)
    adv = fwd(u * inv(derivative(c, grid, 1), 1), 1)
    if form == "advective":
        return -adv
    cons = derivative(fwd(u * u, 1), grid, 1) * 0.5
    if form == "conservative":
        return -cons
    return -(adv + cons * 2.0) * (1.0 / 3.0)


def convection(c, grid: Grid):
    """v . grad(omega) for vorticity coefficients ``c``, returned in spectral space."""
    v = inv(velocity_from_vorticity(c, grid), 2)
    wx = inv(derivative(c, grid, 1, 0), 2)
    wy = inv(derivative(c, grid, 1, 1), 2)
    return fwd(v[..., 0:1, :, :] * wx + v[..., 1:2, :, :] * wy, 2)


def convection_inputs(c, grid: Grid):
    """Real-space (vx, vy, d_x omega, d_y omega) as four channels."""
    v = inv(velocity_from_vorticity(c, grid), 2)
    wx = inv(derivative(c, grid, 1, 0), 2)
    wy = inv(derivative(c, grid, 1, 1), 2)
    return ad.concatenate([v, wx, wy], axis=-3)


def nonlinear_tendency(spec: EquationSpec, state: SpectralState) -> SpectralState:
    if state.grid != spec.grid:
        raise ValueError("state grid does not match equation grid")
    return state.replace(spec.tendency(state.coeffs))


def kolmogorov_forcing(grid: Grid, k_f: int) -> SpectralState:
    """-k_f cos(k_f y) on a 2D grid (y is the second axis)."""
    if grid.ndim != 2:
        raise ValueError("Kolmogorov forcing needs a 2D grid")
    fundamental = 2 * np.pi / grid.length
    m = k_f / fundamental
    if abs(m - round(m)) > 1e-9:
        raise ValueError(f"forcing wavenumber {k_f} is not a grid mode")
    m = int(round(m))
    if m >= grid.n // 2:
        raise ValueError(f"unresolved forcing: mode {m} >= Nyquist {grid.n // 2}")
    c = np.zeros((1,) + grid.shape, dtype=complex)
    c[0, 0, m] = c[0, 0, -m] = -k_f / 2
    return SpectralState(grid, c)
