"""Fourier machinery on periodic grids.

Coefficients are stored as full complex arrays in numpy FFT order with the
forward transform divided by the number of grid points, so that a coefficient
is the amplitude of its Fourier mode independent of resolution:

    u(x_j) = sum_m c_m exp(i k_m x_j),    k_m = 2 pi m / L.

Arrays carry the field channels on the axis just before the spatial axes,
``(..., channels, *spatial)``; leading axes are batch axes. The array-level
helpers (``fwd``, ``inv``, ``derivative``, ...) accept either ndarrays or
:class:`~spectral_hybrid.autodiff.Var` objects.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from . import autodiff as ad

_REAL_TOL = 1e-12


@dataclass(frozen=True)
class Grid:
    """A square periodic grid of ``n`` points per axis over ``[0, length)``."""

    ndim: int
    n: int
    length: float = 2 * np.pi

    def __post_init__(self):
        if self.ndim not in (1, 2):
            raise ValueError(f"ndim must be 1 or 2, got {self.ndim}")
        if self.n < 4 or self.n % 2:
            raise ValueError(f"resolution must be even and >= 4, got {self.n}")
        if not self.length > 0:
            raise ValueError("domain length must be positive")

    @property
    def shape(self) -> tuple:
        return (self.n,) * self.ndim

    @property
    def dx(self) -> float:
        return self.length / self.n

    @property
    def k_max(self) -> float:
        return 2 * np.pi * (self.n // 2) / self.length

    @cached_property
    def modes(self) -> np.ndarray:
        """Integer mode indices m in numpy FFT order."""
        return np.fft.fftfreq(self.n, 1.0 / self.n).round().astype(int)

    @cached_property
    def k(self) -> tuple:
        """Wavenumbers per axis, broadcastable against ``shape``."""
        k1 = 2 * np.pi * self.modes / self.length
        if self.ndim == 1:
            return (k1,)
        return (k1[:, None], k1[None, :])

    @cached_property
    def k_odd(self) -> tuple:
        """Wavenumbers with the Nyquist entry zeroed, for odd derivatives."""
        out = []
        for k in self.k:
            k = k.copy()
            k[np.abs(k) == self.k_max] = 0.0
            out.append(k)
        return tuple(out)

    @cached_property
    def k2(self) -> np.ndarray:
        """|k|^2 on the full mesh."""
        return sum(np.broadcast_to(k * k, self.shape) for k in self.k)

    def coords(self) -> tuple:
        x = np.arange(self.n) * self.dx
        if self.ndim == 1:
            return (x,)
        return tuple(np.meshgrid(x, x, indexing="ij"))

    def to_dict(self) -> dict:
        return {"ndim": self.ndim, "n": self.n, "length": float(self.length)}


@dataclass(frozen=True)
class FilterSpec:
    """Exponential filter ``exp(-alpha |k/k_max|^(2p))``; ``mode`` is separable or radial."""

    alpha: float = 6.0
    p: int = 16
    mode: str = "separable"

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("filter alpha must be positive")
        if int(self.p) != self.p or self.p < 1:
            raise ValueError("filter order p must be a positive integer")
        if self.mode not in ("separable", "radial"):
            raise ValueError(f"unknown filter mode {self.mode!r}")


@dataclass
class SpectralState:
    grid: Grid
    coeffs: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs)
        if self.coeffs.ndim != self.grid.ndim + 1 or self.coeffs.shape[1:] != self.grid.shape:
            raise ValueError(
                f"coefficient array {self.coeffs.shape} does not match grid {self.grid.shape}")

    @property
    def channels(self) -> int:
        return self.coeffs.shape[0]

    def replace(self, coeffs=None, time=None) -> "SpectralState":
        return SpectralState(self.grid, self.coeffs if coeffs is None else coeffs,
                             self.time if time is None else time)


@dataclass
class RealField:
    grid: Grid
    values: np.ndarray
    time: float = field(default=0.0)

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != self.grid.ndim + 1 or self.values.shape[1:] != self.grid.shape:
            raise ValueError(f"field array {self.values.shape} does not match grid {self.grid.shape}")


# -- array level ------------------------------------------------------------

def fwd(u, ndim: int):
    """Real samples -> coefficients (divided by the point count)."""
    return ad.fft(u, ndim)


def inv(c, ndim: int):
    """Conjugate-symmetric coefficients -> real samples."""
    return ad.irfft(c, ndim)


def derivative(c, grid: Grid, order: int = 1, axis: int = 0):
    if order < 1 or int(order) != order:
        raise ValueError(f"derivative order must be a positive integer, got {order}")
    k = grid.k_odd[axis] if order % 2 else grid.k[axis]
    return c * (1j * k) ** order


def filter_factors(grid: Grid, spec: FilterSpec) -> np.ndarray:
    if spec.mode == "radial":
        ratio = np.sqrt(grid.k2) / grid.k_max
        return np.exp(-spec.alpha * ratio ** (2 * spec.p))
    out = np.ones(grid.shape)
    for k in grid.k:
        out = out * np.exp(-spec.alpha * np.abs(k / grid.k_max) ** (2 * spec.p))
    return out


def velocity_from_vorticity(c, grid: Grid):
    """Stream-function inversion; ``c`` has one channel, the result has two (vx, vy)."""
    if grid.ndim != 2:
        raise ValueError("velocity-solve requires 2D")
    psi = c * _inverse_laplacian(grid)
    kx, ky = grid.k_odd
    return ad.concatenate([psi * (1j * ky), psi * (-1j * kx)], axis=-3)


def _inverse_laplacian(grid: Grid) -> np.ndarray:
    k2 = grid.k2.copy()
    k2[(0,) * grid.ndim] = 1.0
    out = 1.0 / k2
    out[(0,) * grid.ndim] = 0.0
    return out


def truncation_indices(source: Grid, target: Grid) -> np.ndarray:
    """Source FFT positions of target modes.

    When downsampling, the target Nyquist maps to -1 (dropped); a same-size
    target keeps every mode.
    """
    m = target.modes
    idx = np.where(m >= 0, m, source.n + m)
    if target.n < source.n:
        idx[m == -(target.n // 2)] = -1
    return idx


def truncate(c, source: Grid, target: Grid):
    idx = truncation_indices(source, target)
    keep = idx >= 0
    src = np.where(keep, idx, 0)
    mask = keep.astype(float)
    if source.ndim == 1:
        return c[..., src] * mask
    return c[..., src[:, None], src[None, :]] * (mask[:, None] * mask[None, :])


def conjugate_symmetry_error(c: np.ndarray, ndim: int) -> float:
    """max |c_{-m} - conj(c_m)|, relative to max |c|."""
    flipped = c
    for ax in range(-ndim, 0):
        flipped = np.roll(np.flip(flipped, axis=ax), 1, axis=ax)
    scale = max(np.abs(c).max(initial=0.0), 1e-300)
    return float(np.abs(flipped - np.conj(c)).max(initial=0.0) / scale)


# -- state level ------------------------------------------------------------

def to_spectral(f: RealField) -> SpectralState:
    if not np.all(np.isfinite(f.values)):
        raise ValueError("field contains non-finite values")
    return SpectralState(f.grid, fwd(f.values, f.grid.ndim), f.time)


def to_real(s: SpectralState) -> RealField:
    u = ad.ifft(s.coeffs, s.grid.ndim)
    scale = max(np.abs(u).max(initial=0.0), 1.0)
    if np.abs(u.imag).max(initial=0.0) > _REAL_TOL * scale:
        raise ValueError("non-real field: coefficients are not conjugate-symmetric")
    return RealField(s.grid, u.real.copy(), s.time)


def spectral_derivative(s: SpectralState, order: int, axis: int = 0) -> SpectralState:
    if not 0 <= axis < s.grid.ndim:
        raise ValueError(f"axis {axis} out of range for a {s.grid.ndim}D grid")
    return s.replace(derivative(s.coeffs, s.grid, order, axis))


def exponential_filter(s: SpectralState, spec: FilterSpec = FilterSpec()) -> SpectralState:
    return s.replace(s.coeffs * filter_factors(s.grid, spec))


def truncate_downsample(s: SpectralState, target: Grid) -> SpectralState:
    """Keep the modes representable on ``target``.

    The target Nyquist mode is zeroed on a strict downsample; a same-size
    target is the identity.
    """
    src = s.grid
    if target.ndim != src.ndim or not np.isclose(target.length, src.length):
        raise ValueError("target grid must share dimension and domain length")
    if target.n > src.n:
        raise ValueError(f"target resolution {target.n} exceeds source resolution {src.n}")
    if src.n % target.n:
        raise ValueError(f"target resolution {target.n} does not divide {src.n}")
    return SpectralState(target, truncate(s.coeffs, src, target), s.time)


def velocity_solve(s: SpectralState) -> SpectralState:
    if s.grid.ndim != 2:
        raise ValueError("velocity-solve requires 2D")
    if s.channels != 1:
        raise ValueError("velocity-solve expects a single vorticity channel")
    return s.replace(velocity_from_vorticity(s.coeffs, s.grid))


def curl(s: SpectralState) -> SpectralState:
    """dx vy - dy vx of a two-channel velocity state."""
    vx, vy = s.coeffs[0:1], s.coeffs[1:2]
    return s.replace(derivative(vy, s.grid, 1, 0) - derivative(vx, s.grid, 1, 1))


def divergence_modes(s: SpectralState) -> np.ndarray:
    """Per-mode k . v_hat of a two-channel velocity state (uses odd-derivative wavenumbers)."""
    kx, ky = s.grid.k_odd
    return kx * s.coeffs[0] + ky * s.coeffs[1]
