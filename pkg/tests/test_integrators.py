import math
import warnings

import numpy as np
import pytest

from spectral_hybrid.equations import convection, make_equation
from spectral_hybrid.integrators import (CflWarning, CorrectionFn, SolverDivergedError,
                                         StepperConfig, advance, check_cfl, diverged,
                                         hybrid_advance, hybrid_step, nonlinear_corrected_step,
                                         physics_step, richardson_order, rollout,
                                         stable_time_step, unroll)
from spectral_hybrid.spectral_core import Grid, SpectralState, fwd, inv

from conftest import random_coeffs


class ScalarSpec:
    """A one-mode 'equation' u' = lam u + N(u) for convergence checks."""

    def __init__(self, lam):
        self.linear = np.array([lam], dtype=float)
        self.grid = None


def _integrate(spec, tendency, u0, t_end, n):
    cfg = StepperConfig(t_end / n, filter=None)
    u = np.array([u0], dtype=float)
    for _ in range(n):
        u = advance(u, spec, cfg, tendency)
    return u[0]


def test_linear_path_is_second_order():
    lam = -1.3
    spec = ScalarSpec(lam)
    exact = math.exp(lam * 2.0)
    errs = [abs(_integrate(spec, lambda u: 0 * u, 1.0, 2.0, n) - exact) for n in (10, 20, 40, 80)]
    orders = richardson_order(errs)
    assert min(orders) >= 1.95
    assert max(orders) <= 2.05


def test_explicit_path_is_fourth_order():
    spec = ScalarSpec(0.0)
    exact = 1.0 / (1.0 + 1.0)  # u' = -u^2, u(0) = 1
    errs = [abs(_integrate(spec, lambda u: -u * u, 1.0, 1.0, n) - exact) for n in (10, 20, 40, 80)]
    assert min(richardson_order(errs)) >= 3.9


def test_coupled_problem_is_at_least_second_order():
    lam, u0, t = -0.7, 0.8, 2.0
    e = math.exp(lam * t)
    exact = lam * u0 * e / (lam + u0 * (e - 1))
    spec = ScalarSpec(lam)
    errs = [abs(_integrate(spec, lambda u: -u * u, u0, t, n) - exact) for n in (10, 20, 40, 80)]
    assert min(richardson_order(errs)) >= 1.9


def test_forward_euler_is_first_order():
    spec = ScalarSpec(-1.0)
    errs = []
    for n in (20, 40, 80):
        cfg = StepperConfig(1.0 / n, filter=None, scheme="forward_euler")
        u = np.array([1.0])
        for _ in range(n):
            u = advance(u, spec, cfg, lambda v: 0 * v)
        errs.append(abs(u[0] - math.exp(-1.0)))
    assert all(0.9 < o < 1.1 for o in richardson_order(errs))


@pytest.mark.parametrize("name", ["ks", "unstable_burgers"])
def test_zero_is_a_fixed_point(name):
    spec = make_equation(name, 32)
    s = SpectralState(spec.grid, np.zeros((1, 32), dtype=complex))
    cfg = StepperConfig(0.1)
    for _ in range(5):
        s = physics_step(spec, s, cfg)
    assert np.abs(s.coeffs).max() == 0
    assert s.time == pytest.approx(0.5)


def test_ks_smoke_stays_resolved(rng):
    spec = make_equation("ks", 64)
    c = random_coeffs(spec.grid, rng, keep_fraction=0.25)
    traj = unroll(spec, SpectralState(spec.grid, c), StepperConfig(1 / 12), n_steps=100, stride=100)
    assert not traj.diverged
    out = traj.states[-1].coeffs[0]
    energy = np.abs(out) ** 2
    k = np.abs(spec.grid.k[0])
    top = k >= np.quantile(k, 0.9)
    assert energy[top].sum() / energy.sum() < 1e-3


def test_constant_correction_adds_dt_times_value(rng):
    spec = make_equation("unstable_burgers", 32)
    cfg = StepperConfig(0.2)
    c = random_coeffs(spec.grid, rng, keep_fraction=0.5)
    const = random_coeffs(spec.grid, rng, keep_fraction=0.5)
    got = hybrid_advance(c, spec, cfg, CorrectionFn(lambda u: const))
    np.testing.assert_allclose(got, advance(c, spec, cfg) + 0.2 * const, rtol=0, atol=1e-15)
    zero = hybrid_step(spec, SpectralState(spec.grid, c), cfg, CorrectionFn(lambda u: 0 * u))
    np.testing.assert_array_equal(zero.coeffs, physics_step(spec, SpectralState(spec.grid, c), cfg).coeffs)


def test_nonlinear_term_correction(rng):
    spec = make_equation("kolmogorov", 32)
    cfg = StepperConfig(0.01)
    c = random_coeffs(spec.grid, rng, keep_fraction=0.5)
    s = SpectralState(spec.grid, c)
    # cancelling the whole explicit tendency leaves the implicit linear step
    cancel = CorrectionFn(spec.tendency, "nonlinear_term")
    got = nonlinear_corrected_step(spec, s, cfg, cancel).coeffs
    want = advance(c, spec, cfg, lambda u: 0 * u)
    np.testing.assert_allclose(got, want, atol=1e-14)
    zero = CorrectionFn(lambda u: 0 * u, "nonlinear_term")
    np.testing.assert_array_equal(nonlinear_corrected_step(spec, s, cfg, zero).coeffs,
                                  advance(c, spec, cfg))
    with pytest.raises(ValueError):
        nonlinear_corrected_step(make_equation("ks", 32), SpectralState(Grid(1, 32, 64.0),
                                 np.zeros((1, 32), complex)), cfg, zero)
    with pytest.raises(ValueError):
        hybrid_step(spec, s, cfg, zero)


@pytest.mark.parametrize("name", ["ks", "unstable_burgers", "kolmogorov"])
def test_steps_keep_fields_real(name, rng):
    spec = make_equation(name, 32)
    c = random_coeffs(spec.grid, rng, keep_fraction=0.5) * 0.5
    traj = unroll(spec, SpectralState(spec.grid, c), StepperConfig(0.005), n_steps=20, stride=20)
    out = traj.states[-1].coeffs
    np.testing.assert_allclose(fwd(inv(out, spec.grid.ndim), spec.grid.ndim), out, atol=1e-13)


def test_unforced_2d_energy_decays(rng):
    spec = make_equation("kolmogorov", 32)
    cfg = StepperConfig(0.01)
    c = random_coeffs(spec.grid, rng, keep_fraction=0.5)
    energies = []
    for _ in range(30):
        c = advance(c, spec, cfg, lambda u: -convection(u, spec.grid))
        energies.append((np.abs(c) ** 2).sum())
    assert np.all(np.diff(energies) < 0)


def test_stable_time_step():
    g = Grid(2, 2048)
    # published to 11 decimals: agree within half a unit of the last place
    assert abs(stable_time_step(g, 7.0, 0.5) - 0.00021914011) <= 5e-12
    with pytest.raises(ValueError):
        stable_time_step(g, 0.0, 0.5)


def test_cfl_warning():
    spec = make_equation("unstable_burgers", 32)
    c = np.zeros((1, 32), dtype=complex)
    c[0, 1] = c[0, -1] = 5.0
    with pytest.warns(CflWarning):
        assert not check_cfl(c, spec, StepperConfig(10.0))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert check_cfl(c, spec, StepperConfig(0.01))


def test_stepper_config_validation():
    with pytest.raises(ValueError):
        StepperConfig(0.0)
    with pytest.raises(ValueError):
        StepperConfig(0.1, cfl_safety=1.5)
    with pytest.raises(ValueError):
        StepperConfig(0.1, scheme="rk45")
    with pytest.raises(ValueError):
        CorrectionFn(None, "sideways")


def test_unroll_stride_bookkeeping(rng):
    spec = make_equation("ks", 32)
    s = SpectralState(spec.grid, random_coeffs(spec.grid, rng, keep_fraction=0.5))
    traj = unroll(spec, s, StepperConfig(0.05), n_steps=10, stride=3)
    assert [round(st.time / 0.05) for st in traj.states] == [3, 6, 9, 10]
    frames, div = rollout(lambda c: advance(c, spec, StepperConfig(0.05)), s.coeffs[None], 10, 2, 1)
    assert frames.shape == (1, 6, 1, 32)
    np.testing.assert_array_equal(frames[0, 0], s.coeffs)
    assert div.tolist() == [-1]
    with pytest.raises(ValueError):
        unroll(spec, s, StepperConfig(0.05), n_steps=0)


def test_restart_is_bit_exact(rng):
    spec = make_equation("unstable_burgers", 64)
    cfg = StepperConfig(0.25)
    s = SpectralState(spec.grid, random_coeffs(spec.grid, rng, keep_fraction=0.3))
    full = unroll(spec, s, cfg, n_steps=10).states[-1]
    half = unroll(spec, s, cfg, n_steps=5).states[-1]
    rest = unroll(spec, half, cfg, n_steps=5).states[-1]
    np.testing.assert_array_equal(full.coeffs, rest.coeffs)
    assert full.time == pytest.approx(rest.time)


def test_divergence_detection():
    g = Grid(1, 16)
    c = np.zeros((3, 1, 16), dtype=complex)
    c[1, 0, 0] = 2e6
    c[2, 0, 3] = np.nan
    assert diverged(c, 1).tolist() == [False, True, True]
    # coefficient sum above the threshold but max |u| below it: not flagged
    c2 = np.zeros((1, 1, 16), dtype=complex)
    m = np.arange(1, 8)
    c2[0, 0, 1:8] = 1e5 * np.exp(1j * np.pi * m ** 2 / 7)
    c2[0, 0, 9:] = np.conj(c2[0, 0, 1:8][::-1])
    assert np.abs(c2).sum() > 1e6 > np.abs(inv(c2, 1)).max()
    assert not diverged(c2, 1)[0]


def test_blow_up_is_reported(rng):
    spec = make_equation("ks", 32)
    cfg = StepperConfig(1.0, filter=None, scheme="forward_euler")
    c = random_coeffs(spec.grid, rng) * 10
    traj = unroll(spec, SpectralState(spec.grid, c), cfg, n_steps=200)
    assert traj.diverged and "diverged" in traj.message
    assert traj.last_finite_step == len(traj.states) and traj.last_finite_step < 200
    state = SpectralState(spec.grid, c)
    with pytest.raises(SolverDivergedError):
        for _ in range(200):
            state = physics_step(spec, state, cfg)
    with np.errstate(all="ignore"):
        frames, div = rollout(lambda u: advance(u, spec, cfg), c[None], 200, 1, 1)
    assert div[0] == traj.last_finite_step + 1
    assert np.all(np.isnan(frames[0, div[0]:]))
