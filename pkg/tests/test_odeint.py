import numpy as np
import pytest

from constrdyn.odeint import IntegratorConfig, NonFiniteStateError, integrate, rk4_step
from constrdyn.physics import energy, rhs_mass_spring

RK4 = IntegratorConfig("rk4", dt=0.1)


def test_one_rk4_step_exponential():
    # hand arithmetic: 1 + h + h^2/2 + h^3/6 + h^4/24 at h = 0.1
    y = rk4_step(lambda y: y, np.array([1.0]), 0.1)
    assert y[0] == pytest.approx(1.1051708333333333, abs=1e-15)


def test_zero_field_is_constant():
    t = np.linspace(0, 3, 31)
    out = integrate(lambda y: np.zeros_like(y), np.array([1.5, -2.0]), t, RK4)
    assert np.all(out == np.array([1.5, -2.0]))
    out = integrate(lambda y: np.zeros_like(y), np.array([1.5, -2.0]), t)
    assert np.all(out == np.array([1.5, -2.0]))


def _rk4_decay_error(dt):
    t = np.array([0.0, 1.0])
    y = integrate(lambda y: -y, np.array([1.0]), t, IntegratorConfig("rk4", dt=dt))
    return abs(y[-1, 0] - np.exp(-1.0))


def test_rk4_order_four():
    dts = np.array([0.1, 0.05, 0.025])
    errs = np.array([_rk4_decay_error(dt) for dt in dts])
    slope = np.polyfit(np.log(dts), np.log(errs), 1)[0]
    assert abs(slope - 4.0) < 0.2


def test_rk4_halving_dt_on_harmonic_oscillator():
    # state error is 4th order (~16x); the energy error of RK4 on this
    # oscillator is h^5 globally (|R(ih)|^2 = 1 - h^6/72), so it shrinks ~32x
    t = np.linspace(0, 10, 101)
    state_err, drift = [], []
    for dt in (0.1, 0.05):
        out = integrate(rhs_mass_spring, np.array([1.0, 0.0]), t, IntegratorConfig("rk4", dt=dt))
        state_err.append(np.abs(out[-1] - [np.cos(10.0), -np.sin(10.0)]).max())
        drift.append(abs(energy("mass_spring", out[-1]) - 0.5))
    assert 14 < state_err[0] / state_err[1] < 18
    assert 16 <= drift[0] / drift[1] < 40


def test_rk4_interpolates_between_steps():
    # grid points off the step lattice are linear interpolants of the two neighbors
    t = np.array([0.0, 0.05, 0.1])
    out = integrate(lambda y: y, np.array([1.0]), t, RK4)
    full = rk4_step(lambda y: y, np.array([1.0]), 0.1)
    assert out[1, 0] == pytest.approx(0.5 * (1.0 + full[0]), abs=1e-15)
    assert out[2, 0] == full[0]


def test_rk45_mass_spring_one_period():
    t = np.linspace(0, 2 * np.pi, 50)
    out = integrate(rhs_mass_spring, np.array([1.0, 0.0]), t)
    exact = np.stack([np.cos(t), -np.sin(t)], axis=1)
    assert np.abs(out - exact).max() < 1e-7
    assert np.abs(energy("mass_spring", out) - 0.5).max() < 1e-8


def test_rk45_dense_output_matches_closed_form():
    t = np.linspace(0, 3, 301)
    out = integrate(lambda y: -0.5 * y, np.array([2.0]), t, IntegratorConfig(rtol=1e-10, atol=1e-12))
    assert np.abs(out[:, 0] - 2.0 * np.exp(-0.5 * t)).max() < 1e-8


def test_batched_initial_states_match_single_runs():
    t = np.linspace(0, 5, 11)
    s0 = np.array([[1.0, 0.0], [0.2, -0.3], [2.0, 1.0]])
    batch = integrate(rhs_mass_spring, s0, t, RK4)
    for i in range(3):
        np.testing.assert_array_equal(batch[:, i], integrate(rhs_mass_spring, s0[i], t, RK4))


def test_non_finite_raises_with_partial_solution():
    t = np.linspace(0, 10, 101)
    with pytest.raises(NonFiniteStateError) as info:
        integrate(lambda y: y ** 2, np.array([1.0]), t, RK4)
    err = info.value
    assert 0.9 < err.time < 1.5
    assert np.isfinite(err.partial).all() and len(err.partial) >= 5


def test_mask_mode_freezes_only_the_diverging_row():
    t = np.linspace(0, 10, 101)
    out = integrate(lambda y: y ** 2 * np.array([[1.0], [0.0]]), np.array([[1.0], [1.0]]), t, RK4,
                    nonfinite="mask")
    blown = np.argmax(~np.isfinite(out[:, 0, 0]))
    assert blown > 0 and np.all(np.isinf(out[blown:, 0, 0]))
    assert np.all(out[:, 1, 0] == 1.0)


@pytest.mark.parametrize("grid", [[], [0.0, 0.0], [1.0, 0.5]])
def test_bad_grids_rejected(grid):
    with pytest.raises(ValueError):
        integrate(lambda y: y, np.array([1.0]), np.array(grid), RK4)


def test_config_validation():
    with pytest.raises(ValueError):
        IntegratorConfig("euler")
    with pytest.raises(ValueError):
        IntegratorConfig("rk4", dt=0.0)
    with pytest.raises(ValueError):
        IntegratorConfig(rtol=-1.0)


def test_max_steps_enforced():
    with pytest.raises(RuntimeError):
        integrate(lambda y: -y, np.array([1.0]), np.array([0.0, 10.0]),
                  IntegratorConfig("rk4", dt=0.1, max_steps=5))
    with pytest.raises(RuntimeError):
        integrate(lambda y: -y, np.array([1.0]), np.array([0.0, 10.0]), IntegratorConfig(max_steps=3))
