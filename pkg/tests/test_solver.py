import io
import math

import numpy as np
import pytest

from truncem import brownian, problems
from truncem.core import ConfigurationError, InitialPath, DelayFunction, SddeProblem, power_policy
from truncem.solver import (
    History,
    Integrator,
    PathOverflow,
    SolverConfig,
    run_ensemble,
    simulate,
    step_once,
    write_moments_csv,
    write_trajectory_csv,
)

from conftest import make_problem

A, B = -1.0, 0.5


def _gbm_drift(x, y):
    return A * x


def _gbm_diffusion(x, y):
    return (B * x)[..., None]


def _explosive_drift(x, y):
    return 10.0 * x * x


def _unit(x, y):
    return np.ones(np.shape(x) + (1,))


def _delayed_feedback(x, y):
    return y


def _zero(x, y):
    return np.zeros(np.shape(x) + (1,))


# -- SolverConfig ------------------------------------------------------------------


def test_config_counts():
    cfg = SolverConfig(1e-3, 1.0)
    assert cfg.n_steps == 1000
    assert cfg.lag_steps(problems.example1()) == 1000


def test_config_rejects_non_divisible_horizon():
    with pytest.raises(ConfigurationError):
        SolverConfig(0.3, 1.0)


def test_config_rejects_step_not_fraction_of_tau():
    cfg = SolverConfig(0.2, 1.0)
    with pytest.raises(ConfigurationError):
        cfg.lag_steps(problems.linear_problem(tau=0.3))


@pytest.mark.parametrize("step", [0.0, 2.0])
def test_config_rejects_step_range(step):
    with pytest.raises(ConfigurationError):
        SolverConfig(step, 2.0)


# -- step_once ----------------------------------------------------------------------


def test_step_once_zero_coefficients_keeps_state():
    p = problems.zero_problem(xi=3.5)
    cfg = SolverConfig(0.25, 1.0)
    h = History(p, 0.25)
    assert step_once(p, problems.linear_policy(), cfg, 0, h, [0.7]) == pytest.approx([3.5], abs=0)


def test_step_once_deterministic_euler():
    p = problems.linear_problem(xi=1.0, tau=0.1)
    cfg = SolverConfig(0.1, 1.0)
    out = step_once(p, problems.linear_policy(), cfg, 0, History(p, 0.1), [0.0])
    assert out == pytest.approx([0.9], rel=1e-15)


def test_step_once_example1_truncation_active():
    # radius mu^{-1}(10 * 2^{7/4}) = 2^{7/8} < 2, so both arguments are projected
    step = 2.0**-7
    p = problems.example1()
    cfg = SolverConfig(step, 1.0)
    r = 2.0 ** (7 / 8)
    expected = 2.0 + (-9.0 * r**3 + r**1.5) * step
    out = step_once(p, problems.example1_policy(), cfg, 0, History(p, step), [0.0])
    assert out == pytest.approx([expected], rel=1e-13)


def test_step_once_example1_untruncated():
    step = 2.0**-7
    p = problems.example1()
    cfg = SolverConfig(step, 1.0)
    wide = power_policy(10.0, 2.0, 1e4, -0.25)
    out = step_once(p, wide, cfg, 0, History(p, step), [0.0])
    assert out == pytest.approx([2.0 + (-72.0 + 2.0**1.5) * step], rel=1e-14)


def test_step_once_applies_noise():
    p = problems.example1(xi=1.0)
    cfg = SolverConfig(2.0**-8, 1.0)
    out = step_once(p, problems.example1_policy(), cfg, 0, History(p, 2.0**-8), [0.125])
    assert out == pytest.approx([1.0 + (-9.0 + 1.0) * 2.0**-8 + 0.125], rel=1e-14)


def test_step_once_signals_overflow():
    p = make_problem(lambda x, y: x * 1e308, _zero, xi=10.0, tau=0.5)
    cfg = SolverConfig(0.5, 1.0)
    with pytest.raises(PathOverflow) as info:
        step_once(p, power_policy(1.0, 1.0, 1e6), cfg, 0, History(p, 0.5), [0.0])
    assert info.value.step == 0


def test_history_window():
    p = problems.linear_problem(tau=0.5)
    h = History(p, 0.25)
    assert h[-2] == pytest.approx([1.0])
    h.push([5.0])
    assert h[1] == pytest.approx([5.0])
    with pytest.raises(IndexError):
        h[-2]


# -- simulate -------------------------------------------------------------------------


def test_simulate_constant_solution():
    p = problems.zero_problem(xi=-1.25, tau=0.5)
    grid = brownian.generate(1, 0, 0.01, 2.0)
    traj = simulate(p, problems.linear_policy(), SolverConfig(0.01, 2.0), grid)
    assert np.all(traj.values == -1.25)
    assert traj.indices[0] == -50 and traj.indices[-1] == 200


def test_simulate_euler_product():
    p = problems.linear_problem(xi=1.0)
    grid = brownian.generate(1, 0, 1e-3, 1.0)
    traj = simulate(p, problems.linear_policy(), SolverConfig(1e-3, 1.0), grid)
    assert traj.status == "ok"
    assert traj.final[0] == pytest.approx(0.999**1000, rel=1e-12)
    assert traj.final[0] == pytest.approx(0.36770, abs=1e-5)


def test_simulate_pure_noise_is_cumulative_sum(brownian_problem, wide_policy):
    grid = brownian.generate(5, 2, 2.0**-10, 4.0)
    traj = simulate(brownian_problem, wide_policy, SolverConfig(2.0**-10, 4.0), grid)
    ks = traj.indices >= 0
    assert np.array_equal(traj.values[ks], grid.path())


def test_simulate_coarsens_grid(brownian_problem, wide_policy):
    grid = brownian.generate(5, 2, 2.0**-10, 4.0)
    traj = simulate(brownian_problem, wide_policy, SolverConfig(2.0**-6, 4.0), grid)
    assert np.array_equal(traj.values[traj.indices >= 0], grid.path()[::16])


def test_simulate_initial_segment_is_exact():
    xi = InitialPath(lambda t: np.array([np.cos(3 * t)]), 3.0, 1.0)
    p = SddeProblem(1, 1, _gbm_drift, _gbm_diffusion, DelayFunction(problems.ConstantDelay(0.25), 0.25, 0.0), xi)
    traj = simulate(p, problems.linear_policy(), SolverConfig(2.0**-6, 1.0), brownian.generate(0, 0, 2.0**-6, 1.0))
    pre = traj.indices <= 0
    for k, v in zip(traj.indices[pre], traj.values[pre]):
        assert v[0] == np.cos(3 * k * 2.0**-6)


def test_history_before_zero_uses_initial_function():
    # y_{k+1} = y_k + step * y_{k-M}, and y_{k-M} = xi((k-M) step) while k < M
    step, m = 2.0**-5, 8
    xi = InitialPath(lambda t: np.array([t * t + 1.0]), 1.0, 1.0)
    p = SddeProblem(1, 1, _delayed_feedback, _zero, DelayFunction(problems.ConstantDelay(m * step), m * step, 0.0), xi)
    traj = simulate(p, problems.linear_policy(), SolverConfig(step, 1.0), brownian.generate(0, 0, step, 1.0))
    vals = dict(zip(traj.indices.tolist(), traj.values[:, 0].tolist()))
    for k in range(0, 3 * m):
        if k < m:
            delayed = ((k - m) * step) ** 2 + 1.0
        else:
            delayed = vals[k - m]
        assert vals[k + 1] == vals[k] + delayed * step


def test_simulate_matches_repeated_step_once():
    step = 2.0**-8
    p = problems.example1()
    pol = problems.example1_policy()
    cfg = SolverConfig(step, 3.0)
    grid = brownian.generate(42, 7, step, 3.0)
    traj = simulate(p, pol, cfg, grid)
    h = History(p, step)
    out = [h[0].copy()]
    for k in range(cfg.n_steps):
        h.push(step_once(p, pol, cfg, k, h, grid.increments[k]))
        out.append(h[k + 1].copy())
    assert np.array_equal(traj.values[traj.indices >= 0], np.array(out))


def test_simulate_partial_mode_matches_step_once():
    step = 1e-3
    p = problems.example2()
    pol = problems.example2_policy()
    cfg = SolverConfig(step, 0.5)
    grid = brownian.generate(3, 1, step, 0.5)
    traj = simulate(p, pol, cfg, grid, mode="partial")
    h = History(p, step)
    for k in range(cfg.n_steps):
        h.push(step_once(p, pol, cfg, k, h, grid.increments[k], mode="partial"))
    assert np.array_equal(traj.final, h[cfg.n_steps])


def test_simulate_record_stride():
    p = problems.linear_problem(tau=0.01)
    cfg = SolverConfig(1e-3, 1.0, record_stride=300)
    traj = simulate(p, problems.linear_policy(), cfg, brownian.generate(0, 0, 1e-3, 1.0))
    assert traj.indices.tolist() == [0, 300, 600, 900, 1000]
    assert np.allclose(traj.times, traj.indices * 1e-3)


def test_simulate_is_deterministic():
    p, pol = problems.example1(), problems.example1_policy()
    cfg = SolverConfig(2.0**-7, 2.0)
    a = simulate(p, pol, cfg, brownian.generate(9, 0, 2.0**-7, 2.0))
    b = simulate(p, pol, cfg, brownian.generate(9, 0, 2.0**-7, 2.0))
    assert np.array_equal(a.values, b.values)


def test_simulate_mode_mismatch():
    with pytest.raises(ConfigurationError):
        simulate(problems.example1(), problems.example1_policy(), SolverConfig(2.0**-7, 1.0),
                 brownian.generate(0, 0, 2.0**-7, 1.0), mode="partial")
    with pytest.raises(ConfigurationError):
        simulate(problems.example1(), problems.example1_policy(), SolverConfig(2.0**-7, 1.0),
                 brownian.generate(0, 0, 2.0**-7, 1.0), mode="implicit")


def test_simulate_reports_overflow():
    p = make_problem(_explosive_drift, _zero, xi=10.0, tau=0.01)
    traj = simulate(p, power_policy(1.0, 1.0, 1e300), SolverConfig(0.01, 1.0), brownian.generate(0, 0, 0.01, 1.0))
    assert traj.status == "overflow"
    assert traj.indices[-1] == traj.overflow_step
    assert np.all(np.isfinite(traj.values))
    # the last recorded state is the one whose update overflowed
    with np.errstate(over="ignore"):
        assert not np.isfinite(traj.final[0] + 0.1 * traj.final[0] ** 2 * 10.0 * 1.0)


def test_integrator_marks_dead_rows():
    p = make_problem(_explosive_drift, _zero, xi=10.0, tau=0.01)
    integ = Integrator(p, power_policy(1.0, 1.0, 1e300), 0.01, 2)
    integ.advance(np.zeros((2, 50, 1)))
    assert np.all(integ.overflow_step >= 0)
    assert np.all(np.isnan(integ.state))


# -- ensembles ---------------------------------------------------------------------------


def test_ensemble_constant_paths():
    m = run_ensemble(problems.zero_problem(xi=2.0), problems.linear_policy(), SolverConfig(0.05, 1.0), 20, seed=1)
    assert np.all(m.mean_sq == 4.0)
    assert np.all(m.stderr == 0.0)
    assert m.count == 20


def test_ensemble_single_path_matches_trajectory():
    p, pol = problems.example1(), problems.example1_policy()
    cfg = SolverConfig(2.0**-7, 2.0)
    m = run_ensemble(p, pol, cfg, 1, seed=77)
    traj = simulate(p, pol, cfg, brownian.generate(77, 0, 2.0**-7, 2.0))
    assert np.array_equal(m.mean_sq, traj.values[traj.indices >= 0, 0] ** 2)


def test_ensemble_brownian_second_moment(brownian_problem, wide_policy):
    m = run_ensemble(brownian_problem, wide_policy, SolverConfig(2.0**-7, 1.0, record_stride=128), 10_000, seed=3)
    assert m.times[-1] == pytest.approx(1.0)
    assert 0.94 <= m.mean_sq[-1] <= 1.06


def test_ensemble_geometric_brownian_motion_moment():
    p = make_problem(_gbm_drift, _gbm_diffusion, xi=1.0, tau=0.01)
    m = run_ensemble(p, problems.linear_policy(), SolverConfig(1e-3, 1.0, record_stride=1000), 10_000, seed=11)
    exact = math.exp(2 * A + B * B)
    assert abs(m.mean_sq[-1] - exact) <= 3 * m.stderr[-1]


def test_ensemble_identical_across_worker_counts():
    p, pol = problems.example1(), problems.example1_policy()
    cfg = SolverConfig(2.0**-6, 2.0, record_stride=8)
    ref = run_ensemble(p, pol, cfg, 13, seed=5, workers=1)
    for w in (2, 3):
        other = run_ensemble(p, pol, cfg, 13, seed=5, workers=w)
        assert np.array_equal(ref.mean_sq, other.mean_sq)
        assert np.array_equal(ref.stderr, other.stderr)


def test_ensemble_paths_independent_of_batch():
    p, pol = problems.example1(), problems.example1_policy()
    cfg = SolverConfig(2.0**-6, 1.0)
    both = run_ensemble(p, pol, cfg, 2, seed=5)
    t0 = simulate(p, pol, cfg, brownian.generate(5, 0, 2.0**-6, 1.0)).final[0]
    t1 = simulate(p, pol, cfg, brownian.generate(5, 1, 2.0**-6, 1.0)).final[0]
    assert both.mean_sq[-1] == np.mean([t0 * t0, t1 * t1])


def test_ensemble_excludes_overflowed_paths():
    p = make_problem(_explosive_drift, _unit, xi=0.0, tau=0.01)
    m = run_ensemble(p, power_policy(1.0, 1.0, 1e300), SolverConfig(0.01, 2.0), 200, seed=0)
    assert 0 < m.overflowed < 200
    assert m.count + m.overflowed == 200
    assert m.mean_sq[0] == 0.0


def test_ensemble_requires_paths():
    with pytest.raises(ConfigurationError):
        run_ensemble(problems.zero_problem(), problems.linear_policy(), SolverConfig(0.1, 1.0), 0, seed=0)


# -- CSV -------------------------------------------------------------------------------


def test_trajectory_csv():
    p = problems.zero_problem(xi=2.0, tau=0.5)
    traj = simulate(p, problems.linear_policy(), SolverConfig(0.5, 1.0), brownian.generate(0, 0, 0.5, 1.0))
    fh = io.StringIO()
    write_trajectory_csv(traj, fh)
    assert fh.getvalue() == "t,y_1\n-0.5,2.0\n0.0,2.0\n0.5,2.0\n1.0,2.0\n"


def test_moments_csv():
    m = run_ensemble(problems.zero_problem(xi=2.0, tau=0.5), problems.linear_policy(), SolverConfig(0.5, 1.0), 3, 0)
    fh = io.StringIO()
    write_moments_csv(m, fh)
    assert fh.getvalue().splitlines() == ["t,mean_sq,stderr,n", "0.0,4.0,0.0,3", "0.5,4.0,0.0,3", "1.0,4.0,0.0,3"]
