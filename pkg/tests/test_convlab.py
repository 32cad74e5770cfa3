import numpy as np
import pytest

from cooptnav.convlab import (TimeVaryingProblem, check_theorem1,
                              halving_ratios, measure_curvature,
                              moving_target_problem, ode_solve,
                              proximal_sequence, quadratic_problem, run_sweep,
                              sinusoidal_problem, sweep_csv)


def zero_gradient_problem(dim=2):
    return TimeVaryingProblem(
        name="flat", dim=dim,
        g=lambda a, th: 0.0,
        grad_g=lambda a, th: np.zeros(dim),
        theta0=np.full(dim, 0.7), lipschitz=1e-9)


def constant_gradient_problem(c, dim=2):
    c = np.asarray(c, dtype=np.float64)
    return TimeVaryingProblem(
        name="linear", dim=dim,
        g=lambda a, th: float(c @ th),
        grad_g=lambda a, th: c.copy(),
        theta0=np.zeros(dim), lipschitz=1e-9)


class TestOdeSolve:
    def test_exponential_decay_closed_form(self):
        problem = quadratic_problem(target=np.zeros(1), dim=1)
        problem.theta0 = np.array([1.0])
        sol = ode_solve(problem, problem.theta0, eta=1.0, horizon=1.0,
                        substep=1e-3)
        assert sol(1.0)[0] == pytest.approx(np.exp(-1.0), abs=1e-7)
        assert sol(0.5)[0] == pytest.approx(np.exp(-0.5), abs=1e-7)

    def test_zero_gradient_stationary(self):
        problem = zero_gradient_problem()
        sol = ode_solve(problem, problem.theta0, 1.0, 2.0, substep=0.01)
        np.testing.assert_array_equal(sol(2.0), problem.theta0)

    def test_fourth_order_self_convergence(self):
        problem = moving_target_problem()
        coarse = ode_solve(problem, problem.theta0, 0.5, 1.0, substep=0.01)
        fine = ode_solve(problem, problem.theta0, 0.5, 1.0, substep=0.005)
        diff = np.linalg.norm(coarse(1.0) - fine(1.0))
        assert diff < 1e-8


class TestProximalSequence:
    def test_zero_gradient_zero_errors(self):
        problem = zero_gradient_problem()
        run = proximal_sequence(problem, problem.theta0, 0.1, 1.0, 1.0)
        assert run.max_error == 0.0
        assert len(run.alphas) == 11

    def test_moving_target_error_shrinks_linearly(self):
        problem = moving_target_problem()
        errors = []
        for dalpha in (0.1, 0.05, 0.025):
            run = proximal_sequence(problem, problem.theta0, dalpha, 1.0, 1.0)
            errors.append(run.max_error)
        assert 0.35 <= errors[1] / errors[0] <= 0.65
        assert 0.35 <= errors[2] / errors[1] <= 0.65

    def test_noise_grows_error_within_bound_constant(self):
        problem = moving_target_problem()
        clean = proximal_sequence(problem, problem.theta0, 0.05, 1.0, 1.0)
        noisy = proximal_sequence(problem, problem.theta0, 0.05, 1.0, 1.0,
                                  eps=0.01, noise_seed=4)
        growth = noisy.max_error - clean.max_error
        c_const = (np.exp(1.0) - 1.0) / 1.0
        assert growth <= c_const * 0.01 + 1e-12

    def test_coincides_with_ode_for_constant_gradient(self):
        problem = constant_gradient_problem([0.3, -0.8])
        run = proximal_sequence(problem, problem.theta0, 0.1, 2.0, 1.0)
        assert run.max_error < 1e-12

    def test_noise_floor_for_small_steps(self):
        # with eps > 0 the terminal error stays above a positive floor
        problem = moving_target_problem()
        terminal = []
        for dalpha in (0.02, 0.01, 0.005):
            run = proximal_sequence(problem, problem.theta0, dalpha, 1.0,
                                    1.0, eps=0.05, noise_seed=7)
            terminal.append(run.errors[-1])
        assert min(terminal) > 1e-4


class TestCheckTheorem1:
    def test_zero_gradient_trivially_satisfied(self):
        problem = zero_gradient_problem()
        run = proximal_sequence(problem, problem.theta0, 0.1, 1.0, 1.0)
        verdict = check_theorem1(run, lipschitz=1.0)
        assert verdict["max_error"] == 0.0
        assert verdict["satisfied"]

    @pytest.mark.parametrize("dalpha", [0.1, 0.05, 0.025])
    def test_quadratic_bound_holds(self, dalpha):
        problem = moving_target_problem()
        run = proximal_sequence(problem, problem.theta0, dalpha, 1.0, 1.0)
        verdict = check_theorem1(run, lipschitz=problem.lipschitz)
        assert verdict["satisfied"], verdict

    def test_noisy_quadratic_bound_holds(self):
        problem = moving_target_problem()
        run = proximal_sequence(problem, problem.theta0, 0.05, 1.0, 1.0,
                                eps=0.01, noise_seed=1)
        verdict = check_theorem1(run, lipschitz=problem.lipschitz)
        assert verdict["satisfied"], verdict

    def test_sinusoidal_with_grid_estimated_lipschitz(self):
        problem = sinusoidal_problem()
        run = proximal_sequence(problem, problem.theta0, 0.02, 1.0, 1.0)
        # grid-estimated Lipschitz constant of grad g over the visited range
        lo = min(run.thetas.min(), run.ode_thetas.min()) - 0.5
        hi = max(run.thetas.max(), run.ode_thetas.max()) + 0.5
        grid = np.linspace(lo, hi, 2001)
        grads = np.array([problem.grad_g(0.0, np.array([t]))[0]
                          for t in grid])
        lip = np.abs(np.diff(grads) / np.diff(grid)).max()
        verdict = check_theorem1(run, lipschitz=float(lip))
        assert verdict["satisfied"], verdict

    def test_curvature_positive_for_moving_target(self):
        problem = moving_target_problem()
        run = proximal_sequence(problem, problem.theta0, 0.05, 1.0, 1.0)
        assert measure_curvature(run) > 0.1


class TestSweep:
    def test_single_quadratic_row(self):
        rows = run_sweep([{"problem": "moving_quadratic", "delta_alpha": 0.05,
                           "eta": 1.0, "horizon": 1.0}])
        assert len(rows) == 1
        assert rows[0]["satisfied"]
        text = sweep_csv(rows)
        assert text.splitlines()[0] == \
            "problem,delta_alpha,eta,eps,max_error,bound,satisfied"

    def test_empty_sweep(self):
        assert run_sweep([]) == []
        assert sweep_csv([]).splitlines() == [
            "problem,delta_alpha,eta,eps,max_error,bound,satisfied"]

    def test_halving_ratio_column(self):
        entries = [{"problem": "moving_quadratic", "delta_alpha": d,
                    "eta": 1.0, "horizon": 1.0}
                   for d in (0.1, 0.05, 0.025)]
        rows = run_sweep(entries)
        ratios = halving_ratios(rows)
        assert len(ratios) == 2
        for ratio in ratios:
            assert 0.35 <= ratio <= 0.65
