import math

import numpy as np
import pytest

import modeling_mild
from modeling_mild import (ClampCounter, MildProblem, MildSolver, SolverConfig, StopRule, clamp_to_domain,
                           fixed_point_residual, mild_inequality_check, ode_backward, ode_solution_functional,
                           solve_point)
from ppde_tools.affine_oracle import fk_solve
from ppde_tools.catalogue import heat_functional, riccati_functional
from ppde_tools.diffusion import DiffusionSpec, SimConfig, combined_std_error
from ppde_tools.exceptions import ConfigurationError, DomainError, DomainEscapeError
from ppde_tools.functionals import compile_expression, constant
from ppde_tools.nonlinearity import DomainInterval, make_affine, make_power, make_superprocess
from ppde_tools.paths import DiscretePath, TimeGrid


def riccati(grid):
    return MildProblem(DiffusionSpec.brownian(1), make_power(1.0, 2.0), constant(1.0), grid, label='riccati')


def heat(grid, g='x^2'):
    return MildProblem(DiffusionSpec.brownian(1), make_affine(0.0, 0.0), compile_expression(g, 1, grid.horizon),
                       grid, label='heat')


class TestOdeFastPath:
    def test_riccati_value(self, grid, origin):
        solution = solve_point(0.0, origin, riccati(grid), SolverConfig(backend='ode_fast_path'))
        assert solution.value == pytest.approx(0.5, abs=1e-6)
        assert solution.std_error == 0.0
        assert solution.status == 'converged'

    def test_riccati_along_the_grid(self, grid):
        values = ode_backward(riccati(grid))
        exact = 1.0 / (1.0 + (1.0 - grid.nodes))
        assert np.allclose(values, exact, atol=1e-8)
        u = ode_solution_functional(riccati(grid))
        assert u.path_independent

    def test_needs_path_independent_data(self, grid, origin):
        with pytest.raises(ConfigurationError):
            solve_point(0.0, origin, heat(grid), SolverConfig(backend='ode_fast_path'))


class TestNestedMonteCarlo:
    def test_zero_reaction_is_exact(self, coarse_grid):
        x = DiscretePath.constant(coarse_grid, [0.0])
        cfg = SolverConfig(backend='nested_mc', picard_iters=2, inner_budget=(64, 8), seed=1)
        solution = solve_point(0.0, x, heat(coarse_grid, g='1'), cfg)
        assert solution.value == 1.0
        assert solution.std_error == 0.0

    def test_affine_discount_is_exact(self, coarse_grid):
        x = DiscretePath.constant(coarse_grid, [0.0])
        prob = MildProblem(DiffusionSpec.brownian(1), make_affine(0.0, 1.0), constant(1.0), coarse_grid)
        solution = solve_point(0.0, x, prob, SolverConfig(picard_iters=1, inner_budget=(64,), seed=2))
        assert solution.shift == pytest.approx(1.0, abs=1e-6)
        assert solution.value == pytest.approx(math.exp(-1.0), abs=1e-6)
        assert solution.to_dict()['iterations_form'] == 'shifted'

    def test_riccati(self):
        grid = TimeGrid.uniform(1.0, 50)
        x = DiscretePath.constant(grid, [0.0])
        cfg = SolverConfig(picard_iters=3, inner_budget=(512, 64, 16), seed=7)
        solution = solve_point(0.0, x, riccati(grid), cfg)
        assert abs(solution.value - 0.5) <= max(0.02, 3.0 * solution.std_error)
        assert len(solution.iterates) == 4
        assert len(solution.changes) == 3

    def test_worker_count_does_not_change_value(self, coarse_grid):
        x = DiscretePath.constant(coarse_grid, [0.0])
        prob = riccati(coarse_grid)
        values = [solve_point(0.0, x, prob, SolverConfig(picard_iters=2, inner_budget=(64, 16), seed=5,
                                                         block_rows=128, workers=w)).value for w in (1, 2, 8)]
        assert values[0] == values[1] == values[2]

    def test_domain_escape(self, coarse_grid):
        x = DiscretePath.constant(coarse_grid, [0.0])
        prob = MildProblem(DiffusionSpec.brownian(1), make_power(1.0, 2.0), constant(-1.0), coarse_grid)
        with pytest.raises(DomainEscapeError) as err:
            solve_point(0.0, x, prob, SolverConfig(picard_iters=1, inner_budget=(16,), seed=0))
        assert err.value.iteration == 0

    def test_nonlinear_reaction_with_random_terminal(self):
        # u_0(s, X^s) = X_s^2 + 1 - s, so u_1(0, 0) = 1 - 0.1 * int_0^1 (2 s^2 + 1) ds = 1 - 0.1 * 5 / 3
        grid = TimeGrid.uniform(1.0, 50)
        x = DiscretePath.constant(grid, [0.0])
        prob = MildProblem(DiffusionSpec.brownian(1), make_power(0.1, 2.0), compile_expression('x^2', 1, 1.0), grid)
        cfg = SolverConfig(picard_iters=1, inner_budget=(4000, 128), shift=0.0, seed=3)
        solution = solve_point(0.0, x, prob, cfg, with_residual=False)
        assert abs(solution.value - (1.0 - 0.1 * 5.0 / 3.0)) <= 3.0 * solution.std_error + 0.01
        # 1 - 0.1 E[X_1^4] is what one terminal sample per child would give
        assert solution.value > 0.75

    def test_u0_budget_falls_back_to_last_entry(self, coarse_grid):
        nonlinear = MildProblem(DiffusionSpec.brownian(1), make_power(0.1, 2.0),
                                compile_expression('x^2', 1, 1.0), coarse_grid)
        solver = MildSolver(nonlinear, SolverConfig(picard_iters=2, inner_budget=(64, 16)))
        assert solver.u0_budget == 16
        assert not solver.single_continuation
        assert MildSolver(nonlinear, SolverConfig(picard_iters=1, inner_budget=(64, 8))).u0_budget == 8
        affine = MildProblem(DiffusionSpec.brownian(1), make_affine(0.2, 0.5),
                             compile_expression('x^2', 1, 1.0), coarse_grid)
        assert MildSolver(affine, SolverConfig(picard_iters=1, inner_budget=(64,))).single_continuation
        assert MildSolver(riccati(coarse_grid), SolverConfig(picard_iters=1, inner_budget=(64,))).single_continuation

    def test_agrees_with_feynman_kac(self, grid, origin, brownian):
        alpha, beta, g = constant(0.2), constant(0.5), compile_expression('x^2', 1, 1.0)
        oracle = fk_solve(0.0, origin, alpha, beta, g, brownian, SimConfig(n_paths=10000, grid=grid, seed=8))
        prob = MildProblem(brownian, make_affine(alpha, beta), g, grid, label='affine')
        solution = solve_point(0.0, origin, prob, SolverConfig(picard_iters=1, inner_budget=(10000,), seed=9))
        expected = math.exp(-0.5) - 0.4 * (1.0 - math.exp(-0.5))
        assert oracle.value == pytest.approx(expected, abs=3.0 * oracle.std_error + 0.01)
        assert abs(solution.value - oracle.value) <= 3.0 * combined_std_error(oracle, solution.estimate) + 1e-3

    def test_running_integral_terminal(self, grid):
        spec = DiffusionSpec.constant([[0.1]], [1.0])
        x = DiscretePath.constant(grid, [0.0])
        prob = MildProblem(spec, make_affine(0.0, 0.0), compile_expression('I', 1, 1.0), grid)
        solution = solve_point(0.0, x, prob, SolverConfig(picard_iters=1, inner_budget=(4000,), seed=12))
        assert abs(solution.value - 0.5) <= 3.0 * solution.std_error + grid.max_step

    def test_monotone_in_terminal_value(self, coarse_grid):
        x = DiscretePath.constant(coarse_grid, [0.0])
        cfg = SolverConfig(picard_iters=1, inner_budget=(2000,), seed=4)
        low, high = (solve_point(0.0, x, heat(coarse_grid, g=text), cfg, with_residual=False)
                     for text in ('x^2', 'x^2 + abs(x)'))
        assert low.value <= high.value + 3.0 * math.hypot(low.std_error, high.std_error)

    def test_superprocess_iterates_stay_in_domain(self, coarse_grid):
        x = DiscretePath.constant(coarse_grid, [0.0])
        f = make_superprocess(0.1, 0.1, atoms=[(1.0, 0.05)])
        prob = MildProblem(DiffusionSpec.brownian(1), f, compile_expression('x^2 + 1', 1, 1.0), coarse_grid)
        cfg = SolverConfig(picard_iters=2, inner_budget=(256, 16, 8), seed=6)
        solution = solve_point(0.0, x, prob, cfg, with_residual=False)
        assert all(e.value >= -cfg.tolerance for e in solution.iterates)
        assert solution.clamp_count == 0
        assert solution.value > 0.0


class TestRegression:
    def test_heat_terminal_square(self, grid, origin):
        cfg = SolverConfig(backend='regression', picard_iters=2, outer_paths=4000, seed=11)
        solution = solve_point(0.0, origin, heat(grid), cfg)
        assert abs(solution.value - 1.0) <= 3.0 * solution.std_error + 0.01

    def test_riccati(self, grid, origin):
        cfg = SolverConfig(backend='regression', picard_iters=3, outer_paths=500, seed=11)
        solution = solve_point(0.0, origin, riccati(grid), cfg)
        assert solution.value == pytest.approx(0.5, abs=0.02)

    def test_nonlinear_reaction_with_random_terminal(self):
        grid = TimeGrid.uniform(1.0, 50)
        x = DiscretePath.constant(grid, [0.0])
        prob = MildProblem(DiffusionSpec.brownian(1), make_power(0.1, 2.0), compile_expression('x^2', 1, 1.0), grid)
        cfg = SolverConfig(backend='regression', picard_iters=1, outer_paths=4000, shift=0.0, seed=3)
        solution = solve_point(0.0, x, prob, cfg)
        assert abs(solution.value - (1.0 - 0.1 * 5.0 / 3.0)) <= 3.0 * solution.std_error + 0.02
        assert solution.residual['surrogate'] == 'regression'

    def test_picard_changes_contract(self, coarse_grid):
        x = DiscretePath.constant(coarse_grid, [0.0])
        prob = MildProblem(DiffusionSpec.brownian(1), make_affine(0.2, 0.5), compile_expression('x^2', 1, 1.0),
                           coarse_grid)
        cfg = SolverConfig(backend='regression', picard_iters=4, outer_paths=2000, shift=0.0, seed=2)
        solution = solve_point(0.0, x, prob, cfg, with_residual=False)
        changes = solution.changes
        assert len(changes) == 4
        for prev, cur in zip(changes[:-1], changes[1:]):
            assert cur['change'] <= 0.5 * prev['change'] + 3.0 * cur['std_error']
        assert solution.to_dict()['iterations_form'] == 'plain'


class TestSolverConfig:
    def test_budget_length(self):
        with pytest.raises(ConfigurationError) as err:
            SolverConfig(picard_iters=3, inner_budget=(1024,))
        assert any('inner_budget' in p for p in err.value.problems)

    def test_unknown_backend(self):
        with pytest.raises(ConfigurationError):
            SolverConfig(backend='bogus')

    def test_start_time_checks(self, grid, origin):
        solver = MildSolver(riccati(grid), SolverConfig(backend='ode_fast_path'))
        with pytest.raises(DomainError):
            solver.solve_point(1.0, origin)
        with pytest.raises(DomainError):
            solver.solve_point(0.005, origin)


class TestClamp:
    def test_projection_counts(self):
        counter = ClampCounter()
        out = clamp_to_domain(np.array([-1.0, 0.5]), DomainInterval.nonnegative(), counter=counter)
        assert out.tolist() == [0.0, 0.5]
        assert counter.count == 1
        assert counter.max_excursion == pytest.approx(1.0)

    def test_open_endpoint_moves_inwards(self):
        domain = DomainInterval(0.0, math.inf, closed_lower=False)
        assert clamp_to_domain(-1.0, domain, eps=1e-3) == pytest.approx(1e-3)


class TestChecks:
    def test_fixed_point_residual_of_exact_solution(self, grid, origin):
        sim = SimConfig(n_paths=64, grid=grid, seed=0)
        points = [(0.0, origin), (0.5, origin)]
        report = fixed_point_residual(riccati_functional(1.0), riccati(grid), points, sim)
        assert report['abs_residual'] < 0.01
        assert report['std_error'] == 0.0

    def test_fixed_point_residual_of_wrong_candidate(self, grid, origin):
        sim = SimConfig(n_paths=64, grid=grid, seed=0)
        report = fixed_point_residual(constant(1.0), riccati(grid), [(0.0, origin), (0.5, origin)], sim)
        assert report['abs_residual'] == pytest.approx(1.0)

    def test_solve_reports_fixed_point_residual(self, coarse_grid):
        x = DiscretePath.constant(coarse_grid, [0.0])
        ode = solve_point(0.0, x, riccati(coarse_grid), SolverConfig(backend='ode_fast_path'))
        assert ode.residual['surrogate'] == 'ode'
        assert ode.residual['abs_residual'] < 0.05
        nested = solve_point(0.0, x, heat(coarse_grid), SolverConfig(picard_iters=1, inner_budget=(2000,), seed=1))
        report = nested.residual
        assert report['surrogate'] == 'regression'
        assert abs(report['residual']) <= 3.0 * math.hypot(report['std_error'], nested.std_error)
        assert nested.to_dict()['residual'] is report
        skipped = solve_point(0.0, x, heat(coarse_grid), SolverConfig(picard_iters=1, inner_budget=(16,), seed=1),
                              with_residual=False)
        assert skipped.residual is None

    def test_fixed_point_residual_needs_a_point(self, grid):
        with pytest.raises(DomainError):
            fixed_point_residual(constant(1.0), riccati(grid), [], SimConfig(n_paths=4, grid=grid, seed=0))

    def test_mild_inequality(self, grid, origin, sim):
        prob = heat(grid)
        exact = mild_inequality_check(heat_functional(1.0), prob, 0.0, origin, StopRule(t_max=0.5), sim)
        assert exact['status'] == 'solution'
        assert exact['mean_stop_time'] == pytest.approx(0.5)
        above = compile_expression('x^2 + 2 * (T - t)', 1, 1.0)
        report = mild_inequality_check(above, prob, 0.0, origin, StopRule(t_max=0.5), sim)
        assert report['status'] == 'supersolution'
        assert report['gap']['value'] == pytest.approx(-0.5, abs=0.1)
        assert report['terminal_gap'] == pytest.approx(0.0)

    def test_stop_rule_hits_tube(self, grid, origin, sim):
        report = mild_inequality_check(heat_functional(1.0), heat(grid), 0.0, origin, StopRule(gamma=0.3), sim)
        assert report['mean_stop_time'] < 0.5
        assert report['status'] == 'solution'


def test_module_exports_backends():
    assert modeling_mild.BACKENDS == ('nested_mc', 'regression', 'ode_fast_path')
