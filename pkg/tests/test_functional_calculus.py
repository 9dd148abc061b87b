import numpy as np
import pytest

from ppde_tools.catalogue import build_catalogue, heat_functional, riccati_functional
from ppde_tools.diffusion import DiffusionSpec
from ppde_tools.exceptions import DomainError
from ppde_tools.functional_calculus import (DerivativeConfig, apply_generator, classical_solution_check,
                                            horizontal_derivative, ppde_residual, vertical_gradient,
                                            vertical_hessian)
from ppde_tools.functionals import compile_expression, constant
from ppde_tools.nonlinearity import make_affine, make_power
from ppde_tools.paths import DiscretePath


def sample_path(grid, d):
    return DiscretePath.from_function(grid, lambda s: [0.5 + 0.3 * (i + 1) * s + 0.1 * np.sin(3.0 * s)
                                                       for i in range(d)])


class TestCatalogue:
    @pytest.mark.parametrize('entry', build_catalogue(1.0), ids=lambda e: e.name)
    def test_matches_finite_differences(self, grid, entry):
        x = sample_path(grid, entry.dimension)
        t = 0.5
        cfg = DerivativeConfig()
        # forward horizontal differences are first order in the time step
        assert horizontal_derivative(entry.functional, t, x, cfg) == pytest.approx(entry.dt(t, x),
                                                                                   abs=2.0 * grid.max_step)
        assert np.allclose(vertical_gradient(entry.functional, t, x, cfg), entry.grad(t, x), atol=1e-6)
        assert np.allclose(vertical_hessian(entry.functional, t, x, cfg), entry.hess(t, x), atol=1e-3)

    def test_heat_residual(self, grid, brownian):
        x = sample_path(grid, 1)
        residual = ppde_residual(brownian, make_affine(0.0, 0.0), heat_functional(1.0), 0.3, x)
        assert abs(residual) <= 1e-3

    def test_riccati_solves_its_ode(self, grid, brownian):
        x = sample_path(grid, 1)
        cfg = DerivativeConfig(time_step_h=1e-6)
        residual = ppde_residual(brownian, make_power(1.0, 2.0), riccati_functional(1.0), 0.2, x, cfg)
        assert abs(residual) <= 1e-4


class TestDerivatives:
    def test_hessian_asymmetry_reported(self, grid):
        u = compile_expression('x1 * x2 + x1^2', 2)
        hess, asymmetry = vertical_hessian(u, 0.4, sample_path(grid, 2), return_asymmetry=True)
        assert np.allclose(hess, [[2.0, 1.0], [1.0, 0.0]], atol=1e-3)
        assert asymmetry <= 1e-6

    def test_generator_of_square(self, grid):
        spec = DiffusionSpec.constant([[2.0]], [1.0])
        u = compile_expression('x^2', 1)
        x = DiscretePath.constant(grid, [3.0])
        # 0.5 * 4 * 2 + 1 * 6
        assert apply_generator(spec, u, 0.5, x) == pytest.approx(10.0, abs=1e-3)

    def test_no_derivative_at_horizon(self, grid, origin):
        with pytest.raises(DomainError):
            horizontal_derivative(heat_functional(1.0), 1.0, origin)

    def test_central_needs_opt_in(self):
        with pytest.raises(DomainError):
            DerivativeConfig(scheme='central')
        cfg = DerivativeConfig(scheme='central', allow_central=True)
        assert cfg.scheme == 'central'

    def test_central_scheme_is_exact_for_quadratic_time(self, grid, origin):
        u = compile_expression('t^2', 1)
        cfg = DerivativeConfig(scheme='central', allow_central=True)
        assert horizontal_derivative(u, 0.5, origin, cfg) == pytest.approx(1.0, abs=1e-9)

    def test_non_positive_steps_rejected(self):
        with pytest.raises(DomainError):
            DerivativeConfig(step_h=0.0)


class TestClassicalCheck:
    def test_heat_is_a_classical_solution(self, grid, brownian):
        points = [(0.1, sample_path(grid, 1)), (0.5, DiscretePath.constant(grid, [1.0]))]
        report = classical_solution_check(brownian, make_affine(0.0, 0.0), heat_functional(1.0),
                                          compile_expression('x^2', 1), points)
        assert report['solution']

    def test_shifted_heat_is_only_a_supersolution(self, grid, brownian):
        u = heat_functional(1.0) + constant(1.0)
        points = [(0.2, sample_path(grid, 1))]
        report = classical_solution_check(brownian, make_affine(0.0, 0.0), u, compile_expression('x^2', 1), points)
        assert report['supersolution']
        assert not report['subsolution']
