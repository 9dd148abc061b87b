import math

import numpy as np
import pytest

from ppde_tools.exceptions import DomainError
from ppde_tools.functionals import compile_expression
from ppde_tools.nonlinearity import (FAIL, NOT_APPLICABLE, PASS, DomainInterval, conjugate_exponent, make_affine,
                                     make_control_dual, make_custom, make_power, make_power_sum, make_superprocess,
                                     validate_conditions)


@pytest.fixture
def samples(grid, wiggly_path):
    return [(0.0, wiggly_path), (0.5, wiggly_path)]


class TestDomainInterval:
    def test_membership(self):
        d = DomainInterval(0.0, 1.0, closed_lower=True, closed_upper=False)
        assert d.contains(0.0)
        assert not d.contains(1.0)
        assert not d.contains(np.nan)
        assert str(d) == '[0.0, 1.0)'

    def test_require_names_the_set(self):
        with pytest.raises(DomainError, match=r'\[0.0, inf\)'):
            DomainInterval.nonnegative().require(-1.0, 'u')


class TestConstructors:
    def test_affine(self, wiggly_path):
        f = make_affine(compile_expression('x', 1), 2.0)
        x_t = wiggly_path.evaluate(0.3)[0]
        assert f(0.3, wiggly_path, 1.5) == pytest.approx(x_t + 3.0)
        assert not f.path_independent

    def test_superprocess(self, origin):
        f = make_superprocess(1.0, 0.5, atoms=[(2.0, 3.0)])
        z = 0.7
        expected = z + 0.5 * z * z + 3.0 * (math.exp(-2.0 * z) - 1.0 + 2.0 * z)
        assert f(0.0, origin, z) == pytest.approx(expected)
        assert f.path_independent
        with pytest.raises(DomainError):
            f(0.0, origin, -0.1)

    def test_superprocess_negative_weight(self, origin):
        f = make_superprocess(0.0, 0.0, atoms=[(1.0, -1.0)])
        with pytest.raises(DomainError):
            f(0.0, origin, 1.0)
        with pytest.raises(DomainError):
            make_superprocess(0.0, 0.0, atoms=[(0.0, 1.0)])

    def test_power_sum(self, origin):
        f = make_power_sum(0.0, 1.0, terms=[(1.5, 2.0)])
        assert f(0.0, origin, 4.0) == pytest.approx(16.0 + 2.0 * 8.0)
        with pytest.raises(DomainError):
            make_power_sum(0.0, 1.0, terms=[(2.0, 1.0)])

    def test_power(self, origin):
        assert make_power(2.0, 3.0)(0.0, origin, 2.0) == pytest.approx(16.0)
        with pytest.raises(DomainError):
            make_power(1.0, 0.5)

    def test_control_dual(self, origin):
        assert conjugate_exponent(2.0) == 2.0
        assert conjugate_exponent(3.0) == pytest.approx(1.5)
        f = make_control_dual(0.2, 1.0, 2.0)
        assert f(0.0, origin, 0.5) == pytest.approx(-0.2 + 0.25)
        g = make_control_dual(0.0, -1.0, 2.0)
        with pytest.raises(DomainError):
            g(0.0, origin, 0.5)

    def test_custom_and_dz(self, origin):
        f = make_custom('z^3 + t', 1, 1.0)
        times, hist = origin.history(0.5)
        slope = f.dz(0.5, times, hist[None], 2.0)[0]
        assert slope == pytest.approx(12.0, rel=1e-5)

    def test_dz_is_one_sided_at_the_boundary(self, origin):
        f = make_power(1.0, 2.0)
        times, hist = origin.history(0.0)
        assert f.dz(0.0, times, hist[None], 0.0)[0] == pytest.approx(0.0, abs=1e-5)


class TestValidateConditions:
    def test_square_on_half_line(self, samples):
        report = validate_conditions(make_power(1.0, 2.0), samples, n_draws=400, seed=3)
        assert report['local_lipschitz']['status'] == PASS
        assert report['boundary']['status'] == PASS
        # only the lower bound f >= -alpha - beta |z| is required on a half line
        assert report['linear_growth']['status'] == PASS

    def test_constant_one_fails_at_the_boundary(self, samples):
        f = make_custom('1', 1, 1.0, DomainInterval.nonnegative())
        report = validate_conditions(f, samples, n_draws=400, seed=3)
        assert report['boundary']['status'] == FAIL
        assert report['boundary']['lower']['limit'] == pytest.approx(1.0)
        assert report['linear_growth']['status'] == PASS

    def test_affine_on_the_line(self, samples):
        report = validate_conditions(make_affine(0.5, -2.0), samples, n_draws=400, seed=3)
        assert report['local_lipschitz']['lambda'] == pytest.approx(2.0)
        assert report['linear_growth']['status'] == PASS
        assert report['linear_growth']['beta'] == pytest.approx(2.0)
        assert report['boundary']['status'] == NOT_APPLICABLE

    def test_needs_samples(self):
        with pytest.raises(DomainError):
            validate_conditions(make_affine(0.0, 0.0), [])
