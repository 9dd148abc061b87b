import pytest

from ppde_tools import viscosity
from ppde_tools.catalogue import heat_functional
from ppde_tools.diffusion import DiffusionSpec, SimConfig
from ppde_tools.exceptions import DomainError
from ppde_tools.functionals import compile_coefficient, time_function
from ppde_tools.nonlinearity import make_affine
from ppde_tools.paths import DiscretePath


@pytest.fixture
def heat():
    return heat_functional(1.0)


def slope(a, r):
    return time_function(lambda t: a * (t - r), label=f'{a} (t - r)')


class TestResidual:
    @pytest.mark.parametrize('a', [1.0, -1.0])
    def test_time_slope(self, heat, origin, a):
        phi = heat + slope(a, 0.5)
        report = viscosity.residual_at_test_function(phi, DiffusionSpec.brownian(1), make_affine(0.0, 0.0), heat,
                                                     0.5, origin)
        assert report['residual'] == pytest.approx(a, abs=1e-3)
        assert report['verdict'] == (viscosity.CONSISTENT if a > 0 else viscosity.VIOLATED)

    def test_bad_side(self, heat, origin):
        with pytest.raises(DomainError):
            viscosity.residual_at_test_function(heat, DiffusionSpec.brownian(1), make_affine(0.0, 0.0), heat, 0.5,
                                                origin, side='both')


class TestCandidate:
    def test_validation(self, heat, origin):
        with pytest.raises(DomainError):
            viscosity.TestFunctionCandidate(heat, 0.5, origin, 0.0, 0.1)
        with pytest.raises(DomainError):
            viscosity.TestFunctionCandidate(heat, 0.5, origin, 0.5, 0.5)
        with pytest.raises(DomainError):
            viscosity.TestFunctionCandidate(heat, 1.0, origin, 0.5, 0.1)


class TestStochasticMembership:
    def test_phi_above_u_is_a_member(self, heat, origin, sim):
        cand = viscosity.TestFunctionCandidate(heat + slope(1.0, 0.5), 0.5, origin, 1.0, 0.2)
        report = viscosity.check_membership_SP(heat, cand, DiffusionSpec.brownian(1), sim)
        assert report['member']
        assert report['p_tau_gt_r'] == 1.0
        assert [row['tilde_tau'] for row in report['rules']] == pytest.approx([0.5, 0.55, 0.6])

    def test_phi_below_u_is_not(self, heat, origin, sim):
        cand = viscosity.TestFunctionCandidate(heat + slope(-1.0, 0.5), 0.5, origin, 1.0, 0.2)
        report = viscosity.check_membership_SP(heat, cand, DiffusionSpec.brownian(1), sim)
        assert not report['member']
        assert report['rules'][-1]['verdict'] == viscosity.VIOLATED
        mirrored = viscosity.check_membership_SP(heat, cand, DiffusionSpec.brownian(1), sim, side='super')
        assert mirrored['member']

    def test_zero_weight_changes_nothing(self, heat, origin, sim):
        cand = viscosity.TestFunctionCandidate(heat + slope(1.0, 0.5), 0.5, origin, 0.3, 0.2)
        spec = DiffusionSpec.brownian(1)
        beta = compile_coefficient(0.0, 1, 1.0, 'vector')
        plain = viscosity.check_membership_SP(heat, cand, spec, sim)
        weighted = viscosity.check_membership_SP(heat, cand, spec, sim, beta=beta)
        assert weighted['weighted']
        assert [row['value'] for row in weighted['rules']] == pytest.approx([row['value'] for row in plain['rules']])

    def test_stop_rule_outside_window(self, heat, origin, sim):
        cand = viscosity.TestFunctionCandidate(heat, 0.5, origin, 1.0, 0.2)
        with pytest.raises(DomainError):
            viscosity.check_membership_SP(heat, cand, DiffusionSpec.brownian(1), sim, stop_rules=[0.8])


class TestPointwiseMembership:
    def test_local_maximum(self, heat, origin, grid):
        cfg = SimConfig(n_paths=200, grid=grid, seed=8)
        spec = DiffusionSpec.brownian(1)
        assert viscosity.check_membership_P(heat, heat, 0.5, origin, 0.2, spec, cfg)['member']
        assert viscosity.check_membership_P(heat, heat + slope(1.0, 0.5), 0.5, origin, 0.2, spec, cfg)['member']
        report = viscosity.check_membership_P(heat, heat + slope(-1.0, 0.5), 0.5, origin, 0.2, spec, cfg)
        assert not report['member']
        assert report['max_excess'] > 0.0

    def test_off_grid_time(self, heat, origin, grid):
        cfg = SimConfig(n_paths=8, grid=grid, seed=8)
        with pytest.raises(DomainError):
            viscosity.check_membership_P(heat, heat, 0.505, origin, 0.2, DiffusionSpec.brownian(1), cfg)


def test_battery_finds_no_contradiction_for_the_heat_solution(coarse_grid):
    x = DiscretePath.constant(coarse_grid, [0.0])
    cfg = SimConfig(n_paths=500, grid=coarse_grid, seed=21, block_size=500)
    report = viscosity.consistency_battery(heat_functional(1.0), DiffusionSpec.brownian(1), make_affine(0.0, 0.0),
                                           [(0.0, x), (0.5, x)], cfg)
    assert report['findings'] == []
    assert report['checked'] == 2 * 3 * 6 * 2
