import dataclasses
import logging
import math

import numpy as np
from tqdm import tqdm

from modeling_mild import MildProblem, MildSolver, ode_solution_functional
from ppde_tools import affine_oracle, control, viscosity
from ppde_tools.catalogue import build_catalogue, heat_functional
from ppde_tools.config import (build_grid, build_nonlinearity, build_sim_config, build_solver_config,
                               build_spec, build_start, build_terminal)
from ppde_tools.diffusion import (DiffusionSpec, lipschitz_estimate, martingale_check, simulate_from,
                                  stochastic_exponential, terminal_estimate, warn_if_noisy)
from ppde_tools.exceptions import ConfigurationError
from ppde_tools.functional_calculus import (DerivativeConfig, assert_nonanticipative, horizontal_derivative,
                                            ppde_residual, vertical_gradient, vertical_hessian)
from ppde_tools.functionals import compile_coefficient, compile_expression
from ppde_tools.nonlinearity import FAIL, make_affine, validate_conditions
from ppde_tools.paths import DiscretePath

logger = logging.getLogger(__name__)


def _result(value, std_error, n_samples, diagnostics, artifacts=None):
    return {'value': value, 'std_error': std_error, 'n_samples': n_samples, 'diagnostics': diagnostics,
            'artifacts': artifacts or {}}


def _derivative_config(config):
    derivs = config['derivs']
    return DerivativeConfig(step_h=derivs['step_h'], time_step_h=derivs['time_step_h'], scheme=derivs['scheme'],
                            allow_central=derivs['scheme'] == 'central')


def evaluate_simulate(config, workers=None, show_progress=None):
    grid = build_grid(config)
    spec = build_spec(config)
    r, x = build_start(config, grid)
    sim = build_sim_config(config, grid, workers, show_progress)
    g = build_terminal(config)
    ens = simulate_from(r, x, spec, sim, lineage=(1,))
    estimate = terminal_estimate(g, ens)
    warn_if_noisy(estimate, f'E[{g.label}]', config['run']['std_error_warn_ratio'])
    d, T = config['diffusion']['d'], grid.horizon
    diagnostics = {'terminal_functional': g.label, 'start_time': ens.start_time}
    checks = config['simulate']
    if checks['martingale_exprs']:
        dcfg = _derivative_config(config)
        diagnostics['martingale'] = [
            martingale_check(compile_expression(e, d, T), spec, r, x, sim, dcfg, ensemble=ens).to_dict()
            for e in tqdm(checks['martingale_exprs'], desc='martingale', disable=not sim.show_progress)]
    if checks['doleans_beta'] is not None:
        beta = compile_coefficient(checks['doleans_beta'], d, T, 'vector', label='beta')
        mean = stochastic_exponential(beta, r, x, spec, sim, ensemble=ens)
        diagnostics['doleans'] = {'beta': beta.label, **mean.to_dict(), 'normalized': mean.within(1.0)}
    if checks['lipschitz_pairs']:
        diagnostics['lipschitz'] = lipschitz_estimate(spec, ens, checks['lipschitz_pairs'], config['run']['seed'])
    return _result(estimate.value, estimate.std_error, estimate.n_samples, diagnostics, {'ensemble': ens})


def build_problem(config):
    grid = build_grid(config)
    f = build_nonlinearity(config)
    return MildProblem(build_spec(config), f, build_terminal(config), grid, label=f.label)


def evaluate_solve(config, workers=None, show_progress=None):
    prob = build_problem(config)
    r, x = build_start(config, prob.grid)
    solver_cfg = build_solver_config(config)
    if workers is not None or show_progress is not None:
        solver_cfg = dataclasses.replace(
            solver_cfg, workers=solver_cfg.workers if workers is None else workers,
            show_progress=solver_cfg.show_progress if show_progress is None else show_progress)
    solution = MildSolver(prob, solver_cfg).solve_point(r, x)
    diagnostics = solution.to_dict()
    for key in ('value', 'std_error', 'n_samples'):
        diagnostics.pop(key)
    diagnostics['problem'] = prob.to_dict()
    return _result(solution.value, solution.std_error, solution.estimate.n_samples, diagnostics)


def evaluate_fk(config, workers=None, show_progress=None):
    tag = config['nonlinearity']['tag']
    if tag not in ('zero', 'affine'):
        raise ConfigurationError('fk needs an affine nonlinearity', [f'nonlinearity.tag: got {tag!r}'])
    grid = build_grid(config)
    spec = build_spec(config)
    r, x = build_start(config, grid)
    sim = build_sim_config(config, grid, workers, show_progress)
    d, T = config['diffusion']['d'], grid.horizon
    params = config['nonlinearity']['params']
    alpha = compile_expression(params.get('alpha', 0.0), d, T, label='alpha')
    beta = compile_expression(params.get('beta', 0.0), d, T, label='beta')
    g = build_terminal(config)
    estimate, report = affine_oracle.fk_solve(r, x, alpha, beta, g, spec, sim, return_report=True)
    diagnostics = {'f': make_affine(alpha, beta).to_dict(), 'g': g.label, **report}
    return _result(estimate.value, estimate.std_error, estimate.n_samples, diagnostics)


def _perturbations(specs, nu_star, horizon):
    if specs == 'default':
        return None
    if not isinstance(specs, list):
        raise ConfigurationError('invalid perturbations', ["control.perturbations: expected 'default' or a list"])
    out, problems = [], []
    for i, item in enumerate(specs):
        kind = item.get('kind') if isinstance(item, dict) else None
        if kind == 'rate_scaled':
            out.append(nu_star.rate_scaled(float(item['c'])))
        elif kind == 'time_shifted':
            out.append(nu_star.time_shifted(float(item['shift']), horizon))
        elif kind == 'constant_rate':
            out.append(control.ControlProcess.constant_rate(float(item['c']), nu_star.nu0))
        else:
            problems.append(f'control.perturbations[{i}]: kind must be rate_scaled, time_shifted or constant_rate')
    if problems:
        raise ConfigurationError('invalid perturbations', problems)
    return out


def evaluate_control(config, workers=None, show_progress=None):
    settings = config['control']
    grid = build_grid(config)
    spec = build_spec(config)
    _, x0 = build_start(config, grid)
    sim = build_sim_config(config, grid, workers, show_progress)
    d, T = config['diffusion']['d'], grid.horizon
    prob = control.ControlProblem(
        p=float(settings['p']),
        alpha=compile_expression(settings['alpha_expr'], d, T, label='alpha'),
        eta=compile_expression(settings['eta_expr'], d, T, label='eta'),
        g=build_terminal(config),
        nu0=float(settings['nu0']),
        spec=spec,
        x0=x0)
    if settings['u_source'] == 'ode':
        u_hat = ode_solution_functional(MildProblem(spec, prob.nonlinearity(), prob.g, grid, label='control'))
    else:
        logger.warning('using the user-supplied u %r; its correctness is not checked', settings['u_expr'])
        u_hat = compile_expression(settings['u_expr'], d, T, label='u')
    nu_star = control.ControlProcess.optimal(u_hat, prob)
    perturbations = _perturbations(settings['perturbations'], nu_star, T)
    report = control.verify_optimality(prob, u_hat, perturbations, sim, bias_allowance=settings['bias_allowance'])
    report['martingale_M'] = control.martingale_M_check(u_hat, prob, sim,
                                                        bias_allowance=settings['bias_allowance']).to_dict()
    report['problem'] = prob.to_dict()
    cost = report['cost_optimal']
    return _result(cost['value'], cost['std_error'], cost['n_samples'], report)


def evaluate_viscosity(config, workers=None, show_progress=None):
    settings = config['viscosity']
    grid = build_grid(config)
    spec = build_spec(config)
    f = build_nonlinearity(config)
    r, x = build_start(config, grid)
    sim = build_sim_config(config, grid, workers, show_progress)
    dcfg = _derivative_config(config)
    d, T = config['diffusion']['d'], grid.horizon
    u = heat_functional(T) if settings['u_expr'] is None else compile_expression(settings['u_expr'], d, T, label='u')
    beta = None
    if settings['beta_expr'] is not None:
        beta = compile_coefficient(settings['beta_expr'], d, T, 'vector', label='beta')
    diagnostics = {'u': u.label, 'side': settings['side'], 'test_functions': []}
    for text in settings['phi_exprs']:
        phi = compile_expression(text, d, T)
        cand = viscosity.TestFunctionCandidate(phi, r, x, settings['gamma'], settings['delta'])
        membership = viscosity.check_membership_SP(u, cand, spec, sim, settings['stop_rules'], settings['side'], beta)
        residual = viscosity.residual_at_test_function(phi, spec, f, u, r, x, dcfg, settings['side'])
        diagnostics['test_functions'].append({'membership': membership, 'residual': residual})
    findings = []
    if settings['battery']:
        battery = viscosity.consistency_battery(u, spec, f, [(r, x)], sim, dcfg, show_progress=sim.show_progress)
        diagnostics['battery'] = battery
        findings = battery['findings']
    return _result(float(len(findings)), 0.0, sim.n_paths, diagnostics)


def _probe_path(grid, dimension):
    return DiscretePath.from_function(grid, lambda s: [0.5 + 0.3 * (i + 1) * s + 0.1 * math.sin(3.0 * s)
                                                       for i in range(dimension)])


def evaluate_check_derivs(config, workers=None, show_progress=None):
    grid = build_grid(config)
    dcfg = _derivative_config(config)
    t = grid.snap(config['derivs']['t'])
    targets = config['derivs']['targets']
    rows = []
    if targets == 'catalogue':
        for entry in tqdm(build_catalogue(grid.horizon), desc='catalogue', disable=not show_progress):
            x = _probe_path(grid, entry.dimension)
            assert_nonanticipative(entry.functional, [x])
            pairs = [('dt', entry.dt(t, x), horizontal_derivative(entry.functional, t, x, dcfg)),
                     ('grad', entry.grad(t, x), vertical_gradient(entry.functional, t, x, dcfg)),
                     ('hess', entry.hess(t, x), vertical_hessian(entry.functional, t, x, dcfg))]
            for name, analytic, numeric in pairs:
                for idx, (a, n) in enumerate(zip(np.ravel(analytic), np.ravel(numeric))):
                    label = name if np.size(analytic) == 1 else f'{name}[{idx}]'
                    rows.append([entry.name, label, float(a), float(n), abs(float(a) - float(n))])
        heat = heat_functional(grid.horizon)
        residual = ppde_residual(DiffusionSpec.brownian(1), make_affine(0.0, 0.0), heat, t, _probe_path(grid, 1),
                                 dcfg)
        rows.append(['heat', 'ppde_residual', 0.0, residual, abs(residual)])
    else:
        d = config['diffusion']['d']
        for text in targets:
            u = compile_expression(text, d, grid.horizon)
            x = _probe_path(grid, d)
            assert_nonanticipative(u, [x])
            rows.append([u.label, 'dt', math.nan, horizontal_derivative(u, t, x, dcfg), math.nan])
            for idx, v in enumerate(np.ravel(vertical_gradient(u, t, x, dcfg))):
                rows.append([u.label, f'grad[{idx}]', math.nan, float(v), math.nan])
            for idx, v in enumerate(np.ravel(vertical_hessian(u, t, x, dcfg))):
                rows.append([u.label, f'hess[{idx}]', math.nan, float(v), math.nan])
    errors = [row[4] for row in rows if not math.isnan(row[4])]
    worst = max(errors) if errors else math.nan
    diagnostics = {'t': float(t), 'derivative_config': dcfg.to_dict(),
                   'rows': [dict(zip(('functional', 'derivative', 'analytic', 'numeric', 'abs_error'), row))
                            for row in rows]}
    header = ['functional', 'derivative', 'analytic', 'numeric', 'abs_error']
    return _result(worst, 0.0, len(rows), diagnostics, {'derivs_csv': (header, rows)})


def evaluate_validate_f(config, workers=None, show_progress=None):
    grid = build_grid(config)
    f = build_nonlinearity(config)
    _, x = build_start(config, grid)
    settings = config['validate']
    times = np.linspace(0.0, grid.horizon, settings['n_samples'], endpoint=False)
    samples = [(float(grid.snap(s)), x) for s in times]
    report = validate_conditions(f, samples, settings['n_draws'], config['run']['seed'])
    failures = sum(report[key]['status'] == FAIL for key in ('local_lipschitz', 'linear_growth', 'boundary'))
    return _result(float(failures), 0.0, len(samples), report)


PIPELINES = {
    'simulate': evaluate_simulate,
    'solve': evaluate_solve,
    'fk': evaluate_fk,
    'control': evaluate_control,
    'viscosity': evaluate_viscosity,
    'check-derivs': evaluate_check_derivs,
    'validate-f': evaluate_validate_f,
}
