import ast
import copy
import math

import numpy as np

from .diffusion import DiffusionSpec, SimConfig
from .exceptions import ConfigurationError
from .functionals import compile_coefficient, compile_expression
from .nonlinearity import (DomainInterval, make_affine, make_control_dual, make_custom, make_power,
                           make_power_sum, make_superprocess)
from .paths import DiscretePath, TimeGrid

REQUIRED = object()

NONLINEARITY_PARAMS = {
    'zero': set(),
    'affine': {'alpha', 'beta'},
    'power': {'alpha', 'p'},
    'superprocess': {'alpha', 'gamma', 'atoms'},
    'power_sum': {'alpha', 'gamma', 'terms'},
    'control_dual': {'alpha', 'eta', 'p'},
    'custom': {'expr', 'domain'},
}
FREE_FORM = {('nonlinearity', 'params')}

PERTURBATION_PARAMS = {'rate_scaled': 'c', 'time_shifted': 'shift', 'constant_rate': 'c'}


def get_experiment_config(d=1,
                          T=1.0,
                          steps=100,
                          n_paths=10000,
                          backend='nested_mc',
                          iters=3,
                          budgets=(1024, 128, 32),
                          workers=1,
                          output_path='results'):
    return {
        'diffusion': {
            'd': d,
            'sigma_expr': 1.0,
            'b_expr': 0.0,
        },
        'grid': {
            'T': T,
            'steps': steps,
        },
        'start': {
            'r': 0.0,
            'x0': 0.0,
            'path_file': None,
        },
        'nonlinearity': {
            'tag': 'zero',
            'params': {},
        },
        'terminal': {
            'g_expr': 1.0,
        },
        'solver': {
            'backend': backend,
            'iters': iters,
            'budgets': list(budgets),
            'outer_paths': 1024,
            'tolerance': 1e-2,
            'shift': 'auto',
            'features': None,
            'clamp_eps': 0.0,
            'block_rows': 32768,
        },
        'control': {
            'p': 2.0,
            'alpha_expr': 0.0,
            'eta_expr': 1.0,
            'nu0': 1.0,
            'perturbations': 'default',
            'u_source': 'ode',
            'u_expr': None,
            'unsafe_u': False,
            'bias_allowance': None,
        },
        'viscosity': {
            'u_expr': None,
            'phi_exprs': [],
            'gamma': 0.5,
            'delta': 0.25,
            'stop_rules': None,
            'side': 'sub',
            'battery': True,
            'beta_expr': None,
        },
        'simulate': {
            'martingale_exprs': [],
            'doleans_beta': None,
            'lipschitz_pairs': 0,
        },
        'derivs': {
            'targets': 'catalogue',
            't': 0.5,
            'step_h': None,
            'time_step_h': None,
            'scheme': 'forward',
        },
        'validate': {
            'n_draws': 1000,
            'n_samples': 8,
        },
        'run': {
            'seed': REQUIRED,
            'n_paths': n_paths,
            'antithetic': False,
            'workers': workers,
            'block_size': 4096,
            'output_path': output_path,
            'format': 'json',
            'std_error_warn_ratio': 0.25,
            'show_progress': False,
        },
    }


def apply_overrides(config, overrides):
    """Apply `section.key=value` pairs; values are Python literals, else plain strings."""
    config = copy.deepcopy(config)
    problems = []
    for item in overrides or []:
        if '=' not in item:
            problems.append(f'{item}: expected key.path=value')
            continue
        path, raw = item.split('=', 1)
        try:
            value = ast.literal_eval(raw)
        except (ValueError, SyntaxError):
            value = raw
        node = config
        keys = path.strip().split('.')
        for key in keys[:-1]:
            node = node.setdefault(key, {})
            if not isinstance(node, dict):
                problems.append(f'{path}: {key} is not a section')
                break
        else:
            node[keys[-1]] = value
    if problems:
        raise ConfigurationError('invalid overrides', problems)
    return config


def _merge(defaults, user, prefix, problems):
    out = copy.deepcopy(defaults)
    for key, value in user.items():
        path = f'{prefix}.{key}' if prefix else key
        if key not in defaults:
            problems.append(f'{path}: unknown key')
            continue
        if isinstance(defaults[key], dict) and tuple(path.split('.')) not in FREE_FORM:
            if not isinstance(value, dict):
                problems.append(f'{path}: expected a section')
                continue
            out[key] = _merge(defaults[key], value, path, problems)
        else:
            out[key] = value
    return out


def _check(cond, path, message, problems):
    if not cond:
        problems.append(f'{path}: {message}')


def _is_int(value):
    return isinstance(value, int) and not isinstance(value, bool)


def _is_number(value):
    return isinstance(value, (int, float)) and not isinstance(value, bool) and math.isfinite(value)


def _check_start(cfg, problems):
    r, T, steps = cfg['start']['r'], cfg['grid']['T'], cfg['grid']['steps']
    if not _is_number(r):
        problems.append(f'start.r: expected a number, got {r!r}')
        return
    if not (_is_number(T) and T > 0 and _is_int(steps) and steps >= 1):
        return
    position = r * steps / T
    if not 0.0 <= r < T:
        problems.append(f'start.r: expected 0 <= r < T={T!r}, got {r!r}')
    elif abs(position - round(position)) > 1e-9 * max(1.0, steps):
        problems.append(f'start.r: {r!r} is not a node of the uniform {steps}-step grid')


def _check_perturbations(specs, problems):
    if specs == 'default':
        return
    if not isinstance(specs, list):
        problems.append("control.perturbations: expected 'default' or a list")
        return
    for i, item in enumerate(specs):
        kind = item.get('kind') if isinstance(item, dict) else None
        if kind not in PERTURBATION_PARAMS:
            problems.append(f'control.perturbations[{i}].kind: expected one of {sorted(PERTURBATION_PARAMS)}')
            continue
        key = PERTURBATION_PARAMS[kind]
        _check(_is_number(item.get(key)), f'control.perturbations[{i}].{key}', 'expected a number', problems)


def resolve_config(user_config):
    """Merge a user config into the defaults and validate it; returns the resolved tree."""
    try:
        return _resolve(user_config)
    except (KeyError, TypeError, ValueError) as err:
        if isinstance(err, ConfigurationError):
            raise
        raise ConfigurationError('invalid experiment configuration',
                                 [f'{type(err).__name__}: {err}']) from err


def _resolve(user_config):
    if not isinstance(user_config, dict):
        raise ConfigurationError('the config must be a mapping')
    problems = []
    cfg = _merge(get_experiment_config(), user_config, '', problems)
    if cfg['run']['seed'] is REQUIRED or cfg['run']['seed'] is None:
        problems.append('run.seed: required (no implicit random seeding)')
    elif not _is_int(cfg['run']['seed']) or cfg['run']['seed'] < 0:
        problems.append('run.seed: expected a non-negative integer')
    _check(_is_int(cfg['diffusion']['d']) and cfg['diffusion']['d'] >= 1, 'diffusion.d', 'expected an integer >= 1',
           problems)
    _check(_is_number(cfg['grid']['T']) and cfg['grid']['T'] > 0, 'grid.T', 'expected a positive number', problems)
    _check(_is_int(cfg['grid']['steps']) and cfg['grid']['steps'] >= 1, 'grid.steps', 'expected an integer >= 1',
           problems)
    _check_start(cfg, problems)
    run = cfg['run']
    _check(_is_int(run['n_paths']) and run['n_paths'] >= 2, 'run.n_paths', 'expected an integer >= 2', problems)
    _check(not run['antithetic'] or (_is_int(run['n_paths']) and run['n_paths'] % 2 == 0), 'run.n_paths',
           'must be even with antithetic sampling', problems)
    _check(_is_int(run['workers']) and run['workers'] >= 1, 'run.workers', 'expected an integer >= 1', problems)
    _check(_is_int(run['block_size']) and run['block_size'] >= 2 and run['block_size'] % 2 == 0, 'run.block_size',
           'expected an even integer >= 2', problems)
    _check(run['format'] in ('json', 'json+csv'), 'run.format', "expected 'json' or 'json+csv'", problems)
    solver = cfg['solver']
    _check(solver['backend'] in ('nested_mc', 'regression', 'ode_fast_path'), 'solver.backend',
           'expected nested_mc, regression or ode_fast_path', problems)
    _check(_is_int(solver['iters']) and solver['iters'] >= 1, 'solver.iters', 'expected an integer >= 1', problems)
    budgets = solver['budgets']
    _check(isinstance(budgets, list) and all(_is_int(b) and b >= 1 for b in budgets), 'solver.budgets',
           'expected a list of positive integers', problems)
    if solver['backend'] == 'nested_mc' and isinstance(budgets, list) and _is_int(solver['iters']):
        _check(len(budgets) >= solver['iters'], 'solver.budgets', 'needs at least solver.iters entries', problems)
    _check(_is_number(solver['tolerance']) and solver['tolerance'] > 0, 'solver.tolerance', 'expected > 0', problems)
    _check(solver['shift'] == 'auto' or _is_number(solver['shift']), 'solver.shift', "expected 'auto' or a number",
           problems)
    tag = cfg['nonlinearity']['tag']
    if tag not in NONLINEARITY_PARAMS:
        problems.append(f'nonlinearity.tag: expected one of {sorted(NONLINEARITY_PARAMS)}, got {tag!r}')
    else:
        params = cfg['nonlinearity']['params']
        if not isinstance(params, dict):
            problems.append('nonlinearity.params: expected a section')
        else:
            for key in params:
                if key not in NONLINEARITY_PARAMS[tag]:
                    problems.append(f'nonlinearity.params.{key}: unknown key for tag {tag!r}')
            if tag == 'custom' and 'expr' not in params:
                problems.append('nonlinearity.params.expr: required for tag custom')
    control = cfg['control']
    _check(_is_number(control['p']) and control['p'] > 1, 'control.p', 'expected a number > 1', problems)
    _check(control['u_source'] in ('ode', 'expr'), 'control.u_source', "expected 'ode' or 'expr'", problems)
    if control['u_source'] == 'expr' and not control['unsafe_u']:
        problems.append('control.u_source: a user-supplied u needs control.unsafe_u=True (or --unsafe_u)')
    _check_perturbations(control['perturbations'], problems)
    visc = cfg['viscosity']
    _check(visc['side'] in ('sub', 'super'), 'viscosity.side', "expected 'sub' or 'super'", problems)
    _check(_is_number(visc['gamma']) and visc['gamma'] > 0, 'viscosity.gamma', 'expected > 0', problems)
    _check(_is_number(visc['delta']) and visc['delta'] > 0, 'viscosity.delta', 'expected > 0', problems)
    _check(cfg['derivs']['scheme'] in ('forward', 'central'), 'derivs.scheme', "expected 'forward' or 'central'",
           problems)
    if problems:
        raise ConfigurationError('invalid experiment configuration', problems)
    return cfg


def build_grid(cfg):
    return TimeGrid.uniform(cfg['grid']['T'], cfg['grid']['steps'])


def build_spec(cfg):
    d, T = cfg['diffusion']['d'], cfg['grid']['T']
    sigma = compile_coefficient(cfg['diffusion']['sigma_expr'], d, T, 'matrix', label='sigma')
    drift = compile_coefficient(cfg['diffusion']['b_expr'], d, T, 'vector', label='b')
    return DiffusionSpec(sigma, drift, d, label=f"sigma={cfg['diffusion']['sigma_expr']}, b={cfg['diffusion']['b_expr']}")


def build_start(cfg, grid):
    from .read_datasets import read_path
    start = cfg['start']
    d = cfg['diffusion']['d']
    if start['path_file']:
        return start['r'], read_path(start['path_file']).resample(grid)
    x0 = start['x0']
    if isinstance(x0, str) or (isinstance(x0, list) and any(isinstance(v, str) for v in x0)):
        entries = x0 if isinstance(x0, list) else [x0] * d
        # expressions in t only
        parts = [compile_expression(e, 1, grid.horizon) for e in entries]
        return start['r'], DiscretePath.from_function(
            grid, lambda t: [float(np.ravel(p.batch(t, np.array([t]), np.zeros((1, 1, 1))))[0]) for p in parts])
    values = x0 if isinstance(x0, list) else [x0] * d
    if len(values) != d:
        raise ConfigurationError('invalid start path', [f'start.x0: expected {d} entries, got {len(values)}'])
    return start['r'], DiscretePath.constant(grid, values)


def _coefficient(params, key, d, T, default=0.0):
    return compile_expression(params.get(key, default), d, T, label=key)


def build_nonlinearity(cfg):
    d, T = cfg['diffusion']['d'], cfg['grid']['T']
    tag = cfg['nonlinearity']['tag']
    params = cfg['nonlinearity']['params']
    if tag == 'zero':
        return make_affine(0.0, 0.0)
    if tag == 'affine':
        return make_affine(_coefficient(params, 'alpha', d, T), _coefficient(params, 'beta', d, T))
    if tag == 'power':
        return make_power(_coefficient(params, 'alpha', d, T, 1.0), float(params.get('p', 2.0)))
    if tag == 'superprocess':
        atoms = [(float(u), compile_expression(w, d, T)) for u, w in params.get('atoms', [])]
        return make_superprocess(_coefficient(params, 'alpha', d, T), _coefficient(params, 'gamma', d, T), atoms)
    if tag == 'power_sum':
        terms = [(float(v), compile_expression(b, d, T)) for v, b in params.get('terms', [])]
        return make_power_sum(_coefficient(params, 'alpha', d, T), _coefficient(params, 'gamma', d, T), terms)
    if tag == 'control_dual':
        return make_control_dual(_coefficient(params, 'alpha', d, T), _coefficient(params, 'eta', d, T, 1.0),
                                 float(params.get('p', 2.0)))
    domain = params.get('domain') or {}
    interval = DomainInterval(float(domain.get('lower', -math.inf)), float(domain.get('upper', math.inf)),
                              bool(domain.get('closed_lower', True)), bool(domain.get('closed_upper', True)))
    return make_custom(params['expr'], d, T, interval)


def build_terminal(cfg, key='g_expr', section='terminal'):
    return compile_expression(cfg[section][key], cfg['diffusion']['d'], cfg['grid']['T'], label='g')


def build_sim_config(cfg, grid, workers=None, show_progress=None):
    run = cfg['run']
    return SimConfig(n_paths=run['n_paths'], grid=grid, seed=run['seed'], antithetic=run['antithetic'],
                     workers=run['workers'] if workers is None else workers, block_size=run['block_size'],
                     show_progress=run['show_progress'] if show_progress is None else show_progress)


def build_solver_config(cfg):
    from modeling_mild import SolverConfig
    from .input_features import expression_features
    solver, run = cfg['solver'], cfg['run']
    features = None
    if solver['features']:
        features = expression_features(solver['features'], cfg['diffusion']['d'], cfg['grid']['T'])
    return SolverConfig(backend=solver['backend'], picard_iters=solver['iters'], outer_paths=solver['outer_paths'],
                        inner_budget=tuple(solver['budgets']), features=features, tolerance=solver['tolerance'],
                        seed=run['seed'], shift=solver['shift'], clamp_eps=solver['clamp_eps'],
                        workers=run['workers'], block_rows=solver['block_rows'], show_progress=run['show_progress'],
                        std_error_warn_ratio=run['std_error_warn_ratio'])
