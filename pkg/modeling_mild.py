"""Mild solutions of the semilinear path-dependent terminal value problem.

u(r, x) = E_{r,x}[g(X^T)] - E_{r,x}[int_r^T f(s, X^s, u(s, X^s)) ds]

is solved by Picard iteration. Iterates run on the equivalent discounted
equation obtained from the split f(z) = (f(z) - lam z) + lam z,

u(r, x) = E[e^{-lam (T - r)} g(X^T)] - E[int_r^T e^{-lam (s - r)} (f(s, X^s, u) - lam u) ds],

which has the same fixed point for any constant lam; lam = 0 is the plain
iteration.
"""
import dataclasses
import logging
import math
import threading
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from tqdm import tqdm

from ppde_tools.diffusion import (DiffusionSpec, EstimateWithError, SimConfig, hitting_indices,
                                  simulate_from, simulate_rows, start_index_of, warn_if_noisy)
from ppde_tools.exceptions import ConfigurationError, DomainError, DomainEscapeError, PPDEError
from ppde_tools.functionals import FunctionalHandle
from ppde_tools.input_features import default_features, feature_matrix, fit_projection
from ppde_tools.nonlinearity import Nonlinearity
from ppde_tools.paths import TimeGrid, stop_values
from ppde_tools.utils import map_blocks, rng_stream

logger = logging.getLogger(__name__)

BACKENDS = ('nested_mc', 'regression', 'ode_fast_path')

# first lineage key of each random stream family
_NESTED, _REGRESSION, _RESIDUAL, _INEQUALITY = 101, 102, 103, 104


@dataclass(frozen=True)
class MildProblem:
    spec: DiffusionSpec
    f: Nonlinearity
    g: FunctionalHandle
    grid: TimeGrid
    label: str = 'problem'

    @property
    def horizon(self):
        return self.grid.horizon

    def terminal(self, values):
        return np.array(self.g.on_grid(self.grid, values, self.grid.horizon))

    def reaction_at(self, node_index, values, z):
        """f(t_k, X^{t_k}, z) for a per-row node index k over node arrays (n, d, M+1)."""
        nodes = self.grid.nodes
        out = np.empty(values.shape[0])
        for k in np.unique(node_index):
            rows = np.flatnonzero(node_index == k)
            out[rows] = self.f.batch(nodes[k], nodes[:k + 1], values[rows, :, :k + 1], z[rows])
        return out

    def to_dict(self):
        return {'label': self.label, 'diffusion': self.spec.label, 'f': self.f.to_dict(),
                'g': self.g.label, 'grid': self.grid.to_dict()}


@dataclass(frozen=True)
class SolverConfig:
    backend: str = 'nested_mc'
    picard_iters: int = 3
    outer_paths: int = 1024
    inner_budget: Sequence[int] = (1024, 128, 32)
    features: Optional[Sequence[FunctionalHandle]] = None
    tolerance: float = 1e-2
    seed: int = 0
    shift: object = 'auto'
    clamp_eps: float = 0.0
    workers: int = 1
    block_rows: int = 32768
    show_progress: bool = False
    std_error_warn_ratio: Optional[float] = 0.25

    def __post_init__(self):
        problems = []
        if self.backend not in BACKENDS:
            problems.append(f'solver.backend: expected one of {BACKENDS}, got {self.backend!r}')
        if int(self.picard_iters) != self.picard_iters or self.picard_iters < 1:
            problems.append(f'solver.picard_iters: expected a positive integer, got {self.picard_iters!r}')
        if not self.tolerance > 0:
            problems.append(f'solver.tolerance: expected > 0, got {self.tolerance!r}')
        if self.outer_paths < 2:
            problems.append(f'solver.outer_paths: expected >= 2, got {self.outer_paths!r}')
        if self.backend == 'nested_mc':
            if len(self.inner_budget) < self.picard_iters:
                problems.append(f'solver.inner_budget: needs at least picard_iters={self.picard_iters} '
                                f'entries, got {len(self.inner_budget)}')
            if any(int(b) != b or b < 1 for b in self.inner_budget):
                problems.append('solver.inner_budget: entries must be positive integers')
            elif self.inner_budget and self.inner_budget[0] < 2:
                problems.append('solver.inner_budget: the outer budget must be at least 2')
        if self.shift != 'auto' and not (isinstance(self.shift, (int, float)) and math.isfinite(self.shift)):
            problems.append(f"solver.shift: expected 'auto' or a finite number, got {self.shift!r}")
        if self.clamp_eps < 0:
            problems.append(f'solver.clamp_eps: expected >= 0, got {self.clamp_eps!r}')
        if self.seed is None:
            problems.append('solver.seed: a seed is required')
        if problems:
            raise ConfigurationError('invalid solver configuration', problems)

    def to_dict(self):
        return {'backend': self.backend, 'picard_iters': self.picard_iters, 'outer_paths': self.outer_paths,
                'inner_budget': list(self.inner_budget), 'tolerance': self.tolerance, 'seed': self.seed,
                'shift': self.shift, 'clamp_eps': self.clamp_eps, 'workers': self.workers,
                'features': None if self.features is None else [phi.label for phi in self.features]}


class ClampCounter:
    """Thread-safe tally of projections onto D."""

    def __init__(self):
        self._lock = threading.Lock()
        self.count = 0
        self.max_excursion = 0.0
        self.terminal_sup = 0.0

    def add(self, n, excursion=0.0):
        with self._lock:
            self.count += int(n)
            self.max_excursion = max(self.max_excursion, float(excursion))

    def observe_terminal(self, sup):
        with self._lock:
            self.terminal_sup = max(self.terminal_sup, float(sup))


def _bounds(domain, eps):
    lo = domain.lower + (eps if not domain.closed_lower else 0.0)
    hi = domain.upper - (eps if not domain.closed_upper else 0.0)
    return lo, hi


def clamp_to_domain(z, domain, eps=0.0, counter=None):
    """Project z onto D, moving open endpoints inwards by eps."""
    lo, hi = _bounds(domain, eps)
    arr = np.asarray(z, dtype=np.float64)
    clamped = np.clip(arr, lo, hi)
    if counter is not None:
        moved = clamped != arr
        excursion = float(np.max(np.abs(clamped - arr), initial=0.0))
        counter.add(np.count_nonzero(moved), excursion)
    return float(clamped) if clamped.ndim == 0 else clamped


@dataclass
class MildSolution:
    estimate: EstimateWithError
    iterates: list
    changes: list
    status: str
    shift: float
    clamp_count: int
    backend: str
    runtime_ms: float
    terminal_sup: float = 0.0
    residual: Optional[dict] = None
    extra: dict = field(default_factory=dict)

    @property
    def value(self):
        return self.estimate.value

    @property
    def std_error(self):
        return self.estimate.std_error

    def to_dict(self):
        return {'value': self.value, 'std_error': self.std_error, 'n_samples': self.estimate.n_samples,
                'iterations': [e.to_dict() for e in self.iterates], 'changes': self.changes,
                'iterations_form': 'shifted' if self.shift else 'plain',
                'status': self.status, 'shift': self.shift, 'clamp_count': self.clamp_count,
                'backend': self.backend, 'runtime_ms': self.runtime_ms, 'terminal_sup': self.terminal_sup,
                'residual': self.residual, **self.extra}


class MildSolver:
    def __init__(self, problem, cfg):
        self.problem = problem
        self.cfg = cfg
        self.grid = problem.grid
        self.counter = ClampCounter()
        self.shift = 0.0
        budgets = [int(b) for b in cfg.inner_budget]
        self.budgets = budgets
        explicit = len(budgets) > cfg.picard_iters
        self.u0_budget = budgets[cfg.picard_iters] if explicit else (budgets[-1] if budgets else None)
        # u_0 = E[g(X^T) | F_t] may be replaced by one sample of g only where f(u_0) stays unbiased
        self.single_continuation = not explicit and (problem.f.tag == 'affine' or problem.g.path_independent)
        self._features = None
        self._coefficients = {}

    def solve_point(self, r, x, with_residual=True):
        start = time.perf_counter()
        grid = self.grid
        if r >= grid.horizon - grid.tolerance():
            raise DomainError(f'solve_point needs r < T, got r={r!r} with T={grid.horizon!r}')
        x = x.resample(grid)
        k_r = start_index_of(grid, r)
        self.counter = ClampCounter()
        backend = self.cfg.backend
        if backend == 'ode_fast_path':
            estimate, iterates = self._ode(k_r)
            changes, status = [], 'converged'
        else:
            if backend == 'nested_mc':
                iterates = self._nested(k_r, x)
            else:
                iterates = self._regression(r, x, k_r)
            estimate = iterates[-1]
            changes, status = self._convergence(iterates)
        residual = self._residual(r, x, k_r, estimate.value) if with_residual else None
        runtime_ms = 1000.0 * (time.perf_counter() - start)
        warn_if_noisy(estimate, f'{self.problem.label} u({r:g}, x)', self.cfg.std_error_warn_ratio)
        logger.info('%s [%s] u(%.4g, x) = %s status=%s clamps=%d (%.0f ms)', self.problem.label, backend,
                    r, estimate, status, self.counter.count, runtime_ms)
        return MildSolution(estimate, iterates, changes, status, self.shift, self.counter.count, backend,
                            runtime_ms, self.counter.terminal_sup, residual)

    def solution_functional(self, r, x, k_r, value):
        """u_hat for residual checks: the RK4 solution, or the per-node regression fit anchored at u(r, x).

        The nested backend has no functional of its own; it borrows a regression fit of the same problem.
        """
        if self.cfg.backend == 'ode_fast_path':
            return ode_solution_functional(self.problem), 'ode'
        source = self
        if self.cfg.backend == 'nested_mc':
            source = MildSolver(self.problem, dataclasses.replace(self.cfg, backend='regression',
                                                                  show_progress=False))
            source._regression(r, x, k_r)
        prob, grid = self.problem, self.grid
        features, coefficients = source._features, source._coefficients
        eps = max(self.cfg.clamp_eps, 1e-12)

        def evaluator(t, times, values):
            k = grid.index_of(t)
            if k is None:
                raise DomainError(f'the fitted solution is only defined on grid nodes, got t={t!r}')
            if k <= k_r:
                return np.full(values.shape[0], value)
            if k >= grid.steps:
                return prob.g.batch(t, times, values)
            fit = feature_matrix(features, t, times, values) @ coefficients[k]
            return clamp_to_domain(fit, prob.f.domain, eps)
        return FunctionalHandle(evaluator, label=f'regression fit of {prob.label}'), 'regression'

    def _residual(self, r, x, k_r, value):
        sim = SimConfig(n_paths=max(2, self.cfg.outer_paths), grid=self.grid, seed=self.cfg.seed,
                        workers=self.cfg.workers)
        try:
            u_hat, source = self.solution_functional(r, x, k_r, value)
            report = fixed_point_residual(u_hat, self.problem, [(r, x)], sim)
        except PPDEError as err:
            logger.warning('%s: fixed-point residual unavailable: %s', self.problem.label, err)
            return {'residual': None, 'error': str(err)}
        report['surrogate'] = source
        logger.debug('fixed-point residual %.4g +- %.2g (%s)', report['residual'], report['std_error'], source)
        return report

    def _convergence(self, iterates):
        changes = []
        for prev, cur in zip(iterates[:-1], iterates[1:]):
            changes.append({'change': abs(cur.value - prev.value),
                            'std_error': math.hypot(cur.std_error, prev.std_error)})
        last = changes[-1] if changes else {'change': 0.0, 'std_error': 0.0}
        converged = last['change'] <= self.cfg.tolerance + 3.0 * last['std_error']
        if not converged:
            logger.warning('%s: Picard iteration not converged, last change %.4g > tolerance %.4g',
                           self.problem.label, last['change'], self.cfg.tolerance)
        return changes, 'converged' if converged else 'not_converged'

    def _resolve_shift(self, k_r, x_values, u0):
        if self.cfg.shift != 'auto':
            return float(self.cfg.shift)
        nodes = self.grid.nodes
        hist = x_values[None, :, :k_r + 1]
        z = clamp_to_domain(u0, self.problem.f.domain, max(self.cfg.clamp_eps, 1e-12))
        with np.errstate(all='ignore'):
            slope = float(self.problem.f.dz(nodes[k_r], nodes[:k_r + 1], hist, z)[0])
        if not math.isfinite(slope):
            logger.warning('could not differentiate f at u0=%.4g; using shift 0', u0)
            return 0.0
        return slope

    def _clamp(self, v, iteration, times):
        domain = self.problem.f.domain
        lo, hi = _bounds(domain, self.cfg.clamp_eps)
        excursion = np.maximum(lo - v, v - hi)
        worst = int(np.argmax(excursion))
        if excursion[worst] > self.cfg.tolerance:
            raise DomainEscapeError(f'Picard iterate {iteration} left D = {domain} at t={float(times[worst])!r}: '
                                    f'value {float(v[worst])!r}', iteration=iteration,
                                    time=float(times[worst]), value=float(v[worst]))
        return clamp_to_domain(v, domain, self.cfg.clamp_eps, self.counter)

    def _nested(self, k_r, x):
        base = stop_values(self.grid, x.values, self.grid.nodes[k_r])[None]
        start_k = np.array([k_r])
        iterates = []
        steps = range(self.cfg.picard_iters + 1)
        if self.cfg.show_progress:
            steps = tqdm(steps, desc='picard')
        for n in steps:
            samples = self._nested_samples(n, start_k, base, 0, (_NESTED, n))[0]
            estimate = EstimateWithError.from_samples(samples)
            iterates.append(estimate)
            if n == 0:
                self.shift = self._resolve_shift(k_r, base[0], estimate.value)
                logger.debug('Picard shift lambda = %.6g', self.shift)
            logger.debug('u_%d(r, x) = %s', n, estimate)
            if self.cfg.show_progress:
                steps.set_postfix_str(f'u_{n}={estimate.value:.5g}')
        return iterates

    def _nested_samples(self, n, start_k, parents, depth, lineage):
        """Per-child samples of the u_n estimator at each parent, shape (P, B).

        The time integral uses one grid node per child, drawn with probability
        proportional to its step; u_{n-1} at that node comes from children of
        the child one depth further down.
        """
        prob, grid, lam = self.problem, self.grid, self.shift
        nodes, T, M = grid.nodes, grid.horizon, grid.steps
        if n == 0 and depth > 0:
            B = self.u0_budget
        else:
            B = self.budgets[depth]
        P = parents.shape[0]
        chunk = max(1, self.cfg.block_rows // B)
        jobs = [(c, lo, min(lo + chunk, P)) for c, lo in enumerate(range(0, P, chunk))]

        def run(job):
            c, lo, hi = job
            rng = rng_stream(self.cfg.seed, *lineage, c)
            rows = np.repeat(parents[lo:hi], B, axis=0)
            row_k = np.repeat(start_k[lo:hi], B)
            simulate_rows(prob.spec, grid, rows, row_k, rng)
            G = prob.terminal(rows)
            self.counter.observe_terminal(np.max(np.abs(G)))
            if n == 0:
                return G.reshape(hi - lo, B)
            s = nodes[row_k]
            tau = T - s
            target = s + rng.random(rows.shape[0]) * tau
            k = np.clip(np.searchsorted(nodes, target, side='right') - 1, row_k, M - 1)
            if n == 1 and self.single_continuation:
                # f is affine in u_0 or g is deterministic, so one sample of g(X^T) is enough
                v = G.copy()
            else:
                v = self._nested_samples(n - 1, k, rows, depth + 1, lineage + (c,)).mean(axis=1)
            v = self._clamp(v, n - 1, nodes[k])
            fv = prob.reaction_at(k, rows, v)
            h = np.exp(-lam * (nodes[k] - s)) * (fv - lam * v)
            samples = np.exp(-lam * tau) * G - tau * h
            return samples.reshape(hi - lo, B)

        return np.concatenate(map_blocks(run, jobs, self.cfg.workers), axis=0)

    def _regression(self, r, x, k_r):
        prob, grid, cfg = self.problem, self.grid, self.cfg
        nodes, T, M = grid.nodes, grid.horizon, grid.steps
        sim = SimConfig(n_paths=cfg.outer_paths, grid=grid, seed=cfg.seed, workers=cfg.workers)
        ens = simulate_from(r, x, prob.spec, sim, lineage=(_REGRESSION,))
        values = ens.values
        G = prob.terminal(values)
        self.counter.observe_terminal(np.max(np.abs(G)))
        features = list(cfg.features) if cfg.features else default_features(ens.dimension)
        design = {k: feature_matrix(features, nodes[k], nodes[:k + 1], values[:, :, :k + 1])
                  for k in range(k_r + 1, M)}
        self._features = features
        coefficients = self._coefficients = {}

        def project(k, targets):
            if k == k_r:
                return np.full(targets.shape, targets.mean())
            coefficients[k] = fit_projection(design[k], targets)
            return design[k] @ coefficients[k]

        u_prev = np.empty((ens.n_paths, M))
        for k in range(k_r, M):
            u_prev[:, k] = project(k, G)
        iterates = [EstimateWithError.from_samples(G)]
        self.shift = lam = self._resolve_shift(k_r, x.values, iterates[0].value)
        steps = range(1, cfg.picard_iters + 1)
        if cfg.show_progress:
            steps = tqdm(steps, desc='picard')
        for n in steps:
            u_next = np.empty_like(u_prev)
            tail = np.zeros(ens.n_paths)
            for k in range(M - 1, k_r - 1, -1):
                dt = nodes[k + 1] - nodes[k]
                z = self._clamp(u_prev[:, k], n - 1, np.full(ens.n_paths, nodes[k]))
                fz = prob.f.batch(nodes[k], nodes[:k + 1], values[:, :, :k + 1], z)
                tail = (fz - lam * z) * dt + math.exp(-lam * dt) * tail
                targets = math.exp(-lam * (T - nodes[k])) * G - tail
                u_next[:, k] = project(k, targets)
            estimate = EstimateWithError.from_samples(targets)
            iterates.append(estimate)
            u_prev = u_next
            logger.debug('u_%d(r, x) = %s', n, estimate)
            if cfg.show_progress:
                steps.set_postfix_str(f'u_{n}={estimate.value:.5g}')
        return iterates

    def _ode(self, k_r):
        nodes = ode_backward(self.problem, self.counter, self.cfg.clamp_eps)
        value = float(nodes[k_r])
        estimate = EstimateWithError(value, 0.0, 1)
        return estimate, [estimate]


def solve_point(r, x, prob, cfg, with_residual=True):
    return MildSolver(prob, cfg).solve_point(r, x, with_residual)


def _require_path_independent(prob):
    if not (prob.f.path_independent and prob.g.path_independent):
        raise ConfigurationError('the ode_fast_path backend needs f and g tagged path_independent',
                                 ['solver.backend'])


def ode_backward(prob, counter=None, clamp_eps=0.0):
    """Classical RK4 for u' = f(s, u), u(T) = g, backwards over the grid nodes."""
    _require_path_independent(prob)
    grid = prob.grid
    nodes, d = grid.nodes, prob.spec.dimension
    dummy = np.zeros((1, d, 1))

    def rhs(t, z):
        z = clamp_to_domain(z, prob.f.domain, clamp_eps, counter)
        return float(prob.f.batch(t, np.array([t]), dummy, z)[0])

    u = np.empty(grid.steps + 1)
    u[-1] = float(prob.g.batch(grid.horizon, np.array([grid.horizon]), dummy)[0])
    for k in range(grid.steps - 1, -1, -1):
        t1, h = nodes[k + 1], nodes[k + 1] - nodes[k]
        z = u[k + 1]
        k1 = rhs(t1, z)
        k2 = rhs(t1 - 0.5 * h, z - 0.5 * h * k1)
        k3 = rhs(t1 - 0.5 * h, z - 0.5 * h * k2)
        k4 = rhs(nodes[k], z - h * k3)
        u[k] = z - h * (k1 + 2.0 * k2 + 2.0 * k3 + k4) / 6.0
    return u


def ode_solution_functional(prob):
    values = ode_backward(prob)
    nodes = prob.grid.nodes
    return FunctionalHandle(lambda t, times, v: np.interp(t, nodes, values),
                            label=f'ode solution of {prob.label}', path_independent=True)


def fixed_point_residual(u_hat, prob, probes, cfg):
    """max over probes of |E[g(X^T)] - u_hat(r, x) - E[int_r^T f(s, X^s, u_hat) ds]|."""
    if not probes:
        raise DomainError('fixed_point_residual needs at least one probe')
    grid = cfg.grid
    nodes = grid.nodes
    rows = []
    for i, (r, x) in enumerate(probes):
        ens = simulate_from(r, x, prob.spec, cfg, lineage=(_RESIDUAL, i))
        G = prob.terminal(ens.values)
        integral = np.zeros(ens.n_paths)
        for k in range(ens.start_index, grid.steps):
            times, hist = ens.history_at(k)
            z = np.array(u_hat.batch(nodes[k], times, hist))
            integral += prob.f.batch(nodes[k], times, hist, z) * (nodes[k + 1] - nodes[k])
        u_rx = float(u_hat(r, x.resample(grid)))
        estimate = EstimateWithError.from_samples(G - u_rx - integral, ens.antithetic)
        rows.append({'r': float(r), **estimate.to_dict()})
        logger.debug('residual at r=%.4g: %s', r, estimate)
    worst = max(rows, key=lambda row: abs(row['value']))
    return {'residual': worst['value'], 'abs_residual': abs(worst['value']), 'std_error': worst['std_error'],
            'probes': rows}


@dataclass(frozen=True)
class StopRule:
    """tau = first exit of the gamma-tube around x(r), capped at t_max."""
    gamma: float = math.inf
    t_max: Optional[float] = None

    def indices(self, ensemble, x_r):
        grid = ensemble.grid
        cap = grid.steps if self.t_max is None else grid.last_index_at_or_before(self.t_max)
        cap = max(cap, ensemble.start_index)
        if math.isinf(self.gamma):
            idx = np.full(ensemble.n_paths, grid.steps)
        else:
            idx = hitting_indices(self.gamma, ensemble.start_index, x_r, ensemble.values)
        return np.minimum(idx, cap)


def mild_inequality_check(u, prob, r, x, stop_rule, cfg, bias_allowance=None):
    """E[u(tau, X^tau)] - u(r, x) - E[int_r^tau f(s, X^s, u) ds] with its standard error.

    Non-negative for a mild subsolution, non-positive for a supersolution,
    zero for a mild solution.
    """
    grid = cfg.grid
    nodes = grid.nodes
    x = x.resample(grid)
    ens = simulate_from(r, x, prob.spec, cfg, lineage=(_INEQUALITY,))
    k_r = ens.start_index
    idx = stop_rule.indices(ens, x.evaluate(nodes[k_r]))
    integral = np.zeros(ens.n_paths)
    for k in range(k_r, grid.steps):
        active = idx > k
        if not np.any(active):
            break
        times, hist = ens.history_at(k)
        z = np.array(u.batch(nodes[k], times, hist))
        fz = prob.f.batch(nodes[k], times, hist, z)
        integral += np.where(active, fz, 0.0) * (nodes[k + 1] - nodes[k])
    at_tau = ens.evaluate_at_indices(u, idx)
    gap = EstimateWithError.from_samples(at_tau - float(u(nodes[k_r], x)) - integral, ens.antithetic)
    allowance = 5.0 * grid.max_step if bias_allowance is None else bias_allowance
    margin = 3.0 * gap.std_error + allowance
    if abs(gap.value) <= margin:
        status = 'solution'
    elif gap.value > 0:
        status = 'subsolution'
    else:
        status = 'supersolution'
    terminal_gap = float(u(grid.horizon, x)) - float(prob.g(grid.horizon, x))
    return {'gap': gap.to_dict(), 'status': status, 'bias_allowance': allowance,
            'terminal_gap': terminal_gap, 'mean_stop_time': float(np.mean(nodes[idx]))}
