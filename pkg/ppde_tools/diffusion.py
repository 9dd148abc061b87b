"""Simulation of the path-dependent diffusion family {P_{r,x}}.

Paths are frozen to x^r on [0, r] and evolve by Euler-Maruyama afterwards,
with coefficients read off the running history X^{t_k}. Draws come from
counter-based streams keyed by (seed, lineage, block index); blocks have a
fixed size, so results never depend on the number of worker threads.
"""
import dataclasses
import logging
import math
from dataclasses import dataclass

import numpy as np
from tqdm import tqdm

from .exceptions import DomainError, ShapeError, SimulationError
from .functional_calculus import DerivativeConfig, generator_batch, horizontal_batch
from .functionals import FunctionalHandle, constant, from_markovian
from .paths import DiscretePath, TimeGrid, stop_values, sup_norm_batch
from .utils import map_blocks, pairwise_mean, rng_stream, save_csv

logger = logging.getLogger(__name__)

MAX_LOG_WEIGHT = 700.0


@dataclass(frozen=True)
class DiffusionSpec:
    sigma: FunctionalHandle
    drift: FunctionalHandle
    dimension: int
    label: str = 'diffusion'
    check_singular: bool = True

    def __post_init__(self):
        d = self.dimension
        if tuple(self.sigma.output_shape) != (d, d):
            raise ShapeError(f'sigma must return a {d}x{d} matrix, declared {self.sigma.output_shape}')
        if tuple(self.drift.output_shape) != (d,):
            raise ShapeError(f'drift must return a {d}-vector, declared {self.drift.output_shape}')

    @classmethod
    def brownian(cls, dimension=1, scale=1.0):
        d = dimension
        return cls(constant(scale * np.eye(d), label=f'{scale} I'), constant(np.zeros(d), label='0'),
                   d, label=f'brownian(d={d}, scale={scale})')

    @classmethod
    def constant(cls, sigma, drift):
        sigma = np.atleast_2d(np.asarray(sigma, dtype=np.float64))
        drift = np.atleast_1d(np.asarray(drift, dtype=np.float64))
        return cls(constant(sigma), constant(drift), sigma.shape[0],
                   label=f'constant(sigma={sigma.tolist()}, b={drift.tolist()})')

    @classmethod
    def markovian(cls, sigma_bar, b_bar, dimension=1):
        """Path lift of a Markov diffusion: a(t, x) = a_bar(t, x(t)), b(t, x) = b_bar(t, x(t)).

        sigma_bar(t, xt) -> (n, d, d) and b_bar(t, xt) -> (n, d) for xt of shape (n, d).
        """
        d = dimension
        return cls(from_markovian(sigma_bar, 'sigma_bar(t, x(t))', (d, d)),
                   from_markovian(b_bar, 'b_bar(t, x(t))', (d,)), d, label='markovian lift')

    def a(self, t, times, hist):
        sigma = np.asarray(self.sigma.batch(t, times, hist))
        return np.einsum('nik,njk->nij', sigma, sigma)


@dataclass(frozen=True)
class SimConfig:
    n_paths: int
    grid: TimeGrid
    seed: int
    antithetic: bool = False
    workers: int = 1
    block_size: int = 4096
    show_progress: bool = False

    def __post_init__(self):
        if self.n_paths < 2:
            raise DomainError(f'n_paths must be at least 2, got {self.n_paths}')
        if self.antithetic and self.n_paths % 2:
            raise DomainError(f'antithetic sampling needs an even n_paths, got {self.n_paths}')
        if self.block_size < 2 or self.block_size % 2:
            raise DomainError(f'block_size must be a positive even integer, got {self.block_size}')
        if self.seed is None:
            raise DomainError('a seed is required')

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def to_dict(self):
        return {'n_paths': self.n_paths, 'grid': self.grid.to_dict(), 'seed': self.seed,
                'antithetic': self.antithetic, 'workers': self.workers, 'block_size': self.block_size}


@dataclass(frozen=True)
class EstimateWithError:
    value: float
    std_error: float
    n_samples: int

    def __post_init__(self):
        if not (math.isfinite(self.value) and math.isfinite(self.std_error)) or self.std_error < 0:
            raise SimulationError(f'invalid estimate {self.value!r} +- {self.std_error!r}')

    @classmethod
    def from_samples(cls, samples, antithetic=False):
        samples = np.asarray(samples, dtype=np.float64).reshape(-1)
        if samples.size == 0:
            raise SimulationError('cannot average an empty ensemble')
        bad = np.flatnonzero(~np.isfinite(samples))
        if bad.size:
            raise SimulationError(f'non-finite sample at path {int(bad[0])}', path_index=int(bad[0]))
        n = samples.size
        if np.all(samples == samples[0]):
            return cls(float(samples[0]), 0.0, n)
        if antithetic:
            # path i and path i + n/2 share their Gaussian draws with opposite signs
            units = 0.5 * (samples[:n // 2] + samples[n // 2:])
        else:
            units = samples
        value = pairwise_mean(units)
        if units.size < 2:
            return cls(value, 0.0, n)
        std_error = float(np.std(units, ddof=1) / math.sqrt(units.size))
        return cls(value, std_error, n)

    def within(self, target, n_se=3.0, allowance=0.0):
        return abs(self.value - target) <= n_se * self.std_error + allowance

    def to_dict(self):
        return {'value': self.value, 'std_error': self.std_error, 'n_samples': self.n_samples}

    def __str__(self):
        return f'{self.value:.6g} +- {self.std_error:.2g} (n={self.n_samples})'


def combined_std_error(*estimates):
    return math.sqrt(sum(e.std_error ** 2 for e in estimates))


def warn_if_noisy(estimate, label, ratio=0.25):
    if ratio is None or estimate.std_error == 0.0:
        return
    scale = max(abs(estimate.value), 1e-12)
    logger.debug('MC %s std_error=%.6g ratio=%.6g paths=%d', label, estimate.std_error,
                 estimate.std_error / scale, estimate.n_samples)
    if estimate.std_error / scale > ratio:
        logger.warning('MC %s standard error high: std_error=%.6g ratio=%.6g (>%.3g) paths=%d',
                       label, estimate.std_error, estimate.std_error / scale, ratio, estimate.n_samples)


@dataclass(frozen=True, eq=False)
class PathEnsemble:
    grid: TimeGrid
    values: np.ndarray
    start_index: int
    antithetic: bool = False

    @property
    def n_paths(self):
        return self.values.shape[0]

    @property
    def dimension(self):
        return self.values.shape[1]

    @property
    def start_time(self):
        return float(self.grid.nodes[self.start_index])

    def path(self, i):
        return DiscretePath(self.grid, self.values[i])

    def history_at(self, k):
        return self.grid.nodes[:k + 1], self.values[:, :, :k + 1]

    def evaluate(self, functional, t):
        return np.array(functional.on_grid(self.grid, self.values, t))

    def evaluate_at_indices(self, functional, indices):
        """functional(t_{k_i}, X_i^{t_{k_i}}) for a per-path node index k_i."""
        indices = np.asarray(indices)
        out = np.empty((self.n_paths,) + tuple(functional.output_shape))
        for k in np.unique(indices):
            rows = np.flatnonzero(indices == k)
            times, hist = self.history_at(int(k))
            out[rows] = functional.batch(self.grid.nodes[k], times, hist[rows])
        return out

    def to_long_rows(self):
        for i in range(self.n_paths):
            for k, t in enumerate(self.grid.nodes):
                yield [i, float(t)] + [float(v) for v in self.values[i, :, k]]


def simulate_rows(spec, grid, values, start_index, rng, negate=False):
    """Euler-Maruyama in place on node arrays (n, d, M+1).

    Row i keeps its nodes <= start_index[i] and is simulated afterwards;
    draws are taken for every row at every step so the stream layout does not
    depend on the start times.
    """
    n, d = values.shape[0], values.shape[1]
    start_index = np.broadcast_to(np.asarray(start_index), (n,))
    nodes = grid.nodes
    for k in range(int(start_index.min()), grid.steps):
        active = start_index <= k
        t = nodes[k]
        times, hist = nodes[:k + 1], values[:, :, :k + 1]
        drift = np.asarray(spec.drift.batch(t, times, hist))
        sigma = np.asarray(spec.sigma.batch(t, times, hist))
        if spec.check_singular:
            _check_nonsingular(sigma, active, t)
        z = rng.standard_normal((n, d))
        if negate:
            z = -z
        dt = nodes[k + 1] - nodes[k]
        step = values[:, :, k] + drift * dt + np.einsum('nij,nj->ni', sigma, z) * math.sqrt(dt)
        if not np.all(np.isfinite(step[active])):
            bad = int(np.flatnonzero(active & ~np.all(np.isfinite(step), axis=1))[0])
            raise SimulationError(f'non-finite Euler step at t={t!r}, path {bad}', time=t, path_index=bad)
        values[:, :, k + 1] = np.where(active[:, None], step, values[:, :, k + 1])
    return values


def _check_nonsingular(sigma, active, t):
    d = sigma.shape[-1]
    if d == 1:
        det = sigma[:, 0, 0]
    else:
        det = np.linalg.det(sigma)
    singular = active & ~(np.abs(det) > 1e-300)
    if np.any(singular):
        i = int(np.flatnonzero(singular)[0])
        raise SimulationError(f'singular volatility at t={t!r}, path {i}', time=t, path_index=i)


def start_index_of(grid, r):
    if r > grid.horizon + grid.tolerance():
        raise DomainError(f'start time r={r!r} exceeds T={grid.horizon!r}')
    k = grid.index_of(r)
    if k is None:
        raise DomainError(f'start time r={r!r} is not a node of the simulation grid')
    return k


def simulate_from(r, x, spec, cfg, lineage=()):
    """Ensemble of cfg.n_paths paths under P_{r,x}."""
    grid = cfg.grid
    x = x.resample(grid)
    if x.dimension != spec.dimension:
        raise ShapeError(f'path dimension {x.dimension} does not match diffusion dimension {spec.dimension}')
    k_r = start_index_of(grid, r)
    base = stop_values(grid, x.values, grid.nodes[k_r])
    n = cfg.n_paths
    if k_r == grid.steps:
        return PathEnsemble(grid, np.repeat(base[None], n, axis=0), k_r, cfg.antithetic)

    half = n // 2 if cfg.antithetic else n
    bounds = [(lo, min(lo + cfg.block_size, half)) for lo in range(0, half, cfg.block_size)]
    jobs = [(b, lo, hi, False) for b, (lo, hi) in enumerate(bounds)]
    if cfg.antithetic:
        jobs += [(b, lo, hi, True) for b, (lo, hi) in enumerate(bounds)]

    def run(job):
        b, lo, hi, negate = job
        rng = rng_stream(cfg.seed, *lineage, b)
        block = np.repeat(base[None], hi - lo, axis=0)
        return simulate_rows(spec, grid, block, k_r, rng, negate)

    if cfg.show_progress:
        jobs = tqdm(jobs, desc='simulate')
    blocks = map_blocks(run, jobs, cfg.workers)
    values = np.concatenate(blocks, axis=0)
    logger.debug('simulated %d paths from r=%.6g with %d blocks', n, grid.nodes[k_r], len(blocks))
    return PathEnsemble(grid, values, k_r, cfg.antithetic)


def expectation(functional, ensemble, t=None):
    t = ensemble.grid.horizon if t is None else t
    return EstimateWithError.from_samples(ensemble.evaluate(functional, t), ensemble.antithetic)


@dataclass
class MartingaleReport:
    checkpoints: list
    bias_allowance: float
    n_paths: int
    label: str = ''

    @property
    def passed(self):
        return not any(c['flagged'] for c in self.checkpoints)

    def to_dict(self):
        return {'label': self.label, 'passed': self.passed, 'bias_allowance': self.bias_allowance,
                'n_paths': self.n_paths, 'checkpoints': self.checkpoints}


def checkpoint_indices(k_start, k_end, n_checkpoints):
    idx = np.unique(np.round(np.linspace(k_start, k_end, n_checkpoints + 1)[1:]).astype(int))
    return [int(k) for k in idx if k > k_start]


def compensated_drift_report(ensemble, level, compensator_rate, n_checkpoints=5,
                             bias_allowance=None, label=''):
    """Drift of N_t = level(t) - int_r^t rate ds at checkpoints.

    level(k) and compensator_rate(k) return per-path arrays for node k.
    """
    grid = ensemble.grid
    k_r = ensemble.start_index
    if bias_allowance is None:
        bias_allowance = 5.0 * grid.max_step
    targets = set(checkpoint_indices(k_r, grid.steps, n_checkpoints))
    start_level = np.array(level(k_r))
    compensator = np.zeros(ensemble.n_paths)
    rows = []
    for k in range(k_r, grid.steps + 1):
        if k in targets:
            increments = np.array(level(k)) - compensator - start_level
            est = EstimateWithError.from_samples(increments, ensemble.antithetic)
            flagged = abs(est.value) > 3.0 * est.std_error + bias_allowance
            rows.append({'t': float(grid.nodes[k]), 'drift': est.value, 'std_error': est.std_error,
                         'flagged': bool(flagged)})
            if flagged:
                logger.warning('%s: drift %.4g at t=%.4g exceeds 3 SE + %.3g', label, est.value,
                               grid.nodes[k], bias_allowance)
        if k < grid.steps:
            compensator = compensator + np.asarray(compensator_rate(k)) * (grid.nodes[k + 1] - grid.nodes[k])
    return MartingaleReport(rows, float(bias_allowance), ensemble.n_paths, label)


def martingale_check(phi, spec, r, x, cfg, dcfg=None, n_checkpoints=5, bias_allowance=None,
                     ensemble=None):
    """Empirical drift of phi(t, X^t) - int_r^t (d_s + L)(phi)(s, X^s) ds under P_{r,x}."""
    dcfg = dcfg or DerivativeConfig()
    ens = ensemble if ensemble is not None else simulate_from(r, x, spec, cfg)
    grid = ens.grid
    h_x = dcfg.space_step(ens.values)
    h_t = dcfg.time_step(grid)

    def level(k):
        times, hist = ens.history_at(k)
        return phi.batch(grid.nodes[k], times, hist)

    def rate(k):
        t = grid.nodes[k]
        times, hist = ens.history_at(k)
        step = min(h_t, grid.horizon - t)
        dt_phi = horizontal_batch(phi, t, times, hist, step, grid.horizon, dcfg.scheme)
        return dt_phi + generator_batch(spec, phi, t, times, hist, h_x)

    return compensated_drift_report(ens, level, rate, n_checkpoints, bias_allowance, label=phi.label)


def doleans_log_weights(beta, spec, ensemble):
    """Cumulative log M_t^{r,beta} at every node, shape (n, M+1); zero up to r."""
    grid = ensemble.grid
    n = ensemble.n_paths
    logw = np.zeros((n, grid.steps + 1))
    for k in range(ensemble.start_index, grid.steps):
        t = grid.nodes[k]
        times, hist = ensemble.history_at(k)
        b = np.asarray(beta.batch(t, times, hist)).reshape(n, -1)
        drift = np.asarray(spec.drift.batch(t, times, hist))
        a = spec.a(t, times, hist)
        dt = grid.nodes[k + 1] - t
        dx = ensemble.values[:, :, k + 1] - ensemble.values[:, :, k]
        incr = (np.einsum('ni,ni->n', b, dx) - np.einsum('ni,ni->n', b, drift) * dt
                - 0.5 * np.einsum('ni,nij,nj->n', b, a, b) * dt)
        logw[:, k + 1] = logw[:, k] + incr
    logw[:, :ensemble.start_index + 1] = 0.0
    too_big = np.flatnonzero(np.max(logw, axis=1) > MAX_LOG_WEIGHT)
    if too_big.size:
        i = int(too_big[0])
        raise SimulationError(f'stochastic exponential overflows on path {i}; use a smaller bound '
                              f'on beta or a finer grid', path_index=i)
    return logw


def stochastic_exponential(beta, r, x, spec, cfg, ensemble=None):
    """E_{r,x}[M_T^{r,beta}]; a mean of 1 certifies the martingale normalization."""
    ens = ensemble if ensemble is not None else simulate_from(r, x, spec, cfg)
    logw = doleans_log_weights(beta, spec, ens)
    return EstimateWithError.from_samples(np.exp(logw[:, -1]), ens.antithetic)


def hitting_indices(gamma, k_r, x_r, values):
    """First node k >= k_r with max_{k_r <= j <= k} |X_j - x(r)| >= gamma, else M."""
    dist = np.sqrt(np.sum((values[:, :, k_r:] - np.asarray(x_r)[None, :, None]) ** 2, axis=1))
    running = np.maximum.accumulate(dist, axis=1)
    hit = running >= gamma
    first = np.argmax(hit, axis=1)
    return np.where(np.any(hit, axis=1), k_r + first, values.shape[-1] - 1)


def hitting_time(gamma, r, x, path):
    if gamma < 0:
        raise DomainError(f'gamma must be non-negative, got {gamma!r}')
    grid = path.grid
    k_r = grid.first_index_at_or_after(r)
    x_r = x.resample(grid).evaluate(grid.nodes[k_r])
    k = hitting_indices(gamma, k_r, x_r, path.values[None])[0]
    return float(grid.nodes[k])


def simulate_markovian(sigma_bar, b_bar, r, x0, cfg, dimension=1, lineage=()):
    """Terminal states of the Markov diffusion started at x0 at time r.

    Plain Euler on the state only; the reference for the path simulator when
    the coefficients read nothing but x(t).
    """
    grid = cfg.grid
    k_r = start_index_of(grid, r)
    n, d = cfg.n_paths, dimension
    half = n // 2 if cfg.antithetic else n
    bounds = [(lo, min(lo + cfg.block_size, half)) for lo in range(0, half, cfg.block_size)]
    jobs = [(b, lo, hi, False) for b, (lo, hi) in enumerate(bounds)]
    if cfg.antithetic:
        jobs += [(b, lo, hi, True) for b, (lo, hi) in enumerate(bounds)]

    def run(job):
        b, lo, hi, negate = job
        rng = rng_stream(cfg.seed, *lineage, b)
        state = np.repeat(np.atleast_1d(np.asarray(x0, dtype=np.float64))[None], hi - lo, axis=0)
        for k in range(k_r, grid.steps):
            t = grid.nodes[k]
            dt = grid.nodes[k + 1] - t
            z = rng.standard_normal((hi - lo, d))
            if negate:
                z = -z
            sigma = np.broadcast_to(np.asarray(sigma_bar(t, state)), (hi - lo, d, d))
            drift = np.broadcast_to(np.asarray(b_bar(t, state)), (hi - lo, d))
            state = state + drift * dt + np.einsum('nij,nj->ni', sigma, z) * math.sqrt(dt)
        return state

    return np.concatenate(map_blocks(run, jobs, cfg.workers), axis=0)


def lipschitz_estimate(spec, ensemble, n_pairs=1000, seed=0):
    """Sampled max of |b(t,x) - b(t,y)| / ||x^t - y^t|| and the same for sigma (Frobenius)."""
    rng = rng_stream(seed, 7)
    grid = ensemble.grid
    n = ensemble.n_paths
    i = rng.integers(0, n, n_pairs)
    j = rng.integers(0, n, n_pairs)
    ks = rng.integers(ensemble.start_index, grid.steps + 1, n_pairs)
    best_b, best_sigma = 0.0, 0.0
    for k in np.unique(ks):
        sel = ks == k
        times, hist = ensemble.history_at(int(k))
        xi, xj = hist[i[sel]], hist[j[sel]]
        dist = sup_norm_batch(xi - xj)
        keep = dist > 1e-12
        if not np.any(keep):
            continue
        t = grid.nodes[k]
        db = np.linalg.norm(np.asarray(spec.drift.batch(t, times, xi)) - np.asarray(spec.drift.batch(t, times, xj)),
                            axis=1)
        ds = np.linalg.norm(np.asarray(spec.sigma.batch(t, times, xi)) - np.asarray(spec.sigma.batch(t, times, xj)),
                            axis=(1, 2))
        best_b = max(best_b, float(np.max(db[keep] / dist[keep])))
        best_sigma = max(best_sigma, float(np.max(ds[keep] / dist[keep])))
    return {'drift_lipschitz': best_b, 'sigma_lipschitz': best_sigma, 'n_pairs': int(n_pairs)}


def save_ensemble_csv(ensemble, path):
    header = ['path_id', 't'] + [f'x_{i + 1}' for i in range(ensemble.dimension)]
    return save_csv(path, header, ensemble.to_long_rows())


def terminal_estimate(g, ensemble):
    return expectation(g, ensemble, ensemble.grid.horizon)

