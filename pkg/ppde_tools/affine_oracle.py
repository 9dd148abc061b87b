"""Feynman-Kac representation of the mild solution for affine f = alpha + beta z."""
import logging

import numpy as np

from .diffusion import EstimateWithError, simulate_from, simulate_rows, warn_if_noisy
from .exceptions import DomainError
from .functionals import FunctionalHandle
from .utils import rng_stream

logger = logging.getLogger(__name__)

_FK, _AFFINE_FUNCTIONAL = 106, 105


def fk_samples(alpha, beta, g, grid, values, start_index):
    """Per-path e^{-int beta} g(X^T) - int e^{-int_r^t beta} alpha dt with left-endpoint sums.

    Returns (samples, sup |alpha| v |beta| seen on the ensemble).
    """
    nodes = grid.nodes
    n = values.shape[0]
    start_index = np.broadcast_to(np.asarray(start_index), (n,))
    log_discount = np.zeros(n)
    source = np.zeros(n)
    coefficient_sup = 0.0
    for k in range(int(start_index.min()), grid.steps):
        active = start_index <= k
        times, hist = nodes[:k + 1], values[:, :, :k + 1]
        a = np.array(alpha.batch(nodes[k], times, hist))
        b = np.array(beta.batch(nodes[k], times, hist))
        coefficient_sup = max(coefficient_sup, float(np.max(np.abs(a[active]))),
                              float(np.max(np.abs(b[active]))))
        dt = nodes[k + 1] - nodes[k]
        source = source + np.where(active, np.exp(-log_discount) * a * dt, 0.0)
        log_discount = log_discount + np.where(active, b * dt, 0.0)
    G = np.array(g.on_grid(grid, values, grid.horizon))
    return np.exp(-log_discount) * G - source, coefficient_sup


def fk_solve(r, x, alpha, beta, g, spec, cfg, return_report=False):
    ens = simulate_from(r, x, spec, cfg, lineage=(_FK,))
    samples, coefficient_sup = fk_samples(alpha, beta, g, ens.grid, ens.values, ens.start_index)
    estimate = EstimateWithError.from_samples(samples, ens.antithetic)
    warn_if_noisy(estimate, f'fk u({r:g}, x)')
    logger.info('fk u(%.4g, x) = %s, sup|alpha| v |beta| = %.4g', r, estimate, coefficient_sup)
    if return_report:
        return estimate, {'coefficient_sup': coefficient_sup}
    return estimate


def affine_solution_functional(alpha, beta, g, spec, cfg, label='u_fk'):
    """The Feynman-Kac solution as a functional; each evaluation simulates cfg.n_paths paths per row.

    Evaluation times must be nodes of cfg.grid.
    """
    grid = cfg.grid
    nodes = grid.nodes
    B = cfg.n_paths

    def evaluator(t, times, values):
        k = grid.index_of(t)
        if k is None or len(times) != k + 1:
            raise DomainError(f'{label} is evaluated on grid nodes only, got t={t!r}')
        n = values.shape[0]
        full = np.concatenate([values, np.repeat(values[:, :, -1:], grid.steps - k, axis=2)], axis=2)
        if k == grid.steps:
            return np.array(g.on_grid(grid, full, grid.horizon))
        out = np.empty(n)
        chunk = max(1, cfg.block_size // B)
        for c, lo in enumerate(range(0, n, chunk)):
            hi = min(lo + chunk, n)
            rng = rng_stream(cfg.seed, _AFFINE_FUNCTIONAL, k, c)
            rows = np.repeat(full[lo:hi], B, axis=0)
            simulate_rows(spec, grid, rows, k, rng)
            samples, _ = fk_samples(alpha, beta, g, grid, rows, k)
            out[lo:hi] = samples.reshape(hi - lo, B).mean(axis=1)
        return out

    return FunctionalHandle(evaluator, label=label)
