"""Sampled checks of the viscosity test-function conditions.

For the subsolution side a test function phi belongs to the stochastic
class at (r, x) when

    (u - phi)(r, x) >= E_{r,x}[(u - phi)(tau~ ^ tau, X^{tau~ ^ tau})]

for a stopping time tau with P(tau > r) > 0 and every early stopping rule
tau~ in [r, r + delta). The gap reported below is the left side minus the
right side. Membership is quantified over infinitely many stopping rules, so
a finite battery can only falsify it.
"""
import logging
import math
from dataclasses import dataclass

import numpy as np
from tqdm import tqdm

from .diffusion import EstimateWithError, doleans_log_weights, hitting_indices, simulate_from
from .exceptions import DomainError, PPDEError
from .functional_calculus import DerivativeConfig, apply_generator, horizontal_derivative
from .functionals import FunctionalHandle, time_function
from .paths import sup_norm_batch, vertical_bump

logger = logging.getLogger(__name__)

CONSISTENT, VIOLATED, INCONCLUSIVE = 'consistent', 'violated', 'inconclusive'
_VISCOSITY = 108


@dataclass(frozen=True)
class TestFunctionCandidate:
    phi: FunctionalHandle
    r: float
    x: object
    gamma: float
    delta: float

    def __post_init__(self):
        if not self.gamma > 0:
            raise DomainError(f'gamma must be > 0, got {self.gamma!r}')
        if not self.delta > 0:
            raise DomainError(f'delta must be > 0, got {self.delta!r}')
        horizon = self.x.grid.horizon
        if not self.r < horizon:
            raise DomainError(f'r must be < T, got r={self.r!r}')
        if not self.delta < horizon - self.r:
            raise DomainError(f'delta must be < T - r = {horizon - self.r!r}, got {self.delta!r}')


def default_stop_rules(r, delta):
    return [r, r + 0.25 * delta, r + 0.5 * delta]


def _oriented(u, phi, side):
    if side == 'sub':
        return u, phi
    if side == 'super':
        return -u, -phi
    raise DomainError(f"side must be 'sub' or 'super', got {side!r}")


def check_membership_SP(u, cand, spec, cfg, stop_rules=None, side='sub', beta=None, bias_allowance=None):
    """Gap of the stochastic test-function inequality per early stopping rule.

    tau is the exit time of the gamma-tube around x(r), capped at r + delta.
    With `beta` the right side is weighted by the stochastic exponential
    M^{r,beta} at the stopping time.
    """
    u, phi = _oriented(u, cand.phi, side)
    grid = cfg.grid
    nodes = grid.nodes
    x = cand.x.resample(grid)
    ens = simulate_from(cand.r, x, spec, cfg, lineage=(_VISCOSITY,))
    k_r = ens.start_index
    cap = grid.last_index_at_or_before(cand.r + cand.delta)
    tau = np.minimum(hitting_indices(cand.gamma, k_r, x.evaluate(nodes[k_r]), ens.values), cap)
    p_positive = float(np.mean(tau > k_r))
    diff = u - phi
    lhs = float(diff(nodes[k_r], x))
    weights = None
    if beta is not None:
        weights = np.exp(doleans_log_weights(beta, spec, ens))
    allowance = grid.max_step if bias_allowance is None else bias_allowance
    rules = default_stop_rules(nodes[k_r], cand.delta) if stop_rules is None else stop_rules
    rows = []
    for s in rules:
        if s < nodes[k_r] - grid.tolerance() or s >= nodes[k_r] + cand.delta:
            raise DomainError(f'early stopping time {s!r} lies outside [r, r + delta)')
        sigma = np.minimum(grid.first_index_at_or_after(s), tau)
        at_sigma = ens.evaluate_at_indices(diff, sigma)
        if weights is not None:
            at_sigma = at_sigma * weights[np.arange(ens.n_paths), sigma]
        gap = EstimateWithError.from_samples(lhs - at_sigma, ens.antithetic)
        if gap.value >= -3.0 * gap.std_error:
            verdict = CONSISTENT
        elif gap.value >= -3.0 * gap.std_error - allowance:
            verdict = INCONCLUSIVE
        else:
            verdict = VIOLATED
        rows.append({'tilde_tau': float(s), **gap.to_dict(), 'verdict': verdict})
    member = all(row['verdict'] == CONSISTENT for row in rows)
    logger.debug('SP membership (%s) of %s at r=%.4g: %s, P(tau > r)=%.3f', side, cand.phi.label, cand.r,
                 member, p_positive)
    return {'side': side, 'phi': cand.phi.label, 'gamma': cand.gamma, 'delta': cand.delta,
            'p_tau_gt_r': p_positive, 'rules': rows, 'member': member, 'weighted': beta is not None}


def residual_at_test_function(phi, spec, f, u, r, x, dcfg=None, side='sub', tol=0.0):
    """(d_r + L)(phi)(r, x) - f(r, x, u(r, x)) and whether it has the sign the side demands."""
    dcfg = dcfg or DerivativeConfig()
    u_rx = float(u(r, x))
    f.domain.require(u_rx, 'u(r, x)')
    residual = horizontal_derivative(phi, r, x, dcfg) + apply_generator(spec, phi, r, x, dcfg) - f(r, x, u_rx)
    if side == 'sub':
        satisfied = residual >= -tol
    elif side == 'super':
        satisfied = residual <= tol
    else:
        raise DomainError(f"side must be 'sub' or 'super', got {side!r}")
    return {'residual': float(residual), 'side': side, 'tolerance': tol,
            'verdict': CONSISTENT if satisfied else VIOLATED}


def check_membership_P(u, phi, r, x, delta, spec, cfg, side='sub', n_bumps=8, tol=1e-10):
    """Right-hand local maximum of u - phi at (r, x), probed on neighbours within d_inf < delta.

    Neighbours are simulated paths stopped at nodes in [r, r + delta) and
    vertical bumps of x at r.
    """
    u, phi = _oriented(u, phi, side)
    grid = cfg.grid
    nodes = grid.nodes
    x = x.resample(grid)
    diff = u - phi
    k_r = grid.index_of(r)
    if k_r is None:
        raise DomainError(f'r={r!r} is not a grid node')
    centre = float(diff(nodes[k_r], x))
    x_r = x.evaluate(nodes[k_r])
    worst = -math.inf
    worst_at = None
    checked = 0
    for h in np.linspace(-delta, delta, 2 * n_bumps + 1)[1:-1]:
        y = vertical_bump(x, nodes[k_r], np.full(x.dimension, h / math.sqrt(x.dimension)))
        excess = float(diff(nodes[k_r], y)) - centre
        checked += 1
        if excess > worst:
            worst, worst_at = excess, {'s': float(nodes[k_r]), 'bump': float(h)}
    ens = simulate_from(r, x, spec, cfg, lineage=(_VISCOSITY + 1,))
    for k in range(k_r + 1, grid.steps):
        if nodes[k] - nodes[k_r] >= delta:
            break
        times, hist = ens.history_at(k)
        dist = (nodes[k] - nodes[k_r]) + sup_norm_batch(hist[:, :, k_r:] - x_r[None, :, None])
        near = dist < delta
        if not np.any(near):
            continue
        excess = np.asarray(diff.batch(nodes[k], times, hist[near])) - centre
        checked += int(np.count_nonzero(near))
        i = int(np.argmax(excess))
        if excess[i] > worst:
            worst, worst_at = float(excess[i]), {'s': float(nodes[k]), 'path': int(np.flatnonzero(near)[i])}
    member = worst <= tol
    return {'side': side, 'phi': phi.label, 'member': bool(member), 'max_excess': worst,
            'argmax': worst_at, 'neighbours': checked, 'delta': delta}


def _battery(u, r, slopes=(-1.0, -0.25, 0.25, 1.0), curvatures=(-1.0, 1.0)):
    out = []
    for a in slopes:
        out.append(u + time_function(lambda t, a=a: a * (t - r), label=f'{a:g} (t - r)'))
    for c in curvatures:
        out.append(u + _tube_penalty(r, c))
    return out


def _tube_penalty(r, c):
    def evaluator(t, times, values):
        k = int(np.searchsorted(times, r - 1e-12))
        k = min(k, values.shape[-1] - 1)
        return c * np.sum((values[:, :, -1] - values[:, :, k]) ** 2, axis=1)
    return FunctionalHandle(evaluator, label=f'{c:g} |x(t) - x(r)|^2')


def consistency_battery(u, spec, f, probes, cfg, dcfg=None, gammas=None, delta=None, derivative_tol=1e-2,
                        show_progress=False):
    """Look for a member test function whose residual has the wrong sign.

    For each probe and each perturbation phi of u, and for both sides, a phi
    that passes check_membership_SP must have a residual of the matching
    sign. Contradictions are returned as findings; errors are recorded, not raised.
    """
    dcfg = dcfg or DerivativeConfig()
    rows, findings = [], []
    items = [(i, r, x) for i, (r, x) in enumerate(probes)]
    if show_progress:
        items = tqdm(items, desc='battery')
    for i, r, x in items:
        horizon = x.grid.horizon
        d = delta if delta is not None else 0.25 * (horizon - r)
        scale = math.sqrt(horizon - r)
        for gamma in (gammas or [0.1 * scale, 0.5 * scale, 1.0 * scale]):
            for phi in _battery(u, r):
                for side in ('sub', 'super'):
                    row = {'probe': i, 'r': float(r), 'gamma': float(gamma), 'phi': phi.label, 'side': side}
                    try:
                        cand = TestFunctionCandidate(phi, r, x, gamma, d)
                        membership = check_membership_SP(u, cand, spec, cfg, side=side)
                        residual = residual_at_test_function(phi, spec, f, u, r, x, dcfg, side, derivative_tol)
                    except PPDEError as err:
                        row['error'] = str(err)
                        findings.append(row)
                        continue
                    row.update({'member': membership['member'], 'p_tau_gt_r': membership['p_tau_gt_r'],
                                'residual': residual['residual'], 'residual_verdict': residual['verdict']})
                    if membership['member'] and residual['verdict'] == VIOLATED:
                        findings.append(row)
                        logger.warning('contradiction at probe %d: %s (%s) is a member but residual=%.4g',
                                       i, phi.label, side, residual['residual'])
                    rows.append(row)
    return {'checked': len(rows), 'findings': findings, 'rows': rows}
