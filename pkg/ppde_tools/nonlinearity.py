"""Reaction terms f(t, x, z) on an interval D and sampled checks of the existence conditions."""
import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .exceptions import DomainError
from .functionals import FunctionalHandle, compile_reaction, constant
from .utils import rng_stream

logger = logging.getLogger(__name__)

PASS, INCONCLUSIVE, FAIL, NOT_APPLICABLE = 'PASS', 'INCONCLUSIVE', 'FAIL', 'N/A'


@dataclass(frozen=True)
class DomainInterval:
    lower: float = -math.inf
    upper: float = math.inf
    closed_lower: bool = True
    closed_upper: bool = True

    def __post_init__(self):
        if not self.lower < self.upper:
            raise DomainError(f'degenerate interval: lower={self.lower!r} >= upper={self.upper!r}')

    @classmethod
    def real(cls):
        return cls(-math.inf, math.inf, False, False)

    @classmethod
    def nonnegative(cls):
        return cls(0.0, math.inf, True, False)

    @property
    def bounded_below(self):
        return math.isfinite(self.lower)

    @property
    def bounded_above(self):
        return math.isfinite(self.upper)

    def contains(self, z):
        z = np.asarray(z, dtype=np.float64)
        above = z >= self.lower if self.closed_lower and self.bounded_below else z > self.lower
        below = z <= self.upper if self.closed_upper and self.bounded_above else z < self.upper
        return above & below & np.isfinite(z)

    def require(self, z, name='z'):
        inside = self.contains(z)
        if not np.all(inside):
            bad = np.asarray(z).reshape(-1)[~inside.reshape(-1)][0]
            raise DomainError(f'{name}={float(bad)!r} lies outside D = {self}')
        return z

    def __str__(self):
        left = '[' if self.closed_lower and self.bounded_below else '('
        right = ']' if self.closed_upper and self.bounded_above else ')'
        return f'{left}{self.lower}, {self.upper}{right}'

    def to_dict(self):
        return {'lower': self.lower, 'upper': self.upper, 'closed_lower': self.closed_lower,
                'closed_upper': self.closed_upper}


@dataclass(frozen=True)
class Nonlinearity:
    """f(t, x, z); the evaluator takes (t, times, values, z) with z of shape (n,)."""
    evaluator: Callable
    domain: DomainInterval
    tag: str
    coefficients: dict = field(default_factory=dict, compare=False)
    path_independent: bool = False
    label: str = 'f'

    def batch(self, t, times, values, z):
        n = values.shape[0]
        z = np.broadcast_to(np.asarray(z, dtype=np.float64), (n,))
        self.domain.require(z)
        out = np.asarray(self.evaluator(float(t), times, values, z), dtype=np.float64)
        return np.broadcast_to(out, (n,))

    def __call__(self, t, x, z):
        times, hist = x.history(t)
        return float(self.batch(t, times, hist[None, ...], z)[0])

    def dz(self, t, times, values, z, h=1e-6):
        """Finite-difference d/dz, one-sided next to a boundary of D."""
        z = np.broadcast_to(np.asarray(z, dtype=np.float64), (values.shape[0],))
        up_ok = self.domain.contains(z + h)
        down_ok = self.domain.contains(z - h)
        up = np.where(up_ok, z + h, z)
        down = np.where(down_ok, z - h, z)
        width = up - down
        width = np.where(width > 0, width, h)
        return (self.batch(t, times, values, up) - self.batch(t, times, values, down)) / width

    def to_dict(self):
        return {'tag': self.tag, 'label': self.label, 'domain': self.domain.to_dict(),
                'path_independent': self.path_independent}


def _as_handle(c, label):
    if isinstance(c, FunctionalHandle):
        return c
    return constant(float(c), label=label if label else repr(c))


def make_affine(alpha, beta):
    alpha, beta = _as_handle(alpha, 'alpha'), _as_handle(beta, 'beta')

    def evaluator(t, times, values, z):
        return alpha.batch(t, times, values) + beta.batch(t, times, values) * z
    return Nonlinearity(evaluator, DomainInterval.real(), 'affine', {'alpha': alpha, 'beta': beta},
                        alpha.path_independent and beta.path_independent,
                        f'({alpha.label}) + ({beta.label}) z')


def _check_weight(w, name):
    if np.any(w < 0):
        raise DomainError(f'{name} must be non-negative, got {float(np.min(w))!r}')
    return w


def make_superprocess(alpha, gamma, atoms=()):
    """alpha z + gamma z^2 + sum_k w_k (e^{-u_k z} - 1 + u_k z) on [0, inf).

    `atoms` is a list of (u_k, w_k) pairs; the branching kernel is the
    finite atomic measure sum_k w_k delta_{u_k}.
    """
    alpha, gamma = _as_handle(alpha, 'alpha'), _as_handle(gamma, 'gamma')
    parsed = []
    for position, weight in atoms:
        if not position > 0:
            raise DomainError(f'atom positions must be strictly positive, got {position!r}')
        parsed.append((float(position), _as_handle(weight, 'w')))

    def evaluator(t, times, values, z):
        out = alpha.batch(t, times, values) * z + gamma.batch(t, times, values) * z * z
        for position, weight in parsed:
            w = _check_weight(weight.batch(t, times, values), 'atom weight')
            out = out + w * (np.expm1(-position * z) + position * z)
        return out
    independent = alpha.path_independent and gamma.path_independent and \
        all(w.path_independent for _, w in parsed)
    return Nonlinearity(evaluator, DomainInterval.nonnegative(), 'superprocess',
                        {'alpha': alpha, 'gamma': gamma, 'atoms': parsed}, independent,
                        f'({alpha.label}) z + ({gamma.label}) z^2 + {len(parsed)} atoms')


def make_power_sum(alpha, gamma, terms=()):
    """alpha z + sum_i beta_i z^{v_i} + gamma z^2 with v_i in (1, 2)."""
    alpha, gamma = _as_handle(alpha, 'alpha'), _as_handle(gamma, 'gamma')
    parsed = []
    for v, beta in terms:
        if not 1.0 < v < 2.0:
            raise DomainError(f'power-sum exponents must lie in (1, 2), got {v!r}')
        parsed.append((float(v), _as_handle(beta, 'beta')))

    def evaluator(t, times, values, z):
        out = alpha.batch(t, times, values) * z + gamma.batch(t, times, values) * z * z
        for v, beta in parsed:
            out = out + _check_weight(beta.batch(t, times, values), 'beta') * np.power(z, v)
        return out
    independent = alpha.path_independent and gamma.path_independent and \
        all(b.path_independent for _, b in parsed)
    return Nonlinearity(evaluator, DomainInterval.nonnegative(), 'power_sum',
                        {'alpha': alpha, 'gamma': gamma, 'terms': parsed}, independent,
                        f'({alpha.label}) z + sum beta_i z^v_i + ({gamma.label}) z^2')


def make_power(alpha, p):
    if not p >= 1.0:
        raise DomainError(f'power p must be >= 1, got {p!r}')
    alpha = _as_handle(alpha, 'alpha')
    p = float(p)

    def evaluator(t, times, values, z):
        return alpha.batch(t, times, values) * np.power(z, p)
    return Nonlinearity(evaluator, DomainInterval.nonnegative(), 'power', {'alpha': alpha, 'p': p},
                        alpha.path_independent, f'({alpha.label}) z^{p}')


def conjugate_exponent(p):
    if not p > 1.0:
        raise DomainError(f'p must be > 1, got {p!r}')
    return p / (p - 1.0)


def make_control_dual(alpha, eta, p):
    """-alpha + z^q / ((q - 1) eta^{q - 1}) with q = p / (p - 1)."""
    q = conjugate_exponent(p)
    alpha, eta = _as_handle(alpha, 'alpha'), _as_handle(eta, 'eta')

    def evaluator(t, times, values, z):
        e = eta.batch(t, times, values)
        if np.any(e <= 0):
            raise DomainError(f'eta must be strictly positive, got {float(np.min(e))!r} at t={t!r}')
        return -alpha.batch(t, times, values) + np.power(z, q) / ((q - 1.0) * np.power(e, q - 1.0))
    return Nonlinearity(evaluator, DomainInterval.nonnegative(), 'control_dual',
                        {'alpha': alpha, 'eta': eta, 'p': float(p), 'q': q},
                        alpha.path_independent and eta.path_independent,
                        f'-({alpha.label}) + z^{q:g} / ((q-1) ({eta.label})^(q-1))')


def make_custom(text, dimension=1, horizon=None, domain=None):
    evaluator, independent = compile_reaction(text, dimension, horizon)
    return Nonlinearity(evaluator, domain or DomainInterval.real(), 'custom', {'expression': text},
                        independent, str(text))


def _eval_grid(f, t, x, z):
    times, hist = x.history(t)
    z = np.asarray(z, dtype=np.float64).reshape(-1)
    values = np.broadcast_to(hist[None, ...], (z.size,) + hist.shape)
    with np.errstate(all='ignore'):
        return np.asarray(f.batch(t, times, values, z))


def _interior_box(domain, z_scale):
    if domain.bounded_below and domain.bounded_above:
        return domain.lower, domain.upper
    if domain.bounded_below:
        return domain.lower, domain.lower + z_scale
    if domain.bounded_above:
        return domain.upper - z_scale, domain.upper
    return -z_scale, z_scale


def _check_lipschitz(f, samples, rng, n_draws, z_scale):
    lo, hi = _interior_box(f.domain, z_scale)
    kappa, lam = 0.0, 0.0
    for t, x in samples:
        z0 = rng.uniform(lo, hi, n_draws)
        delta = 0.1 * np.maximum(1.0, np.abs(z0))
        z1 = np.clip(z0 + delta * rng.uniform(-1.0, 1.0, n_draws), lo, hi)
        keep = f.domain.contains(z0) & f.domain.contains(z1) & (z0 != z1)
        z0, z1 = z0[keep], z1[keep]
        f0, f1 = _eval_grid(f, t, x, z0), _eval_grid(f, t, x, z1)
        if not (np.all(np.isfinite(f0)) and np.all(np.isfinite(f1))):
            return {'status': FAIL, 'reason': f'non-finite value at t={t!r}'}
        kappa = max(kappa, float(np.max(np.abs(f0), initial=0.0)))
        lam = max(lam, float(np.max(np.abs(f1 - f0) / np.abs(z1 - z0), initial=0.0)))
    status = PASS if lam < 1e6 else INCONCLUSIVE
    return {'status': status, 'kappa': kappa, 'lambda': lam, 'z_box': [lo, hi]}


def _growth_side(f, samples, sign, rng, n_draws):
    """Fit h = sign * f <= alpha + beta |z|.

    sign=+1 checks f <= alpha + beta|z| toward z -> -inf, sign=-1 checks
    f >= -alpha - beta|z| toward z -> +inf.
    """
    scales = 2.0 ** np.arange(0, 21)
    zs = -scales if sign > 0 else scales
    alpha, beta, superlinear = 0.0, 0.0, False
    for t, x in samples:
        h = sign * _eval_grid(f, t, x, zs)
        if not np.all(np.isfinite(h)):
            superlinear = True
            continue
        slopes = np.diff(h[-11:]) / np.diff(scales[-11:])
        if slopes[-1] > 1e3 and slopes[-1] > 4.0 * max(slopes[0], 1e-12):
            superlinear = True
        beta = max(beta, float(np.max(slopes[-10:])), 0.0)
        near = rng.uniform(-1.0, 1.0, n_draws) * 10.0
        near = near[f.domain.contains(near)]
        z_all = np.concatenate([zs, near, [0.0] if f.domain.contains(0.0) else []])
        h_all = sign * _eval_grid(f, t, x, z_all)
        alpha = max(alpha, float(np.max(h_all - beta * np.abs(z_all), initial=0.0)))
    if superlinear:
        return {'status': FAIL, 'reason': 'superlinear growth'}
    return {'status': PASS, 'alpha': alpha, 'beta': beta}


def _check_growth(f, samples, rng, n_draws):
    report = {}
    if not f.domain.bounded_below:
        report['upper_bound'] = _growth_side(f, samples, +1, rng, n_draws)
    if not f.domain.bounded_above:
        report['lower_bound'] = _growth_side(f, samples, -1, rng, n_draws)
    if not report:
        return {'status': NOT_APPLICABLE}
    statuses = [side['status'] for side in report.values()]
    status = FAIL if FAIL in statuses else PASS
    out = {'status': status, **report}
    if status == PASS:
        out['alpha'] = max(side['alpha'] for side in report.values())
        out['beta'] = max(side['beta'] for side in report.values())
    return out


def _boundary_limit(f, samples, endpoint, direction):
    ks = np.arange(1, 21)
    zs = endpoint + direction * 2.0 ** (-ks.astype(np.float64))
    limits = []
    for t, x in samples:
        vals = _eval_grid(f, t, x, zs)
        if not np.all(np.isfinite(vals[-2:])):
            return None
        # linear extrapolation of the last two points to the endpoint
        limits.append(float(2.0 * vals[-1] - vals[-2]))
    return limits


def _check_boundary(f, samples, tol):
    report = {}
    if f.domain.bounded_below:
        limits = _boundary_limit(f, samples, f.domain.lower, +1.0)
        if limits is None:
            report['lower'] = {'status': FAIL, 'reason': 'non-finite values near the lower endpoint'}
        else:
            worst = max(limits)
            report['lower'] = {'status': PASS if worst <= tol else FAIL, 'limit': worst}
    if f.domain.bounded_above:
        limits = _boundary_limit(f, samples, f.domain.upper, -1.0)
        if limits is None:
            report['upper'] = {'status': FAIL, 'reason': 'non-finite values near the upper endpoint'}
        else:
            worst = min(limits)
            report['upper'] = {'status': PASS if worst >= -tol else FAIL, 'limit': worst}
    if not report:
        return {'status': NOT_APPLICABLE}
    statuses = [side['status'] for side in report.values()]
    return {'status': FAIL if FAIL in statuses else PASS, **report}


def validate_conditions(f, samples, n_draws=1000, seed=0, z_scale=10.0, boundary_tol=1e-6):
    """Sampled evidence for the three existence conditions on f.

    `samples` is a list of (t, x) pairs. Conditions quantified over
    almost every t are only probed at the sampled times, so a violation on a
    null set of times cannot be detected. The result is evidence, not a proof.
    """
    if not samples:
        raise DomainError('validate_conditions needs at least one (t, x) sample')
    rng = rng_stream(seed, 11)
    per_sample = max(1, n_draws // len(samples))
    report = {
        'label': f.label,
        'domain': str(f.domain),
        'local_lipschitz': _check_lipschitz(f, samples, rng, per_sample, z_scale),
        'linear_growth': _check_growth(f, samples, rng, per_sample),
        'boundary': _check_boundary(f, samples, boundary_tol),
        'n_samples': len(samples),
    }
    for key in ('local_lipschitz', 'linear_growth', 'boundary'):
        logger.info('%s: condition %s -> %s', f.label, key, report[key]['status'])
    return report
