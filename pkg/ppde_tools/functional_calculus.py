"""Finite-difference horizontal/vertical derivatives, the generator and the PPDE residual.

Every derivative is computed by bumping and revaluing on histories:
the horizontal bump extends the history by a flat piece (time moves, path
frozen), the vertical bump shifts the last node of the history, which is
exactly x + h 1_{[t,T]} seen up to time t.
"""
import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .exceptions import ContractError, DomainError
from .paths import TimeGrid, history_of, stop, sup_norm_batch

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class DerivativeConfig:
    step_h: Optional[float] = None
    time_step_h: Optional[float] = None
    scheme: str = 'forward'
    allow_central: bool = False

    def __post_init__(self):
        for name in ('step_h', 'time_step_h'):
            value = getattr(self, name)
            if value is not None and not value > 0:
                raise DomainError(f'{name} must be strictly positive, got {value!r}')
        if self.scheme not in ('forward', 'central'):
            raise DomainError(f"scheme must be 'forward' or 'central', got {self.scheme!r}")
        if self.scheme == 'central' and not self.allow_central:
            raise DomainError('central horizontal differences need allow_central=True '
                              '(the functional must be defined for t - h >= 0)')

    def space_step(self, values):
        if self.step_h is not None:
            return float(self.step_h)
        return 1e-4 * max(1.0, float(np.max(sup_norm_batch(values))))

    def time_step(self, grid):
        if self.time_step_h is not None:
            return float(self.time_step_h)
        return grid.max_step

    def to_dict(self):
        return {'step_h': self.step_h, 'time_step_h': self.time_step_h, 'scheme': self.scheme}


def horizontal_batch(u, t, times, hist, h, horizon, scheme='forward'):
    """(u(t+h, x^t) - u(t, x^t)) / h over a batch of histories ending at t."""
    if t + h > horizon + 1e-12 * max(1.0, horizon):
        raise DomainError(f'horizontal step leaves [0, T]: t + h = {t + h!r} > T = {horizon!r}')
    ahead_times = np.append(times, t + h)
    ahead = np.concatenate([hist, hist[..., -1:]], axis=-1)
    up = u.batch(t + h, ahead_times, ahead)
    if scheme == 'forward':
        return (up - u.batch(t, times, hist)) / h
    if t - h < 0.0:
        raise DomainError(f'central horizontal step needs t - h >= 0, got t={t!r}, h={h!r}')
    if len(times) < 2:
        raise DomainError('central horizontal step needs a history longer than one node')
    back_times, back = history_of(TimeGrid(times), hist, t - h)
    down = u.batch(t - h, back_times, back)
    return (up - down) / (2.0 * h)


def gradient_batch(u, t, times, hist, h):
    n, d = hist.shape[0], hist.shape[1]
    work = np.array(hist, copy=True)
    base = hist[:, :, -1]
    grad = np.empty((n, d))
    for i in range(d):
        work[:, i, -1] = base[:, i] + h
        up = np.array(u.batch(t, times, work))
        work[:, i, -1] = base[:, i] - h
        down = np.array(u.batch(t, times, work))
        work[:, i, -1] = base[:, i]
        grad[:, i] = (up - down) / (2.0 * h)
    return grad


def hessian_batch(u, t, times, hist, h, return_asymmetry=False):
    """Second vertical derivatives: 3-point diagonal and 4-point mixed stencils."""
    n, d = hist.shape[0], hist.shape[1]
    work = np.array(hist, copy=True)
    base = hist[:, :, -1]
    center = np.array(u.batch(t, times, hist))
    hess = np.empty((n, d, d))

    def bumped(shifts):
        for i, s in shifts:
            work[:, i, -1] = base[:, i] + s
        out = np.array(u.batch(t, times, work))
        for i, _ in shifts:
            work[:, i, -1] = base[:, i]
        return out

    for i in range(d):
        hess[:, i, i] = (bumped([(i, h)]) - 2.0 * center + bumped([(i, -h)])) / (h * h)
        for j in range(i + 1, d):
            mixed = (bumped([(i, h), (j, h)]) - bumped([(i, h), (j, -h)])
                     - bumped([(i, -h), (j, h)]) + bumped([(i, -h), (j, -h)])) / (4.0 * h * h)
            hess[:, i, j] = mixed
            hess[:, j, i] = mixed
    asymmetry = float(np.max(np.abs(hess - np.swapaxes(hess, 1, 2)))) if n else 0.0
    sym = 0.5 * (hess + np.swapaxes(hess, 1, 2))
    return (sym, asymmetry) if return_asymmetry else sym


def generator_batch(spec, u, t, times, hist, h):
    sigma = np.asarray(spec.sigma.batch(t, times, hist))
    drift = np.asarray(spec.drift.batch(t, times, hist))
    a = np.einsum('nik,njk->nij', sigma, sigma)
    hess = hessian_batch(u, t, times, hist, h)
    grad = gradient_batch(u, t, times, hist, h)
    return 0.5 * np.einsum('nij,nij->n', a, hess) + np.einsum('ni,ni->n', drift, grad)


def _prepare(x, t, upper_open=True):
    t = x.grid.check_time(t)
    if upper_open and t >= x.grid.horizon - x.grid.tolerance():
        raise DomainError(f'derivatives are defined on [0, T); got t={t!r} with T={x.grid.horizon!r}')
    times, hist = x.history(t)
    return t, times, hist[None, ...]


def _scalar(arr):
    arr = np.asarray(arr)[0]
    return float(arr) if arr.ndim == 0 else np.array(arr)


def horizontal_derivative(u, t, x, cfg=None):
    cfg = cfg or DerivativeConfig()
    t, times, hist = _prepare(x, t)
    h = cfg.time_step(x.grid)
    return _scalar(horizontal_batch(u, t, times, hist, h, x.grid.horizon, cfg.scheme))


def vertical_gradient(u, t, x, cfg=None):
    cfg = cfg or DerivativeConfig()
    t, times, hist = _prepare(x, t)
    return gradient_batch(u, t, times, hist, cfg.space_step(hist))[0]


def vertical_hessian(u, t, x, cfg=None, return_asymmetry=False):
    cfg = cfg or DerivativeConfig()
    t, times, hist = _prepare(x, t)
    out = hessian_batch(u, t, times, hist, cfg.space_step(hist), return_asymmetry)
    if return_asymmetry:
        return out[0][0], out[1]
    return out[0]


def apply_generator(spec, u, t, x, cfg=None):
    cfg = cfg or DerivativeConfig()
    t, times, hist = _prepare(x, t)
    return float(generator_batch(spec, u, t, times, hist, cfg.space_step(hist))[0])


def residual_batch(spec, f, u, t, times, hist, h_x, h_t, horizon, scheme='forward'):
    """(d_t + L)(u) - f(t, x, u) over a batch of histories."""
    value = np.array(u.batch(t, times, hist))
    f.domain.require(value, 'u(t, x)')
    dt_u = horizontal_batch(u, t, times, hist, h_t, horizon, scheme)
    lu = generator_batch(spec, u, t, times, hist, h_x)
    return dt_u + lu - np.asarray(f.batch(t, times, hist, value))


def ppde_residual(spec, f, u, t, x, cfg=None):
    cfg = cfg or DerivativeConfig()
    t, times, hist = _prepare(x, t)
    return float(residual_batch(spec, f, u, t, times, hist, cfg.space_step(hist),
                                cfg.time_step(x.grid), x.grid.horizon, cfg.scheme)[0])


def assert_nonanticipative(u, paths, times=None, tol=0.0):
    """Check u(t, x) == u(t, x^t) on every path at the given grid times.

    Times default to every grid node; off-grid times are not used because the
    discrete stop replaces the bracketing node by an interpolated value.
    """
    for x in paths:
        nodes = x.grid.nodes if times is None else [x.grid.snap(s) for s in times]
        for s in nodes:
            lhs = np.asarray(u(s, x))
            rhs = np.asarray(u(s, stop(x, s)))
            if np.any(np.abs(lhs - rhs) > tol):
                raise ContractError(f'{u.label} is not non-anticipative at t={s!r}: '
                                    f'{lhs!r} != {rhs!r}')
    return True


def classical_solution_check(spec, f, u, g, probes, cfg=None, tol=1e-3):
    """Signs of the PPDE residual at probes and of u(T, x) - g(x).

    A classical subsolution has residual >= 0 and u(T, x) <= g(x); a
    supersolution the reverse.
    """
    cfg = cfg or DerivativeConfig()
    rows = []
    for r, x in probes:
        residual = ppde_residual(spec, f, u, r, x, cfg)
        terminal_gap = float(u(x.grid.horizon, x)) - float(g(x.grid.horizon, x))
        rows.append({'r': float(r), 'residual': residual, 'terminal_gap': terminal_gap})
    sub = all(row['residual'] >= -tol and row['terminal_gap'] <= tol for row in rows)
    sup = all(row['residual'] <= tol and row['terminal_gap'] >= -tol for row in rows)
    return {'probes': rows, 'subsolution': sub, 'supersolution': sup, 'solution': sub and sup,
            'tolerance': tol}
