"""Discrete continuous paths on a shared time grid.

A path is stored by its values at the grid nodes and read between nodes by
linear interpolation. Functionals never see a whole path: they are handed its
*history* up to the evaluation time t, i.e. the nodes <= t plus, when t is
off-grid, one extra node at t. The history carries exactly the information
of the stopped path x^t, so non-anticipation holds by construction.
"""
import json
import logging
from dataclasses import dataclass

import numpy as np

from .exceptions import DomainError, ShapeError

logger = logging.getLogger(__name__)

TIME_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class TimeGrid:
    nodes: np.ndarray

    def __post_init__(self):
        nodes = np.array(self.nodes, dtype=np.float64).reshape(-1)
        if nodes.size < 2:
            raise ShapeError('a time grid needs at least two nodes')
        if nodes[0] != 0.0:
            raise DomainError(f'first grid node must be exactly 0, got {nodes[0]!r}')
        if not np.all(np.isfinite(nodes)) or np.any(np.diff(nodes) <= 0.0):
            raise DomainError('grid nodes must be finite and strictly increasing')
        nodes.setflags(write=False)
        object.__setattr__(self, 'nodes', nodes)

    @classmethod
    def uniform(cls, horizon, steps):
        if horizon <= 0:
            raise DomainError(f'horizon T must be positive, got {horizon}')
        if int(steps) != steps or steps < 1:
            raise DomainError(f'step count M must be a positive integer, got {steps}')
        nodes = np.linspace(0.0, float(horizon), int(steps) + 1)
        nodes[0] = 0.0
        nodes[-1] = float(horizon)
        return cls(nodes)

    @property
    def horizon(self):
        return float(self.nodes[-1])

    @property
    def steps(self):
        return self.nodes.size - 1

    @property
    def dt(self):
        return np.diff(self.nodes)

    @property
    def max_step(self):
        return float(np.max(self.dt))

    def tolerance(self):
        return TIME_TOL * max(1.0, self.horizon)

    def check_time(self, t, name='t'):
        if not np.isfinite(t) or t < -self.tolerance() or t > self.horizon + self.tolerance():
            raise DomainError(f'{name}={t!r} lies outside [0, T] = [0, {self.horizon!r}]')
        return min(max(float(t), 0.0), self.horizon)

    def index_of(self, t):
        """Index of the node equal to t (within tolerance), else None."""
        t = self.check_time(t)
        k = int(np.searchsorted(self.nodes, t))
        for j in (k - 1, k):
            if 0 <= j <= self.steps and abs(self.nodes[j] - t) <= self.tolerance():
                return j
        return None

    def first_index_at_or_after(self, t):
        t = self.check_time(t)
        k = self.index_of(t)
        if k is not None:
            return k
        return int(np.searchsorted(self.nodes, t, side='left'))

    def last_index_at_or_before(self, t):
        t = self.check_time(t)
        k = self.index_of(t)
        if k is not None:
            return k
        return int(np.searchsorted(self.nodes, t, side='right')) - 1

    def snap(self, t):
        """Grid node nearest to t."""
        t = self.check_time(t)
        return float(self.nodes[int(np.argmin(np.abs(self.nodes - t)))])

    def __eq__(self, other):
        return isinstance(other, TimeGrid) and np.array_equal(self.nodes, other.nodes)

    def __hash__(self):
        return hash(self.nodes.tobytes())

    def to_dict(self):
        return {'T': self.horizon, 'steps': self.steps}


def history_of(grid, values, t):
    """Observed history (times, values) of one path or a batch of paths up to t.

    `values` has the node axis last; the returned value array is a view when t
    is a grid node.
    """
    t = grid.check_time(t)
    k = grid.index_of(t)
    if k is not None:
        return grid.nodes[:k + 1], values[..., :k + 1]
    k = grid.last_index_at_or_before(t)
    w = (t - grid.nodes[k]) / (grid.nodes[k + 1] - grid.nodes[k])
    at_t = (1.0 - w) * values[..., k] + w * values[..., k + 1]
    times = np.append(grid.nodes[:k + 1], t)
    return times, np.concatenate([values[..., :k + 1], at_t[..., None]], axis=-1)


def stop_values(grid, values, t):
    """Stopped copy of node values (node axis last): frozen from the first node >= t."""
    t = grid.check_time(t)
    out = np.array(values, dtype=np.float64, copy=True)
    k = grid.index_of(t)
    if k is None:
        k = grid.last_index_at_or_before(t)
        w = (t - grid.nodes[k]) / (grid.nodes[k + 1] - grid.nodes[k])
        frozen = (1.0 - w) * out[..., k] + w * out[..., k + 1]
        out[..., k + 1:] = frozen[..., None]
    else:
        out[..., k + 1:] = out[..., k:k + 1]
    return out


@dataclass(frozen=True, eq=False)
class DiscretePath:
    grid: TimeGrid
    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.ndim == 1:
            values = values[None, :]
        if values.ndim != 2 or values.shape[1] != self.grid.steps + 1:
            raise ShapeError(f'path values must have shape (d, {self.grid.steps + 1}), got {values.shape}')
        if not np.all(np.isfinite(values)):
            raise DomainError('path values must be finite')
        values.setflags(write=False)
        object.__setattr__(self, 'values', values)

    @property
    def dimension(self):
        return self.values.shape[0]

    @classmethod
    def constant(cls, grid, value):
        value = np.atleast_1d(np.asarray(value, dtype=np.float64))
        return cls(grid, np.repeat(value[:, None], grid.steps + 1, axis=1))

    @classmethod
    def from_function(cls, grid, fn):
        columns = [np.atleast_1d(np.asarray(fn(t), dtype=np.float64)) for t in grid.nodes]
        return cls(grid, np.stack(columns, axis=1))

    def evaluate(self, s):
        s = self.grid.check_time(s, 's')
        return np.array([np.interp(s, self.grid.nodes, row) for row in self.values])

    def history(self, t):
        return history_of(self.grid, self.values, t)

    def resample(self, grid):
        if grid == self.grid:
            return self
        if abs(grid.horizon - self.grid.horizon) > self.grid.tolerance():
            raise ShapeError(f'cannot resample a path with T={self.grid.horizon} onto T={grid.horizon}')
        values = np.stack([np.interp(grid.nodes, self.grid.nodes, row) for row in self.values])
        return DiscretePath(grid, values)

    def to_rows(self):
        return [[float(t)] + [float(v) for v in self.values[:, k]] for k, t in enumerate(self.grid.nodes)]

    def to_json(self):
        return json.dumps({'t': self.grid.nodes.tolist(), 'x': self.values.T.tolist()})

    @classmethod
    def from_json(cls, text):
        data = json.loads(text) if isinstance(text, str) else text
        return cls(TimeGrid(data['t']), np.asarray(data['x'], dtype=np.float64).T)

    @classmethod
    def from_rows(cls, rows):
        rows = np.asarray(rows, dtype=np.float64)
        return cls(TimeGrid(rows[:, 0]), rows[:, 1:].T)

    def __sub__(self, other):
        if not isinstance(other, DiscretePath):
            return NotImplemented
        _check_same_grid(self, other)
        return DiscretePath(self.grid, self.values - other.values)

    def __add__(self, other):
        if not isinstance(other, DiscretePath):
            return NotImplemented
        _check_same_grid(self, other)
        return DiscretePath(self.grid, self.values + other.values)


def _check_same_grid(x, y):
    if x.grid != y.grid:
        raise ShapeError('paths live on different time grids')
    if x.dimension != y.dimension:
        raise ShapeError(f'path dimensions differ: {x.dimension} vs {y.dimension}')


def stop(x, t):
    """x^t: the path frozen at time t."""
    return DiscretePath(x.grid, stop_values(x.grid, x.values, t))


def sup_norm(x):
    # max of |x(s)| over the nodes; this is the discrete definition used
    # throughout (the piecewise-linear interpolant attains it at a node)
    values = x.values if isinstance(x, DiscretePath) else np.asarray(x)
    return float(np.max(np.sqrt(np.sum(values ** 2, axis=-2)), axis=-1))


def sup_norm_batch(values):
    """Sup norms of a batch of node arrays of shape (n, d, m)."""
    return np.max(np.sqrt(np.sum(values ** 2, axis=1)), axis=-1)


def d_infinity(r, x, s, y):
    _check_same_grid(x, y)
    r = x.grid.check_time(r, 'r')
    s = x.grid.check_time(s, 's')
    diff = stop_values(x.grid, x.values, r) - stop_values(y.grid, y.values, s)
    return abs(r - s) + sup_norm(diff)


def vertical_bump(x, t, h):
    """x + h 1_{[t,T]}: every node >= t shifted by h (off-grid t snaps forward)."""
    k = x.grid.first_index_at_or_after(t)
    h = np.broadcast_to(np.asarray(h, dtype=np.float64).reshape(-1), (x.dimension,))
    values = np.array(x.values, copy=True)
    values[:, k:] += h[:, None]
    return DiscretePath(x.grid, values)
