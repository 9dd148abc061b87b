"""Non-anticipative functionals and the expression language used by configs.

An evaluator has the signature ``evaluator(t, times, values)`` where
``times`` are the history nodes (the last one equals t) and ``values`` has
shape (n, d, len(times)). It returns one result per path: shape (n,),
(n, d) or (n, d, d) according to ``output_shape``.
"""
import ast
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Tuple

import numpy as np

from .exceptions import ExpressionError
from .paths import history_of

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class FunctionalHandle:
    """u(t, x) evaluated on histories.

    Evaluators must be safe to call from several threads at once (stateless
    or internally synchronized).
    """
    evaluator: Callable
    label: str = 'u'
    output_shape: Tuple[int, ...] = ()
    path_independent: bool = False
    metadata: dict = field(default_factory=dict, compare=False)

    def batch(self, t, times, values):
        values = np.asarray(values, dtype=np.float64)
        out = np.asarray(self.evaluator(float(t), times, values), dtype=np.float64)
        return np.broadcast_to(out, (values.shape[0],) + tuple(self.output_shape))

    def on_grid(self, grid, values, t):
        """Evaluate on a batch of full node arrays (n, d, M+1) at time t."""
        times, hist = history_of(grid, values, t)
        return self.batch(t, times, hist)

    def __call__(self, t, x):
        times, hist = x.history(t)
        out = self.batch(t, times, hist[None, ...])[0]
        return float(out) if out.ndim == 0 else np.array(out)

    def __neg__(self):
        return FunctionalHandle(lambda t, times, values: -self.batch(t, times, values),
                                label=f'-({self.label})', output_shape=self.output_shape,
                                path_independent=self.path_independent)

    def __add__(self, other):
        return _combine(self, other, np.add, '+')

    def __sub__(self, other):
        return _combine(self, other, np.subtract, '-')

    def __mul__(self, other):
        return _combine(self, other, np.multiply, '*')

    __radd__ = __add__
    __rmul__ = __mul__


def _combine(left, right, op, symbol):
    if not isinstance(right, FunctionalHandle):
        right = constant(float(right))
    return FunctionalHandle(lambda t, times, values: op(left.batch(t, times, values),
                                                        right.batch(t, times, values)),
                            label=f'({left.label}) {symbol} ({right.label})',
                            output_shape=left.output_shape,
                            path_independent=left.path_independent and right.path_independent)


def constant(c, output_shape=(), label=None):
    c = np.asarray(c, dtype=np.float64)
    output_shape = tuple(output_shape) if output_shape else c.shape
    return FunctionalHandle(lambda t, times, values: c, label=label or repr(c.tolist()),
                            output_shape=output_shape, path_independent=True)


def time_function(fn, label='h(t)', output_shape=()):
    return FunctionalHandle(lambda t, times, values: fn(t), label=label,
                            output_shape=output_shape, path_independent=True)


def coordinate(i=0):
    return FunctionalHandle(lambda t, times, values: values[:, i, -1], label=f'x{i + 1}(t)')


def running_integral(i=0):
    # left-endpoint rule on the history: the path is read as the cadlag step
    # function of its nodes, so a bump at t leaves the integral over [0, t] alone
    return FunctionalHandle(lambda t, times, values: left_integral(times, values[:, i, :]),
                            label=f'int_0^t x{i + 1}')


def left_integral(times, values):
    """Left-endpoint integral over the history of a (n, m) array."""
    if len(times) < 2:
        return np.zeros(values.shape[:-1])
    return np.sum(values[..., :-1] * np.diff(times), axis=-1)


def from_markovian(fn, label='phi(t, x(t))', output_shape=()):
    """Lift fn(t, x_t) with x_t of shape (n, d) to a path functional."""
    return FunctionalHandle(lambda t, times, values: fn(t, values[:, :, -1]), label=label,
                            output_shape=output_shape)


_FUNCTIONS = {
    'exp': np.exp,
    'log': np.log,
    'sqrt': np.sqrt,
    'abs': np.abs,
    'sin': np.sin,
    'cos': np.cos,
    'tanh': np.tanh,
}
_REDUCERS = {'min': np.minimum, 'max': np.maximum}
_CONSTANTS = {'pi': math.pi, 'e': math.e}
_BINOPS = {
    ast.Add: np.add,
    ast.Sub: np.subtract,
    ast.Mult: np.multiply,
    ast.Div: np.divide,
    ast.Pow: np.power,
    ast.BitXor: np.power,
}


class _Compiler:
    def __init__(self, text, dimension, horizon, allow_z):
        self.text = text
        self.dimension = dimension
        self.horizon = horizon
        self.allow_z = allow_z
        self.uses_path = False
        self.uses_z = False

    def fail(self, reason):
        raise ExpressionError(f'cannot compile expression {self.text!r}: {reason}')

    def compile(self):
        try:
            tree = ast.parse(self.text.strip(), mode='eval')
        except SyntaxError as err:
            self.fail(f'syntax error ({err.msg})')
        return self.visit(tree.body)

    def name(self, ident):
        if ident == 't':
            return lambda env: env['t']
        if ident == 'T':
            if self.horizon is None:
                self.fail('T is not available here')
            horizon = float(self.horizon)
            return lambda env: horizon
        if ident in _CONSTANTS:
            value = _CONSTANTS[ident]
            return lambda env: value
        if ident == 'z':
            if not self.allow_z:
                self.fail('z is only allowed in nonlinearity expressions')
            self.uses_z = True
            return lambda env: env['z']
        for prefix, key in (('x', 'x'), ('I', 'I')):
            if ident.startswith(prefix):
                suffix = ident[len(prefix):]
                if suffix == '' and self.dimension == 1:
                    i = 0
                elif suffix.isdigit() and 1 <= int(suffix) <= self.dimension:
                    i = int(suffix) - 1
                else:
                    continue
                self.uses_path = True
                return lambda env, i=i, key=key: env[key](i)
        self.fail(f'unknown name {ident!r}')

    def visit(self, node):
        if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)) \
                and not isinstance(node.value, bool):
            value = float(node.value)
            return lambda env: value
        if isinstance(node, ast.Name):
            return self.name(node.id)
        if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
            operand = self.visit(node.operand)
            if isinstance(node.op, ast.USub):
                return lambda env: -operand(env)
            return operand
        if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
            op = _BINOPS[type(node.op)]
            left, right = self.visit(node.left), self.visit(node.right)
            return lambda env: op(left(env), right(env))
        if isinstance(node, ast.Call) and isinstance(node.func, ast.Name) and not node.keywords:
            args = [self.visit(a) for a in node.args]
            fname = node.func.id
            if fname in _FUNCTIONS:
                if len(args) != 1:
                    self.fail(f'{fname} takes exactly one argument')
                fn, arg = _FUNCTIONS[fname], args[0]
                return lambda env: fn(arg(env))
            if fname in _REDUCERS:
                if len(args) < 2:
                    self.fail(f'{fname} needs at least two arguments')
                reducer = _REDUCERS[fname]

                def reduce_args(env):
                    out = args[0](env)
                    for arg in args[1:]:
                        out = reducer(out, arg(env))
                    return out
                return reduce_args
            self.fail(f'unknown function {fname!r}')
        self.fail(f'unsupported syntax {type(node).__name__}')


class _PathEnv:
    """Lazy variables of an expression over a batch of histories."""

    def __init__(self, t, times, values, z=None):
        self.t = t
        self.times = times
        self.values = values
        self.z = z
        self._integrals = {}

    def __getitem__(self, key):
        if key == 't':
            return self.t
        if key == 'z':
            return self.z
        if key == 'x':
            return lambda i: self.values[:, i, -1]
        if key == 'I':
            return self._integral
        raise KeyError(key)

    def _integral(self, i):
        if i not in self._integrals:
            self._integrals[i] = left_integral(self.times, self.values[:, i, :])
        return self._integrals[i]


def _compile(text, dimension, horizon, allow_z=False):
    if isinstance(text, (int, float)) and not isinstance(text, bool):
        text = repr(float(text))
    if not isinstance(text, str):
        raise ExpressionError(f'expected an expression string or number, got {text!r}')
    compiler = _Compiler(text, dimension, horizon, allow_z)
    return compiler.compile(), compiler


def compile_expression(text, dimension=1, horizon=None, label=None):
    """Scalar functional from an expression over t, T, x1..xd and I1..Id."""
    fn, compiler = _compile(text, dimension, horizon)
    return FunctionalHandle(lambda t, times, values: fn(_PathEnv(t, times, values)),
                            label=label or str(text), path_independent=not compiler.uses_path,
                            metadata={'expression': text})


def compile_coefficient(spec, dimension, horizon=None, shape='scalar', label=None):
    """Scalar, d-vector or d x d matrix functional from nested expression lists.

    A single expression for a vector or matrix broadcasts to every entry of a
    vector, or to the diagonal of a matrix.
    """
    d = dimension
    if shape == 'scalar':
        return compile_expression(spec, d, horizon, label)
    if shape == 'vector':
        entries = spec if isinstance(spec, list) else [spec] * d
        if len(entries) != d:
            raise ExpressionError(f'{label or "vector"} needs {d} entries, got {len(entries)}')
        parts = [compile_expression(e, d, horizon) for e in entries]

        def vector(t, times, values):
            n = values.shape[0]
            return np.stack([np.broadcast_to(p.batch(t, times, values), (n,)) for p in parts], axis=1)
        return FunctionalHandle(vector, label=label or str(spec), output_shape=(d,),
                                path_independent=all(p.path_independent for p in parts),
                                metadata={'expression': spec})
    if shape == 'matrix':
        if isinstance(spec, list):
            rows = spec if d > 1 or isinstance(spec[0], list) else [spec]
            if len(rows) != d or any(not isinstance(r, list) or len(r) != d for r in rows):
                raise ExpressionError(f'{label or "matrix"} needs a {d}x{d} nested list')
            parts = [[compile_expression(e, d, horizon) for e in row] for row in rows]
        else:
            diag = compile_expression(spec, d, horizon)
            zero = compile_expression(0.0, d, horizon)
            parts = [[diag if i == j else zero for j in range(d)] for i in range(d)]

        def matrix(t, times, values):
            n = values.shape[0]
            out = np.empty((n, d, d))
            for i in range(d):
                for j in range(d):
                    out[:, i, j] = parts[i][j].batch(t, times, values)
            return out
        return FunctionalHandle(matrix, label=label or str(spec), output_shape=(d, d),
                                path_independent=all(p.path_independent for row in parts for p in row),
                                metadata={'expression': spec})
    raise ExpressionError(f'unknown coefficient shape {shape!r}')


def compile_reaction(text, dimension=1, horizon=None):
    """f(t, x, z) evaluator from an expression that may also use z.

    Returns (evaluator, path_independent) where
    evaluator(t, times, values, z) -> (n,).
    """
    fn, compiler = _compile(text, dimension, horizon, allow_z=True)

    def evaluator(t, times, values, z):
        return fn(_PathEnv(t, times, values, z))
    return evaluator, not compiler.uses_path
