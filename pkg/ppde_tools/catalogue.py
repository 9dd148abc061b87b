"""Functionals with closed-form horizontal and vertical derivatives."""
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .functionals import FunctionalHandle, left_integral


@dataclass(frozen=True)
class CatalogueEntry:
    name: str
    dimension: int
    functional: FunctionalHandle
    dt: Callable
    grad: Callable
    hess: Callable


def _xt(x, t):
    return x.evaluate(t)


def build_catalogue(horizon=1.0, riccati_c=1.0):
    T = float(horizon)
    c = float(riccati_c)

    coordinate = CatalogueEntry(
        'coordinate', 1,
        FunctionalHandle(lambda t, times, v: v[:, 0, -1], label='x(t)'),
        dt=lambda t, x: 0.0,
        grad=lambda t, x: np.array([1.0]),
        hess=lambda t, x: np.zeros((1, 1)))

    integral = CatalogueEntry(
        'running_integral', 1,
        FunctionalHandle(lambda t, times, v: left_integral(times, v[:, 0, :]), label='int_0^t x ds'),
        dt=lambda t, x: float(_xt(x, t)[0]),
        grad=lambda t, x: np.array([0.0]),
        hess=lambda t, x: np.zeros((1, 1)))

    heat = CatalogueEntry(
        'heat', 1,
        heat_functional(T),
        dt=lambda t, x: -1.0,
        grad=lambda t, x: 2.0 * _xt(x, t),
        hess=lambda t, x: 2.0 * np.eye(1))

    product = CatalogueEntry(
        'product', 2,
        FunctionalHandle(lambda t, times, v: v[:, 0, -1] * v[:, 1, -1], label='x1(t) x2(t)'),
        dt=lambda t, x: 0.0,
        grad=lambda t, x: _xt(x, t)[::-1].copy(),
        hess=lambda t, x: np.array([[0.0, 1.0], [1.0, 0.0]]))

    riccati = CatalogueEntry(
        'riccati', 1,
        riccati_functional(T, c),
        dt=lambda t, x: (c / (1.0 + c * (T - t))) ** 2,
        grad=lambda t, x: np.array([0.0]),
        hess=lambda t, x: np.zeros((1, 1)))

    return [coordinate, integral, heat, product, riccati]


def heat_functional(horizon):
    """|x(t)|^2 + (T - t): solves the heat PPDE for one-dimensional Brownian motion."""
    T = float(horizon)
    return FunctionalHandle(lambda t, times, v: np.sum(v[:, :, -1] ** 2, axis=1) + (T - t),
                            label='|x(t)|^2 + (T - t)')


def riccati_functional(horizon, c=1.0):
    """c / (1 + c (T - t)): solves u' = u^2 backwards from u(T) = c."""
    T = float(horizon)
    return FunctionalHandle(lambda t, times, v: c / (1.0 + c * (T - t)),
                            label=f'{c} / (1 + {c} (T - t))', path_independent=True)
