import numpy as np

from .exceptions import ConfigurationError
from .functionals import FunctionalHandle, coordinate, compile_expression, constant, running_integral


def default_features(dimension):
    """{1, x_i(t), x_i(t) x_j(t) (i <= j), int_0^t x_i ds}."""
    features = [constant(1.0, label='1')]
    features += [coordinate(i) for i in range(dimension)]
    for i in range(dimension):
        for j in range(i, dimension):
            features.append(FunctionalHandle(lambda t, times, v, i=i, j=j: v[:, i, -1] * v[:, j, -1],
                                             label=f'x{i + 1}(t) x{j + 1}(t)'))
    features += [running_integral(i) for i in range(dimension)]
    return features


def expression_features(expressions, dimension, horizon=None, include_default=True):
    features = default_features(dimension) if include_default else []
    for text in expressions:
        features.append(compile_expression(text, dimension, horizon))
    if not features:
        raise ConfigurationError('regression needs at least one feature')
    return features


def feature_matrix(features, t, times, hist):
    n = hist.shape[0]
    columns = [np.broadcast_to(np.asarray(phi.batch(t, times, hist), dtype=np.float64), (n,))
               for phi in features]
    return np.stack(columns, axis=1)


def fit_projection(design, targets):
    coef, _, _, _ = np.linalg.lstsq(design, targets, rcond=None)
    return coef
