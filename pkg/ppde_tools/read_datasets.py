import csv
import json
import logging
import os

import numpy as np

from .exceptions import ConfigurationError, ShapeError
from .paths import DiscretePath

logger = logging.getLogger(__name__)


def read_config(path):
    if not os.path.exists(path):
        raise ConfigurationError(f'config file not found: {path}', [path])
    with open(path, 'r', encoding='utf-8') as f:
        try:
            config = json.load(f)
        except json.JSONDecodeError as err:
            raise ConfigurationError(f'{path} is not valid JSON: {err}', [path]) from err
    logger.debug('read config %s', path)
    return config


def read_path(path):
    """A path from CSV rows `t,x_1..x_d` (header optional) or JSON {"t": [...], "x": [[...], ...]}."""
    if not os.path.exists(path):
        raise ConfigurationError(f'path file not found: {path}', [path])
    if path.endswith('.json'):
        with open(path, 'r', encoding='utf-8') as f:
            return DiscretePath.from_json(json.load(f))
    rows = []
    with open(path, 'r', encoding='utf-8', newline='') as f:
        for line in csv.reader(f):
            if not line:
                continue
            try:
                rows.append([float(v) for v in line])
            except ValueError:
                if rows:
                    raise ShapeError(f'{path}: non-numeric row {line!r}')
                # header
                continue
    if not rows:
        raise ShapeError(f'{path}: no path rows')
    widths = {len(row) for row in rows}
    if len(widths) != 1 or widths.pop() < 2:
        raise ShapeError(f'{path}: every row needs t and the same number of coordinates')
    return DiscretePath.from_rows(np.asarray(rows))


def write_path(x, path):
    if path.endswith('.json'):
        with open(path, 'w', encoding='utf-8') as f:
            f.write(x.to_json())
        return path
    from .utils import save_csv
    header = ['t'] + [f'x_{i + 1}' for i in range(x.dimension)]
    return save_csv(path, header, x.to_rows())
