import csv
import json
import logging
import os
import threading
from concurrent.futures import ThreadPoolExecutor

import numpy as np

logger = logging.getLogger(__name__)

_worker_state = threading.local()


def rng_stream(seed, *lineage):
    """Counter-based generator keyed by (seed, lineage).

    The same key always yields the same stream, so the draws of a block of
    paths never depend on which thread simulates it or in which order.
    """
    if seed is None:
        raise ValueError('a seed is required; implicit random seeding is not supported')
    seq = np.random.SeedSequence(entropy=int(seed) & 0xFFFFFFFFFFFFFFFF,
                                 spawn_key=tuple(int(k) for k in lineage))
    return np.random.Generator(np.random.Philox(seq))


def map_blocks(fn, items, workers=1):
    """Apply fn to every item and return the results in input order.

    Nested calls made from inside a worker run serially, so pools never
    multiply.
    """
    items = list(items)
    if workers is None or workers <= 1 or len(items) <= 1 or getattr(_worker_state, 'active', False):
        return [fn(item) for item in items]

    def run(item):
        _worker_state.active = True
        try:
            return fn(item)
        finally:
            _worker_state.active = False

    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run, items))


def pairwise_mean(samples):
    # np.add.reduce on a contiguous float64 array uses pairwise summation in a
    # fixed order
    samples = np.ascontiguousarray(samples, dtype=np.float64)
    return float(np.add.reduce(samples, axis=0) / samples.shape[0])


def save_results(path, name, results):
    os.makedirs(path, exist_ok=True)
    path = os.path.join(path, name)
    if path.endswith('txt'):
        with open(path, 'w', encoding='utf-8') as f:
            for line in results:
                f.write(str(line).strip() + '\n')
    else:
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(results, f, ensure_ascii=False, indent=2, default=_to_builtin)
    logger.info('wrote %s', path)
    return path


def save_csv(path, header, rows):
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, 'w', encoding='utf-8', newline='') as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    logger.info('wrote %s', path)
    return path


def _to_builtin(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    if hasattr(obj, 'to_dict'):
        return obj.to_dict()
    raise TypeError(f'Object of type {type(obj).__name__} is not JSON serializable')
