import argparse
import ast
import json
import logging
import os
import sys
import time

from evaluation import PIPELINES
from ppde_tools.config import apply_overrides, resolve_config
from ppde_tools.diffusion import save_ensemble_csv
from ppde_tools.exceptions import ConfigurationError, PPDEError, ShapeError
from ppde_tools.read_datasets import read_config
from ppde_tools.utils import save_csv, save_results

logger = logging.getLogger('run_experiment')

SCHEMA_VERSION = 1
EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 2, 3


def _flag_overrides(args):
    overrides = list(args.override or [])
    if args.workers is not None:
        overrides.append(f'run.workers={args.workers}')
    if args.output is not None:
        overrides.append(f'run.output_path={args.output!r}')
    if args.unsafe_u:
        overrides.append('control.unsafe_u=True')
    return overrides


def _exit_code(err, resolving=False):
    """Anything raised while reading the config is invalid input; inside a pipeline only config and
    shape errors are, every other failure is numerical."""
    if resolving or isinstance(err, (ConfigurationError, ShapeError)):
        return EXIT_INVALID
    return EXIT_NUMERICAL


def _write_artifacts(result, subcommand, output_path, fmt):
    artifacts = result.pop('artifacts')
    written = []
    if 'derivs_csv' in artifacts:
        header, rows = artifacts['derivs_csv']
        written.append(save_csv(os.path.join(output_path, 'check_derivs.csv'), header, rows))
    if 'ensemble' in artifacts and fmt == 'json+csv':
        written.append(save_ensemble_csv(artifacts['ensemble'], os.path.join(output_path, f'{subcommand}_paths.csv')))
    return written


def run(subcommand, config_path, overrides=(), show_progress=False, echo=True):
    """Execute one pipeline; returns (exit code, result dict or None)."""
    start = time.perf_counter()
    try:
        config = resolve_config(apply_overrides(read_config(config_path), overrides))
    except PPDEError as err:
        logger.error('%s', err)
        return _exit_code(err, resolving=True), None
    if echo:
        print(json.dumps(config, indent=2))
    try:
        result = PIPELINES[subcommand](config, show_progress=show_progress)
    except PPDEError as err:
        logger.error('%s failed: %s: %s', subcommand, type(err).__name__, err)
        return _exit_code(err), None
    output_path = config['run']['output_path']
    result['artifacts_written'] = _write_artifacts(result, subcommand, output_path, config['run']['format'])
    result.update({
        'schema_version': SCHEMA_VERSION,
        'subcommand': subcommand,
        'resolved_config': config,
        'seed': config['run']['seed'],
        'runtime_ms': 1000.0 * (time.perf_counter() - start),
    })
    save_results(output_path, f"{subcommand.replace('-', '_')}.json", result)
    logger.info('%s: value=%s std_error=%s n_samples=%s', subcommand, result['value'], result['std_error'],
                result['n_samples'])
    return EXIT_OK, result


def main(args):
    logging.basicConfig(level=getattr(logging, args.log_level.upper(), logging.INFO),
                        format='%(asctime)s %(levelname)s %(name)s: %(message)s')
    code, _ = run(args.subcommand, args.config, _flag_overrides(args), show_progress=not args.quiet,
                  echo=not args.quiet)
    return code


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description='Mild and viscosity solutions of path-dependent PDEs')
    parser.add_argument(
        "subcommand",
        type=str,
        choices=sorted(PIPELINES)
    )
    parser.add_argument(
        "--config",
        type=str,
        required=True
    )
    parser.add_argument(
        "--override",
        type=str,
        action='append',
        default=[]
    )
    parser.add_argument(
        "--workers",
        type=int,
        default=None
    )
    parser.add_argument(
        "--output",
        type=str,
        default=None
    )
    parser.add_argument(
        "--quiet",
        type=ast.literal_eval,
        default=False
    )
    parser.add_argument(
        "--unsafe_u",
        type=ast.literal_eval,
        default=False
    )
    parser.add_argument(
        "--log_level",
        type=str,
        default='INFO'
    )
    args = parser.parse_args()
    sys.exit(main(args))
