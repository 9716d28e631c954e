"""
alpha-SMC command line
Runs experiments, mixing-constant sweeps and exact oracles
"""
import argparse
import logging
import math
import sys
from typing import List, Optional

import numpy as np

from batch_processor import run_experiment
from experiment_config import ConfigError, load_config
from graph_engine import (
    DEFAULT_MIXING_METHOD, MIXING_METHODS, ConnectivityKind, ConnectivitySpec, GraphError,
    alon_friedman_limit, build_matrix, circulant_mixing_constant, mixing_constant,
)
from model_manager import ModelError, ModelManager
from oracle_engine import OracleEngine, OracleError
from rng_streams import StreamFactory, StreamPurpose
from smc_engine import TEST_FUNCTIONS

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2


class UsageError(Exception):
    """Bad command line"""


class ArgumentParser(argparse.ArgumentParser):
    """argparse parser whose errors become UsageError instead of exiting with 2"""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _fmt(value: float) -> str:
    return f"{value:.12g}"


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(prog='alpha-smc', description='alpha-SMC experiments and oracles')
    parser.add_argument('--log-level', default='WARNING',
                        choices=['DEBUG', 'INFO', 'WARNING', 'ERROR'])
    commands = parser.add_subparsers(dest='command', required=True, parser_class=ArgumentParser)

    run = commands.add_parser('run', help='Run an experiment config')
    run.add_argument('--config', required=True)
    run.add_argument('--threads', type=int, default=None)
    run.add_argument('--out-dir', default=None)

    mixing = commands.add_parser('mixing', help='Mixing constants of generated graphs')
    mixing.add_argument('--n', type=int, required=True)
    mixing.add_argument('--c', type=int, required=True)
    mixing.add_argument('--graphs', type=int, default=1)
    mixing.add_argument('--seed', type=int, default=0)
    mixing.add_argument('--kind', default=ConnectivityKind.FIXED_REGULAR.value,
                        choices=[k.value for k in ConnectivityKind if k is not ConnectivityKind.CUSTOM])
    mixing.add_argument('--method', default=DEFAULT_MIXING_METHOD, choices=list(MIXING_METHODS))

    oracle = commands.add_parser('oracle', help='Exact filter, mu flow and CLT variances')
    oracle.add_argument('--model', required=True)
    oracle.add_argument('--T', type=int, required=True)
    oracle.add_argument('--C', type=float, default=math.inf, help="connectivity; 'inf' for the bootstrap")
    oracle.add_argument('--phi', default='one', choices=list(TEST_FUNCTIONS))
    oracle.add_argument('--json', default=None, help='also export the records to this file')

    validate = commands.add_parser('validate', help='Check a config without running it')
    validate.add_argument('--config', required=True)
    return parser


def cmd_run(args) -> int:
    config = load_config(args.config)
    if args.threads is not None and args.threads < 1:
        raise ConfigError(f"--threads must be >= 1, got {args.threads}")
    result = run_experiment(config, out_dir=args.out_dir, threads=args.threads)
    for name, path in result['outputs'].items():
        print(f"{name}={path}")
    print(f"config_hash={result['config_hash']}")
    return EXIT_OK


def cmd_mixing(args) -> int:
    spec = ConnectivitySpec(ConnectivityKind(args.kind), C=args.c)
    try:
        spec.validate(args.n)
    except GraphError as e:
        raise ConfigError(str(e))
    if args.graphs < 1:
        raise ConfigError(f"--graphs must be >= 1, got {args.graphs}")

    values = []
    for graph in range(args.graphs):
        rng = StreamFactory(args.seed, graph).stream(0, StreamPurpose.GRAPH)
        matrix = build_matrix(spec, args.n, rng)
        value = mixing_constant(matrix, seed=graph, method=args.method)
        values.append(value)
        print(f"graph={graph} lambda={_fmt(value)}")
    print(f"median_lambda={_fmt(float(np.median(values)))}")
    if spec.kind in (ConnectivityKind.FIXED_REGULAR, ConnectivityKind.PER_STEP_REGULAR):
        print(f"alon_friedman={_fmt(alon_friedman_limit(args.c))}")
    if spec.kind is ConnectivityKind.LOCAL_EXCHANGE:
        print(f"circulant_exact={_fmt(circulant_mixing_constant(args.n, args.c))}")
    return EXIT_OK


def cmd_oracle(args) -> int:
    try:
        model = ModelManager.make_builtin(args.model, {'T': args.T})
        engine = OracleEngine(model, [args.phi], C=args.C)
        engine.run(args.T)
    except (ModelError, OracleError) as e:
        raise ConfigError(str(e))
    state = engine.states[-1]
    phi = TEST_FUNCTIONS[args.phi]
    t, label = state.t, phi.label
    print(f"Z={_fmt(state.Z)}")
    print(f"pi_{t}({label})={_fmt(engine.integrate(state.pi, phi))}")
    print(f"mu_{t}({label})={_fmt(engine.integrate(state.mu, phi))}")
    print(f"V_gamma_{t}({label})={_fmt(state.V_gamma[phi.name])}")
    print(f"V_pi_{t}({label})={_fmt(state.V_pi[phi.name])}")
    if args.json:
        engine.export_records(args.json)
    return EXIT_OK


def cmd_validate(args) -> int:
    config = load_config(args.config)
    print(f"valid experiment={config.experiment.value} config_hash={config.config_hash()}")
    return EXIT_OK


COMMANDS = {
    'run': cmd_run,
    'mixing': cmd_mixing,
    'oracle': cmd_oracle,
    'validate': cmd_validate,
}


def main(argv: Optional[List[str]] = None) -> int:
    """
    Entry point

    Returns:
        0 on success, 1 on usage or config errors, 2 on runtime errors
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return EXIT_CONFIG

    logging.basicConfig(level=getattr(logging, args.log_level),
                        format='%(asctime)s %(levelname)s %(name)s: %(message)s',
                        stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:
        logger.exception("Command '%s' failed", args.command)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == '__main__':
    sys.exit(main())
