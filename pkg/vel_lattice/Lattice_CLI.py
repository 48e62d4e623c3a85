'''
The command-line front end: validate, run and matrix over scenario files,
plus topology for looking at an overlay.

Every command is a cmd_* function returning an exit code, so the library and
the command line always do the same thing.
Exit codes: 0 success, 1 I/O failure, 2 invalid scenario, 3 no convergence,
4 invariance violation.

@author: Alfredo Velasco
'''

import argparse
import itertools
import logging
import os
import sys

import pandas as pd
from tqdm import tqdm

from . import CRDT, __version__
from .Scenario import Invalid_Scenario, canonical_json, load, read_document, with_overrides, parse
from .Simulator import Simulator
from .Store import Io_Failure
from .Topology import Static_Membership, to_dot

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_IO = 1
EXIT_INVALID = 2
EXIT_NOT_CONVERGED = 3
EXIT_INVARIANCE = 4

LOG_FORMAT = "%(asctime)s [%(levelname)-8s] [%(name)s] %(message)s"
LOG_LEVELS = {
    'error': logging.ERROR,
    'warning': logging.WARNING,
    'info': logging.INFO,
    'debug': logging.DEBUG,
}

MATRIX_POLICIES = {
    'immediate': {'kind': 'immediate'},
    'every_n:3': {'kind': 'every_n', 'n': 3},
    'interval:5': {'kind': 'interval', 'ticks': 5},
}
MATRIX_TOPOLOGIES = ('client_server', 'full_mesh', 'peer_to_peer')


def configure_logging(level=None):
    '''
    Sends diagnostics to standard error at the level LATTICE_LOG names
    (error by default)
    '''
    name = (level or os.environ.get('LATTICE_LOG') or 'error').lower()
    logging.basicConfig(stream=sys.stderr, level=LOG_LEVELS.get(name, logging.ERROR), format=LOG_FORMAT, force=True)
    if name not in LOG_LEVELS:
        logger.warning("LATTICE_LOG=%s is not one of %s, using error", name, ", ".join(LOG_LEVELS))


def metrics_document(scenario, metrics):
    return {
        'tool': 'vel_lattice',
        'tool_version': __version__,
        'scenario': scenario.name,
        'scenario_hash': scenario.hash(),
        'seed': scenario.seed,
        'metrics': metrics.to_dict(),
    }


def render_metrics(scenario, metrics):
    '''
    Returns the bytes of a metrics file: canonical JSON and a newline
    '''
    return canonical_json(metrics_document(scenario, metrics)) + b'\n'


def summary_line(metrics):
    tick = '-' if metrics.convergence_tick is None else metrics.convergence_tick
    return (f"converged={'true' if metrics.converged else 'false'} tick={tick} "
            f"sent={metrics.envelopes_sent} dropped={metrics.envelopes_dropped}")


def _write(path, data):
    try:
        directory = os.path.dirname(os.path.abspath(path))
        os.makedirs(directory, exist_ok=True)
        with open(path, 'wb') as fh:
            fh.write(data)
    except OSError as e:
        raise Io_Failure(f"Cannot write {path}: {e}")


def _report(e, stream):
    for violation in e.violations:
        print(violation, file=stream)


def cmd_validate(path, stdout=None):
    '''
    Validates a scenario file and prints OK or one line per violation

    :returns int: 0 if valid, 2 if not, 1 if the file cannot be read
    '''
    stdout = stdout or sys.stdout
    try:
        load(path)
    except Invalid_Scenario as e:
        _report(e, stdout)
        return EXIT_INVALID
    except OSError as e:
        logger.error("Cannot read %s: %s", path, e)
        return EXIT_IO
    print("OK", file=stdout)
    return EXIT_OK


def cmd_run(path, seed=None, out=None, event_log=None, policy=None, topology=None, merge=CRDT.merge, stdout=None):
    '''
    Runs a scenario, writes its metrics file and prints the summary line

    :param path: the scenario file
    :param int seed: replaces the scenario seed
    :param out: where the metrics file goes (not written if None)
    :param event_log: where the tab-separated event log goes (not written if None)
    :param str policy: immediate, every_n:N or interval:T
    :param str topology: full_mesh, client_server:S or peer_to_peer:F
    :param merge: the join the run uses
    :returns int: 0 if converged, 3 if not, 2 if invalid, 1 on I/O failure
    '''
    stdout = stdout or sys.stdout
    try:
        scenario = load(path, seed=seed, policy=policy, topology=topology)
        sim = Simulator(scenario, merge=merge, event_log=event_log is not None)
        metrics = sim.run()
        if out is not None:
            _write(out, render_metrics(scenario, metrics))
        if event_log is not None:
            _write(event_log, "".join(line + "\n" for line in sim.log).encode('utf-8'))
    except Invalid_Scenario as e:
        _report(e, sys.stderr)
        return EXIT_INVALID
    except (OSError, Io_Failure) as e:
        logger.error("%s", e)
        return EXIT_IO

    print(summary_line(metrics), file=stdout)
    return EXIT_OK if metrics.converged else EXIT_NOT_CONVERGED


def _matrix_topology(name, document):
    nodes = document.get('nodes', 1)
    if name == 'client_server':
        return {'kind': name, 'server': 0}
    if name == 'peer_to_peer':
        return {'kind': name, 'fanout': max(1, min(2, nodes - 1)), 'seed': document.get('seed', 0)}
    return {'kind': name}


def _fingerprint(scenario, metrics):
    '''
    What must agree across the matrix: the state digests of the trace
    variables and the value digests of the dataflow sinks
    '''
    sinks = {spec.sink for spec in scenario.dataflow}
    states = metrics.digests[min(metrics.digests, key=int)]
    return tuple(
        (key, metrics.value_digests[key] if key in sinks else states[key]) for key in sorted(metrics.value_digests)
    )


def run_matrix(path, merge_override=None):
    '''
    Runs a scenario under every sync policy and topology of the matrix

    :param path: the scenario file
    :param dict merge_override: (policy, topology) -> merge used for that cell only
    :returns (dict, pandas.DataFrame): (policy, topology) -> (scenario, metrics), and the table of convergence ticks
    '''
    merge_override = merge_override or {}
    document = read_document(path)
    cells = list(itertools.product(MATRIX_POLICIES, MATRIX_TOPOLOGIES))
    results = {}
    for policy, topology in tqdm(cells, desc="matrix", disable=None):
        doc = with_overrides(document, policy=MATRIX_POLICIES[policy], topology=_matrix_topology(topology, document))
        scenario = parse(doc, name=os.path.splitext(os.path.basename(os.fspath(path)))[0])
        merge = merge_override.get((policy, topology), CRDT.merge)
        metrics = Simulator(scenario, merge=merge).run()
        logger.info("Matrix cell %s / %s: converged=%s tick=%s", policy, topology, metrics.converged, metrics.convergence_tick)
        results[(policy, topology)] = (scenario, metrics)

    table = pd.DataFrame(index=list(MATRIX_POLICIES), columns=list(MATRIX_TOPOLOGIES), dtype=object)
    for (policy, topology), (_, metrics) in results.items():
        table.loc[policy, topology] = metrics.convergence_tick if metrics.converged else '-'
    return results, table


def cmd_matrix(path, out=None, merge_override=None, stdout=None):
    '''
    Checks that neither the sync policy nor the topology changes what a
    scenario converges to, and prints the table of convergence ticks

    :param path: the scenario file
    :param out: a directory for the nine metrics files and matrix.csv
    :param dict merge_override: (policy, topology) -> merge used for that cell only
    :returns int: 0 if all nine runs converge alike, 4 if any two disagree, 3 if one did not converge
    '''
    stdout = stdout or sys.stdout
    try:
        results, table = run_matrix(path, merge_override)
        if out is not None:
            for (policy, topology), (scenario, metrics) in results.items():
                f_name = f"{policy.replace(':', '_')}__{topology}.json"
                _write(os.path.join(out, f_name), render_metrics(scenario, metrics))
            table.to_csv(os.path.join(out, 'matrix.csv'))
    except Invalid_Scenario as e:
        _report(e, sys.stderr)
        return EXIT_INVALID
    except (OSError, Io_Failure) as e:
        logger.error("%s", e)
        return EXIT_IO

    print(table.to_string(), file=stdout)
    converged = {cell: _fingerprint(*result) for cell, result in results.items() if result[1].converged}
    if len(set(converged.values())) > 1:
        for cell, fingerprint in sorted(converged.items()):
            logger.error("%s under %s converged to %s", cell[0], cell[1], fingerprint)
        print("invariance violated: runs converged to different states", file=stdout)
        return EXIT_INVARIANCE
    if len(converged) < len(results):
        print("not every run converged", file=stdout)
        return EXIT_NOT_CONVERGED
    return EXIT_OK


def cmd_topology(path, out=None, stdout=None):
    '''
    Prints the scenario's initial overlay as DOT source, and saves it to out if given
    '''
    stdout = stdout or sys.stdout
    try:
        scenario = load(path)
        views = Static_Membership(scenario.topology, range(scenario.nodes)).views()
        dot = to_dot(views, out)
    except Invalid_Scenario as e:
        _report(e, sys.stderr)
        return EXIT_INVALID
    except OSError as e:
        logger.error("%s", e)
        return EXIT_IO
    print(dot.source, file=stdout)
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog='vel-lattice',
        description="Run replicated lattice scenarios in a deterministic network simulator",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    parser.add_argument('--version', action='version', version=f"%(prog)s {__version__}")
    commands = parser.add_subparsers(dest='command', required=True)

    validate = commands.add_parser('validate', help="check a scenario file")
    validate.add_argument('scenario')

    run = commands.add_parser('run', help="run a scenario and write its metrics")
    run.add_argument('scenario')
    run.add_argument('--seed', type=int, help="replace the scenario seed")
    run.add_argument('--out', help="metrics file to write")
    run.add_argument('--event-log', help="tab-separated event log to write")
    run.add_argument('--policy', help="immediate, every_n:N or interval:T")
    run.add_argument('--topology', help="full_mesh, client_server:S or peer_to_peer:F")

    matrix = commands.add_parser('matrix', help="run every policy and topology and compare the outcomes")
    matrix.add_argument('scenario')
    matrix.add_argument('--out', help="directory for the metrics files and matrix.csv")

    topology = commands.add_parser('topology', help="print the overlay as DOT source")
    topology.add_argument('scenario')
    topology.add_argument('--out', help="file to save the DOT source to")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    configure_logging()
    if args.command == 'validate':
        return cmd_validate(args.scenario)
    if args.command == 'run':
        return cmd_run(args.scenario, seed=args.seed, out=args.out, event_log=args.event_log,
                       policy=args.policy, topology=args.topology)
    if args.command == 'matrix':
        return cmd_matrix(args.scenario, out=args.out)
    return cmd_topology(args.scenario, out=args.out)


if __name__ == '__main__':
    sys.exit(main())
