'''
Scenario documents: parsing, validation, trace generation and the canonical
bytes the metrics files are tied to.

A scenario is a JSON object. Validation collects every problem it finds and
reports each one as a Violation naming the section and field.

@author: Alfredo Velasco
'''

import json
import logging
import os
from dataclasses import dataclass, field

from . import CRDT, Codec
from .Dataflow import (Cycle_Detected, Dataflow_Error, Dataflow_Graph, Dataflow_Spec, Sink_Conflict,
                       Unknown_Function, Unknown_Source)
from .Replica import DEFAULT_ANTI_ENTROPY_PERIOD, Every_N, Immediate, Interval, Variable
from .Simulator import Fault_Model, Partition
from .SplitMix64 import SplitMix64
from .Store import Invalid_Key, Store_Key
from .Topology import Client_Server, Full_Mesh, Peer_To_Peer

logger = logging.getLogger(__name__)

SCENARIO_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), 'scenarios')

MUTATING_OPS = ('add', 'remove', 'increment', 'decrement', 'assign')
MAX_UNIVERSE = 1000

_REQUIRED = object()


@dataclass(frozen=True)
class Violation(object):
    section: str
    field: str
    reason: str

    def __str__(self):
        return f"{self.section}.{self.field}: {self.reason}"


class Invalid_Scenario(Exception):

    def __init__(self, violations):
        self.violations = list(violations)
        super(Invalid_Scenario, self).__init__("; ".join(str(v) for v in self.violations))


@dataclass(frozen=True)
class Trace_Op(object):
    tick: int
    node: int
    key: str
    mutation: CRDT.Mutation


@dataclass(frozen=True)
class Topology_Swap(object):
    tick: int
    topology: object


@dataclass(frozen=True)
class Trace_Generator(object):
    """
    Draws a trace from a seed. Each node only adds and removes elements of its
    own namespace (node * 1000 + k) and each register gets at most one
    assignment per tick, so the converged result does not depend on when
    nodes observe each other.
    """

    seed: int = 0
    ops_count: int = 100
    # Operations land on ticks 1..span
    span: int = 100
    keys: tuple = ()
    # op -> relative weight
    mix: dict = field(default_factory=dict, hash=False)
    universe: int = 10


@dataclass(frozen=True)
class Scenario(object):
    name: str
    nodes: int
    topology: object
    policy: object
    anti_entropy_period: int
    variables: tuple
    dataflow: tuple
    faults: Fault_Model
    trace: tuple
    topology_swaps: tuple
    duration: int
    seed: int
    document: dict = field(default=None, compare=False, hash=False, repr=False)

    def canonical_bytes(self):
        return canonical_json(self.document)

    def hash(self):
        '''
        Returns the FNV-1a 64 of the canonical document as 16 hex digits
        '''
        return Codec.hex_digest(self.canonical_bytes())


def canonical_json(document):
    '''
    Serialises a JSON value with sorted keys and no insignificant whitespace
    '''
    return json.dumps(document, sort_keys=True, separators=(',', ':'), ensure_ascii=False).encode('utf-8')


def generate_trace(gen, nodes, variables):
    '''
    Expands a Trace_Generator into trace operations, sorted by tick (stable)

    :param Trace_Generator gen: the generator
    :param int nodes: the node count
    :param dict variables: key -> Variable
    :returns list(Trace_Op): the operations
    '''
    rng = SplitMix64(gen.seed)
    assigned = set()
    ops = []
    for _ in range(gen.ops_count):
        tick = 1 + rng.below(gen.span)
        node = rng.below(nodes)
        key = gen.keys[rng.below(len(gen.keys))]
        capabilities = variables[key].capabilities
        choices = [(op, gen.mix.get(op, 1)) for op in MUTATING_OPS if op in capabilities and gen.mix.get(op, 1) > 0]
        if not choices:
            continue
        r = rng.below(sum(w for _, w in choices))
        for op, w in choices:
            if r < w:
                break
            r -= w
        k = rng.below(gen.universe)

        if op in ('add', 'remove'):
            mutation = CRDT.Mutation(op, str(node * 1000 + k).encode('ascii'))
        elif op == 'assign':
            free = [t for t in range(tick, gen.span + 1) if (key, t) not in assigned]
            free += [t for t in range(1, tick) if (key, t) not in assigned]
            if not free:
                continue
            tick = free[0]
            assigned.add((key, tick))
            mutation = CRDT.Mutation.assign(f"{node}.{k}")
        else:
            mutation = CRDT.Mutation(op, amount=1 + k % 3)
        ops.append(Trace_Op(tick, node, key, mutation))
    ops.sort(key=lambda op: op.tick)
    return ops


class _Checker(object):

    """Reads fields out of a document, recording a Violation for each bad one"""
    def __init__(self):
        self.violations = []

    def fail(self, section, name, reason):
        self.violations.append(Violation(section, name, reason))
        return None

    def _get(self, section, doc, name, default):
        if name in doc:
            return True, doc[name]
        if default is _REQUIRED:
            return False, self.fail(section, name, "is required")
        return False, default

    def integer(self, section, doc, name, default=_REQUIRED, minimum=0, maximum=Codec.MASK_64):
        found, v = self._get(section, doc, name, default)
        if not found:
            return v
        if isinstance(v, bool) or not isinstance(v, int):
            return self.fail(section, name, f"must be an integer, got {v!r}")
        if v < minimum or v > maximum:
            return self.fail(section, name, f"{v} is not between {minimum} and {maximum}")
        return v

    def probability(self, section, doc, name):
        found, v = self._get(section, doc, name, 0.0)
        if not found:
            return v
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            return self.fail(section, name, f"must be a number, got {v!r}")
        if not 0.0 <= v <= 1.0:
            return self.fail(section, name, f"{v} is not a probability")
        return float(v)

    def string(self, section, doc, name, default=_REQUIRED):
        found, v = self._get(section, doc, name, default)
        if found and not isinstance(v, str):
            return self.fail(section, name, f"must be a string, got {v!r}")
        return v

    def mapping(self, section, doc, name, default=_REQUIRED):
        found, v = self._get(section, doc, name, default)
        if found and not isinstance(v, dict):
            return self.fail(section, name, "must be an object")
        return v

    def listing(self, section, doc, name, default=_REQUIRED):
        found, v = self._get(section, doc, name, default)
        if found and not isinstance(v, list):
            return self.fail(section, name, "must be a list")
        return v

    def strings(self, section, doc, name, default=_REQUIRED):
        v = self.listing(section, doc, name, default)
        if v is not None and not all(isinstance(s, str) for s in v):
            return self.fail(section, name, f"must be a list of strings, got {v!r}")
        return v

    def node(self, section, doc, name, nodes, default=_REQUIRED):
        if nodes is None:
            return None
        return self.integer(section, doc, name, default, 0, nodes - 1)


def _parse_topology(check, section, doc, nodes, seed):
    if not isinstance(doc, dict):
        return check.fail(section, 'kind', "must be an object with a kind")
    kind = check.string(section, doc, 'kind')
    if kind == Full_Mesh.name:
        return Full_Mesh()
    if kind == Client_Server.name:
        server = check.node(section, doc, 'server', nodes, default=0)
        return None if server is None else Client_Server(server)
    if kind == Peer_To_Peer.name:
        fanout = check.integer(section, doc, 'fanout', minimum=1)
        p2p_seed = check.integer(section, doc, 'seed', default=seed)
        if fanout is None or p2p_seed is None or nodes is None:
            return None
        if nodes > 1 and fanout >= nodes:
            return check.fail(section, 'fanout', f"{fanout} must be less than the node count {nodes}")
        return Peer_To_Peer(fanout, p2p_seed)
    if kind is not None:
        check.fail(section, 'kind', f"{kind!r} is not one of {Client_Server.name}, {Full_Mesh.name}, {Peer_To_Peer.name}")
    return None


def _parse_policy(check, doc):
    section = 'sync_policy'
    kind = check.string(section, doc, 'kind')
    if kind == Immediate.name:
        return Immediate()
    if kind == Every_N.name:
        n = check.integer(section, doc, 'n', minimum=1)
        return None if n is None else Every_N(n)
    if kind == Interval.name:
        ticks = check.integer(section, doc, 'ticks', minimum=1)
        return None if ticks is None else Interval(ticks)
    if kind is not None:
        check.fail(section, 'kind', f"{kind!r} is not one of {Immediate.name}, {Every_N.name}, {Interval.name}")
    return None


def _parse_variables(check, docs):
    variables = {}
    for i, doc in enumerate(docs):
        section = f"variables[{i}]"
        if not isinstance(doc, dict):
            check.fail(section, 'key', "must be an object")
            continue
        key = check.string(section, doc, 'key')
        kind = check.string(section, doc, 'kind')
        names = check.strings(section, doc, 'capabilities')
        if key is None or kind is None or names is None:
            continue
        try:
            Store_Key(key)
        except Invalid_Key as e:
            check.fail(section, 'key', str(e))
            continue
        if key in variables:
            check.fail(section, 'key', f"{key!r} is declared twice")
            continue
        try:
            kind = CRDT.Kind(kind)
        except ValueError:
            check.fail(section, 'kind', f"{kind!r} is not one of {[k.value for k in CRDT.Kind]}")
            continue
        try:
            capabilities = CRDT.Capability_Set.of(*names)
            tag = CRDT.select_implementation(capabilities, kind)
        except CRDT.Unsatisfiable_Capabilities as e:
            check.fail(section, 'capabilities', str(e))
            continue
        variables[key] = Variable(key, kind, capabilities, tag)
    return variables


_DATAFLOW_FIELDS = {
    Cycle_Detected: 'sink',
    Sink_Conflict: 'sink',
    Unknown_Source: 'sources',
    Unknown_Function: 'fn',
}


def _parse_dataflow(check, docs, variables, nodes):
    graph = Dataflow_Graph()
    specs = []
    ids = set()
    for i, doc in enumerate(docs):
        section = f"dataflow[{i}]"
        if not isinstance(doc, dict):
            check.fail(section, 'id', "must be an object")
            continue
        spec_id = check.string(section, doc, 'id', default=f"df{i}")
        combinator = check.string(section, doc, 'combinator')
        fn = check.string(section, doc, 'fn', default=None)
        sources = check.strings(section, doc, 'sources')
        sink = check.string(section, doc, 'sink')
        owner = check.node(section, doc, 'owner', nodes, default=0)
        if spec_id is not None:
            if spec_id in ids:
                check.fail(section, 'id', f"{spec_id!r} is used by an earlier dataflow")
                continue
            ids.add(spec_id)
        if None in (spec_id, combinator, sources, sink, owner):
            continue
        try:
            spec = Dataflow_Spec(spec_id, combinator, tuple(sources), sink, fn, owner)
        except ValueError:
            check.fail(section, 'combinator', f"{combinator!r} is not one of map, filter, union, intersection")
            continue
        except Dataflow_Error as e:
            check.fail(section, 'sources' if 'sources' in str(e) else 'fn', str(e))
            continue
        try:
            Store_Key(sink)
            kind, capabilities = graph.sink_declaration(spec, variables)
        except Invalid_Key as e:
            check.fail(section, 'sink', str(e))
            continue
        except Dataflow_Error as e:
            check.fail(section, _DATAFLOW_FIELDS.get(type(e), 'sources'), str(e))
            continue
        variables[sink] = Variable(sink, kind, capabilities, CRDT.select_implementation(capabilities, kind))
        specs.append(spec)
    return specs


def _parse_faults(check, doc, nodes):
    section = 'faults'
    drop = check.probability(section, doc, 'drop_prob')
    dup = check.probability(section, doc, 'dup_prob')
    delay_min = check.integer(section, doc, 'delay_min', default=0)
    delay_max = check.integer(section, doc, 'delay_max', default=delay_min or 0)
    if delay_min is not None and delay_max is not None and delay_min > delay_max:
        check.fail(section, 'delay_max', f"{delay_max} is below delay_min {delay_min}")
        return None
    partitions = []
    for i, p in enumerate(check.listing(section, doc, 'partitions', default=[]) or []):
        psection = f"faults.partitions[{i}]"
        if not isinstance(p, dict):
            check.fail(psection, 'from_tick', "must be an object")
            continue
        start = check.integer(psection, p, 'from_tick')
        end = check.integer(psection, p, 'to_tick')
        sides = [check.listing(psection, p, name) for name in ('side_a', 'side_b')]
        if None in (start, end) or None in sides:
            continue
        if start > end:
            check.fail(psection, 'to_tick', f"{end} is before from_tick {start}")
            continue
        limit = Codec.MASK_64 if nodes is None else nodes
        strays = [n for n in sides[0] + sides[1] if not isinstance(n, int) or isinstance(n, bool) or not 0 <= n < limit]
        if strays:
            check.fail(psection, 'side_a', f"{strays} are not nodes")
            continue
        if set(sides[0]) & set(sides[1]):
            check.fail(psection, 'side_b', f"shares {sorted(set(sides[0]) & set(sides[1]))} with side_a")
            continue
        partitions.append(Partition(start, end, frozenset(sides[0]), frozenset(sides[1])))
    if None in (drop, dup, delay_min, delay_max):
        return None
    return Fault_Model(drop, dup, delay_min, delay_max, tuple(partitions))


def _parse_mutation(check, section, doc, variable):
    op = check.string(section, doc, 'op')
    if op is None:
        return None
    if op not in MUTATING_OPS:
        return check.fail(section, 'op', f"{op!r} is not one of {list(MUTATING_OPS)}")
    if variable is None:
        return None
    if op == 'remove' and variable.type_tag == CRDT.Crdt_Type.G_SET:
        return check.fail(section, 'op', f"{variable.key!r} has no remove capability, so it is a G_Set")
    if op not in variable.capabilities:
        return check.fail(section, 'op', f"{variable.key!r} was not declared with {op}")
    if op in ('add', 'remove'):
        element = check.string(section, doc, 'element')
        return None if element is None else CRDT.Mutation(op, element.encode('utf-8'))
    if op == 'assign':
        value = check.string(section, doc, 'value')
        return None if value is None else CRDT.Mutation.assign(value)
    amount = check.integer(section, doc, 'amount', default=1, minimum=1)
    return None if amount is None else CRDT.Mutation(op, amount=amount)


def _parse_trace(check, doc, nodes, duration, variables, sinks):
    if not isinstance(doc, dict):
        check.fail('trace', 'ops', "must be an object")
        return []
    if ('ops' in doc) == ('generate' in doc):
        check.fail('trace', 'ops', "needs exactly one of ops and generate")
        return []

    if 'generate' in doc:
        section = 'trace.generate'
        gen = check.mapping('trace', doc, 'generate')
        if gen is None:
            return []
        writable = [k for k in sorted(variables) if k not in sinks]
        keys = check.strings(section, gen, 'keys', default=writable)
        seed = check.integer(section, gen, 'seed', default=0)
        ops_count = check.integer(section, gen, 'ops_count', default=100)
        span = check.integer(section, gen, 'span', default=min(duration or 1, max(1, ops_count or 1)), minimum=1,
                             maximum=duration or Codec.MASK_64)
        universe = check.integer(section, gen, 'universe', default=10, minimum=1, maximum=MAX_UNIVERSE)
        mix = check.mapping(section, gen, 'mix', default={})
        if keys is not None:
            if not keys:
                check.fail(section, 'keys', "must name at least one variable")
            for key in keys:
                if key not in variables or key in sinks:
                    check.fail(section, 'keys', f"{key!r} is not a writable variable")
        if mix is not None:
            for op, weight in mix.items():
                if op not in MUTATING_OPS:
                    check.fail(section, 'mix', f"{op!r} is not one of {list(MUTATING_OPS)}")
                elif isinstance(weight, bool) or not isinstance(weight, int) or weight < 0:
                    check.fail(section, 'mix', f"weight of {op!r} must be a non-negative integer")
        if check.violations or nodes is None:
            return []
        return generate_trace(Trace_Generator(seed, ops_count, span, tuple(keys), dict(mix), universe), nodes, variables)

    ops = []
    for i, op in enumerate(check.listing('trace', doc, 'ops') or []):
        section = f"trace.ops[{i}]"
        if not isinstance(op, dict):
            check.fail(section, 'tick', "must be an object")
            continue
        tick = check.integer(section, op, 'tick', minimum=1, maximum=duration or Codec.MASK_64)
        node = check.node(section, op, 'node', nodes)
        key = check.string(section, op, 'key')
        variable = None
        if key is not None:
            if key in sinks:
                check.fail(section, 'key', f"{key!r} is a dataflow sink")
            elif key not in variables:
                check.fail(section, 'key', f"{key!r} is not declared")
            else:
                variable = variables[key]
        mutation = _parse_mutation(check, section, op, variable)
        if None not in (tick, node, mutation) and variable is not None:
            ops.append(Trace_Op(tick, node, key, mutation))
    ops.sort(key=lambda op: op.tick)
    return ops


def parse(document, name=None):
    '''
    Validates a scenario document and builds the Scenario

    :param dict document: the parsed JSON
    :param str name: used when the document has no name
    :returns Scenario: the scenario
    :raises Invalid_Scenario: listing every violation found
    '''
    check = _Checker()
    if not isinstance(document, dict):
        raise Invalid_Scenario([Violation('scenario', 'document', "must be a JSON object")])

    name = check.string('scenario', document, 'name', default=name or 'scenario')
    nodes = check.integer('scenario', document, 'nodes', minimum=1)
    duration = check.integer('scenario', document, 'duration', minimum=1)
    seed = check.integer('scenario', document, 'seed', default=0)
    period = check.integer('scenario', document, 'anti_entropy_period', default=DEFAULT_ANTI_ENTROPY_PERIOD)

    topology_doc = check.mapping('scenario', document, 'topology', default={'kind': Full_Mesh.name})
    topology = None
    if topology_doc is not None:
        topology = _parse_topology(check, 'topology', topology_doc, nodes, seed or 0)
    policy_doc = check.mapping('scenario', document, 'sync_policy', default={'kind': Immediate.name})
    policy = None if policy_doc is None else _parse_policy(check, policy_doc)

    variables = _parse_variables(check, check.listing('scenario', document, 'variables') or [])
    declared = set(variables)
    specs = _parse_dataflow(check, check.listing('scenario', document, 'dataflow', default=[]) or [], variables, nodes)
    sinks = set(variables) - declared

    faults_doc = check.mapping('scenario', document, 'faults', default={})
    faults = None if faults_doc is None else _parse_faults(check, faults_doc, nodes)

    swaps = []
    for i, swap in enumerate(check.listing('scenario', document, 'topology_swaps', default=[]) or []):
        section = f"topology_swaps[{i}]"
        if not isinstance(swap, dict):
            check.fail(section, 'tick', "must be an object")
            continue
        tick = check.integer(section, swap, 'tick', minimum=1, maximum=duration or Codec.MASK_64)
        kind = _parse_topology(check, f"{section}.topology", swap.get('topology'), nodes, seed or 0)
        if tick is not None and kind is not None:
            swaps.append(Topology_Swap(tick, kind))

    trace_doc = check.mapping('scenario', document, 'trace', default={'ops': []})
    trace = [] if trace_doc is None else _parse_trace(check, trace_doc, nodes, duration, variables, sinks)

    if check.violations:
        raise Invalid_Scenario(check.violations)
    return Scenario(
        name, nodes, topology, policy, period, tuple(variables[k] for k in sorted(declared)), tuple(specs),
        faults, tuple(trace), tuple(sorted(swaps, key=lambda s: s.tick)), duration, seed, document,
    )


def read_document(path):
    '''
    Reads a scenario file

    :raises OSError: if the file cannot be read
    :raises Invalid_Scenario: if it is not UTF-8 JSON
    '''
    with open(path, 'rb') as fh:
        data = fh.read()
    try:
        text = data.decode('utf-8')
    except UnicodeDecodeError as e:
        raise Invalid_Scenario([Violation('scenario', 'document', f"is not UTF-8: {e}")])
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise Invalid_Scenario([Violation('scenario', 'document', f"is not JSON: {e}")])


def load(path, **overrides):
    '''
    Reads, overrides and validates a scenario file

    :param path: the JSON file
    :param overrides: seed, policy and topology, as accepted by with_overrides
    :returns Scenario: the scenario
    '''
    document = with_overrides(read_document(path), **overrides)
    stem = os.path.splitext(os.path.basename(os.fspath(path)))[0]
    return parse(document, name=stem)


def policy_document(text):
    '''
    Turns immediate, every_n:N or interval:T into a sync_policy object
    '''
    kind, _, arg = text.partition(':')
    try:
        if kind == Immediate.name and not arg:
            return {'kind': kind}
        if kind == Every_N.name:
            return {'kind': kind, 'n': int(arg)}
        if kind == Interval.name:
            return {'kind': kind, 'ticks': int(arg)}
    except ValueError:
        pass
    raise Invalid_Scenario([Violation('overrides', 'policy', f"{text!r} is not immediate, every_n:N or interval:T")])


def topology_document(text, seed=0):
    '''
    Turns full_mesh, client_server:S or peer_to_peer:F into a topology object
    '''
    kind, _, arg = text.partition(':')
    try:
        if kind == Full_Mesh.name and not arg:
            return {'kind': kind}
        if kind == Client_Server.name:
            return {'kind': kind, 'server': int(arg) if arg else 0}
        if kind == Peer_To_Peer.name:
            return {'kind': kind, 'fanout': int(arg), 'seed': seed}
    except ValueError:
        pass
    raise Invalid_Scenario([Violation('overrides', 'topology', f"{text!r} is not full_mesh, client_server:S or peer_to_peer:F")])


def with_overrides(document, seed=None, policy=None, topology=None):
    '''
    Returns a copy of a document with command-line overrides applied.
    policy and topology are either override strings or JSON objects.
    '''
    if not isinstance(document, dict):
        return document
    document = dict(document)
    if seed is not None:
        document['seed'] = seed
    if policy is not None:
        document['sync_policy'] = policy_document(policy) if isinstance(policy, str) else policy
    if topology is not None:
        if isinstance(topology, str):
            topology = topology_document(topology, document.get('seed', 0))
        document['topology'] = topology
    return document


def bundled_scenarios():
    '''
    Returns the paths of the scenarios shipped with the package, sorted
    '''
    return sorted(
        os.path.join(SCENARIO_DIR, f_name) for f_name in os.listdir(SCENARIO_DIR) if f_name.endswith('.json')
    )
