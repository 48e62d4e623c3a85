'''
Derived set variables kept equal to a combinator (map, filter, union or
intersection) of other set variables.

The owner node recomputes a sink whenever one of its sources changes and
reconciles it with add and remove mutations; the sink then replicates like
any other variable.

@author: Alfredo Velasco
'''

import logging
import re
from dataclasses import dataclass
from enum import Enum

from . import CRDT

logger = logging.getLogger(__name__)

_NUMBER = re.compile(rb'-?[0-9]+')


class Dataflow_Error(Exception):
    """Base class of the dataflow errors"""


class Cycle_Detected(Dataflow_Error):
    pass


class Type_Unsupported(Dataflow_Error):
    """A source is not a set, or the spec has the wrong number of sources"""


class Unknown_Function(Dataflow_Error, KeyError):
    pass


class Unknown_Source(Dataflow_Error, KeyError):
    pass


class Sink_Conflict(Dataflow_Error):
    """The sink is already a variable"""


class Combinator(Enum):
    MAP = 'map'
    FILTER = 'filter'
    UNION = 'union'
    INTERSECTION = 'intersection'


_ARITY = {
    Combinator.MAP: 1,
    Combinator.FILTER: 1,
    Combinator.UNION: 2,
    Combinator.INTERSECTION: 2,
}


@dataclass(frozen=True)
class Dataflow_Spec(object):
    """
    sink = combinator(sources). fn names a registry function for map and a
    registry predicate for filter.
    """

    id: str
    combinator: Combinator
    sources: tuple
    sink: str
    fn: str = None
    # The node that maintains the sink
    owner: int = 0

    def __post_init__(self):
        object.__setattr__(self, 'combinator', Combinator(self.combinator))
        object.__setattr__(self, 'sources', tuple(self.sources))
        arity = _ARITY[self.combinator]
        if len(self.sources) != arity:
            raise Type_Unsupported(f"{self.combinator.value} takes {arity} sources but {self.id!r} has {len(self.sources)}!")
        if (self.fn is None) != (arity == 2):
            raise Type_Unsupported(f"{self.combinator.value} {'cannot take' if arity == 2 else 'needs'} a function ({self.id!r})!")


def _is_number(e):
    return _NUMBER.fullmatch(e) is not None


def _double(e):
    if _is_number(e):
        return str(int(e) * 2).encode('ascii')
    return e + e


def _negate(e):
    # Non-numeric elements are left alone
    if _is_number(e):
        return str(-int(e)).encode('ascii')
    return e


BUILTIN_FUNCTIONS = {
    'identity': lambda e: e,
    'double': _double,
    'negate': _negate,
    'upper': lambda e: e.upper(),
}

BUILTIN_PREDICATES = {
    'even': lambda e: _is_number(e) and int(e) % 2 == 0,
    'odd': lambda e: _is_number(e) and int(e) % 2 == 1,
    'nonempty': lambda e: len(e) > 0,
    'numeric': _is_number,
}


class Function_Registry(object):

    """
    The whitelisted functions and predicates specs may name. Every node of a
    run must use the same registry, and every entry must be total and
    deterministic on byte strings.
    """
    def __init__(self, functions=None, predicates=None):
        self.functions = dict(BUILTIN_FUNCTIONS)
        self.predicates = dict(BUILTIN_PREDICATES)
        self.functions.update(functions or {})
        self.predicates.update(predicates or {})

    def function(self, fn_id):
        try:
            return self.functions[fn_id]
        except KeyError:
            raise Unknown_Function(f"No function named {fn_id!r}! Known: {sorted(self.functions)}")

    def predicate(self, pred_id):
        try:
            return self.predicates[pred_id]
        except KeyError:
            raise Unknown_Function(f"No predicate named {pred_id!r}! Known: {sorted(self.predicates)}")

    def resolve(self, spec):
        '''
        Returns the callable a spec names, or None for union and intersection
        '''
        if spec.combinator == Combinator.MAP:
            return self.function(spec.fn)
        if spec.combinator == Combinator.FILTER:
            return self.predicate(spec.fn)
        return None


def apply_combinator(spec, registry, inputs):
    '''
    Computes the membership a sink should have

    :param Dataflow_Spec spec: the spec
    :param Function_Registry registry: where spec.fn is looked up
    :param list(frozenset) inputs: the query of each source, in order
    :returns frozenset: the target membership
    '''
    f = registry.resolve(spec)
    if spec.combinator == Combinator.MAP:
        return frozenset(f(e) for e in inputs[0])
    if spec.combinator == Combinator.FILTER:
        return frozenset(e for e in inputs[0] if f(e))
    if spec.combinator == Combinator.UNION:
        return inputs[0] | inputs[1]
    return inputs[0] & inputs[1]


class Dataflow_Graph(object):

    """The specs one node maintains, in registration order"""
    def __init__(self, registry=None):
        self.registry = registry if registry is not None else Function_Registry()
        self.specs = []

    def sink_declaration(self, spec, variables):
        '''
        Checks a spec against the declared variables and derives the sink's
        declaration. A sink fed only by add-only sets is add-only itself, so it
        specialises to a G_Set.

        :param Dataflow_Spec spec: the spec
        :param dict variables: key -> Variable already declared on the node
        :returns (Kind, Capability_Set): how to declare the sink
        :raises Cycle_Detected: if the sink is one of its sources
        :raises Sink_Conflict: if the sink is already declared
        :raises Unknown_Source: if a source is not declared
        :raises Type_Unsupported: if a source is not a set
        :raises Unknown_Function: if fn is not in the registry
        '''
        if spec.sink in spec.sources:
            raise Cycle_Detected(f"{spec.id!r} feeds {spec.sink!r} into itself!")
        if spec.sink in variables:
            raise Sink_Conflict(f"{spec.id!r} sink {spec.sink!r} is already declared!")
        removes = False
        for source in spec.sources:
            if source not in variables:
                raise Unknown_Source(f"{spec.id!r} reads undeclared {source!r}!")
            tag = variables[source].type_tag
            if tag not in (CRDT.Crdt_Type.G_SET, CRDT.Crdt_Type.OR_SET):
                raise Type_Unsupported(f"{spec.id!r} reads {source!r}, a {tag.name}, but only sets are supported!")
            removes = removes or tag == CRDT.Crdt_Type.OR_SET
        self.registry.resolve(spec)

        names = ('add', 'remove', 'read') if removes else ('add', 'read')
        return CRDT.Kind.COLLECTION, CRDT.Capability_Set.of(*names)

    def register(self, spec):
        '''
        Makes this node maintain spec
        '''
        if any(s.id == spec.id for s in self.specs):
            raise Dataflow_Error(f"{spec.id=} is already registered!")
        self.specs.append(spec)
        logger.debug("Registered %s: %s(%s) -> %s", spec.id, spec.combinator.value, ", ".join(spec.sources), spec.sink)

    def propagate(self, replica, key):
        '''
        Recomputes every spec downstream of key in registration order, which
        is a topological order because a sink must be new when it is
        registered. Sinks that change feed the specs after them.

        :param Replica replica: the node (value, variables and apply_derived are used)
        :param str key: the variable that changed
        :returns list(Envelope): what the sink updates want sent
        '''
        changed = {key}
        out = []
        for spec in self.specs:
            if changed.isdisjoint(spec.sources):
                continue
            target = apply_combinator(spec, self.registry, [replica.value(s) for s in spec.sources])
            current = replica.value(spec.sink)
            mutations = [CRDT.Mutation.add(e) for e in sorted(target - current)]
            if replica.variables[spec.sink].type_tag == CRDT.Crdt_Type.OR_SET:
                mutations.extend(CRDT.Mutation.remove(e) for e in sorted(current - target))
            if mutations:
                out.extend(replica.apply_derived(spec.sink, mutations))
                changed.add(spec.sink)
        return out
