'''
State-based CRDTs: the lattice value types, their mutators, queries, the
merge (join) function, and the capability-driven implementation selector.

Every value here is immutable. Mutators and merge return new values in
canonical form, so two replicas holding the same state hold equal objects and
produce identical canonical bytes.

https://en.wikipedia.org/wiki/Conflict-free_replicated_data_type

@author: Alfredo Velasco
'''

from dataclasses import dataclass, field
from enum import Enum, IntEnum

from . import Codec
from .Codec import Byte_Reader, Decode_Error


class CRDT_Error(Exception):
    """Base class of the CRDT errors"""


class Variant_Mismatch(CRDT_Error):
    """Two values of different CRDT variants were combined"""


class Illegal_Mutation(CRDT_Error):
    """A mutation was applied to a variant that does not support it"""


class Remove_From_GSet(Illegal_Mutation):
    """A removal reached a grow-only set, so the variable was specialised wrongly"""


class Unsatisfiable_Capabilities(CRDT_Error):
    """No implementation offers the declared capabilities"""


class Crdt_Type(IntEnum):
    """The variant tags, also the first byte of every canonical encoding"""
    G_COUNTER = 1
    PN_COUNTER = 2
    G_SET = 3
    OR_SET = 4
    LWW_REGISTER = 5


class Capability(Enum):
    ADD = 'add'
    REMOVE = 'remove'
    READ = 'read'
    INCREMENT = 'increment'
    DECREMENT = 'decrement'
    ASSIGN = 'assign'


class Kind(Enum):
    COLLECTION = 'collection'
    COUNTER = 'counter'
    REGISTER = 'register'


class Ordering(Enum):
    LESS = 'less'
    EQUAL = 'equal'
    GREATER = 'greater'
    CONCURRENT = 'concurrent'


def _as_bytes(item):
    if isinstance(item, str):
        return item.encode('utf-8')
    return bytes(item)


def _check_actor(actor):
    if not isinstance(actor, int) or actor < 0 or actor > Codec.MASK_64:
        raise ValueError(f"{actor=} must be a 64-bit unsigned integer!")


@dataclass(frozen=True, order=True)
class Dot(object):
    """
    One mutation event: the actor that made it and that actor's sequence number
    """

    actor: int = 0
    counter: int = 1

    def __post_init__(self):
        _check_actor(self.actor)
        if self.counter < 1:
            raise ValueError(f"{self.counter=} must be at least 1!")


@dataclass(frozen=True)
class Version_Vector(object):
    """
    Maps every actor to the largest counter seen from it.
    Missing actors count as 0.
    """

    # Sorted (actor, counter) pairs
    entries: tuple = ()
    _counters: dict = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, '_counters', dict(self.entries))

    @classmethod
    def of(cls, mapping):
        '''
        Builds a canonical vector from a dict of actor -> counter

        :param dict mapping: the counters (zero entries are dropped)
        '''
        return cls(tuple(sorted((a, c) for a, c in mapping.items() if c > 0)))

    def get(self, actor):
        return self._counters.get(actor, 0)

    def as_dict(self):
        return dict(self.entries)

    def covers(self, dot):
        '''
        Has this vector seen the dot?

        :param Dot dot: the dot to look for
        :returns bool: dot.counter <= self[dot.actor]
        '''
        return dot.counter <= self.get(dot.actor)

    def merge(self, other):
        '''
        Returns the pointwise maximum of both vectors
        '''
        result = self.as_dict()
        for a, c in other.entries:
            if c > result.get(a, 0):
                result[a] = c
        return Version_Vector.of(result)

    def advance(self, actor, counter):
        result = self.as_dict()
        result[actor] = max(counter, result.get(actor, 0))
        return Version_Vector.of(result)

    def __le__(self, other):
        mine = self.as_dict()
        theirs = other.as_dict()
        return all(c <= theirs.get(a, 0) for a, c in mine.items())

    def __str__(self):
        return "{" + ", ".join(f"{a}:{c}" for a, c in self.entries) + "}"


@dataclass(frozen=True)
class G_Counter(object):
    """A grow-only counter: one non-negative count per actor"""

    TAG = Crdt_Type.G_COUNTER

    counts: tuple = ()

    @classmethod
    def of(cls, mapping):
        '''
        Builds a counter from a dict of actor -> count without canonicalising it
        '''
        return cls(tuple(sorted(mapping.items())))

    def as_dict(self):
        return dict(self.counts)


@dataclass(frozen=True)
class PN_Counter(object):
    """A counter made of an increment G_Counter and a decrement G_Counter"""

    TAG = Crdt_Type.PN_COUNTER

    p: G_Counter = G_Counter()
    n: G_Counter = G_Counter()


@dataclass(frozen=True)
class G_Set(object):
    """A grow-only set of byte strings"""

    TAG = Crdt_Type.G_SET

    elements: frozenset = frozenset()


@dataclass(frozen=True)
class OR_Set(object):
    """
    An add-wins observed-remove set that keeps no tombstones.
    Each live element maps to the dots of the adds that put it there; the
    causal context remembers every dot this replica has seen, so a dot that
    is in the context but not in the entries has been removed.
    """

    TAG = Crdt_Type.OR_SET

    # (element, frozenset of Dot) pairs sorted by element
    entries: tuple = ()
    context: Version_Vector = Version_Vector()

    @classmethod
    def of(cls, mapping, context):
        '''
        Builds a set from a dict of element -> dots without canonicalising it
        '''
        return cls(tuple(sorted(((e, frozenset(d)) for e, d in mapping.items()), key=lambda kv: kv[0])), context)

    def as_dict(self):
        return dict(self.entries)

    def dots(self):
        '''
        Returns every dot held by a live element
        '''
        result = set()
        for _, d in self.entries:
            result |= d
        return result


@dataclass(frozen=True)
class LWW_Register(object):
    """
    A last-writer-wins register. The timestamp is logical; timestamp 0 means
    nothing was ever assigned.
    """

    TAG = Crdt_Type.LWW_REGISTER

    value: bytes = b''
    timestamp: int = 0
    writer: int = 0


_CLASSES = {
    Crdt_Type.G_COUNTER: G_Counter,
    Crdt_Type.PN_COUNTER: PN_Counter,
    Crdt_Type.G_SET: G_Set,
    Crdt_Type.OR_SET: OR_Set,
    Crdt_Type.LWW_REGISTER: LWW_Register,
}


def bottom(tag):
    '''
    Returns the least state of a variant

    :param Crdt_Type tag: the variant
    :returns: the empty value of that variant
    '''
    return _CLASSES[Crdt_Type(tag)]()


def type_of(v):
    '''
    Returns the variant tag of a value

    :raises TypeError: if v is not a CRDT value
    '''
    try:
        return v.TAG
    except AttributeError:
        raise TypeError(f"{type(v)} is not a CRDT value!")


@dataclass(frozen=True)
class Mutation(object):
    """
    A requested change to a variable.
    op is one of increment, decrement, add, remove, assign.
    element is the set element or the register value.
    clock is the caller's logical clock, only read by assign.
    """

    op: str
    element: bytes = None
    amount: int = 1
    clock: int = 0

    @classmethod
    def increment(cls, amount=1):
        return cls('increment', amount=amount)

    @classmethod
    def decrement(cls, amount=1):
        return cls('decrement', amount=amount)

    @classmethod
    def add(cls, element):
        return cls('add', element=_as_bytes(element))

    @classmethod
    def remove(cls, element):
        return cls('remove', element=_as_bytes(element))

    @classmethod
    def assign(cls, value, clock=0):
        return cls('assign', element=_as_bytes(value), clock=clock)

    def capability(self):
        '''
        Returns the capability a variable needs to accept this mutation
        '''
        return Capability(self.op)


_OPS = {
    Crdt_Type.G_COUNTER: {'increment'},
    Crdt_Type.PN_COUNTER: {'increment', 'decrement'},
    Crdt_Type.G_SET: {'add'},
    Crdt_Type.OR_SET: {'add', 'remove'},
    Crdt_Type.LWW_REGISTER: {'assign'},
}


def canonicalize(v):
    '''
    Returns the canonical form of a value: zero counts and empty dot sets are
    dropped, maps are ordered, and an unassigned register is the bottom register.
    Idempotent.
    '''
    tag = type_of(v)
    if tag == Crdt_Type.G_COUNTER:
        return G_Counter(tuple(sorted((a, c) for a, c in v.counts if c > 0)))
    if tag == Crdt_Type.PN_COUNTER:
        return PN_Counter(canonicalize(v.p), canonicalize(v.n))
    if tag == Crdt_Type.G_SET:
        return G_Set(frozenset(v.elements))
    if tag == Crdt_Type.OR_SET:
        live = {e: d for e, d in v.entries if d}
        return OR_Set.of(live, Version_Vector.of(dict(v.context.entries)))
    if v.timestamp == 0:
        return LWW_Register()
    return v


def _merge_g_counter(a, b):
    result = a.as_dict()
    for actor, count in b.counts:
        if count > result.get(actor, 0):
            result[actor] = count
    return G_Counter.of(result)


def _merge_or_set(a, b):
    ea = a.as_dict()
    eb = b.as_dict()
    result = {}
    for element in set(ea) | set(eb):
        da = ea.get(element, frozenset())
        db = eb.get(element, frozenset())
        # A dot only one side holds survives unless the other side has seen it
        keep = (da & db) | {d for d in da - db if not b.context.covers(d)} | {d for d in db - da if not a.context.covers(d)}
        if keep:
            result[element] = keep
    return OR_Set.of(result, a.context.merge(b.context))


def _lww_key(r):
    return (r.timestamp, r.writer, r.value)


def merge(a, b):
    '''
    Returns the join (least upper bound) of two states of the same variant

    :param a: a CRDT value
    :param b: a CRDT value of the same variant
    :returns: the canonical join
    :raises Variant_Mismatch: if a and b are different variants
    '''
    tag = type_of(a)
    if type_of(b) != tag:
        raise Variant_Mismatch(f"Cannot merge {tag.name} with {type_of(b).name}!")

    if tag == Crdt_Type.G_COUNTER:
        result = _merge_g_counter(a, b)
    elif tag == Crdt_Type.PN_COUNTER:
        result = PN_Counter(_merge_g_counter(a.p, b.p), _merge_g_counter(a.n, b.n))
    elif tag == Crdt_Type.G_SET:
        result = G_Set(a.elements | b.elements)
    elif tag == Crdt_Type.OR_SET:
        result = _merge_or_set(a, b)
    else:
        result = a if _lww_key(canonicalize(a)) >= _lww_key(canonicalize(b)) else b
    return canonicalize(result)


def _bump(counter, actor, amount):
    result = counter.as_dict()
    result[actor] = result.get(actor, 0) + amount
    return G_Counter.of(result)


def update(v, mutation, actor):
    '''
    Applies a mutation on behalf of an actor

    :param v: the current CRDT value
    :param Mutation mutation: the requested change
    :param int actor: the replica making the change
    :returns: the new canonical value
    :raises Remove_From_GSet: if a removal reaches a grow-only set
    :raises Illegal_Mutation: if the variant does not support the mutation
    '''
    _check_actor(actor)
    tag = type_of(v)
    op = mutation.op
    if tag == Crdt_Type.G_SET and op == 'remove':
        raise Remove_From_GSet(f"Cannot remove {mutation.element!r} from a G_Set! Declare the remove capability to get an OR_Set.")
    if op not in _OPS[tag]:
        raise Illegal_Mutation(f"{op=} is not supported by {tag.name}!")
    if op in ('increment', 'decrement') and mutation.amount < 1:
        raise Illegal_Mutation(f"{mutation.amount=} must be at least 1!")
    if op in ('add', 'remove', 'assign') and mutation.element is None:
        raise Illegal_Mutation(f"{op=} needs an element!")

    if tag == Crdt_Type.G_COUNTER:
        result = _bump(v, actor, mutation.amount)
    elif tag == Crdt_Type.PN_COUNTER:
        if op == 'increment':
            result = PN_Counter(_bump(v.p, actor, mutation.amount), v.n)
        else:
            result = PN_Counter(v.p, _bump(v.n, actor, mutation.amount))
    elif tag == Crdt_Type.G_SET:
        result = G_Set(v.elements | {mutation.element})
    elif tag == Crdt_Type.OR_SET:
        entries = v.as_dict()
        if op == 'add':
            dot = Dot(actor, v.context.get(actor) + 1)
            # The fresh dot supersedes the dots already observed for the element
            entries[mutation.element] = frozenset([dot])
            result = OR_Set.of(entries, v.context.advance(actor, dot.counter))
        else:
            entries.pop(mutation.element, None)
            result = OR_Set.of(entries, v.context)
    else:
        timestamp = max(v.timestamp, mutation.clock) + 1
        result = LWW_Register(mutation.element, timestamp, actor)
    return canonicalize(result)


def query(v):
    '''
    Returns the observable value of a state

    :returns: an int for counters, a frozenset of bytes for sets, and bytes or None for registers
    '''
    tag = type_of(v)
    if tag == Crdt_Type.G_COUNTER:
        return sum(c for _, c in v.counts)
    if tag == Crdt_Type.PN_COUNTER:
        return query(v.p) - query(v.n)
    if tag == Crdt_Type.G_SET:
        return frozenset(v.elements)
    if tag == Crdt_Type.OR_SET:
        return frozenset(e for e, d in v.entries if d)
    if v.timestamp == 0:
        return None
    return v.value


def compare(a, b):
    '''
    Orders two states of the same variant: a <= b iff merge(a, b) == b

    :returns Ordering: LESS, EQUAL, GREATER or CONCURRENT
    :raises Variant_Mismatch: if a and b are different variants
    '''
    joined = merge(a, b)
    ca = canonicalize(a)
    cb = canonicalize(b)
    if ca == cb:
        return Ordering.EQUAL
    if joined == cb:
        return Ordering.LESS
    if joined == ca:
        return Ordering.GREATER
    return Ordering.CONCURRENT


@dataclass(frozen=True)
class Capability_Set(object):
    """
    The operations an application declares for a variable
    """

    flags: frozenset = frozenset()

    @classmethod
    def of(cls, *names):
        '''
        Capability_Set.of('add', 'read')

        :raises Unsatisfiable_Capabilities: if a name is unknown or the set is inconsistent
        '''
        try:
            return cls(frozenset(Capability(n) if not isinstance(n, Capability) else n for n in names))
        except ValueError as e:
            raise Unsatisfiable_Capabilities(f"Unknown capability in {names}! ({e})")

    def __post_init__(self):
        if not self.flags:
            raise Unsatisfiable_Capabilities("A capability set cannot be empty!")
        if Capability.REMOVE in self.flags and Capability.ADD not in self.flags:
            raise Unsatisfiable_Capabilities("remove needs add!")
        if Capability.DECREMENT in self.flags and Capability.INCREMENT not in self.flags:
            raise Unsatisfiable_Capabilities("decrement needs increment!")

    def __contains__(self, item):
        return Capability(item) in self.flags

    def names(self):
        return sorted(c.value for c in self.flags)


_ALLOWED = {
    Kind.COLLECTION: {Capability.ADD, Capability.REMOVE, Capability.READ},
    Kind.COUNTER: {Capability.INCREMENT, Capability.DECREMENT, Capability.READ},
    Kind.REGISTER: {Capability.ASSIGN, Capability.READ},
}

_REQUIRED = {
    Kind.COLLECTION: Capability.ADD,
    Kind.COUNTER: Capability.INCREMENT,
    Kind.REGISTER: Capability.ASSIGN,
}


def select_implementation(caps, kind):
    '''
    Picks the cheapest variant that offers the declared capabilities.
    A collection that never removes becomes a G_Set, which needs no causal
    metadata; a counter that never decrements becomes a G_Counter.

    :param Capability_Set caps: the declared capabilities
    :param Kind kind: collection, counter or register
    :returns Crdt_Type: the selected variant
    :raises Unsatisfiable_Capabilities: if no variant of that kind fits
    '''
    kind = Kind(kind)
    extra = caps.flags - _ALLOWED[kind]
    if extra:
        raise Unsatisfiable_Capabilities(f"{kind.value} cannot offer {sorted(c.value for c in extra)}!")
    if _REQUIRED[kind] not in caps.flags:
        raise Unsatisfiable_Capabilities(f"{kind.value} needs {_REQUIRED[kind].value}!")

    if kind == Kind.COLLECTION:
        return Crdt_Type.OR_SET if Capability.REMOVE in caps.flags else Crdt_Type.G_SET
    if kind == Kind.COUNTER:
        return Crdt_Type.PN_COUNTER if Capability.DECREMENT in caps.flags else Crdt_Type.G_COUNTER
    return Crdt_Type.LWW_REGISTER


def _encode_counts(counter):
    out = [Codec.u32(len(counter.counts))]
    for actor, count in counter.counts:
        out.append(Codec.u64(actor))
        out.append(Codec.u64(count))
    return b''.join(out)


def encode(v):
    '''
    Returns the canonical bytes of a value: a 1-byte tag followed by the variant body.
    Equal canonical states always give identical bytes.
    '''
    v = canonicalize(v)
    tag = type_of(v)
    out = [Codec.u8(tag)]
    if tag == Crdt_Type.G_COUNTER:
        out.append(_encode_counts(v))
    elif tag == Crdt_Type.PN_COUNTER:
        out.append(_encode_counts(v.p))
        out.append(_encode_counts(v.n))
    elif tag == Crdt_Type.G_SET:
        out.append(Codec.u32(len(v.elements)))
        for element in sorted(v.elements):
            out.append(Codec.blob(element))
    elif tag == Crdt_Type.OR_SET:
        out.append(encode_vector(v.context))
        out.append(Codec.u32(len(v.entries)))
        for element, dots in v.entries:
            out.append(Codec.blob(element))
            out.append(Codec.u32(len(dots)))
            for dot in sorted(dots):
                out.append(Codec.u64(dot.actor))
                out.append(Codec.u64(dot.counter))
    else:
        out.append(Codec.u64(v.timestamp))
        out.append(Codec.u64(v.writer))
        out.append(Codec.blob(v.value))
    return b''.join(out)


def encode_vector(vector):
    '''
    Returns the canonical bytes of a Version_Vector (u32 count, then actor/counter pairs)
    '''
    out = [Codec.u32(len(vector.entries))]
    for actor, counter in vector.entries:
        out.append(Codec.u64(actor))
        out.append(Codec.u64(counter))
    return b''.join(out)


def _decode_counts(reader):
    counts = {}
    for _ in range(reader.u32()):
        actor = reader.u64()
        counts[actor] = reader.u64()
    return G_Counter.of(counts)


def decode_vector(reader):
    entries = {}
    for _ in range(reader.u32()):
        actor = reader.u64()
        entries[actor] = reader.u64()
    return Version_Vector.of(entries)


def decode(data):
    '''
    Parses canonical bytes back into a value

    :param bytes data: bytes produced by encode
    :returns: the canonical value
    :raises Decode_Error: if the bytes are truncated, have trailing garbage or an unknown tag
    '''
    reader = Byte_Reader(data)
    raw_tag = reader.u8()
    try:
        tag = Crdt_Type(raw_tag)
    except ValueError:
        raise Decode_Error(f"Unknown variant tag {raw_tag}!")

    try:
        if tag == Crdt_Type.G_COUNTER:
            v = _decode_counts(reader)
        elif tag == Crdt_Type.PN_COUNTER:
            p = _decode_counts(reader)
            v = PN_Counter(p, _decode_counts(reader))
        elif tag == Crdt_Type.G_SET:
            v = G_Set(frozenset(reader.blob() for _ in range(reader.u32())))
        elif tag == Crdt_Type.OR_SET:
            context = decode_vector(reader)
            entries = {}
            for _ in range(reader.u32()):
                element = reader.blob()
                entries[element] = {Dot(reader.u64(), reader.u64()) for _ in range(reader.u32())}
            v = OR_Set.of(entries, context)
        else:
            timestamp = reader.u64()
            writer = reader.u64()
            v = LWW_Register(reader.blob(), timestamp, writer)
    except ValueError as e:
        raise Decode_Error(f"Invalid {tag.name} body: {e}")
    reader.expect_end()
    return canonicalize(v)


def render_query(result):
    '''
    Returns a JSON-friendly rendering of a query result: ints stay ints, sets
    become sorted lists of strings, registers become a string or None.
    Bytes that are not UTF-8 are escaped.
    '''
    if result is None or isinstance(result, int):
        return result
    if isinstance(result, (bytes, bytearray)):
        return bytes(result).decode('utf-8', 'backslashreplace')
    return [e.decode('utf-8', 'backslashreplace') for e in sorted(result)]


def encode_query(result):
    '''
    Returns canonical bytes for a query result, used to compare observable values
    '''
    if result is None:
        return Codec.u8(0)
    if isinstance(result, int):
        sign = 1 if result >= 0 else 2
        return Codec.u8(sign) + Codec.u64(abs(result))
    if isinstance(result, (bytes, bytearray)):
        return Codec.u8(3) + Codec.blob(result)
    return Codec.u8(4) + Codec.u32(len(result)) + b''.join(Codec.blob(e) for e in sorted(result))
