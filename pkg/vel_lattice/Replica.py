'''
The replication engine of one node: synchronization policies, the envelopes
nodes exchange, their wire framing, and the anti-entropy (digest and repair)
protocol.

A node runs one event loop. on_local_update, on_receive and on_tick are never
called concurrently for the same node, and each returns the envelopes the
node wants sent. The engine never talks to a network itself.

A digest lists (key, type tag, FNV-1a 64 of the canonical state) per
variable and nothing else: no OR_Set context vector travels with it. A hash
cannot say which side is ahead, so a mismatched key is repaired in both
directions (a StateSync back plus a DigestReply asking for the sender's).

@author: Alfredo Velasco
'''

import logging
from dataclasses import dataclass, replace
from enum import IntEnum

from . import CRDT, Codec
from .Codec import Byte_Reader, Decode_Error
from .Dataflow import Dataflow_Graph
from .SplitMix64 import SplitMix64
from .Store import CRDT_Store, Store_Key

logger = logging.getLogger(__name__)

DEFAULT_ANTI_ENTROPY_PERIOD = 10


class Replication_Error(Exception):
    """Base class of the replication errors"""


class Corrupt_Envelope(Replication_Error):
    """An envelope or its payload did not decode"""


class Unknown_Variable(Replication_Error, KeyError):
    pass


@dataclass(frozen=True)
class Immediate(object):
    """Send every change to every neighbour right away"""

    name = 'immediate'


@dataclass(frozen=True)
class Every_N(object):
    """Send a variable once it has changed n times since it was last sent"""
    n: int = 1

    name = 'every_n'

    def __post_init__(self):
        if self.n < 1:
            raise ValueError(f"{self.n=} must be at least 1!")


@dataclass(frozen=True)
class Interval(object):
    """Every ticks ticks, send each variable that changed since the last flush"""
    ticks: int = 1

    name = 'interval'

    def __post_init__(self):
        if self.ticks < 1:
            raise ValueError(f"{self.ticks=} must be at least 1!")


class Envelope_Kind(IntEnum):
    STATE_SYNC = 1
    DIGEST = 2
    DIGEST_REPLY = 3


@dataclass(frozen=True)
class Envelope(object):
    """
    The unit nodes exchange. StateSync carries one variable's canonical state;
    Digest and DigestReply carry summaries of every variable and use the empty key.
    """

    sender: int
    receiver: int
    kind: Envelope_Kind
    key: str
    payload: bytes = b''

    def __post_init__(self):
        if self.sender == self.receiver:
            raise Replication_Error(f"An envelope cannot go from {self.sender} to itself!")
        if (self.kind == Envelope_Kind.STATE_SYNC) != (self.key != ''):
            raise Replication_Error(f"{self.kind.name} envelopes cannot carry {self.key=}!")


def encode_frame(env):
    '''
    Frames an envelope for the wire: u32 frame length, then u8 kind, u64 from,
    u64 to, u8 key length, key, u32 payload length, payload.

    :param Envelope env: the envelope
    :returns bytes: the frame
    '''
    body = b''.join([
        Codec.u8(env.kind),
        Codec.u64(env.sender),
        Codec.u64(env.receiver),
        Codec.short_blob(env.key.encode('utf-8')),
        Codec.blob(env.payload),
    ])
    return Codec.u32(len(body)) + body


def decode_frame(data):
    '''
    Parses one frame

    :param bytes data: exactly one frame
    :returns Envelope: the envelope
    :raises Corrupt_Envelope: if the frame is malformed
    '''
    try:
        reader = Byte_Reader(data)
        length = reader.u32()
        if length != reader.remaining():
            raise Corrupt_Envelope(f"Frame says {length} bytes but {reader.remaining()} follow!")
        kind = Envelope_Kind(reader.u8())
        sender = reader.u64()
        receiver = reader.u64()
        key = reader.short_blob().decode('utf-8')
        payload = reader.blob()
        reader.expect_end()
        return Envelope(sender, receiver, kind, key, payload)
    except (Decode_Error, ValueError, Replication_Error) as e:
        if isinstance(e, Corrupt_Envelope):
            raise
        raise Corrupt_Envelope(f"Bad frame: {e}")


def _encode_digest(summary):
    out = [Codec.u32(len(summary))]
    for key in sorted(summary):
        tag, h = summary[key]
        out.append(Codec.short_blob(key.encode('utf-8')))
        out.append(Codec.u8(tag))
        out.append(Codec.u64(h))
    return b''.join(out)


def _decode_digest(payload):
    reader = Byte_Reader(payload)
    summary = {}
    for _ in range(reader.u32()):
        key = reader.short_blob().decode('utf-8')
        tag = CRDT.Crdt_Type(reader.u8())
        summary[key] = (tag, reader.u64())
    reader.expect_end()
    return summary


def _encode_keys(keys):
    return Codec.u32(len(keys)) + b''.join(Codec.short_blob(k.encode('utf-8')) for k in keys)


def _decode_keys(payload):
    reader = Byte_Reader(payload)
    keys = [reader.short_blob().decode('utf-8') for _ in range(reader.u32())]
    reader.expect_end()
    return keys


@dataclass(frozen=True)
class Variable(object):
    """A declared variable: its capabilities decide its implementation"""
    key: str
    kind: CRDT.Kind
    capabilities: CRDT.Capability_Set
    type_tag: CRDT.Crdt_Type


class Replica(object):

    """
    One node of the system
    """
    def __init__(self, node_id, membership, policy=Immediate(), anti_entropy_period=DEFAULT_ANTI_ENTROPY_PERIOD,
                 store=None, seed=0, merge=CRDT.merge, registry=None):
        '''
        :param int node_id: this node, also the actor of its mutations
        :param Membership_Service membership: who the neighbours are
        :param policy: Immediate, Every_N or Interval
        :param int anti_entropy_period: ticks between digests (0 turns anti-entropy off)
        :param CRDT_Store store: this node's store (in-memory by default)
        :param int seed: seeds the anti-entropy neighbour rotation
        :param merge: the join used on every write
        :param Function_Registry registry: functions available to dataflow specs
        '''
        super(Replica, self).__init__()
        self.node_id = node_id
        self.membership = membership
        self.policy = policy
        self.anti_entropy_period = anti_entropy_period
        self.store = store if store is not None else CRDT_Store(merge=merge)
        self.variables = {}
        self.dataflow = Dataflow_Graph(registry)
        self.ticks = 0
        # Every_N: changes per variable since it was last sent
        self.pending = {}
        # Interval: variables changed since the last flush
        self.dirty = set()
        self.digest_round = 0
        self.rotation = SplitMix64(seed + node_id).below(1 << 32)
        self.corrupt_envelopes = 0
        # Called as f(node, key, mutation, new_state) after every mutation
        self.mutation_observers = []
        # Called as f(node, key, before, after) after every received state
        self.merge_observers = []

    def declare(self, key, kind, capabilities):
        '''
        Declares a variable and picks its implementation from its capabilities

        :param str key: the variable name
        :param kind: Kind or its name
        :param capabilities: a Capability_Set or capability names
        :returns Crdt_Type: the selected implementation
        :raises Replication_Error: if key is already declared differently
        '''
        Store_Key.of(key)
        kind = CRDT.Kind(kind)
        if not isinstance(capabilities, CRDT.Capability_Set):
            capabilities = CRDT.Capability_Set.of(*capabilities)
        tag = CRDT.select_implementation(capabilities, kind)
        variable = Variable(key, kind, capabilities, tag)
        existing = self.variables.get(key)
        if existing is not None and existing != variable:
            raise Replication_Error(f"{key=} is already declared as {existing}!")
        self.variables[key] = variable
        return tag

    def register_dataflow(self, spec, active=True):
        '''
        Declares the sink of a dataflow spec and, if active, maintains it here.
        Sinks are registered before any source is written.

        :returns Crdt_Type: the sink's implementation
        '''
        kind, capabilities = self.dataflow.sink_declaration(spec, self.variables)
        tag = self.declare(spec.sink, kind, capabilities)
        if active:
            self.dataflow.register(spec)
        return tag

    def membership_lookup(self):
        '''
        Asks the membership service for this node's neighbours
        '''
        return self.membership.lookup(self.node_id)

    def _variable(self, key):
        try:
            return self.variables[key]
        except KeyError:
            raise Unknown_Variable(f"{key=} is not declared on node {self.node_id}!")

    def state(self, key):
        '''
        Returns the current state of a variable (bottom if never written)
        '''
        variable = self._variable(key)
        current = self.store.get(key)
        return current if current is not None else CRDT.bottom(variable.type_tag)

    def value(self, key):
        return CRDT.query(self.state(key))

    def on_local_update(self, key, mutation):
        '''
        Applies a mutation made on this node, then propagates it as the policy says

        :param str key: the variable
        :param Mutation mutation: the change
        :returns (state, list(Envelope)): the new state and the envelopes to send
        :raises Unknown_Variable: if key is not declared
        :raises Remove_From_GSet: if the variable was specialised to a G_Set
        :raises Illegal_Mutation: if the variable lacks the capability
        '''
        variable = self._variable(key)
        if mutation.op == 'remove' and variable.type_tag == CRDT.Crdt_Type.G_SET:
            raise CRDT.Remove_From_GSet(f"{key=} is a G_Set and cannot remove {mutation.element!r}!")
        try:
            needed = mutation.capability()
        except ValueError:
            raise CRDT.Illegal_Mutation(f"{mutation.op=} is not an operation!")
        if needed not in variable.capabilities.flags:
            raise CRDT.Illegal_Mutation(f"{key=} was not declared with {needed.value}!")

        state, out = self._apply(key, mutation)
        out.extend(self.propagate(key))
        return state, out

    def apply_derived(self, key, mutations):
        '''
        Applies the mutations a dataflow spec computed for its sink, counted
        as one change by the policy

        :returns list(Envelope): the envelopes to send
        '''
        for mutation in mutations:
            self._apply(key, mutation, notify=False)
        return self._changed(key)

    def _apply(self, key, mutation, notify=True):
        if mutation.op == 'assign':
            mutation = replace(mutation, clock=max(mutation.clock, self.ticks))
        new = CRDT.update(self.state(key), mutation, self.node_id)
        stored = self.store.put_merge(key, new)
        for observer in self.mutation_observers:
            observer(self.node_id, key, mutation, stored)
        return stored, self._changed(key) if notify else []

    def propagate(self, key):
        '''
        Brings every sink fed by key up to date

        :returns list(Envelope): the envelopes the sink changes produced
        '''
        return self.dataflow.propagate(self, key)

    def _changed(self, key, exclude=None):
        if isinstance(self.policy, Immediate):
            return self._sync_all(key, exclude)
        if isinstance(self.policy, Every_N):
            self.pending[key] = self.pending.get(key, 0) + 1
            if self.pending[key] >= self.policy.n:
                self.pending[key] = 0
                return self._sync_all(key)
            return []
        self.dirty.add(key)
        return []

    def _sync_all(self, key, exclude=None):
        payload = CRDT.encode(self.state(key))
        return [
            Envelope(self.node_id, other, Envelope_Kind.STATE_SYNC, key, payload)
            for other in sorted(self.membership_lookup())
            if other != exclude
        ]

    def on_tick(self):
        '''
        Advances this node's clock by one tick. Flushes dirty variables under
        Interval and sends a digest to one neighbour every anti_entropy_period ticks.

        :returns list(Envelope): the envelopes to send
        '''
        self.ticks += 1
        out = []
        if isinstance(self.policy, Interval) and self.ticks % self.policy.ticks == 0:
            for key in sorted(self.dirty):
                out.extend(self._sync_all(key))
            self.dirty.clear()

        if self.anti_entropy_period and self.ticks % self.anti_entropy_period == 0:
            neighbours = sorted(self.membership_lookup())
            if neighbours:
                target = neighbours[(self.rotation + self.digest_round) % len(neighbours)]
                self.digest_round += 1
                out.append(Envelope(self.node_id, target, Envelope_Kind.DIGEST, '', _encode_digest(self._summary())))
        return out

    def _summary(self):
        summary = {}
        for key in sorted(self.variables):
            current = self.store.get(key)
            if current is not None:
                summary[key] = (CRDT.type_of(current), Codec.fnv1a_64(CRDT.encode(current)))
        return summary

    def on_receive(self, env):
        '''
        Handles an envelope addressed to this node. Corrupt envelopes are
        dropped and counted in corrupt_envelopes.

        :param Envelope env: the envelope
        :returns list(Envelope): the replies
        :raises Replication_Error: if the envelope is addressed to another node
        '''
        if env.receiver != self.node_id:
            raise Replication_Error(f"Node {self.node_id} got an envelope for {env.receiver}!")
        try:
            if env.kind == Envelope_Kind.STATE_SYNC:
                return self._receive_state(env)
            if env.kind == Envelope_Kind.DIGEST:
                return self._receive_digest(env)
            return self._receive_digest_reply(env)
        except Corrupt_Envelope as e:
            self.corrupt_envelopes += 1
            logger.warning("Node %d dropped a %s from %d: %s", self.node_id, env.kind.name, env.sender, e)
            return []

    def _receive_state(self, env):
        variable = self.variables.get(env.key)
        if variable is None:
            raise Corrupt_Envelope(f"{env.key=} is not declared here!")
        try:
            incoming = CRDT.decode(env.payload)
        except Decode_Error as e:
            raise Corrupt_Envelope(f"{env.key=} payload does not decode: {e}")
        if CRDT.type_of(incoming) != variable.type_tag:
            raise Corrupt_Envelope(f"{env.key=} is {variable.type_tag.name} but the payload is {CRDT.type_of(incoming).name}!")

        before = self.state(env.key)
        after = self.store.put_merge(env.key, incoming)
        for observer in self.merge_observers:
            observer(self.node_id, env.key, before, after)
        if after == before:
            return []
        logger.debug("Node %d merged %r from %d", self.node_id, env.key, env.sender)
        out = self._changed(env.key, exclude=env.sender)
        out.extend(self.propagate(env.key))
        return out

    def _receive_digest(self, env):
        try:
            theirs = _decode_digest(env.payload)
        except (Decode_Error, ValueError) as e:
            raise Corrupt_Envelope(f"Digest does not decode: {e}")
        mine = self._summary()

        flagged = []
        out = []
        for key in sorted(set(theirs) | set(mine)):
            if key not in self.variables:
                logger.warning("Node %d ignores unknown %r in a digest from %d", self.node_id, key, env.sender)
                continue
            if key not in mine:
                flagged.append(key)
            elif key not in theirs:
                out.append(self._state_sync(key, env.sender))
            elif theirs[key][0] != mine[key][0]:
                logger.warning("Node %d and %d disagree on the type of %r", self.node_id, env.sender, key)
            elif theirs[key][1] != mine[key][1]:
                # A hash mismatch cannot tell which side is ahead, so repair both ways
                flagged.append(key)
                out.append(self._state_sync(key, env.sender))

        if flagged:
            out.append(Envelope(self.node_id, env.sender, Envelope_Kind.DIGEST_REPLY, '', _encode_keys(flagged)))
        return out

    def _receive_digest_reply(self, env):
        try:
            keys = _decode_keys(env.payload)
        except (Decode_Error, ValueError) as e:
            raise Corrupt_Envelope(f"Digest reply does not decode: {e}")
        out = []
        for key in keys:
            if key in self.variables and self.store.get(key) is not None:
                out.append(self._state_sync(key, env.sender))
        return out

    def _state_sync(self, key, to):
        return Envelope(self.node_id, to, Envelope_Kind.STATE_SYNC, key, CRDT.encode(self.state(key)))
