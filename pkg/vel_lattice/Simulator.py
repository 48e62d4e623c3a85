'''
A deterministic discrete-event simulator for multi-node runs.
Virtual time moves in integer ticks, every node gets one tick event per tick,
and every envelope passes a fault model (loss, delay, duplication and
partitions) driven by one seeded SplitMix64. The same scenario and seed
always give the same metrics, byte for byte.

@author: Alfredo Velasco
'''

import logging
from collections import defaultdict
from dataclasses import asdict, dataclass, field

from . import CRDT, Codec
from .Event_Queue import Event_Kind, Event_Queue
from .Replica import Corrupt_Envelope, Every_N, Replica, decode_frame, encode_frame
from .SplitMix64 import SplitMix64
from .Store import CRDT_Store
from .Topology import Static_Membership

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Partition(object):
    """side_a and side_b cannot talk while from_tick <= t < to_tick"""
    from_tick: int
    to_tick: int
    side_a: frozenset
    side_b: frozenset

    def __post_init__(self):
        object.__setattr__(self, 'side_a', frozenset(self.side_a))
        object.__setattr__(self, 'side_b', frozenset(self.side_b))
        if self.from_tick > self.to_tick:
            raise ValueError(f"{self.from_tick=} is after {self.to_tick=}!")
        if self.side_a & self.side_b:
            raise ValueError(f"Partition sides share {sorted(self.side_a & self.side_b)}!")

    def active(self, t):
        return self.from_tick <= t < self.to_tick

    def separates(self, a, b):
        return (a in self.side_a and b in self.side_b) or (a in self.side_b and b in self.side_a)


@dataclass(frozen=True)
class Fault_Model(object):
    drop_prob: float = 0.0
    dup_prob: float = 0.0
    delay_min: int = 0
    delay_max: int = 0
    partitions: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, 'partitions', tuple(self.partitions))
        for name in ('drop_prob', 'dup_prob'):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name}={p} must be in [0, 1]!")
        if self.delay_min < 0 or self.delay_min > self.delay_max:
            raise ValueError(f"Need 0 <= {self.delay_min=} <= {self.delay_max=}!")

    def partitioned(self, t, a, b):
        '''
        Does an active partition separate a and b at tick t?
        '''
        return any(p.active(t) and p.separates(a, b) for p in self.partitions)


def inject(env, fm, rng, now):
    '''
    Decides what the network does to one envelope. The draws happen in a fixed
    order: drop, delay, duplicate, duplicate delay. A dropped envelope only
    consumes the drop draw.

    :param env: the envelope (passed through untouched)
    :param Fault_Model fm: the fault model
    :param SplitMix64 rng: the run's generator
    :param int now: the current tick
    :returns list((int, env)): zero, one or two (delivery tick, envelope) pairs; a second pair is the duplicate
    '''
    if rng.chance(fm.drop_prob):
        return []
    span = fm.delay_max - fm.delay_min + 1
    out = [(now + fm.delay_min + rng.below(span), env)]
    if rng.chance(fm.dup_prob):
        out.append((now + fm.delay_min + rng.below(span), env))
    return out


def state_bytes(store, key, tag):
    current = store.get(key)
    return CRDT.encode(current if current is not None else CRDT.bottom(tag))


def check_convergence(stores, types):
    '''
    Have all stores reached the same state?
    Stored values are canonical, so equal values have equal canonical bytes.

    :param list(CRDT_Store) stores: one store per node
    :param dict types: key -> Crdt_Type of every declared variable (absent means bottom)
    :returns bool: True iff every key has identical canonical bytes on every node
    '''
    for key in sorted(types):
        bottom = CRDT.bottom(types[key])
        expected = None
        for store in stores:
            current = store.get(key)
            current = bottom if current is None else current
            if expected is None:
                expected = current
            elif current != expected:
                return False
    return True


@dataclass
class Metrics(object):
    converged: bool = False
    convergence_tick: int = None
    envelopes_sent: int = 0
    envelopes_delivered: int = 0
    envelopes_dropped: int = 0
    envelopes_duplicated: int = 0
    envelopes_in_flight: int = 0
    envelopes_corrupt: int = 0
    # Framed bytes of every original envelope
    bytes_sent: int = 0
    # node -> key -> FNV-1a 64 of the canonical state
    digests: dict = field(default_factory=dict)
    # key -> FNV-1a 64 of the canonical query result on the first node
    value_digests: dict = field(default_factory=dict)
    values: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)


class Simulator(object):

    """
    Runs one scenario. Use run() once per instance.
    """
    def __init__(self, scenario, merge=CRDT.merge, audit=False, event_log=False, registry=None):
        '''
        :param Scenario scenario: a validated scenario
        :param merge: the join every store uses
        :param bool audit: check reception monotonicity, the EveryN bound
            and the provenance of every final element
        :param bool event_log: keep one tab-separated line per event in self.log
        :param Function_Registry registry: functions dataflow specs may name
        '''
        self.scenario = scenario
        self.audit = audit
        self.log = [] if event_log else None
        self.violations = []
        self.metrics = Metrics()
        self.queue = Event_Queue()
        self.rng = SplitMix64(scenario.seed)
        self.faults = scenario.faults
        self.now = 0

        nodes = list(range(scenario.nodes))
        self.membership = Static_Membership(scenario.topology, nodes)
        self.replicas = []
        for node in nodes:
            replica = Replica(
                node, self.membership, scenario.policy, scenario.anti_entropy_period,
                store=CRDT_Store(merge=merge), seed=scenario.seed, merge=merge, registry=registry,
            )
            for variable in scenario.variables:
                replica.declare(variable.key, variable.kind, variable.capabilities)
            for spec in scenario.dataflow:
                replica.register_dataflow(spec, active=(node == spec.owner))
            if audit:
                replica.mutation_observers.append(self._record_provenance)
                replica.merge_observers.append(self._check_monotone)
            self.replicas.append(replica)
        self.types = {key: v.type_tag for key, v in self.replicas[0].variables.items()}

        # key -> what trace and dataflow mutations introduced
        self._introduced = defaultdict(set)
        self._counted = defaultdict(int)

    def _record_provenance(self, node, key, mutation, state):
        tag = CRDT.type_of(state)
        if tag == CRDT.Crdt_Type.G_COUNTER:
            self._counted[(key, 'p', node)] += mutation.amount
        elif tag == CRDT.Crdt_Type.PN_COUNTER:
            self._counted[(key, 'p' if mutation.op == 'increment' else 'n', node)] += mutation.amount
        elif tag == CRDT.Crdt_Type.G_SET:
            self._introduced[key].add(mutation.element)
        elif tag == CRDT.Crdt_Type.OR_SET:
            if mutation.op == 'add':
                for dot in state.as_dict().get(mutation.element, ()):
                    self._introduced[key].add((mutation.element, dot))
        else:
            self._introduced[key].add((state.value, state.timestamp, state.writer))

    def _check_monotone(self, node, key, before, after):
        if CRDT.compare(before, after) not in (CRDT.Ordering.LESS, CRDT.Ordering.EQUAL):
            self._violation(f"node {node} {key!r} went backwards at tick {self.now}")

    def _violation(self, text):
        logger.error("Audit: %s", text)
        self.violations.append(text)

    def _check_provenance(self):
        for replica in self.replicas:
            for key in sorted(self.types):
                state = replica.state(key)
                tag = CRDT.type_of(state)
                if tag in (CRDT.Crdt_Type.G_COUNTER, CRDT.Crdt_Type.PN_COUNTER):
                    parts = [('p', state)] if tag == CRDT.Crdt_Type.G_COUNTER else [('p', state.p), ('n', state.n)]
                    unexplained = [
                        (side, actor) for side, counter in parts for actor, count in counter.counts
                        if count > self._counted[(key, side, actor)]
                    ]
                elif tag == CRDT.Crdt_Type.G_SET:
                    unexplained = sorted(state.elements - self._introduced[key])
                elif tag == CRDT.Crdt_Type.OR_SET:
                    unexplained = [(e, d) for e, dots in state.entries for d in sorted(dots) if (e, d) not in self._introduced[key]]
                else:
                    unexplained = []
                    if state.timestamp and (state.value, state.timestamp, state.writer) not in self._introduced[key]:
                        unexplained = [state.value]
                if unexplained:
                    self._violation(f"node {replica.node_id} {key!r} holds data no mutation introduced: {unexplained}")

    def _send(self, envelopes):
        for env in envelopes:
            frame = encode_frame(env)
            self.metrics.envelopes_sent += 1
            self.metrics.bytes_sent += len(frame)
            if self.faults.partitioned(self.now, env.sender, env.receiver):
                self.metrics.envelopes_dropped += 1
                continue
            deliveries = inject(env, self.faults, self.rng, self.now)
            if not deliveries:
                self.metrics.envelopes_dropped += 1
                continue
            for i, (tick, _) in enumerate(deliveries):
                if i:
                    self.metrics.envelopes_duplicated += 1
                self.queue.push(tick, Event_Kind.DELIVER, env.receiver, frame, duplicate=bool(i))

    def _deliver(self, event):
        env = decode_frame(event.payload)
        if self.faults.partitioned(self.now, env.sender, env.receiver):
            if not event.duplicate:
                self.metrics.envelopes_dropped += 1
            return env, False
        if not event.duplicate:
            self.metrics.envelopes_delivered += 1
        self._send(self.replicas[env.receiver].on_receive(env))
        return env, True

    def _handle(self, event):
        source, target, key = '-', '-', '-'
        kind = event.kind.value
        if event.kind == Event_Kind.DELIVER:
            try:
                env, delivered = self._deliver(event)
                source, target, key = env.sender, env.receiver, env.key or '-'
                kind = env.kind.name.lower() if delivered else 'dropped'
            except Corrupt_Envelope as e:
                self.metrics.envelopes_corrupt += 1
                logger.warning("Dropped a corrupt frame at tick %d: %s", self.now, e)
        elif event.kind == Event_Kind.TICK:
            source = event.node
            self._send(self.replicas[event.node].on_tick())
        elif event.kind == Event_Kind.LOCAL_OP:
            op = event.payload
            source, key = op.node, op.key
            _, out = self.replicas[op.node].on_local_update(op.key, op.mutation)
            self._send(out)
        else:
            self.membership.swap(event.payload)

        logger.debug("t=%d seq=%d %s %s -> %s %s", event.time, event.seq, kind, source, target, key)
        if self.log is not None:
            self.log.append(f"{event.time}\t{event.seq}\t{kind}\t{source}\t{target}\t{key}")
        if self.audit:
            for replica in self.replicas:
                if isinstance(replica.policy, Every_N) and any(c >= replica.policy.n for c in replica.pending.values()):
                    self._violation(f"node {replica.node_id} holds {replica.policy.n} unsent changes at tick {self.now}")

    def run(self):
        '''
        Runs the scenario until every node holds the same state or the
        duration runs out. Convergence is checked at the end of each tick once
        every trace operation has run.

        :returns Metrics: the outcome
        '''
        scenario = self.scenario
        ops = defaultdict(list)
        for op in scenario.trace:
            ops[op.tick].append(op)
        swaps = defaultdict(list)
        for swap in scenario.topology_swaps:
            swaps[swap.tick].append(swap)
        last_op = max((op.tick for op in scenario.trace), default=0)
        stores = [replica.store for replica in self.replicas]
        logger.info("Running %s: %d nodes, %d operations, seed %d", scenario.name, scenario.nodes, len(scenario.trace), scenario.seed)

        for t in range(1, scenario.duration + 1):
            self.now = t
            for swap in swaps[t]:
                self.queue.push(t, Event_Kind.TOPOLOGY_SWAP, payload=swap.topology)
            for replica in self.replicas:
                self.queue.push(t, Event_Kind.TICK, replica.node_id)
            for op in ops[t]:
                self.queue.push(t, Event_Kind.LOCAL_OP, op.node, op)
            while self.queue and self.queue.peek().time <= t:
                self._handle(self.queue.pop())

            if t >= last_op and check_convergence(stores, self.types):
                self.metrics.converged = True
                self.metrics.convergence_tick = t
                logger.info("%s converged at tick %d", scenario.name, t)
                break

        if not self.metrics.converged:
            logger.info("%s did not converge in %d ticks", scenario.name, scenario.duration)
        self.metrics.envelopes_in_flight = sum(
            1 for event in self.queue.events() if event.kind == Event_Kind.DELIVER and not event.duplicate
        )
        self.metrics.envelopes_corrupt += sum(replica.corrupt_envelopes for replica in self.replicas)
        self._summarize()
        if self.audit:
            self._check_provenance()
        return self.metrics

    def _summarize(self):
        first = self.replicas[0]
        for replica in self.replicas:
            self.metrics.digests[str(replica.node_id)] = {
                key: Codec.hex_digest(state_bytes(replica.store, key, self.types[key])) for key in sorted(self.types)
            }
        for key in sorted(self.types):
            result = first.value(key)
            self.metrics.value_digests[key] = Codec.hex_digest(CRDT.encode_query(result))
            self.metrics.values[key] = CRDT.render_query(result)


def run(scenario, **kwargs):
    '''
    Runs a scenario and returns its Metrics. Keyword arguments go to Simulator.
    '''
    return Simulator(scenario, **kwargs).run()
