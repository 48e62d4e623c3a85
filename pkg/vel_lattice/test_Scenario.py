'''
Scenario parsing and validation, overrides and trace generation.

@author: Alfredo Velasco
'''

import json
from collections import Counter

import pytest
from tqdm import trange

from vel_lattice import CRDT
from vel_lattice.CRDT import Crdt_Type
from vel_lattice.Replica import Every_N, Immediate, Interval
from vel_lattice.Scenario import (Invalid_Scenario, Trace_Generator, Violation, bundled_scenarios, canonical_json,
                                  generate_trace, load, parse, policy_document, read_document, topology_document,
                                  with_overrides)
from vel_lattice.Topology import Client_Server, Full_Mesh, Peer_To_Peer


def minimal(**fields):
    document = {
        'nodes': 3,
        'variables': [
            {'key': 'set', 'kind': 'collection', 'capabilities': ['add', 'remove', 'read']},
            {'key': 'grow', 'kind': 'collection', 'capabilities': ['add', 'read']},
            {'key': 'count', 'kind': 'counter', 'capabilities': ['increment', 'decrement', 'read']},
            {'key': 'reg', 'kind': 'register', 'capabilities': ['assign', 'read']},
        ],
        'duration': 50,
    }
    document.update(fields)
    return document


def violations_of(document):
    with pytest.raises(Invalid_Scenario) as info:
        parse(document)
    return [str(v) for v in info.value.violations]


def test_bundled_scenarios_validate():
    paths = bundled_scenarios()
    assert len(paths) >= 10
    for path in paths:
        scenario = load(path)
        assert scenario.name
        assert scenario.hash() == load(path).hash(), path
        assert len(scenario.hash()) == 16


def test_defaults():
    scenario = parse(minimal())
    assert scenario.name == 'scenario'
    assert scenario.topology == Full_Mesh()
    assert scenario.policy == Immediate()
    assert scenario.anti_entropy_period == 10
    assert scenario.seed == 0
    assert scenario.trace == ()
    assert [v.key for v in scenario.variables] == ['count', 'grow', 'reg', 'set']
    tags = {v.key: v.type_tag for v in scenario.variables}
    assert tags == {'count': Crdt_Type.PN_COUNTER, 'grow': Crdt_Type.G_SET, 'reg': Crdt_Type.LWW_REGISTER,
                    'set': Crdt_Type.OR_SET}


def test_sections():
    scenario = parse(minimal(
        name='full',
        topology={'kind': 'peer_to_peer', 'fanout': 2, 'seed': 4},
        sync_policy={'kind': 'every_n', 'n': 3},
        faults={'drop_prob': 0.5, 'delay_max': 4,
                'partitions': [{'from_tick': 1, 'to_tick': 5, 'side_a': [0], 'side_b': [1, 2]}]},
        topology_swaps=[{'tick': 30, 'topology': {'kind': 'client_server', 'server': 2}},
                        {'tick': 10, 'topology': {'kind': 'full_mesh'}}],
        trace={'ops': [
            {'tick': 9, 'node': 2, 'key': 'reg', 'op': 'assign', 'value': 'v'},
            {'tick': 3, 'node': 0, 'key': 'set', 'op': 'add', 'element': 'x'},
            {'tick': 3, 'node': 1, 'key': 'count', 'op': 'decrement', 'amount': 2},
        ]},
    ))
    assert scenario.name == 'full'
    assert scenario.topology == Peer_To_Peer(2, 4)
    assert scenario.policy == Every_N(3)
    assert scenario.faults.drop_prob == 0.5
    assert (scenario.faults.delay_min, scenario.faults.delay_max) == (0, 4)
    assert scenario.faults.partitions[0].side_b == frozenset([1, 2])
    assert [s.tick for s in scenario.topology_swaps] == [10, 30]
    assert scenario.topology_swaps[1].topology == Client_Server(2)
    assert [(op.tick, op.node, op.key) for op in scenario.trace] == [(3, 0, 'set'), (3, 1, 'count'), (9, 2, 'reg')]
    assert scenario.trace[1].mutation == CRDT.Mutation.decrement(2)
    assert scenario.trace[0].mutation.element == b'x'

    assert parse(minimal(sync_policy={'kind': 'interval', 'ticks': 5})).policy == Interval(5)


def test_violations():
    assert violations_of(minimal(topology={'kind': 'peer_to_peer', 'fanout': 3}))[0].startswith('topology.fanout:')
    assert violations_of(minimal(topology={'kind': 'ring'}))[0].startswith('topology.kind:')
    assert violations_of(minimal(sync_policy={'kind': 'every_n', 'n': 0}))[0].startswith('sync_policy.n:')
    assert violations_of(minimal(nodes=0))[0].startswith('scenario.nodes:')
    assert violations_of(minimal(faults={'drop_prob': 2}))[0].startswith('faults.drop_prob:')
    assert violations_of(minimal(faults={'delay_min': 5, 'delay_max': 2}))[0].startswith('faults.delay_max:')

    found = violations_of(minimal(faults={'partitions': [{'from_tick': 1, 'to_tick': 3, 'side_a': [0], 'side_b': [9]}]}))
    assert found[0].startswith('faults.partitions[0].side_a:')

    found = violations_of(minimal(variables=[
        {'key': 'a', 'kind': 'counter', 'capabilities': ['add']},
        {'key': 'b', 'kind': 'collection', 'capabilities': ['remove']},
        {'key': 'c', 'kind': 'box', 'capabilities': ['read']},
        {'key': '', 'kind': 'counter', 'capabilities': ['increment']},
    ]))
    assert [f.split(':')[0] for f in found] == ['variables[0].capabilities', 'variables[1].capabilities',
                                                'variables[2].kind', 'variables[3].key']


def test_every_violation_is_reported():
    document = minimal(nodes='three', duration=-1, sync_policy={'kind': 'sometimes'})
    del document['variables']
    found = violations_of(document)
    fields = {f.split(':')[0] for f in found}
    assert {'scenario.nodes', 'scenario.duration', 'scenario.variables', 'sync_policy.kind'} <= fields


def test_trace_violations():
    ops = [
        {'tick': 0, 'node': 0, 'key': 'set', 'op': 'add', 'element': 'x'},
        {'tick': 1, 'node': 3, 'key': 'set', 'op': 'add', 'element': 'x'},
        {'tick': 1, 'node': 0, 'key': 'nope', 'op': 'add', 'element': 'x'},
        {'tick': 1, 'node': 0, 'key': 'grow', 'op': 'remove', 'element': 'x'},
        {'tick': 1, 'node': 0, 'key': 'set', 'op': 'increment'},
        {'tick': 1, 'node': 0, 'key': 'set', 'op': 'read'},
        {'tick': 1, 'node': 0, 'key': 'set', 'op': 'add'},
    ]
    found = violations_of(minimal(trace={'ops': ops}))
    assert [f.split(':')[0] for f in found] == [
        'trace.ops[0].tick', 'trace.ops[1].node', 'trace.ops[2].key', 'trace.ops[3].op', 'trace.ops[4].op',
        'trace.ops[5].op', 'trace.ops[6].element',
    ]
    assert 'G_Set' in found[3]

    assert violations_of(minimal(trace={}))[0].startswith('trace.ops:')
    assert violations_of(minimal(trace={'ops': [], 'generate': {}}))[0].startswith('trace.ops:')


def test_dataflow_violations():
    def spec(**fields):
        base = {'id': 'f', 'combinator': 'filter', 'fn': 'even', 'sources': ['set'], 'sink': 'evens'}
        base.update(fields)
        return minimal(dataflow=[base])

    assert parse(spec()).dataflow[0].sink == 'evens'
    assert violations_of(spec(sources=['ghost']))[0].startswith('dataflow[0].sources:')
    assert violations_of(spec(sources=['count']))[0].startswith('dataflow[0].sources:')
    assert violations_of(spec(sink='set'))[0].startswith('dataflow[0].sink:')
    assert violations_of(spec(sink='grow'))[0].startswith('dataflow[0].sink:')
    assert violations_of(spec(fn='prime'))[0].startswith('dataflow[0].fn:')
    assert violations_of(spec(combinator='join'))[0].startswith('dataflow[0].combinator:')
    assert violations_of(spec(owner=7))[0].startswith('dataflow[0].owner:')

    # Sinks are not trace variables
    sink_write = minimal(dataflow=spec()['dataflow'],
                         trace={'ops': [{'tick': 1, 'node': 0, 'key': 'evens', 'op': 'add', 'element': '2'}]})
    assert violations_of(sink_write)[0].startswith('trace.ops[0].key:')
    scenario = parse(spec())
    assert 'evens' not in [v.key for v in scenario.variables]

    twins = spec()['dataflow'] + [{'id': 'f', 'combinator': 'map', 'fn': 'double', 'sources': ['set'], 'sink': 'twice'}]
    found = violations_of(minimal(dataflow=twins))
    assert [f.split(':')[0] for f in found] == ['dataflow[1].id']


def test_values_of_the_wrong_shape():
    found = violations_of(minimal(dataflow=[
        {'id': 'f', 'combinator': 'filter', 'fn': 'even', 'sources': [{'k': 1}], 'sink': 'evens'},
    ]))
    assert found[0].startswith('dataflow[0].sources:')

    found = violations_of(minimal(trace={'generate': {'keys': [['set']]}}))
    assert found[0].startswith('trace.generate.keys:')

    found = violations_of(minimal(variables=[{'key': 'a', 'kind': 'counter', 'capabilities': [['increment']]}]))
    assert found[0].startswith('variables[0].capabilities:')

    partition = {'from_tick': 1, 'to_tick': 3, 'side_a': [{'n': 0}], 'side_b': [[1]]}
    found = violations_of(minimal(nodes='many', faults={'partitions': [partition]}))
    assert 'faults.partitions[0].side_a' in [f.split(':')[0] for f in found]


def test_read_document(tmp_path):
    path = tmp_path / 'broken.json'
    path.write_text('{"nodes": ')
    with pytest.raises(Invalid_Scenario) as info:
        read_document(path)
    assert info.value.violations[0].field == 'document'
    path = tmp_path / 'latin1.json'
    path.write_bytes(b'{"nodes": "\xff"}')
    with pytest.raises(Invalid_Scenario) as info:
        read_document(path)
    assert 'UTF-8' in str(info.value)
    with pytest.raises(OSError):
        read_document(tmp_path / 'missing.json')

    path = tmp_path / 'named_by_file.json'
    path.write_text(json.dumps(minimal()))
    assert load(path).name == 'named_by_file'
    assert load(path, seed=9).seed == 9


def test_overrides():
    document = minimal(seed=4)
    changed = with_overrides(document, seed=5, policy='every_n:3', topology='peer_to_peer:2')
    assert 'sync_policy' not in document
    assert document['seed'] == 4
    assert changed['seed'] == 5
    assert changed['sync_policy'] == {'kind': 'every_n', 'n': 3}
    assert changed['topology'] == {'kind': 'peer_to_peer', 'fanout': 2, 'seed': 5}

    assert policy_document('immediate') == {'kind': 'immediate'}
    assert policy_document('interval:5') == {'kind': 'interval', 'ticks': 5}
    assert topology_document('client_server') == {'kind': 'client_server', 'server': 0}
    assert topology_document('full_mesh') == {'kind': 'full_mesh'}
    for bad in ['every_n', 'interval:x', 'sometimes', 'immediate:3']:
        with pytest.raises(Invalid_Scenario):
            policy_document(bad)
    for bad in ['ring', 'peer_to_peer', 'client_server:x']:
        with pytest.raises(Invalid_Scenario):
            topology_document(bad)


def test_canonical_bytes():
    a = parse({'duration': 5, 'nodes': 1, 'variables': []})
    b = parse({'variables': [], 'nodes': 1, 'duration': 5})
    assert a.canonical_bytes() == b'{"duration":5,"nodes":1,"variables":[]}'
    assert a.hash() == b.hash()
    assert canonical_json({'b': [1, 2], 'a': 'é'}) == '{"a":"é","b":[1,2]}'.encode('utf-8')


def test_generate_trace():
    variables = {v.key: v for v in parse(minimal()).variables}
    keys = tuple(sorted(variables))
    for x in trange(200, desc="Traces"):
        gen = Trace_Generator(seed=x, ops_count=100, span=20, keys=keys, universe=5)
        ops = generate_trace(gen, 3, variables)
        assert ops == generate_trace(gen, 3, variables), f"{x=}"
        assert [op.tick for op in ops] == sorted(op.tick for op in ops), f"{x=}"
        assert all(1 <= op.tick <= 20 for op in ops), f"{x=}"

        assigns = Counter((op.key, op.tick) for op in ops if op.mutation.op == 'assign')
        assert all(c == 1 for c in assigns.values()), f"{x=}"
        for op in ops:
            assert op.mutation.capability().value in variables[op.key].capabilities.names(), f"{x=}"
            if op.mutation.op in ('add', 'remove'):
                assert int(op.mutation.element) // 1000 == op.node, f"{x=}"
            assert op.mutation.op != 'remove' or variables[op.key].type_tag == Crdt_Type.OR_SET, f"{x=}"


def test_generate_mix():
    variables = {v.key: v for v in parse(minimal()).variables}
    gen = Trace_Generator(seed=1, ops_count=200, span=50, keys=('set', 'count'), mix={'remove': 0, 'decrement': 0})
    ops = generate_trace(gen, 4, variables)
    assert {op.mutation.op for op in ops} == {'add', 'increment'}

    document = minimal(trace={'generate': {'seed': 2, 'ops_count': 30}})
    scenario = parse(document)
    assert len(scenario.trace) == 30
    assert all(op.tick <= 30 for op in scenario.trace)

    found = violations_of(minimal(trace={'generate': {'keys': ['nope'], 'mix': {'read': 1}}}))
    assert [f.split(':')[0] for f in found] == ['trace.generate.keys', 'trace.generate.mix']


def test_violation_text():
    assert str(Violation('topology', 'fanout', 'too big')) == 'topology.fanout: too big'
    error = Invalid_Scenario([Violation('a', 'b', 'c'), Violation('d', 'e', 'f')])
    assert str(error) == 'a.b: c; d.e: f'


def main():
    test_bundled_scenarios_validate()
    test_defaults()
    test_sections()
    test_violations()
    test_trace_violations()
    test_overrides()
    test_generate_trace()


if __name__ == '__main__':
    main()
