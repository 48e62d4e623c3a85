'''
Overlay topologies and the membership contract.
The topology is a runtime parameter: the same program runs as a client/server
star, a full mesh, or a seeded peer-to-peer partial view, and the replication
engine asks the membership service for its neighbours every time it sends.

@author: Alfredo Velasco
'''

import logging
import os
from abc import ABC, abstractmethod
from collections import deque
from dataclasses import dataclass

import graphviz

from .SplitMix64 import SplitMix64

logger = logging.getLogger(__name__)

MAX_SAMPLING_ATTEMPTS = 10000


class Topology_Error(Exception):
    """Base class of the topology errors"""


class Too_Few_Nodes(Topology_Error):
    pass


class Fanout_Too_Large(Topology_Error):
    pass


class Invalid_Topology(Topology_Error):
    pass


class Unknown_Node(Topology_Error, KeyError):
    pass


@dataclass(frozen=True)
class Client_Server(object):
    """A star: every client talks to the server only"""
    server: int = 0

    name = 'client_server'


@dataclass(frozen=True)
class Full_Mesh(object):
    """Every node talks to every other node"""

    name = 'full_mesh'


@dataclass(frozen=True)
class Peer_To_Peer(object):
    """Every node talks to a seeded sample of fanout other nodes"""
    fanout: int = 2
    seed: int = 0

    name = 'peer_to_peer'


def _is_connected(nodes, views):
    '''
    Is the overlay connected once its edges are taken as undirected?
    '''
    adjacent = {node: set() for node in nodes}
    for node, view in views.items():
        for other in view:
            adjacent[node].add(other)
            adjacent[other].add(node)

    start = nodes[0]
    seen = {start}
    queue = deque([start])
    while queue:
        curr = queue.popleft()
        for other in adjacent[curr]:
            if other not in seen:
                seen.add(other)
                queue.append(other)
    return len(seen) == len(nodes)


def _sample_views(nodes, fanout, seed):
    rng = SplitMix64(seed)
    views = {}
    for node in nodes:
        others = [other for other in nodes if other != node]
        # Partial Fisher-Yates: the first fanout slots become the view
        for i in range(fanout):
            j = i + rng.below(len(others) - i)
            others[i], others[j] = others[j], others[i]
        views[node] = frozenset(others[:fanout])
    return views


def build_topology(kind, nodes):
    '''
    Builds every node's membership view

    :param kind: Client_Server, Full_Mesh or Peer_To_Peer
    :param list(int) nodes: the node ids
    :returns dict: node id -> frozenset of neighbour ids
    :raises Too_Few_Nodes: if there are fewer than 2 nodes
    :raises Fanout_Too_Large: if a peer-to-peer fanout is not below the node count
    :raises Invalid_Topology: if the server is not a node, the fanout is not positive, or no connected sample was found
    '''
    nodes = sorted(set(nodes))
    if len(nodes) < 2:
        raise Too_Few_Nodes(f"A topology needs at least 2 nodes but got {nodes}!")

    if isinstance(kind, Client_Server):
        if kind.server not in nodes:
            raise Invalid_Topology(f"{kind.server=} is not one of the nodes {nodes}!")
        views = {node: frozenset([kind.server]) for node in nodes if node != kind.server}
        views[kind.server] = frozenset(node for node in nodes if node != kind.server)
        return {node: views[node] for node in nodes}

    if isinstance(kind, Full_Mesh):
        return {node: frozenset(other for other in nodes if other != node) for node in nodes}

    if isinstance(kind, Peer_To_Peer):
        if kind.fanout < 1:
            raise Invalid_Topology(f"{kind.fanout=} must be positive!")
        if kind.fanout >= len(nodes):
            raise Fanout_Too_Large(f"{kind.fanout=} must be less than the node count {len(nodes)}!")
        for attempt in range(MAX_SAMPLING_ATTEMPTS):
            views = _sample_views(nodes, kind.fanout, kind.seed + attempt)
            if _is_connected(nodes, views):
                if attempt:
                    logger.debug("Peer sample connected after %d resamples", attempt)
                return views
        raise Invalid_Topology(f"No connected overlay after {MAX_SAMPLING_ATTEMPTS} samples of {kind}!")

    raise Invalid_Topology(f"{kind=} is not a topology!")


class Membership_Service(ABC):
    """
    The external service the runtime asks for neighbours
    """

    @abstractmethod
    def lookup(self, node):
        '''
        :returns frozenset: the neighbours of node
        :raises Unknown_Node: if node is not a member
        '''

    @abstractmethod
    def members(self):
        '''
        :returns list(int): every member in ascending order
        '''


class Static_Membership(Membership_Service):

    """Views computed by build_topology, swappable at runtime"""
    def __init__(self, kind, nodes):
        '''
        :param kind: the initial topology
        :param list(int) nodes: the members
        '''
        self._nodes = sorted(set(nodes))
        self.swap(kind)

    def swap(self, kind):
        '''
        Replaces the overlay. The next lookup sees the new views.
        '''
        if len(self._nodes) < 2:
            # One node has nobody to talk to
            self._views = {node: frozenset() for node in self._nodes}
        else:
            self._views = build_topology(kind, self._nodes)
        self.kind = kind
        logger.info("Membership now %s over %d nodes", kind, len(self._nodes))

    def lookup(self, node):
        try:
            return self._views[node]
        except KeyError:
            raise Unknown_Node(f"{node=} is not a member of {self._nodes}!")

    def members(self):
        return list(self._nodes)

    def views(self):
        return dict(self._views)


def to_dot(views, f_name=None):
    '''
    Returns the overlay as a graphviz Digraph, one edge per view entry.
    If f_name is given, the DOT source is saved there as well.

    :param dict views: node -> neighbours
    :param str f_name: where to save the DOT source
    :returns graphviz.Digraph: the overlay
    '''
    filen = None
    if f_name is not None:
        filen, _ = os.path.splitext(f_name)

    dot = graphviz.Digraph(
        "Overlay",
        filename=filen,
        node_attr={"fontname": "Helvetica,Arial,sans-serif"},
    )
    for node in sorted(views):
        dot.node(f"n{node}", shape="circle", label=f"{node}")
    for node in sorted(views):
        for other in sorted(views[node]):
            dot.edge(f"n{node}", f"n{other}", color="blue")

    if f_name is not None:
        dot.save(f_name)
    return dot
