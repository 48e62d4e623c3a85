'''
The simulator's event queue: a binomial heap of events ordered by (time, seq)
https://en.wikipedia.org/wiki/Binomial_heap

@author: Alfredo Velasco
'''

from dataclasses import dataclass, field
from enum import Enum


class Event_Kind(Enum):
    DELIVER = 'deliver'
    TICK = 'tick'
    LOCAL_OP = 'local_op'
    TOPOLOGY_SWAP = 'topology_swap'


@dataclass(order=True, frozen=True)
class Sim_Event(object):
    """
    One scheduled event. Only (time, seq) take part in the ordering.
    """

    time: int
    seq: int
    kind: Event_Kind = field(compare=False, default=Event_Kind.TICK)
    # The node a tick or local operation belongs to
    node: int = field(compare=False, default=None)
    # Deliver: the framed envelope; local op: the trace entry; swap: the topology
    payload: object = field(compare=False, default=None)
    # Deliver: is this the duplicate copy of an envelope?
    duplicate: bool = field(compare=False, default=False)


@dataclass
class _Tree(object):
    event: Sim_Event = None
    children: list = field(default_factory=list)

    def get_k(self):
        '''
        Returns the order of the tree

        :returns int k: the order of the tree
        '''
        return len(self.children)

    def merge(self, other):
        '''
        Links two trees of the same order and returns the merged result

        :param _Tree other: The other tree we'll merge
        :returns _Tree result: the tree whose root comes first
        '''
        if self.get_k() != other.get_k():
            raise Exception(f"The trees must have the same k! Their ks are {self.get_k()} and {other.get_k()}")

        if self.event < other.event:
            self.children.append(other)
            return self
        other.children.append(self)
        return other


class Event_Queue(object):

    """Hands out events in strict (time, seq) order and assigns seq at enqueue"""
    def __init__(self):
        self._forest = []
        self._first = None
        self._n = 0
        self._next_seq = 0

    def _insert_tree(self, curr):
        '''
        Inserts a new tree into the forest, linking trees of equal order

        :param _Tree curr: the tree to insert
        :raises Exception: if curr is not a _Tree
        '''
        if not isinstance(curr, _Tree):
            raise Exception(f"curr must be a tree but is instead {type(curr)}!")

        k = curr.get_k()
        while k < len(self._forest) and self._forest[k] is not None:
            curr = curr.merge(self._forest[k])
            self._forest[k] = None
            k = curr.get_k()

        while k >= len(self._forest):
            self._forest.append(None)
        self._forest[k] = curr
        return curr

    def push(self, time, kind, node=None, payload=None, duplicate=False):
        '''
        Schedules an event

        :param int time: the tick the event happens at
        :returns Sim_Event: the event with its assigned seq
        '''
        event = Sim_Event(time, self._next_seq, kind, node, payload, duplicate)
        self._next_seq += 1
        self._n += 1

        curr = self._insert_tree(_Tree(event))
        if self._first is None or curr.event <= self._first.event:
            self._first = curr
        return event

    def peek(self):
        '''
        Returns the next event without removing it

        :raises Exception: if the queue is empty
        '''
        if self._n <= 0:
            raise Exception("Cannot peek into an empty Event_Queue!")
        return self._first.event

    def pop(self):
        '''
        Removes and returns the next event

        :raises Exception: if the queue is empty
        '''
        if self._n <= 0:
            raise Exception("Cannot pop an empty Event_Queue!")

        event = self._first.event
        self._n -= 1
        self._forest[self._first.get_k()] = None
        children = self._first.children
        self._first = None

        while children:
            self._insert_tree(children.pop())

        for tree in self._forest:
            if tree is not None and (self._first is None or tree.event < self._first.event):
                self._first = tree
        return event

    def events(self):
        '''
        Yields every queued event in no particular order
        '''
        stack = [tree for tree in self._forest if tree is not None]
        while stack:
            tree = stack.pop()
            yield tree.event
            stack.extend(tree.children)

    def __len__(self):
        return self._n

    def __bool__(self):
        return self._n > 0
