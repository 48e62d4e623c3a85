__version__ = '1.0.0'

from .CRDT import (G_Counter, PN_Counter, G_Set, OR_Set, LWW_Register, Mutation, Capability_Set,
                   merge, update, query, compare, encode, decode, select_implementation)
from .Store import CRDT_Store, Memory_Backend, Adversarial_Backend
from .Topology import Client_Server, Full_Mesh, Peer_To_Peer, Static_Membership, build_topology
from .Replica import Replica, Immediate, Every_N, Interval, Envelope, encode_frame, decode_frame
from .Dataflow import Dataflow_Spec, Function_Registry
from .Simulator import Simulator, Fault_Model, Partition, inject, check_convergence
from .Scenario import Scenario, Invalid_Scenario, parse, load
