'''
Pluggable persistence for CRDT variables.
The store merges on every write, so it stays correct on top of a backend that
serves stale reads, reorders writes or replays them.

@author: Alfredo Velasco
'''

import logging
import os
import tempfile
from abc import ABC, abstractmethod
from dataclasses import dataclass

from . import CRDT, Codec
from .Codec import Byte_Reader, Decode_Error
from .SplitMix64 import SplitMix64

logger = logging.getLogger(__name__)

SNAPSHOT_MAGIC = b'LSPSNAP1'


class Store_Error(Exception):
    """Base class of the storage errors"""


class Invalid_Key(Store_Error, ValueError):
    pass


class Type_Mismatch(Store_Error):
    pass


class Backend_Unavailable(Store_Error):
    """The backend could not serve the request; retrying may succeed"""


class Corrupt_Record(Store_Error):
    """A stored record did not decode, so the backend is damaged"""


class Io_Failure(Store_Error):
    pass


class Corrupt_Snapshot(Store_Error):
    pass


@dataclass(frozen=True, order=True)
class Store_Key(object):
    """
    The name of a variable. Non-empty UTF-8, at most 255 bytes, no NUL bytes.
    """

    name: str

    def __post_init__(self):
        if not isinstance(self.name, str):
            raise Invalid_Key(f"{self.name=} must be a str!")
        raw = self.name.encode('utf-8')
        if not raw:
            raise Invalid_Key("A key cannot be empty!")
        if len(raw) > 255:
            raise Invalid_Key(f"{self.name[:16]!r}... is {len(raw)} bytes long but keys hold at most 255!")
        if b'\x00' in raw:
            raise Invalid_Key(f"{self.name!r} contains a NUL byte!")

    @classmethod
    def of(cls, key):
        if isinstance(key, Store_Key):
            return key
        return cls(key)

    def encode(self):
        return self.name.encode('utf-8')


@dataclass(frozen=True)
class Stored_Record(object):
    key: Store_Key
    type_tag: CRDT.Crdt_Type
    # Canonical bytes of the state
    state: bytes
    # Bumped by every put_merge on this node
    revision: int


class Backend(ABC):
    """
    What the store needs from a data store. Read-your-own-writes is not
    required: reads may be stale and writes may be reordered or replayed.
    """

    @abstractmethod
    def read(self, key):
        '''
        :param bytes key: the encoded key
        :returns bytes: the stored bytes, or None
        '''

    @abstractmethod
    def write(self, key, data):
        '''
        :param bytes key: the encoded key
        :param bytes data: the bytes to store
        '''

    @abstractmethod
    def scan(self):
        '''
        :returns list(bytes): every key with stored bytes
        '''


class Memory_Backend(Backend):

    def __init__(self):
        self._data = {}

    def read(self, key):
        return self._data.get(key)

    def write(self, key, data):
        self._data[key] = bytes(data)

    def scan(self):
        return sorted(self._data)


class Adversarial_Backend(Backend):
    """
    A weakly consistent backend for tests. Writes wait in a buffer and land in
    shuffled order, some land twice, reads may return any version ever written
    for the key, and any call may fail with Backend_Unavailable.
    """

    def __init__(self, seed=0, replay_prob=0.3, stale_prob=0.5, fail_prob=0.0, max_buffered=4):
        '''
        :param int seed: seed of the SplitMix64 driving every choice
        :param float replay_prob: chance a landed write is queued to land again later
        :param float stale_prob: chance a read returns an older version
        :param float fail_prob: chance a call raises Backend_Unavailable
        :param int max_buffered: writes held back before some must land
        '''
        self.rng = SplitMix64(seed)
        self.replay_prob = replay_prob
        self.stale_prob = stale_prob
        self.fail_prob = fail_prob
        self.max_buffered = max_buffered
        self._buffer = []
        self._history = {}
        self._landed = {}

    def _maybe_fail(self, what):
        if self.fail_prob > 0 and self.rng.chance(self.fail_prob):
            raise Backend_Unavailable(f"Simulated outage during {what}!")

    def _land_one(self):
        i = self.rng.below(len(self._buffer))
        key, data = self._buffer.pop(i)
        self._landed[key] = data
        if self.rng.chance(self.replay_prob):
            self._buffer.append((key, data))

    def read(self, key):
        self._maybe_fail('read')
        versions = self._history.get(key)
        if not versions:
            return None
        if self.rng.chance(self.stale_prob):
            return versions[self.rng.below(len(versions))]
        return self._landed.get(key)

    def write(self, key, data):
        self._maybe_fail('write')
        data = bytes(data)
        self._history.setdefault(key, []).append(data)
        self._buffer.append((key, data))
        while len(self._buffer) > self.max_buffered:
            self._land_one()

    def settle(self):
        '''
        Lands every buffered write (replays included) in shuffled order
        '''
        while self._buffer:
            self._land_one()

    def scan(self):
        return sorted(self._history)


class CRDT_Store(object):

    """
    The CRDT variables of one node on top of a backend.
    Every write merges with what is already there, and the node keeps its own
    join of everything it has merged so get never goes backwards.
    """
    def __init__(self, backend=None, merge=CRDT.merge, max_retries=3):
        '''
        :param Backend backend: where states are persisted (in-memory by default)
        :param merge: the join used on every write
        :param int max_retries: extra attempts after Backend_Unavailable
        '''
        super(CRDT_Store, self).__init__()
        self.backend = backend if backend is not None else Memory_Backend()
        self.merge = merge
        self.max_retries = max_retries
        self._local = {}
        # The backend bytes last folded into _local, per key
        self._seen = {}
        self._revisions = {}

    def _retry(self, call, what, key):
        attempt = 0
        while True:
            try:
                return call()
            except Backend_Unavailable:
                if attempt >= self.max_retries:
                    raise
                attempt += 1
                logger.warning("Backend %s of %r failed, retry %d of %d", what, key.name, attempt, self.max_retries)

    def get(self, key):
        '''
        Returns the current state of a variable: the join of what this node has
        merged and whatever the backend returns now

        :param key: a str or Store_Key
        :returns: the canonical CRDT value, or None if the variable was never written
        :raises Corrupt_Record: if the backend returns bytes that do not decode
        '''
        key = Store_Key.of(key)
        local = self._local.get(key)
        data = self._retry(lambda: self.backend.read(key.encode()), 'read', key)
        if data is None or data == self._seen.get(key):
            return local
        try:
            stored = CRDT.decode(data)
        except Decode_Error as e:
            raise Corrupt_Record(f"{key.name!r} holds bytes that do not decode: {e}")
        if local is not None:
            if CRDT.type_of(stored) != CRDT.type_of(local):
                raise Corrupt_Record(f"{key.name!r} is {CRDT.type_of(local).name} here but the backend holds {CRDT.type_of(stored).name}!")
            stored = CRDT.canonicalize(self.merge(local, stored))
        self._local[key] = stored
        self._seen[key] = data
        return stored

    def put_merge(self, key, incoming):
        '''
        Merges a state into a variable and persists the result

        :param key: a str or Store_Key
        :param incoming: the CRDT value to merge
        :returns: the new stored value
        :raises Type_Mismatch: if the variable holds a different variant
        :raises Backend_Unavailable: if the backend keeps failing
        '''
        key = Store_Key.of(key)
        existing = self.get(key)
        tag = CRDT.type_of(incoming)
        if existing is None:
            existing = CRDT.bottom(tag)
        elif CRDT.type_of(existing) != tag:
            raise Type_Mismatch(f"{key.name!r} holds {CRDT.type_of(existing).name} but got {tag.name}!")

        merged = CRDT.canonicalize(self.merge(existing, incoming))
        data = CRDT.encode(merged)
        self._retry(lambda: self.backend.write(key.encode(), data), 'write', key)
        self._local[key] = merged
        self._seen[key] = data
        self._revisions[key] = self._revisions.get(key, 0) + 1
        return merged

    def type_of(self, key):
        '''
        Returns the variant stored under a key, or None
        '''
        v = self.get(key)
        return None if v is None else CRDT.type_of(v)

    def record(self, key):
        '''
        Returns the Stored_Record of a variable, or None
        '''
        key = Store_Key.of(key)
        v = self.get(key)
        if v is None:
            return None
        return Stored_Record(key, CRDT.type_of(v), CRDT.encode(v), self._revisions.get(key, 0))

    def scan(self):
        '''
        Returns the names of every stored variable in sorted order
        '''
        names = {key.name for key in self._local}
        for raw in self._retry(self.backend.scan, 'scan', Store_Key('*')):
            names.add(raw.decode('utf-8'))
        return sorted(names)

    def snapshot(self, path):
        '''
        Writes every record to path atomically (temporary file, fsync, rename).

        Layout: magic, u32 record count, then per record u8 key length, key,
        u8 type tag, u32 state length, state; then the FNV-1a 64 of all of it.

        :param path: the file to write
        :raises Io_Failure: if the file cannot be written
        '''
        body = [SNAPSHOT_MAGIC]
        names = self.scan()
        body.append(Codec.u32(len(names)))
        for name in names:
            record = self.record(name)
            body.append(Codec.short_blob(record.key.encode()))
            body.append(Codec.u8(record.type_tag))
            body.append(Codec.blob(record.state))
        data = b''.join(body)
        data += Codec.u64(Codec.fnv1a_64(data))

        path = os.fspath(path)
        directory = os.path.dirname(os.path.abspath(path))
        try:
            fd, tmp = tempfile.mkstemp(prefix='.snapshot-', dir=directory)
            try:
                with os.fdopen(fd, 'wb') as fh:
                    fh.write(data)
                    fh.flush()
                    os.fsync(fh.fileno())
                os.replace(tmp, path)
            except BaseException:
                if os.path.exists(tmp):
                    os.unlink(tmp)
                raise
        except OSError as e:
            raise Io_Failure(f"Cannot write snapshot {path}: {e}")
        logger.info("Wrote %d records to %s", len(names), path)
        return len(names)

    def load(self, path):
        '''
        Merges every record of a snapshot into this store, so loading over live
        state never loses anything

        :param path: a file written by snapshot
        :returns int: the number of records loaded
        :raises Io_Failure: if the file cannot be read
        :raises Corrupt_Snapshot: if the magic, checksum or a record is bad
        '''
        try:
            with open(path, 'rb') as fh:
                data = fh.read()
        except OSError as e:
            raise Io_Failure(f"Cannot read snapshot {path}: {e}")

        if len(data) < len(SNAPSHOT_MAGIC) + 12 or not data.startswith(SNAPSHOT_MAGIC):
            raise Corrupt_Snapshot(f"{path} does not start with {SNAPSHOT_MAGIC!r}!")
        body, checksum = data[:-8], data[-8:]
        if Codec.u64(Codec.fnv1a_64(body)) != checksum:
            raise Corrupt_Snapshot(f"{path} fails its checksum!")

        records = []
        try:
            reader = Byte_Reader(body)
            reader.raw(len(SNAPSHOT_MAGIC))
            for _ in range(reader.u32()):
                key = Store_Key(reader.short_blob().decode('utf-8'))
                tag = reader.u8()
                state = CRDT.decode(reader.blob())
                if CRDT.type_of(state) != tag:
                    raise Corrupt_Snapshot(f"{key.name!r} is tagged {tag} but holds {CRDT.type_of(state).name}!")
                records.append((key, state))
            reader.expect_end()
        except (Decode_Error, Invalid_Key, UnicodeDecodeError) as e:
            raise Corrupt_Snapshot(f"{path} has a bad record: {e}")

        for key, state in records:
            self.put_merge(key, state)
        logger.info("Loaded %d records from %s", len(records), path)
        return len(records)
