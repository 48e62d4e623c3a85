'''
Canonical binary primitives shared by the CRDT encoding, the store snapshot
format and the wire framing.
All integers are big-endian and unsigned.

@author: Alfredo Velasco
'''

import struct

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
MASK_64 = 0xFFFFFFFFFFFFFFFF

_U8 = struct.Struct('>B')
_U32 = struct.Struct('>I')
_U64 = struct.Struct('>Q')


class Decode_Error(Exception):
    """Raised when canonical bytes are truncated or malformed"""


def fnv1a_64(data):
    '''
    Returns the FNV-1a 64 hash of data

    :param bytes data: the bytes to hash
    :returns int: the 64-bit hash
    '''
    h = FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & MASK_64
    return h


def hex_digest(data):
    '''
    Returns the FNV-1a 64 hash of data as 16 lowercase hex digits
    '''
    return f"{fnv1a_64(data):016x}"


def u8(n):
    return _U8.pack(n)


def u32(n):
    return _U32.pack(n)


def u64(n):
    if n < 0 or n > MASK_64:
        raise ValueError(f"{n=} does not fit into 64 unsigned bits!")
    return _U64.pack(n)


def blob(data):
    '''
    Returns data prefixed by its 4-byte length
    '''
    return _U32.pack(len(data)) + bytes(data)


def short_blob(data):
    '''
    Returns data prefixed by its 1-byte length

    :raises ValueError: if data is longer than 255 bytes
    '''
    if len(data) > 255:
        raise ValueError(f"{len(data)=} is too long for a 1-byte length prefix!")
    return _U8.pack(len(data)) + bytes(data)


class Byte_Reader(object):
    """A cursor over canonical bytes"""

    def __init__(self, data):
        self.data = bytes(data)
        self.pos = 0

    def _take(self, n):
        if n < 0 or self.pos + n > len(self.data):
            raise Decode_Error(f"Wanted {n} bytes at offset {self.pos} but only {len(self.data) - self.pos} remain!")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u8(self):
        return _U8.unpack(self._take(1))[0]

    def u32(self):
        return _U32.unpack(self._take(4))[0]

    def u64(self):
        return _U64.unpack(self._take(8))[0]

    def blob(self):
        return self._take(self.u32())

    def short_blob(self):
        return self._take(self.u8())

    def raw(self, n):
        return self._take(n)

    def remaining(self):
        return len(self.data) - self.pos

    def expect_end(self):
        '''
        :raises Decode_Error: if there are unread bytes
        '''
        if self.remaining() != 0:
            raise Decode_Error(f"{self.remaining()} trailing bytes after offset {self.pos}!")
