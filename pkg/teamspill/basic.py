"""
This module contains the exception hierarchy shared by all of teamspill,
 plus the low-level binary reading/writing functions used to store fitted
 propensity models (see `propensity.PropensityFit.write()`).

All multi-byte values are little endian. Integers are stored as base-128
 varints (7 payload bits per byte, low group first, high bit set on every
 byte but the last). Signed integers keep their sign in the lowest bit and
 their magnitude above it (1 -> 2, -1 -> 3).
"""
from typing import IO
import struct
import zlib

import numpy
from numpy.typing import NDArray, ArrayLike


class TeamspillError(Exception):
    """
    Base exception for all errors teamspill raises
    """
    pass


class ConfigError(TeamspillError):
    """
    Invalid configuration or parameter value.
    """
    pass


class InvalidDataError(TeamspillError):
    """
    Malformed or inconsistent data (either input or output).
    """
    pass


class UndefinedLevelError(InvalidDataError):
    """
    An exposure level has no units to estimate from.
    """
    level: int | None

    def __init__(self, message: str, level: int | None = None) -> None:
        super().__init__(message)
        self.level = level


class StratificationError(InvalidDataError):
    """
    A cross-validation fold lost every instance of some category.
    """
    pass


class EOFError(InvalidDataError):
    """
    A stored artifact ended before all of its fields were read.
    """
    pass


class SignedError(InvalidDataError):
    """
    Negative value given where only unsigned values can be stored.
    """
    pass


'''
    Constants
'''
MAGIC_BYTES: bytes = b'%TEAMSPILL-PSM\r\n'

_F64 = struct.Struct('<d')
_U32 = struct.Struct('<I')


'''
    Integers
'''
def _read(stream: IO[bytes], n: int) -> bytes:
    """
    Read exactly `n` bytes.

    Raises:
        EOFError: if the stream ran out first.
    """
    data = stream.read(n)
    if len(data) != n:
        raise EOFError(f'Artifact truncated: wanted {n} bytes, got {len(data)}')
    return data


def read_uint(stream: IO[bytes]) -> int:
    """
    Read a varint (see module docstring).

    Args:
        stream: Source stream.

    Returns:
        Decoded value.
    """
    value = 0
    shift = 0
    while True:
        byte = _read(stream, 1)[0]
        value |= (byte & 0x7f) << shift
        if not byte & 0x80:
            return value
        shift += 7


def write_uint(stream: IO[bytes], n: int) -> int:
    """
    Write a varint (see module docstring).

    Args:
        stream: Destination stream.
        n: Non-negative value.

    Returns:
        Bytes written.

    Raises:
        SignedError: if `n` is negative.
    """
    n = int(n)
    if n < 0:
        raise SignedError(f'Cannot store {n} as an unsigned varint')
    out = bytearray()
    while n > 0x7f:
        out.append(0x80 | (n & 0x7f))
        n >>= 7
    out.append(n)
    return stream.write(out)


def decode_sint(uint: int) -> int:
    return -(uint >> 1) if uint & 1 else uint >> 1


def encode_sint(sint: int) -> int:
    return (-sint << 1) | 1 if sint < 0 else sint << 1


def read_sint(stream: IO[bytes]) -> int:
    return decode_sint(read_uint(stream))


def write_sint(stream: IO[bytes], n: int) -> int:
    return write_uint(stream, encode_sint(int(n)))


def read_u32(stream: IO[bytes]) -> int:
    return _U32.unpack(_read(stream, _U32.size))[0]


def write_u32(stream: IO[bytes], n: int) -> int:
    """
    Write a fixed-width 32-bit unsigned integer.

    Raises:
        SignedError: if `n` is negative.
    """
    if n < 0:
        raise SignedError(f'Cannot store {n} as a u32')
    return stream.write(_U32.pack(n))


'''
    Strings and floats
'''
def read_bstring(stream: IO[bytes]) -> bytes:
    """
    Read a length-prefixed (varint) byte string.
    """
    return _read(stream, read_uint(stream))


def write_bstring(stream: IO[bytes], bstring: bytes) -> int:
    """
    Write a length-prefixed (varint) byte string.

    Returns:
        Bytes written, prefix included.
    """
    return write_uint(stream, len(bstring)) + stream.write(bstring)


def read_float64(stream: IO[bytes]) -> float:
    return _F64.unpack(_read(stream, _F64.size))[0]


def write_float64(stream: IO[bytes], f: float) -> int:
    return stream.write(_F64.pack(float(f)))


'''
    Arrays
'''
def read_f64_array(stream: IO[bytes]) -> NDArray[numpy.float64]:
    """
    Read an n-dimensional array of 64-bit floats from the stream.
    The format is:
    - ndim: uint
    - shape: ndim uints
    - data: little-endian float64 values, C order

    Args:
        stream: Stream to read from.

    Returns:
        The array that was read.
    """
    ndim = read_uint(stream)
    shape = tuple(read_uint(stream) for _ in range(ndim))
    count = int(numpy.prod(shape, dtype=numpy.int64))
    data = _read(stream, 8 * count)
    return numpy.frombuffer(data, dtype='<f8').astype(numpy.float64).reshape(shape)


def write_f64_array(stream: IO[bytes], arr: ArrayLike) -> int:
    """
    Write an n-dimensional array of 64-bit floats to the stream.
    See `read_f64_array()` for format details.

    Args:
        stream: Stream to write to.
        arr: Array to write.

    Returns:
        Bytes written.
    """
    arr = numpy.ascontiguousarray(arr, dtype='<f8')
    size = write_uint(stream, arr.ndim)
    size += sum(write_uint(stream, nn) for nn in arr.shape)
    size += stream.write(arr.tobytes())
    return size


def read_int_array(stream: IO[bytes]) -> NDArray[numpy.int64]:
    """
    Read a 1D array of signed integers (length-prefixed sints) from the stream.
    """
    length = read_uint(stream)
    return numpy.array([read_sint(stream) for _ in range(length)], dtype=numpy.int64)


def write_int_array(stream: IO[bytes], arr: ArrayLike) -> int:
    values = numpy.asarray(arr, dtype=numpy.int64).ravel()
    size = write_uint(stream, values.size)
    size += sum(write_sint(stream, vv) for vv in values.tolist())
    return size


'''
    Framing
'''
class Validation:
    """
    Validation entry, containing a crc32 of the artifact body.

    The checksum covers every byte preceding the validation entry
      (magic bytes included).
    """
    checksum: int
    """crc32 of the preceding bytes"""

    def __init__(self, checksum: int) -> None:
        """
        Args:
            checksum: crc32 value.
        """
        self.checksum = checksum

    @staticmethod
    def of(body: bytes) -> 'Validation':
        """
        Compute the validation entry for the given body.

        Args:
            body: Bytes covered by the checksum.

        Returns:
            The validation entry.
        """
        return Validation(zlib.crc32(body) & 0xffff_ffff)

    @staticmethod
    def read(stream: IO[bytes]) -> 'Validation':
        return Validation(read_u32(stream))

    def write(self, stream: IO[bytes]) -> int:
        return write_u32(stream, self.checksum)

    def check(self, body: bytes) -> None:
        """
        Raise an `InvalidDataError` if `body` does not match this checksum.

        Args:
            body: Bytes covered by the checksum.

        Raises:
            InvalidDataError: on checksum mismatch.
        """
        expected = Validation.of(body).checksum
        if expected != self.checksum:
            raise InvalidDataError(f'Checksum mismatch: stored 0x{self.checksum:08x}, computed 0x{expected:08x}')

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Validation) and self.checksum == other.checksum

    def __repr__(self) -> str:
        return f'Validation(crc32: 0x{self.checksum:08x})'


def write_magic_bytes(stream: IO[bytes]) -> int:
    return stream.write(MAGIC_BYTES)


def read_magic_bytes(stream: IO[bytes]) -> None:
    """
    Consume the artifact header.

    Raises:
        InvalidDataError: if the stream does not start with `MAGIC_BYTES`.
    """
    header = stream.read(len(MAGIC_BYTES))
    if header != MAGIC_BYTES:
        raise InvalidDataError(f'Not a teamspill propensity artifact (header {header!r})')
