"""
fedvit.codec

Fixed layout little-endian packing shared by the wire protocol and the key
and model files. Tensors are written as

    name length u8 | ASCII name | rows u32 | cols u32 | rows·cols f64

with the f64 payload in row-major order, exactly as computed.
"""
import struct
from typing import Dict, Iterable, Optional, Tuple, Type

import numpy as np

from .errors import FedVitError
from .numerics import Matrix, freeze

BYTE_ORDER = "little"
F64 = np.dtype("<f8")

_U8 = struct.Struct("<B")
_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")


class FrameError(FedVitError):
    """Bytes could not be parsed."""

    retryable = False

    def __init__(self, message: str, *, offset: int):
        """
        :param message: str Error message
        :param offset: int Byte offset at which parsing failed
        """
        super().__init__(f"{message} at offset {offset}")
        self.offset = offset


class IncompleteFrame(FrameError):
    """The input ended early. More bytes may complete it."""

    retryable = True


class CorruptFrame(FrameError):
    """The input can never become valid."""


class UnsupportedVersion(CorruptFrame):
    def __init__(self, message: str, *, offset: int, version: int):
        super().__init__(f"{message} (version {version})", offset=offset)
        self.version = version


class FrameTooLarge(FedVitError):
    def __init__(self, message: str, *, size: int):
        super().__init__(f"{message} ({size} bytes)")
        self.size = size


def tensor_size(name: str, matrix: Matrix) -> int:
    """
    :return: int Encoded size of one tensor in bytes
    """
    return 1 + len(name) + 8 + 8 * matrix.size


class Writer:
    """
    Append-only byte builder.

    Usage:
        writer = Writer()
        writer.raw(b"FVM1").u8(1).u32(round_)
        data: bytes = writer.getvalue()
    """

    def __init__(self):
        self._parts = []
        self.size = 0

    def _add(self, chunk: bytes) -> "Writer":
        self._parts.append(chunk)
        self.size += len(chunk)
        return self

    def raw(self, chunk: bytes) -> "Writer":
        return self._add(bytes(chunk))

    def u8(self, value: int) -> "Writer":
        return self._add(_U8.pack(value))

    def u16(self, value: int) -> "Writer":
        return self._add(_U16.pack(value))

    def u32(self, value: int) -> "Writer":
        return self._add(_U32.pack(value))

    def u64(self, value: int) -> "Writer":
        return self._add(_U64.pack(value))

    def f64_array(self, values: np.ndarray) -> "Writer":
        """
        :param values: array of any shape, written in C order
        """
        return self._add(np.ascontiguousarray(values, dtype=F64).tobytes())

    def u32_array(self, values: Iterable[int]) -> "Writer":
        for value in values:
            self.u32(int(value))
        return self

    def tensor(self, name: str, matrix: Matrix) -> "Writer":
        """
        :param name: str ASCII name, at most 255 characters
        :param matrix: Matrix
        """
        encoded = name.encode("ascii")
        if len(encoded) > 255:
            raise ValueError(f"Tensor name too long: {name!r}")
        rows, cols = matrix.shape
        self.u8(len(encoded)).raw(encoded).u32(rows).u32(cols)
        return self.f64_array(matrix)

    def tensors(self, tensors: Dict[str, Matrix]) -> "Writer":
        """
        Tensor count u16 followed by each tensor.
        """
        self.u16(len(tensors))
        for name, matrix in tensors.items():
            self.tensor(name, matrix)
        return self

    def getvalue(self) -> bytes:
        return b"".join(self._parts)


class Reader:
    """
    Cursor over a byte buffer. Running past the end raises `exhausted`,
    IncompleteFrame unless the caller knows the buffer is complete.
    """

    def __init__(
        self,
        data: bytes,
        *,
        offset: int = 0,
        exhausted: Type[FrameError] = IncompleteFrame,
    ):
        """
        :param data: bytes
        :param offset: int Offset reported for position 0 of data
        :param exhausted: FrameError subclass raised on short input
        """
        self._view = memoryview(data)
        self._base = offset
        self.position = 0
        self.exhausted = exhausted

    @property
    def offset(self) -> int:
        return self._base + self.position

    @property
    def remaining(self) -> int:
        return len(self._view) - self.position

    def take(self, size: int) -> bytes:
        if size > self.remaining:
            raise self.exhausted(
                f"Need {size} bytes, {self.remaining} left", offset=self.offset
            )
        chunk = self._view[self.position:self.position + size].tobytes()
        self.position += size
        return chunk

    def _unpack(self, fmt: struct.Struct) -> int:
        return fmt.unpack(self.take(fmt.size))[0]

    def u8(self) -> int:
        return self._unpack(_U8)

    def u16(self) -> int:
        return self._unpack(_U16)

    def u32(self) -> int:
        return self._unpack(_U32)

    def u64(self) -> int:
        return self._unpack(_U64)

    def f64_array(self, rows: int, cols: int) -> Matrix:
        data = self.take(8 * rows * cols)
        values = np.frombuffer(data, dtype=F64).astype(np.float64)
        return freeze(values.reshape(rows, cols))

    def u32_array(self, count: int) -> Tuple[int, ...]:
        return tuple(self.u32() for _ in range(count))

    def tensor(self) -> Tuple[str, Matrix]:
        start = self.offset
        length = self.u8()
        try:
            name = self.take(length).decode("ascii")
        except UnicodeDecodeError as exc:
            raise CorruptFrame(
                "Tensor name is not ASCII", offset=start
            ) from exc
        rows, cols = self.u32(), self.u32()
        if rows < 1 or cols < 1:
            raise CorruptFrame(
                f"Tensor {name!r} has an empty shape", offset=start
            )
        if 8 * rows * cols > self.remaining:
            raise self.exhausted(
                f"Tensor {name!r} runs past the end of the input",
                offset=start,
            )
        return name, self.f64_array(rows, cols)

    def tensors(self, count: Optional[int] = None) -> Dict[str, Matrix]:
        """
        :param count: Optional int. Read the u16 count first when None.
        :return: name -> Matrix in stored order
        """
        if count is None:
            count = self.u16()
        tensors: Dict[str, Matrix] = {}
        for _ in range(count):
            start = self.offset
            name, matrix = self.tensor()
            if name in tensors:
                raise CorruptFrame(
                    f"Duplicate tensor {name!r}", offset=start
                )
            tensors[name] = matrix
        return tensors

    def expect_end(self):
        if self.remaining:
            raise CorruptFrame(
                f"{self.remaining} trailing bytes", offset=self.offset
            )
