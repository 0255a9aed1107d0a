import logging
import os
import struct
from io import BytesIO
from pathlib import Path
from typing import Optional, Union

import numpy as np

from app.backend.exceptions import DataIOError, FormatError
from app.backend.kernel.numkernel import Matrix


logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
_U8 = struct.Struct("<B")
_U32 = struct.Struct("<I")
_F64 = struct.Struct("<d")


class BinaryWriter:
    """Little-endian envelope builder shared by feature, checkpoint and score files."""

    def __init__(self, magic: bytes) -> None:
        if len(magic) != 4:
            raise ValueError("magic must be 4 bytes")
        self._buf = BytesIO()
        self._buf.write(magic)
        self.u32(FORMAT_VERSION)

    def u8(self, value: int) -> "BinaryWriter":
        self._buf.write(_U8.pack(value))
        return self

    def u32(self, value: int) -> "BinaryWriter":
        self._buf.write(_U32.pack(value))
        return self

    def f64(self, value: float) -> "BinaryWriter":
        self._buf.write(_F64.pack(value))
        return self

    def text(self, value: str) -> "BinaryWriter":
        encoded = value.encode("utf-8")
        self.u32(len(encoded))
        self._buf.write(encoded)
        return self

    def matrix(self, value: Matrix) -> "BinaryWriter":
        """Raw row-major f64 payload; the caller writes the dims it needs."""
        self._buf.write(np.ascontiguousarray(value, dtype="<f8").tobytes())
        return self

    def getvalue(self) -> bytes:
        return self._buf.getvalue()


class BinaryReader:
    """Cursor over an envelope; every failure names the byte offset."""

    def __init__(self, data: bytes, magic: bytes, path: Optional[str] = None) -> None:
        self._data = data
        self._pos = 0
        self.path = path
        found = self._take(4, "magic")
        if found != magic:
            raise FormatError(f"bad magic {found!r}, expected {magic!r}", offset=0, path=path)
        version = self.u32("format version")
        if version != FORMAT_VERSION:
            raise FormatError(f"unsupported format version {version}", offset=4, path=path)

    @property
    def offset(self) -> int:
        return self._pos

    def _take(self, n: int, what: str) -> bytes:
        if self._pos + n > len(self._data):
            raise FormatError(f"truncated while reading {what} ({n} bytes needed, "
                              f"{len(self._data) - self._pos} left)", offset=self._pos, path=self.path)
        chunk = self._data[self._pos:self._pos + n]
        self._pos += n
        return chunk

    def u8(self, what: str = "u8") -> int:
        return _U8.unpack(self._take(1, what))[0]

    def u32(self, what: str = "u32") -> int:
        return _U32.unpack(self._take(4, what))[0]

    def f64(self, what: str = "f64") -> float:
        return _F64.unpack(self._take(8, what))[0]

    def text(self, what: str = "string") -> str:
        n = self.u32(f"{what} length")
        start = self._pos
        raw = self._take(n, what)
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as e:
            raise FormatError(f"{what} is not UTF-8", offset=start, path=self.path) from e

    def matrix(self, rows: int, cols: int, what: str = "matrix") -> Matrix:
        raw = self._take(8 * rows * cols, f"{what} ({rows}x{cols} f64)")
        return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(rows, cols)

    def expect_end(self) -> None:
        if self._pos != len(self._data):
            raise FormatError(f"{len(self._data) - self._pos} trailing bytes", offset=self._pos, path=self.path)


def read_bytes(path: Union[str, Path]) -> bytes:
    path = Path(path)
    if not path.is_file():
        raise DataIOError("File not found", path=str(path))
    return path.read_bytes()


def write_atomic(path: Union[str, Path], payload: Union[bytes, str]) -> Path:
    """Writes through a temporary sibling so readers never see a partial file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    data = payload.encode("utf-8") if isinstance(payload, str) else payload
    tmp.write_bytes(data)
    os.replace(tmp, path)
    logger.debug(f"Wrote {len(data)} bytes to {path}")
    return path
