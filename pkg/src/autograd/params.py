"""
Named parameter collections and their on-disk container.

File layout (version 1), all integers little-endian:
    magic   b"HTPS"            4 bytes
    version uint32             4 bytes
    hlen    uint32             4 bytes
    header  UTF-8 JSON         hlen bytes  {"entries": [[name, shape], ...], "meta": {...}}
    values  float64 LE         concatenated in entry order
The header is dumped with sorted keys and no whitespace, so identical params
always serialize to identical bytes.
"""
import json
import logging
import os
import struct
from collections import OrderedDict
from typing import Any, Dict, Iterable, Iterator, Mapping, Optional, Tuple

import numpy as np

from src.autograd.tensor import ShapeError, Tensor

logger = logging.getLogger(__name__)

MAGIC = b"HTPS"
FORMAT_VERSION = 1


class ParamSet:
    """Ordered name -> Tensor map; iteration order is insertion order."""

    def __init__(self, entries: Optional[Iterable[Tuple[str, np.ndarray]]] = None):
        self._tensors: "OrderedDict[str, Tensor]" = OrderedDict()
        for name, value in entries or ():
            self[name] = value

    def __setitem__(self, name: str, value) -> None:
        data = value.data if isinstance(value, Tensor) else value
        self._tensors[name] = Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __len__(self) -> int:
        return len(self._tensors)

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def names(self):
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def shapes(self) -> Dict[str, Tuple[int, ...]]:
        return {name: t.shape for name, t in self._tensors.items()}

    def arrays(self) -> Dict[str, np.ndarray]:
        return {name: t.data for name, t in self._tensors.items()}

    def num_values(self) -> int:
        return sum(t.size for t in self._tensors.values())

    def copy(self) -> "ParamSet":
        return ParamSet((name, t.data.copy()) for name, t in self._tensors.items())

    def is_compatible(self, other: "ParamSet") -> bool:
        """Identical names, order and shapes: the precondition for EMA and SGD."""
        return list(self.shapes().items()) == list(other.shapes().items())

    def check_compatible(self, other: Mapping[str, Any], op: str) -> None:
        other_shapes = other.shapes() if isinstance(other, ParamSet) else {k: np.shape(v) for k, v in other.items()}
        if list(self.shapes().items()) != list(other_shapes.items()):
            mine, theirs = self.shapes(), other_shapes
            diff = sorted(set(mine.items()) ^ set(theirs.items()))
            raise ShapeError(op, f"parameter sets differ: {diff[:4]}")

    def equals(self, other: "ParamSet") -> bool:
        """Bitwise equality of names, shapes and values."""
        return self.is_compatible(other) and all(
            np.array_equal(self[n].data, other[n].data) for n in self._tensors
        )

    def map(self, fn) -> "ParamSet":
        return ParamSet((name, fn(name, t.data)) for name, t in self._tensors.items())

    # -- serialization -----------------------------------------------------

    def to_bytes(self, meta: Optional[Dict[str, Any]] = None) -> bytes:
        header = {
            "entries": [[name, list(t.shape)] for name, t in self._tensors.items()],
            "meta": meta or {},
        }
        header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
        body = b"".join(np.ascontiguousarray(t.data, dtype="<f8").tobytes() for t in self._tensors.values())
        return MAGIC + struct.pack("<II", FORMAT_VERSION, len(header_bytes)) + header_bytes + body

    @classmethod
    def from_bytes(cls, payload: bytes) -> Tuple["ParamSet", Dict[str, Any]]:
        if payload[:4] != MAGIC:
            raise ValueError("not a parameter file (bad magic)")
        version, hlen = struct.unpack("<II", payload[4:12])
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported parameter file version {version}")
        header = json.loads(payload[12:12 + hlen].decode("utf-8"))
        offset = 12 + hlen
        params = cls()
        for name, shape in header["entries"]:
            count = int(np.prod(shape)) if shape else 1
            values = np.frombuffer(payload, dtype="<f8", count=count, offset=offset)
            params[name] = values.reshape(shape).astype(np.float64)
            offset += 8 * count
        if offset != len(payload):
            raise ValueError(f"parameter file has {len(payload) - offset} trailing bytes")
        return params, header.get("meta", {})

    def save(self, path: str, meta: Optional[Dict[str, Any]] = None) -> None:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        tmp = f"{path}.tmp"
        with open(tmp, "wb") as f:
            f.write(self.to_bytes(meta))
        os.replace(tmp, path)
        logger.info(f"Saved {len(self)} parameters ({self.num_values()} values) to {path}")

    @classmethod
    def load(cls, path: str) -> Tuple["ParamSet", Dict[str, Any]]:
        with open(path, "rb") as f:
            return cls.from_bytes(f.read())
