"""Reader/writer for the safetensors container.

Layout: an 8-byte little-endian header length, a UTF-8 JSON header mapping
tensor names to ``{"dtype", "shape", "data_offsets"}`` (plus an optional
``"__metadata__"`` string map), then the raw little-endian data region.

:func:`serialize` always writes the canonical form: metadata first, tensors in
lexicographic name order, packed contiguously, compact JSON.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

from .errors import FormatError, InvariantError, TruncatedFileError
from .tensor import DTYPES, ITEMSIZE, Tensor

METADATA_KEY = "__metadata__"


@dataclass(frozen=True)
class TensorFileEntry:
    dtype: str
    shape: tuple[int, ...]
    data: bytes = field(repr=False)
    # offsets as found in the parsed file; derived on write, so not part of equality
    byte_range: tuple[int, int] | None = field(default=None, compare=False)

    def __post_init__(self) -> None:
        if self.dtype not in DTYPES:
            raise InvariantError(f"unsupported dtype {self.dtype!r}", code="unknown-dtype")
        if any(n < 1 for n in self.shape):
            raise InvariantError(f"dimensions must be >= 1, got {list(self.shape)}")
        expected = math.prod(self.shape) * ITEMSIZE[self.dtype]
        if len(self.data) != expected:
            raise InvariantError(
                f"entry holds {len(self.data)} bytes, shape {list(self.shape)} "
                f"as {self.dtype} needs {expected}"
            )

    @classmethod
    def from_tensor(cls, t: Tensor) -> "TensorFileEntry":
        return cls(t.dtype, tuple(t.shape), t.to_bytes())

    def to_tensor(self) -> Tensor:
        return Tensor.from_bytes(self.data, self.dtype, self.shape)


@dataclass(frozen=True)
class TensorFile:
    entries: Mapping[str, TensorFileEntry] = field(default_factory=dict)
    metadata: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if METADATA_KEY in self.entries:
            raise InvariantError(f"{METADATA_KEY!r} is reserved and cannot name a tensor")
        for k, v in self.metadata.items():
            if not isinstance(k, str) or not isinstance(v, str):
                raise InvariantError("metadata must map strings to strings")

    @classmethod
    def from_tensors(cls, tensors: Mapping[str, Tensor], metadata: Mapping[str, str] | None = None):
        return cls(
            {name: TensorFileEntry.from_tensor(t) for name, t in tensors.items()},
            dict(metadata or {}),
        )

    def tensor(self, name: str) -> Tensor:
        return self.entries[name].to_tensor()

    def tensors(self) -> dict[str, Tensor]:
        return {name: e.to_tensor() for name, e in self.entries.items()}

    def names(self) -> list[str]:
        return sorted(self.entries)


def _reject_duplicates(pairs):
    out = {}
    for k, v in pairs:
        if k in out:
            raise FormatError(f"duplicate header key {k!r}", code="duplicate-name")
        out[k] = v
    return out


def _is_int(x) -> bool:
    return isinstance(x, int) and not isinstance(x, bool)


def parse(buf: bytes) -> TensorFile:
    """Parse a safetensors byte string, validating every entry."""
    buf = bytes(buf)
    if len(buf) < 8:
        raise TruncatedFileError(f"file is {len(buf)} bytes, shorter than the 8-byte length prefix")
    header_len = int.from_bytes(buf[:8], "little")
    if header_len > len(buf) - 8:
        raise TruncatedFileError(
            f"header length {header_len} exceeds the {len(buf) - 8} bytes that follow"
        )
    try:
        header = json.loads(buf[8:8 + header_len].decode("utf-8"), object_pairs_hook=_reject_duplicates)
    except (UnicodeDecodeError, json.JSONDecodeError, RecursionError) as exc:
        raise FormatError(f"malformed JSON header: {exc}", code="malformed-header") from None
    if not isinstance(header, dict):
        raise FormatError("header must be a JSON object", code="malformed-header")

    payload = buf[8 + header_len:]
    metadata = header.pop(METADATA_KEY, {})
    if not isinstance(metadata, dict) or not all(isinstance(v, str) for v in metadata.values()):
        raise FormatError("__metadata__ must be a map of strings", code="malformed-header")

    spans = []
    entries = {}
    for name, info in header.items():
        if not isinstance(info, dict) or set(info) != {"dtype", "shape", "data_offsets"}:
            raise FormatError(f"entry {name!r} must have exactly dtype, shape, data_offsets",
                              code="malformed-header")
        dtype, shape, offsets = info["dtype"], info["shape"], info["data_offsets"]
        if dtype not in DTYPES:
            raise FormatError(f"entry {name!r} has unsupported dtype {dtype!r}", code="unknown-dtype")
        if not isinstance(shape, list) or not all(_is_int(n) and n >= 1 for n in shape):
            raise FormatError(f"entry {name!r} has invalid shape {shape!r}", code="malformed-header")
        if (not isinstance(offsets, list) or len(offsets) != 2
                or not all(_is_int(o) for o in offsets)):
            raise FormatError(f"entry {name!r} has invalid data_offsets", code="malformed-header")
        begin, end = offsets
        if not 0 <= begin <= end <= len(payload):
            raise FormatError(
                f"entry {name!r} offsets [{begin},{end}) fall outside the {len(payload)}-byte data region",
                code="out-of-bounds",
            )
        if end - begin != math.prod(shape) * ITEMSIZE[dtype]:
            raise FormatError(f"entry {name!r} byte length does not match its shape and dtype",
                              code="size-mismatch")
        spans.append((begin, end, name))
        entries[name] = TensorFileEntry(dtype, tuple(shape), payload[begin:end], (begin, end))

    spans.sort()
    for (_, prev_end, prev), (begin, _, name) in zip(spans, spans[1:]):
        if begin < prev_end:
            raise FormatError(f"entries {prev!r} and {name!r} overlap", code="overlap")
    return TensorFile(entries, dict(metadata))


def serialize(tf: TensorFile) -> bytes:
    header: dict = {}
    if tf.metadata:
        header[METADATA_KEY] = {k: tf.metadata[k] for k in sorted(tf.metadata)}
    chunks = []
    offset = 0
    for name in sorted(tf.entries):
        e = tf.entries[name]
        header[name] = {"dtype": e.dtype, "shape": list(e.shape),
                        "data_offsets": [offset, offset + len(e.data)]}
        chunks.append(e.data)
        offset += len(e.data)
    head = json.dumps(header, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
    return len(head).to_bytes(8, "little") + head + b"".join(chunks)


def read_file(path: str | Path) -> TensorFile:
    return parse(Path(path).read_bytes())


def write_file(path: str | Path, tf: TensorFile) -> None:
    Path(path).write_bytes(serialize(tf))
