"""ParamSet container and the ``DNIC`` checkpoint file format.

Layout (all integers little-endian)::

    b"DNIC" | u32 version=1 | u64 header_len | header JSON (UTF-8)
    | zero padding to a 64-byte boundary
    | payload: f32 tensors, each starting at a 64-byte aligned offset
    | u64 FNV-1a checksum of the payload region

Header JSON: ``{"arch_id", "arch", "meta", "tensors": [{name, shape,
offset, nbytes}]}``. Offsets are relative to the payload start. The
payload region runs from the payload start to the end of the last
tensor, inter-tensor padding included.
"""

from __future__ import annotations

import dataclasses
import datetime
import json
import os
import struct
from pathlib import Path
from typing import Any

import numpy as np
from numba import njit

from .tensor import DTYPE

MAGIC = b"DNIC"
VERSION = 1
ALIGN = 64
_PREAMBLE = struct.Struct("<4sIQ")

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK = (1 << 64) - 1


class CheckpointError(ValueError):
    pass


class ChecksumMismatch(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


def fnv1a64(data: bytes) -> int:
    h = FNV_OFFSET
    for byte in data:
        h = ((h ^ byte) * FNV_PRIME) & _MASK
    return h


@njit(cache=True)
def _fnv1a64_u8(buf):
    h = np.uint64(FNV_OFFSET)
    prime = np.uint64(FNV_PRIME)
    for i in range(buf.shape[0]):
        h = (h ^ np.uint64(buf[i])) * prime
    return h


def _fnv1a64_fast(buf: np.ndarray) -> int:
    return int(_fnv1a64_u8(buf))


def now_iso8601() -> str:
    """UTC timestamp; honours SOURCE_DATE_EPOCH for reproducible output."""
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    if epoch is not None:
        t = datetime.datetime.fromtimestamp(int(epoch), tz=datetime.timezone.utc)
    else:
        t = datetime.datetime.now(tz=datetime.timezone.utc).replace(microsecond=0)
    return t.strftime("%Y-%m-%dT%H:%M:%SZ")


@dataclasses.dataclass
class ParamSet:
    """One model's parameters.

    ``entries`` keeps insertion order, which is the architecture's
    parameter order. ``arch`` is the serialized architecture block that
    makes a checkpoint self-describing.
    """

    arch_id: str
    entries: dict[str, np.ndarray]
    meta: dict[str, Any] = dataclasses.field(default_factory=dict)
    arch: dict[str, Any] | None = None

    def names(self) -> list[str]:
        return list(self.entries)

    def signature(self) -> list[tuple[str, tuple[int, ...]]]:
        return [(k, tuple(v.shape)) for k, v in self.entries.items()]

    def __getitem__(self, name: str) -> np.ndarray:
        return self.entries[name]

    def copy(self, meta: dict[str, Any] | None = None) -> "ParamSet":
        return ParamSet(
            arch_id=self.arch_id,
            entries={k: v.copy() for k, v in self.entries.items()},
            meta=dict(self.meta if meta is None else meta),
            arch=None if self.arch is None else json.loads(json.dumps(self.arch)),
        )

    def num_params(self) -> int:
        return sum(int(v.size) for v in self.entries.values())

    def validate(self) -> None:
        for name, t in self.entries.items():
            if t.dtype != DTYPE:
                raise CheckpointError(f"{name}: dtype {t.dtype}, expected float32")
            if not np.all(np.isfinite(t)):
                raise CheckpointError(f"{name}: non-finite element")


def _layout(p: ParamSet) -> tuple[list[dict[str, Any]], int]:
    records = []
    offset = 0
    end = 0
    for name, t in p.entries.items():
        nbytes = int(t.size) * 4
        records.append({"name": name, "shape": list(t.shape), "offset": offset, "nbytes": nbytes})
        end = offset + nbytes
        offset = -(-end // ALIGN) * ALIGN
    return records, end


def _payload(p: ParamSet, records: list[dict[str, Any]], length: int) -> bytearray:
    buf = bytearray(length)
    for rec in records:
        data = np.ascontiguousarray(p.entries[rec["name"]], dtype="<f4").tobytes()
        buf[rec["offset"] : rec["offset"] + rec["nbytes"]] = data
    return buf


def checksum(p: ParamSet) -> str:
    """Hex FNV-1a 64 of the payload region ``save`` would write."""
    records, length = _layout(p)
    payload = _payload(p, records, length)
    return f"{_fnv1a64_fast(np.frombuffer(payload, dtype=np.uint8)):016x}"


def _header_bytes(p: ParamSet, records: list[dict[str, Any]]) -> bytes:
    header = {"arch_id": p.arch_id, "arch": p.arch, "meta": p.meta, "tensors": records}
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")


def to_bytes(p: ParamSet) -> bytes:
    p.validate()
    records, length = _layout(p)
    header = _header_bytes(p, records)
    head_len = _PREAMBLE.size + len(header)
    pad = -head_len % ALIGN
    payload = _payload(p, records, length)
    digest = _fnv1a64_fast(np.frombuffer(payload, dtype=np.uint8))
    return b"".join(
        [
            _PREAMBLE.pack(MAGIC, VERSION, len(header)),
            header,
            b"\x00" * pad,
            bytes(payload),
            struct.pack("<Q", digest),
        ]
    )


def save(p: ParamSet, path: str | os.PathLike) -> str:
    """Write ``p`` to ``path`` and return its payload checksum (hex)."""
    blob = to_bytes(p)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)
    return f"{struct.unpack('<Q', blob[-8:])[0]:016x}"


def from_bytes(blob: bytes) -> ParamSet:
    if len(blob) < _PREAMBLE.size + 8:
        raise CheckpointError("truncated file")
    magic, version, header_len = _PREAMBLE.unpack_from(blob, 0)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}")
    if version != VERSION:
        raise VersionError(f"unsupported checkpoint version {version}")
    head_end = _PREAMBLE.size + header_len
    if head_end > len(blob):
        raise CheckpointError("truncated header")
    try:
        header = json.loads(blob[_PREAMBLE.size : head_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt header: {exc}") from exc
    start = head_end + (-head_end % ALIGN)
    records = header["tensors"]
    length = max((r["offset"] + r["nbytes"] for r in records), default=0)
    if start + length + 8 != len(blob):
        raise CheckpointError(
            f"payload size mismatch: header declares {length} bytes, file has {len(blob) - start - 8}"
        )
    payload = np.frombuffer(blob, dtype=np.uint8, count=length, offset=start)
    (stored,) = struct.unpack_from("<Q", blob, start + length)
    if _fnv1a64_fast(payload) != stored:
        raise ChecksumMismatch("payload checksum mismatch")
    entries: dict[str, np.ndarray] = {}
    for rec in records:
        shape = tuple(int(d) for d in rec["shape"])
        count = int(np.prod(shape))
        if rec["nbytes"] != 4 * count:
            raise CheckpointError(f"{rec['name']}: shape {shape} inconsistent with {rec['nbytes']} bytes")
        if rec["name"] in entries:
            raise CheckpointError(f"duplicate tensor name {rec['name']}")
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=start + rec["offset"])
        entries[rec["name"]] = arr.astype(DTYPE).reshape(shape)
    return ParamSet(arch_id=header["arch_id"], entries=entries, meta=header["meta"], arch=header.get("arch"))


def load(path: str | os.PathLike) -> ParamSet:
    return from_bytes(Path(path).read_bytes())


@dataclasses.dataclass(frozen=True)
class CompatReport:
    same_arch: bool
    same_names_shapes: bool
    fine_tune_related: bool

    @property
    def ok(self) -> bool:
        return self.same_arch and self.same_names_shapes and self.fine_tune_related


def ancestry(p: ParamSet) -> list[str]:
    """Ancestor checksums, nearest first."""
    chain = list(p.meta.get("lineage") or [])
    parent = p.meta.get("parent_checksum")
    if parent and parent not in chain:
        chain.insert(0, parent)
    return chain


def lineage_check(a: ParamSet, b: ParamSet) -> CompatReport:
    same_arch = a.arch_id == b.arch_id
    same_sig = a.signature() == b.signature()
    related = False
    if same_sig:
        ca, cb = checksum(a), checksum(b)
        related = ca == cb or ca in ancestry(b) or cb in ancestry(a)
    return CompatReport(same_arch=same_arch, same_names_shapes=same_sig, fine_tune_related=related)
