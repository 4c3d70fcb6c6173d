"""Embedded dataset: opcode sequences mapped to vector sequences, plus the OP2V container.

OP2V layout (little-endian)::

    "OP2V" | u16 version=1 | u32 V | u32 D
    V x (u8 opcode, D x f32)                  embedding table snapshot
    u32 record_count
    per record: u8 label | u32 L | L*D f32 (row-major) | sha256(label..data)
"""

from __future__ import annotations

import hashlib
import os
import struct
from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np

from .dex.parser import OpcodeSequence
from .embedding import EmbeddingTable, decode_table_records, encode_table_records
from .errors import BadFileMagic, TruncatedFile, UnknownOpcode, UnsupportedVersion

OP2V_MAGIC = b"OP2V"
OP2V_VERSION = 1
_HEADER = struct.Struct("<4sHII")
_RECORD_HEAD = struct.Struct("<BI")

UnkEmbedPolicy = Literal["error", "zero"]


@dataclass
class EmbeddedProgram:
    label: int | None
    data: np.ndarray = field(repr=False)  # L x D float32
    source: str = ""

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 2:
            raise ValueError(f"program data must be L x D, got shape {self.data.shape}")
        if self.label not in (None, 0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label!r}")

    def __len__(self) -> int:
        return self.data.shape[0]

    def same_content(self, other: "EmbeddedProgram") -> bool:
        return self.label == other.label and np.array_equal(self.data, other.data)


@dataclass
class DatasetFile:
    path: str
    record_count: int
    V: int
    D: int
    table: EmbeddingTable
    records: list[EmbeddedProgram]


def embed_sequence(seq: OpcodeSequence, table: EmbeddingTable,
                   unk_policy: UnkEmbedPolicy = "error") -> EmbeddedProgram:
    """Replace every opcode by its table vector."""
    rows = np.empty(len(seq.opcodes), dtype=np.int64)
    for pos, op in enumerate(seq.opcodes):
        if op in table:
            rows[pos] = table.index(op)
        elif unk_policy == "zero":
            rows[pos] = -1
        else:
            raise UnknownOpcode(op, pos)
    vectors = np.vstack([table.vectors, np.zeros((1, table.D))])
    return EmbeddedProgram(seq.label, vectors[rows].astype(np.float32), seq.source)


def _record_bytes(rec: EmbeddedProgram, D: int) -> bytes:
    if rec.label is None:
        raise ValueError(f"record {rec.source or '?'} has no label")
    if rec.data.shape[1] != D:
        raise ValueError(f"record {rec.source or '?'} has D={rec.data.shape[1]}, expected {D}")
    payload = _RECORD_HEAD.pack(rec.label, rec.data.shape[0]) + rec.data.astype("<f4").tobytes()
    return payload + hashlib.sha256(payload).digest()


def encode_dataset(records: Sequence[EmbeddedProgram], table: EmbeddingTable) -> bytes:
    parts = [_HEADER.pack(OP2V_MAGIC, OP2V_VERSION, table.V, table.D),
             encode_table_records(table),
             struct.pack("<I", len(records))]
    parts.extend(_record_bytes(r, table.D) for r in records)
    return b"".join(parts)


def write_dataset(records: Sequence[EmbeddedProgram], path: str | os.PathLike,
                  table: EmbeddingTable) -> DatasetFile:
    data = encode_dataset(records, table)
    with open(path, "wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    return DatasetFile(str(path), len(records), table.V, table.D, table, list(records))


def decode_dataset(buf: bytes, source: str = "<op2v>") -> DatasetFile:
    if len(buf) < _HEADER.size:
        raise TruncatedFile("OP2V header truncated")
    magic, version, V, D = _HEADER.unpack_from(buf)
    if magic != OP2V_MAGIC:
        raise BadFileMagic(f"expected OP2V magic, got {magic!r}")
    if version != OP2V_VERSION:
        raise UnsupportedVersion(f"OP2V version {version}")
    table, off = decode_table_records(buf, _HEADER.size, V, D)
    if off + 4 > len(buf):
        raise TruncatedFile("record count missing")
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    records = []
    for i in range(count):
        if off + _RECORD_HEAD.size > len(buf):
            raise TruncatedFile(f"record {i} header truncated")
        label, L = _RECORD_HEAD.unpack_from(buf, off)
        end = off + _RECORD_HEAD.size + 4 * L * D
        if end + 32 > len(buf):
            raise TruncatedFile(f"record {i} truncated")
        if hashlib.sha256(buf[off:end]).digest() != buf[end:end + 32]:
            raise TruncatedFile(f"record {i} fails its sha256 check")
        data = np.frombuffer(buf, dtype="<f4", count=L * D, offset=off + _RECORD_HEAD.size)
        records.append(EmbeddedProgram(label, data.reshape(L, D).copy(), f"{source}#{i}"))
        off = end + 32
    return DatasetFile(source, count, V, D, table, records)


def read_dataset_file(path: str | os.PathLike) -> DatasetFile:
    with open(path, "rb") as fh:
        return decode_dataset(fh.read(), str(path))


def read_dataset(path: str | os.PathLike) -> list[EmbeddedProgram]:
    return read_dataset_file(path).records


def check_referential_integrity(ds: DatasetFile, allow_zero: bool = False) -> bool:
    """Every stored row equals some stored table vector (in f32).

    ``allow_zero`` admits the all-zero rows written by the ``zero`` UNK policy.
    """
    known = {row.tobytes() for row in ds.table.vectors.astype("<f4")}
    if allow_zero:
        known.add(np.zeros(ds.D, dtype="<f4").tobytes())
    return all(row.tobytes() in known for rec in ds.records for row in rec.data.astype("<f4"))
