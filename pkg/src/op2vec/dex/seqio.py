"""OpcodeSequence file formats.

Binary (OPSQ): ``b"OPSQ"``, u16 version=1, u32 count, then ``count`` opcode
bytes. Text: one space-separated lowercase-hex opcode stream per line.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

from ..errors import BadFileMagic, TruncatedFile, UnsupportedVersion
from .parser import OpcodeSequence

OPSQ_MAGIC = b"OPSQ"
OPSQ_VERSION = 1
_OPSQ_HEADER = struct.Struct("<4sHI")


def encode_opsq(opcodes) -> bytes:
    body = bytes(opcodes)
    return _OPSQ_HEADER.pack(OPSQ_MAGIC, OPSQ_VERSION, len(body)) + body


def decode_opsq(data: bytes) -> list[int]:
    if len(data) < _OPSQ_HEADER.size:
        raise TruncatedFile("OPSQ header truncated")
    magic, version, count = _OPSQ_HEADER.unpack_from(data)
    if magic != OPSQ_MAGIC:
        raise BadFileMagic(f"expected OPSQ magic, got {magic!r}")
    if version != OPSQ_VERSION:
        raise UnsupportedVersion(f"OPSQ version {version}")
    body = data[_OPSQ_HEADER.size:]
    if len(body) < count:
        raise TruncatedFile(f"OPSQ declares {count} opcodes, {len(body)} present")
    return list(body[:count])


def write_opsq(seq: OpcodeSequence | list[int], path: str | os.PathLike) -> None:
    opcodes = seq.opcodes if isinstance(seq, OpcodeSequence) else seq
    Path(path).write_bytes(encode_opsq(opcodes))


def read_opsq(path: str | os.PathLike, label: int | None = None) -> OpcodeSequence:
    return OpcodeSequence(str(path), decode_opsq(Path(path).read_bytes()), label)


def format_text(opcodes) -> str:
    return " ".join(f"{op:02x}" for op in opcodes)


def parse_text(line: str) -> list[int]:
    return [int(tok, 16) for tok in line.split()]


def write_text(sequences, path: str | os.PathLike) -> None:
    with open(path, "w") as fh:
        for seq in sequences:
            ops = seq.opcodes if isinstance(seq, OpcodeSequence) else seq
            fh.write(format_text(ops) + "\n")


def read_text(path: str | os.PathLike) -> list[list[int]]:
    with open(path) as fh:
        return [parse_text(line) for line in fh]
