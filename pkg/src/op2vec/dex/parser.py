"""DEX container parsing and opcode-stream extraction.

Layout reference: https://source.android.com/docs/core/runtime/dex-format
"""

from __future__ import annotations

import hashlib
import struct
import zlib
from dataclasses import dataclass, field
from typing import Iterator, Literal

from ..errors import (
    BadEndianTag,
    BadMagic,
    ParseError,
    SizeMismatch,
    TooShort,
    TruncatedInstruction,
    UndefinedOpcode,
)
from .opcodes import OPCODES, TABLE_SIZE, UNK_OPCODE

HEADER_SIZE = 0x70
ENDIAN_CONSTANT = 0x12345678
NO_INDEX = 0xFFFFFFFF

PACKED_SWITCH_PAYLOAD = 0x0100
SPARSE_SWITCH_PAYLOAD = 0x0200
FILL_ARRAY_DATA_PAYLOAD = 0x0300
_PAYLOAD_MNEMONICS = {
    PACKED_SWITCH_PAYLOAD: "packed-switch-payload",
    SPARSE_SWITCH_PAYLOAD: "sparse-switch-payload",
    FILL_ARRAY_DATA_PAYLOAD: "fill-array-data-payload",
}

UnkPolicy = Literal["error", "skip", "unk"]

_HEADER = struct.Struct("<8sI20s20I")


@dataclass(frozen=True)
class DexHeader:
    magic: bytes
    checksum: int
    signature: bytes
    file_size: int
    header_size: int
    endian_tag: int
    link_size: int
    link_off: int
    map_off: int
    string_ids_size: int
    string_ids_off: int
    type_ids_size: int
    type_ids_off: int
    proto_ids_size: int
    proto_ids_off: int
    field_ids_size: int
    field_ids_off: int
    method_ids_size: int
    method_ids_off: int
    class_defs_size: int
    class_defs_off: int
    data_size: int
    data_off: int

    @property
    def version(self) -> str:
        return self.magic[4:7].decode("ascii")


@dataclass(frozen=True)
class CodeItem:
    method_name: str
    registers_size: int
    ins_size: int
    outs_size: int
    tries_size: int
    insns_size: int
    insns: bytes = field(repr=False)
    offset: int

    def __post_init__(self) -> None:
        if len(self.insns) != 2 * self.insns_size:
            raise ParseError(
                f"insns length {len(self.insns)} != 2*insns_size ({self.insns_size})",
                self.offset, self.method_name)
        if self.offset % 4:
            raise ParseError("code_item is not 4-byte aligned", self.offset, self.method_name)


@dataclass(frozen=True)
class Instruction:
    opcode: int
    mnemonic: str
    width: int
    is_payload: bool = False


@dataclass
class OpcodeSequence:
    source: str
    opcodes: list[int]
    label: int | None = None

    def __len__(self) -> int:
        return len(self.opcodes)


def parse_header(data: bytes) -> DexHeader:
    if len(data) < HEADER_SIZE:
        raise TooShort(f"buffer of {len(data)} bytes is shorter than the DEX header")
    header = DexHeader(*_HEADER.unpack_from(data, 0))
    magic = header.magic
    if not (magic[:4] == b"dex\n" and magic[4:7].isdigit() and magic[7] == 0):
        raise BadMagic(f"bad magic {magic!r}", 0)
    if header.endian_tag != ENDIAN_CONSTANT:
        raise BadEndianTag(f"endian tag {header.endian_tag:#010x}", 0x28)
    if header.header_size != HEADER_SIZE:
        raise SizeMismatch(f"header_size {header.header_size:#x} != {HEADER_SIZE:#x}", 0x24)
    if header.file_size != len(data):
        raise SizeMismatch(f"file_size {header.file_size} != buffer length {len(data)}", 0x20)
    return header


def compute_checksum(data: bytes) -> int:
    return zlib.adler32(memoryview(data)[12:]) & 0xFFFFFFFF


def verify_checksum(data: bytes) -> bool:
    if len(data) < HEADER_SIZE:
        raise TooShort(f"buffer of {len(data)} bytes is shorter than the DEX header")
    (stored,) = struct.unpack_from("<I", data, 8)
    return compute_checksum(data) == stored


def verify_signature(data: bytes) -> bool:
    """SHA-1 over everything after the signature field."""
    if len(data) < HEADER_SIZE:
        raise TooShort(f"buffer of {len(data)} bytes is shorter than the DEX header")
    return hashlib.sha1(memoryview(data)[32:]).digest() == bytes(data[12:32])


def read_uleb128(data: bytes, offset: int) -> tuple[int, int]:
    """Decode an unsigned LEB128 value; returns (value, next_offset)."""
    result = 0
    shift = 0
    for i in range(5):
        try:
            byte = data[offset + i]
        except IndexError:
            raise ParseError("uleb128 runs past end of buffer", offset) from None
        result |= (byte & 0x7F) << shift
        if not byte & 0x80:
            return result & 0xFFFFFFFF, offset + i + 1
        shift += 7
    raise ParseError("uleb128 longer than 5 bytes", offset)


def decode_instruction(code_units: bytes, offset: int) -> Instruction:
    """Decode the instruction starting at code-unit index ``offset``."""
    n_units = len(code_units) // 2
    if not 0 <= offset < n_units:
        raise TruncatedInstruction(f"code-unit offset {offset} outside stream of {n_units}")
    (unit,) = struct.unpack_from("<H", code_units, 2 * offset)
    opcode = unit & 0xFF
    if unit in _PAYLOAD_MNEMONICS:
        width = _payload_width(code_units, offset, unit, n_units)
        inst = Instruction(0x00, _PAYLOAD_MNEMONICS[unit], width, is_payload=True)
    else:
        info = OPCODES[opcode] if opcode < TABLE_SIZE else None
        if info is None or not info.defined:
            raise UndefinedOpcode(opcode)
        inst = Instruction(opcode, info.mnemonic, info.width)
    if offset + inst.width > n_units:
        raise TruncatedInstruction(
            f"{inst.mnemonic} needs {inst.width} code units, {n_units - offset} remain")
    return inst


def _payload_width(code_units: bytes, offset: int, ident: int, n_units: int) -> int:
    need = 4 if ident == FILL_ARRAY_DATA_PAYLOAD else 2
    if offset + need > n_units:
        raise TruncatedInstruction(f"payload header at unit {offset} is truncated")
    base = 2 * offset
    if ident == PACKED_SWITCH_PAYLOAD:
        (size,) = struct.unpack_from("<H", code_units, base + 2)
        return size * 2 + 4
    if ident == SPARSE_SWITCH_PAYLOAD:
        (size,) = struct.unpack_from("<H", code_units, base + 2)
        return size * 4 + 2
    element_width, size = struct.unpack_from("<HI", code_units, base + 2)
    return (size * element_width + 1) // 2 + 4


def walk_code_item(item: CodeItem) -> list[Instruction]:
    out: list[Instruction] = []
    pos = 0
    while pos < item.insns_size:
        try:
            inst = decode_instruction(item.insns, pos)
        except UndefinedOpcode as exc:
            raise UndefinedOpcode(exc.opcode, item.offset + 16 + 2 * pos,
                                  item.method_name) from None
        except ParseError as exc:
            raise type(exc)(str(exc), item.offset + 16 + 2 * pos, item.method_name) from None
        out.append(inst)
        pos += inst.width
    return out


class DexFile:
    """Parsed DEX container: header plus lazily walked code items."""

    def __init__(self, data: bytes, *, check_checksum: bool = True,
                 check_signature: bool = False, source: str = "<dex>"):
        self.data = bytes(data)
        self.source = source
        self.header = parse_header(self.data)
        if check_checksum and not verify_checksum(self.data):
            raise ParseError("adler32 checksum mismatch", 8, source)
        if check_signature and not verify_signature(self.data):
            raise ParseError("SHA-1 signature mismatch", 12, source)

    def _u16(self, off: int) -> int:
        return self._unpack("<H", off)[0]

    def _u32(self, off: int) -> int:
        return self._unpack("<I", off)[0]

    def _unpack(self, fmt: str, off: int) -> tuple:
        try:
            return struct.unpack_from(fmt, self.data, off)
        except struct.error:
            raise ParseError("structure runs past end of file", off, self.source) from None

    def string(self, idx: int) -> str:
        if idx >= self.header.string_ids_size:
            raise ParseError(f"string index {idx} out of range", None, self.source)
        data_off = self._u32(self.header.string_ids_off + 4 * idx)
        _, start = read_uleb128(self.data, data_off)
        end = self.data.find(b"\x00", start)
        if end < 0:
            raise ParseError("unterminated string_data_item", data_off, self.source)
        # MUTF-8; exact decoding of surrogate pairs is irrelevant for naming
        return self.data[start:end].decode("utf-8", errors="replace")

    def type_name(self, idx: int) -> str:
        if idx >= self.header.type_ids_size:
            raise ParseError(f"type index {idx} out of range", None, self.source)
        return self.string(self._u32(self.header.type_ids_off + 4 * idx))

    def method_name(self, idx: int) -> str:
        if idx >= self.header.method_ids_size:
            raise ParseError(f"method index {idx} out of range", None, self.source)
        class_idx, _proto, name_idx = self._unpack("<HHI", self.header.method_ids_off + 8 * idx)
        return f"{self.type_name(class_idx)}->{self.string(name_idx)}"

    def code_items(self) -> Iterator[CodeItem]:
        """Code items in class_defs order; direct then virtual methods per class."""
        h = self.header
        for i in range(h.class_defs_size):
            class_data_off = self._u32(h.class_defs_off + 32 * i + 24)
            if class_data_off == 0:
                continue
            yield from self._class_code_items(class_data_off)

    def _class_code_items(self, off: int) -> Iterator[CodeItem]:
        sizes = []
        for _ in range(4):
            value, off = read_uleb128(self.data, off)
            sizes.append(value)
        n_static, n_instance, n_direct, n_virtual = sizes
        for _ in range(2 * (n_static + n_instance)):
            _, off = read_uleb128(self.data, off)
        for count in (n_direct, n_virtual):
            method_idx = 0
            for _ in range(count):
                diff, off = read_uleb128(self.data, off)
                _flags, off = read_uleb128(self.data, off)
                code_off, off = read_uleb128(self.data, off)
                method_idx += diff
                if code_off:
                    yield self.code_item(code_off, self.method_name(method_idx))

    def code_item(self, off: int, name: str = "?") -> CodeItem:
        regs, ins, outs, tries, _debug, insns_size = self._unpack("<4H2I", off)
        start = off + 16
        end = start + 2 * insns_size
        if end > len(self.data):
            raise ParseError("insns run past end of file", off, name)
        return CodeItem(name, regs, ins, outs, tries, insns_size,
                        self.data[start:end], off)


def extract_opcodes(data: bytes, *, source: str = "<dex>", unk_policy: UnkPolicy = "error",
                    check_checksum: bool = True, check_signature: bool = False) -> list[int]:
    """Opcode bytes of every non-payload instruction in the file, in walk order."""
    dex = DexFile(data, check_checksum=check_checksum,
                  check_signature=check_signature, source=source)
    opcodes: list[int] = []
    for item in dex.code_items():
        if unk_policy == "error":
            opcodes.extend(i.opcode for i in walk_code_item(item) if not i.is_payload)
        else:
            opcodes.extend(_lenient_walk(item, unk_policy))
    return opcodes


def _lenient_walk(item: CodeItem, policy: UnkPolicy) -> Iterator[int]:
    # an undefined opcode is assumed to be one code unit wide
    pos = 0
    while pos < item.insns_size:
        try:
            inst = decode_instruction(item.insns, pos)
        except UndefinedOpcode:
            if policy == "unk":
                yield UNK_OPCODE
            pos += 1
            continue
        if not inst.is_payload:
            yield inst.opcode
        pos += inst.width


def extract_opcode_sequence(blob, *, label: int | None = None, unk_policy: UnkPolicy = "error",
                            check_checksum: bool = True,
                            check_signature: bool = False) -> OpcodeSequence:
    """Build an OpcodeSequence from a DexBlob (or raw bytes)."""
    if isinstance(blob, (bytes, bytearray, memoryview)):
        data, source = bytes(blob), "<dex>"
    else:
        data, source = blob.data, blob.source
    ops = extract_opcodes(data, source=source, unk_policy=unk_policy,
                          check_checksum=check_checksum, check_signature=check_signature)
    return OpcodeSequence(source, ops, label)
