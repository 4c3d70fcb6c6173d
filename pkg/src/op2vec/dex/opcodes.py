"""Dalvik opcode table: mnemonic and instruction format for every byte value.

The table has 255 slots (0x00-0xfe), which is also the full-table vocabulary.
Slots that are unused in DEX 035-038 keep a placeholder mnemonic
(``unused-3e``) and no format; decoding them raises ``UndefinedOpcode``.
0xfe/0xff (``const-method-handle`` / ``const-method-type``, DEX 039) are not
decodable.

Reference: https://source.android.com/docs/core/runtime/dalvik-bytecode
"""

from __future__ import annotations

from typing import NamedTuple

TABLE_SIZE = 255
#: Byte emitted for undefined opcodes under the ``unk`` policy. Lies outside
#: the table on purpose so it can never collide with a real opcode.
UNK_OPCODE = 0xFF


class OpcodeInfo(NamedTuple):
    opcode: int
    mnemonic: str
    fmt: str | None  # instruction format id, e.g. "22t"; None when undefined

    @property
    def defined(self) -> bool:
        return self.fmt is not None

    @property
    def width(self) -> int:
        """Instruction width in 16-bit code units (first digit of the format)."""
        if self.fmt is None:
            raise ValueError(f"opcode {self.opcode:#04x} is undefined")
        return int(self.fmt[0])


def _ops(start: int, fmt: str, names: str) -> list[tuple[int, str, str]]:
    return [(start + i, name, fmt) for i, name in enumerate(names.split())]


_BINOPS = "add sub mul div rem and or xor shl shr ushr"
_FLOAT_BINOPS = "add sub mul div rem"


def _binops(suffix: str) -> list[str]:
    out = [f"{op}-int{suffix}" for op in _BINOPS.split()]
    out += [f"{op}-long{suffix}" for op in _BINOPS.split()]
    out += [f"{op}-float{suffix}" for op in _FLOAT_BINOPS.split()]
    out += [f"{op}-double{suffix}" for op in _FLOAT_BINOPS.split()]
    return out


_DEFINED: list[tuple[int, str, str]] = [
    (0x00, "nop", "10x"),
    (0x01, "move", "12x"),
    (0x02, "move/from16", "22x"),
    (0x03, "move/16", "32x"),
    (0x04, "move-wide", "12x"),
    (0x05, "move-wide/from16", "22x"),
    (0x06, "move-wide/16", "32x"),
    (0x07, "move-object", "12x"),
    (0x08, "move-object/from16", "22x"),
    (0x09, "move-object/16", "32x"),
    *_ops(0x0A, "11x", "move-result move-result-wide move-result-object move-exception"),
    (0x0E, "return-void", "10x"),
    *_ops(0x0F, "11x", "return return-wide return-object"),
    (0x12, "const/4", "11n"),
    (0x13, "const/16", "21s"),
    (0x14, "const", "31i"),
    (0x15, "const/high16", "21h"),
    (0x16, "const-wide/16", "21s"),
    (0x17, "const-wide/32", "31i"),
    (0x18, "const-wide", "51l"),
    (0x19, "const-wide/high16", "21h"),
    (0x1A, "const-string", "21c"),
    (0x1B, "const-string/jumbo", "31c"),
    (0x1C, "const-class", "21c"),
    (0x1D, "monitor-enter", "11x"),
    (0x1E, "monitor-exit", "11x"),
    (0x1F, "check-cast", "21c"),
    (0x20, "instance-of", "22c"),
    (0x21, "array-length", "12x"),
    (0x22, "new-instance", "21c"),
    (0x23, "new-array", "22c"),
    (0x24, "filled-new-array", "35c"),
    (0x25, "filled-new-array/range", "3rc"),
    (0x26, "fill-array-data", "31t"),
    (0x27, "throw", "11x"),
    (0x28, "goto", "10t"),
    (0x29, "goto/16", "20t"),
    (0x2A, "goto/32", "30t"),
    (0x2B, "packed-switch", "31t"),
    (0x2C, "sparse-switch", "31t"),
    *_ops(0x2D, "23x", "cmpl-float cmpg-float cmpl-double cmpg-double cmp-long"),
    *_ops(0x32, "22t", "if-eq if-ne if-lt if-ge if-gt if-le"),
    *_ops(0x38, "21t", "if-eqz if-nez if-ltz if-gez if-gtz if-lez"),
    *_ops(0x44, "23x", " ".join(
        f"{kind}{sfx}" for kind in ("aget", "aput")
        for sfx in ("", "-wide", "-object", "-boolean", "-byte", "-char", "-short"))),
    *_ops(0x52, "22c", " ".join(
        f"{kind}{sfx}" for kind in ("iget", "iput")
        for sfx in ("", "-wide", "-object", "-boolean", "-byte", "-char", "-short"))),
    *_ops(0x60, "21c", " ".join(
        f"{kind}{sfx}" for kind in ("sget", "sput")
        for sfx in ("", "-wide", "-object", "-boolean", "-byte", "-char", "-short"))),
    *_ops(0x6E, "35c", "invoke-virtual invoke-super invoke-direct invoke-static invoke-interface"),
    *_ops(0x74, "3rc", "invoke-virtual/range invoke-super/range invoke-direct/range "
                       "invoke-static/range invoke-interface/range"),
    *_ops(0x7B, "12x", "neg-int not-int neg-long not-long neg-float neg-double "
                       "int-to-long int-to-float int-to-double long-to-int long-to-float "
                       "long-to-double float-to-int float-to-long float-to-double "
                       "double-to-int double-to-long double-to-float int-to-byte "
                       "int-to-char int-to-short"),
    *_ops(0x90, "23x", " ".join(_binops(""))),
    *_ops(0xB0, "12x", " ".join(_binops("/2addr"))),
    *_ops(0xD0, "22s", "add-int/lit16 rsub-int mul-int/lit16 div-int/lit16 rem-int/lit16 "
                       "and-int/lit16 or-int/lit16 xor-int/lit16"),
    *_ops(0xD8, "22b", "add-int/lit8 rsub-int/lit8 mul-int/lit8 div-int/lit8 rem-int/lit8 "
                       "and-int/lit8 or-int/lit8 xor-int/lit8 shl-int/lit8 shr-int/lit8 "
                       "ushr-int/lit8"),
    (0xFA, "invoke-polymorphic", "45cc"),
    (0xFB, "invoke-polymorphic/range", "4rcc"),
    (0xFC, "invoke-custom", "35c"),
    (0xFD, "invoke-custom/range", "3rc"),
]


def _build() -> tuple[OpcodeInfo, ...]:
    slots: list[OpcodeInfo | None] = [None] * TABLE_SIZE
    for op, name, fmt in _DEFINED:
        if slots[op] is not None:
            raise AssertionError(f"duplicate opcode {op:#04x}")
        slots[op] = OpcodeInfo(op, name, fmt)
    return tuple(s if s is not None else OpcodeInfo(i, f"unused-{i:02x}", None)
                 for i, s in enumerate(slots))


OPCODES: tuple[OpcodeInfo, ...] = _build()
BY_MNEMONIC: dict[str, int] = {info.mnemonic: info.opcode for info in OPCODES}
DEFINED_OPCODES: tuple[int, ...] = tuple(info.opcode for info in OPCODES if info.defined)


def mnemonic(opcode: int) -> str:
    if 0 <= opcode < TABLE_SIZE:
        return OPCODES[opcode].mnemonic
    if opcode == UNK_OPCODE:
        return "<unk>"
    raise ValueError(f"not an opcode byte: {opcode!r}")


def opcode_of(name: str) -> int:
    """Opcode byte for a mnemonic (case-insensitive, so ``If-lt`` works)."""
    try:
        return BY_MNEMONIC[name.lower()]
    except KeyError:
        raise KeyError(f"unknown mnemonic {name!r}") from None


def is_defined(opcode: int) -> bool:
    return 0 <= opcode < TABLE_SIZE and OPCODES[opcode].defined


def family(opcode: int) -> str:
    """Coarse semantic group used for plotting (if, invoke, arith, ...)."""
    name = mnemonic(opcode)
    if name.startswith("if-"):
        return "branch"
    if name.startswith(("goto", "packed-switch", "sparse-switch")):
        return "jump"
    if name.startswith("invoke-"):
        return "invoke"
    if name.startswith(("move", "return")):
        return "move/return"
    if name.startswith("const"):
        return "const"
    if name.startswith(("aget", "aput", "iget", "iput", "sget", "sput")):
        return "field/array"
    if name.startswith(("cmp", "neg", "not", "add", "sub", "mul", "div", "rem", "and",
                        "or", "xor", "shl", "shr", "ushr", "rsub")) or "-to-" in name:
        return "arith"
    if name.startswith("unused"):
        return "unused"
    return "object"
