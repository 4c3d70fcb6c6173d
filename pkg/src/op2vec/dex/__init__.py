from .opcodes import OPCODES, TABLE_SIZE, UNK_OPCODE, mnemonic, opcode_of
from .parser import (
    CodeItem,
    DexFile,
    DexHeader,
    Instruction,
    OpcodeSequence,
    decode_instruction,
    extract_opcode_sequence,
    extract_opcodes,
    parse_header,
    verify_checksum,
    walk_code_item,
)
from .seqio import read_opsq, write_opsq

__all__ = [
    "OPCODES", "TABLE_SIZE", "UNK_OPCODE", "mnemonic", "opcode_of",
    "CodeItem", "DexFile", "DexHeader", "Instruction", "OpcodeSequence",
    "decode_instruction", "extract_opcode_sequence", "extract_opcodes",
    "parse_header", "verify_checksum", "walk_code_item",
    "read_opsq", "write_opsq",
]
