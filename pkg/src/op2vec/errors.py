"""Exception hierarchy shared by every pipeline stage."""

from __future__ import annotations


class Op2VecError(Exception):
    """Base class for all pipeline errors."""


# -- ingest ---------------------------------------------------------------

class IngestError(Op2VecError):
    pass


class NotAnArchive(IngestError):
    pass


class EntryNotFound(IngestError, KeyError):
    def __str__(self) -> str:  # KeyError quotes its message otherwise
        return Exception.__str__(self)


class CorruptEntry(IngestError):
    pass


# -- dex ------------------------------------------------------------------

class ParseError(Op2VecError):
    """Malformed DEX input. ``offset`` is a byte offset when known."""

    def __init__(self, message: str, offset: int | None = None, location: str | None = None):
        self.offset = offset
        self.location = location
        parts = [message]
        if location:
            parts.append(f"in {location}")
        if offset is not None:
            parts.append(f"at offset {offset:#x}")
        super().__init__(" ".join(parts))


class TooShort(ParseError):
    pass


class BadMagic(ParseError):
    pass


class BadEndianTag(ParseError):
    pass


class SizeMismatch(ParseError):
    pass


class UndefinedOpcode(ParseError):
    def __init__(self, opcode: int, offset: int | None = None, location: str | None = None):
        self.opcode = opcode
        super().__init__(f"undefined opcode {opcode:#04x}", offset, location)


class TruncatedInstruction(ParseError):
    pass


# -- corpus / embeddings --------------------------------------------------

class EmptyCorpus(Op2VecError):
    pass


class IndexOutOfRange(Op2VecError, IndexError):
    pass


class NonFiniteLoss(Op2VecError, FloatingPointError):
    pass


class ZeroVector(Op2VecError, ValueError):
    pass


class UnknownOpcode(Op2VecError, KeyError):
    def __init__(self, opcode: int, position: int | None = None):
        self.opcode = opcode
        self.position = position
        msg = f"opcode {opcode:#04x} not in embedding table"
        if position is not None:
            msg += f" (position {position})"
        super().__init__(msg)

    def __str__(self) -> str:
        return Exception.__str__(self)


# -- container formats ----------------------------------------------------

class FormatError(Op2VecError):
    pass


class BadFileMagic(FormatError):
    pass


class UnsupportedVersion(FormatError):
    pass


class TruncatedFile(FormatError):
    pass


# -- classifier -----------------------------------------------------------

class ClassifierError(Op2VecError):
    pass


class ShapeMismatch(ClassifierError, ValueError):
    pass


class LengthMismatch(ClassifierError, ValueError):
    pass


class EmptyDataset(ClassifierError):
    pass


class SingleClassDataset(ClassifierError):
    pass
