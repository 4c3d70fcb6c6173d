"""Vocabulary construction and skip-gram training pairs."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Literal, Sequence

import numpy as np

from .dex.opcodes import TABLE_SIZE, mnemonic
from .dex.parser import OpcodeSequence
from .errors import EmptyCorpus, IndexOutOfRange

DEFAULT_WINDOW = 5
VocabMode = Literal["full-table", "observed"]


@dataclass(frozen=True)
class Vocabulary:
    opcode_of: tuple[int, ...]

    def __post_init__(self) -> None:
        if len(self.opcode_of) < 2:
            raise ValueError("vocabulary needs at least 2 opcodes")
        if list(self.opcode_of) != sorted(set(self.opcode_of)):
            raise ValueError("vocabulary opcodes must be unique and byte-ascending")

    @property
    def V(self) -> int:
        return len(self.opcode_of)

    @property
    def index_of(self) -> dict[int, int]:
        return {op: i for i, op in enumerate(self.opcode_of)}

    def __len__(self) -> int:
        return len(self.opcode_of)

    def __contains__(self, opcode: int) -> bool:
        return opcode in self.index_of

    def encode(self, opcodes: Iterable[int]) -> np.ndarray:
        index = self.index_of
        return np.fromiter((index[op] for op in opcodes), dtype=np.int64)


def build_vocabulary(sequences: Sequence[OpcodeSequence | Sequence[int]],
                     mode: VocabMode = "full-table") -> Vocabulary:
    if mode == "full-table":
        return Vocabulary(tuple(range(TABLE_SIZE)))
    if mode != "observed":
        raise ValueError(f"unknown vocabulary mode {mode!r}")
    seen: set[int] = set()
    for seq in sequences:
        seen.update(seq.opcodes if isinstance(seq, OpcodeSequence) else seq)
    if not seen:
        raise EmptyCorpus("observed-mode vocabulary over an empty corpus")
    return Vocabulary(tuple(sorted(seen)))


def generate_pairs(tokens: Sequence, window: int = DEFAULT_WINDOW) -> list[tuple]:
    """(center, context) pairs for every context token within ``window`` of the center.

    Position-major; contexts left to right. Works on any token type.
    """
    if window < 1:
        raise ValueError("window must be >= 1")
    n = len(tokens)
    pairs = []
    for i in range(n):
        center = tokens[i]
        for j in range(max(0, i - window), min(n, i + window + 1)):
            if j != i:
                pairs.append((center, tokens[j]))
    return pairs


def pair_arrays(encoded: np.ndarray, window: int = DEFAULT_WINDOW) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised ``generate_pairs`` over an index array, same ordering."""
    if window < 1:
        raise ValueError("window must be >= 1")
    n = len(encoded)
    offsets = np.array([d for d in range(-window, window + 1) if d], dtype=np.int64)
    pos = np.arange(n)[:, None]
    ctx = pos + offsets[None, :]
    valid = (ctx >= 0) & (ctx < n)
    centers = np.broadcast_to(pos, ctx.shape)[valid]
    return encoded[centers], encoded[ctx[valid]]


def count_pairs(length: int, window: int) -> int:
    return sum(min(i, window) + min(length - 1 - i, window) for i in range(length))


def corpus_pairs(sequences: Iterable[OpcodeSequence], vocab: Vocabulary,
                 window: int = DEFAULT_WINDOW) -> tuple[np.ndarray, np.ndarray]:
    """Pairs for a whole corpus; windows never cross file boundaries."""
    centers, contexts = [], []
    for seq in sequences:
        c, o = pair_arrays(vocab.encode(seq.opcodes), window)
        centers.append(c)
        contexts.append(o)
    if not centers:
        return np.empty(0, np.int64), np.empty(0, np.int64)
    return np.concatenate(centers), np.concatenate(contexts)


def one_hot(index: int, V: int) -> np.ndarray:
    if not 0 <= index < V:
        raise IndexOutOfRange(f"index {index} outside [0, {V})")
    vec = np.zeros(V)
    vec[index] = 1.0
    return vec


# -- manifest -------------------------------------------------------------

@dataclass
class ManifestEntry:
    path: str
    label: int | None = None
    token_count: int | None = None
    sha256: str | None = None


def file_sha256(path: str | os.PathLike) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def read_manifest(path: str | os.PathLike) -> list[ManifestEntry]:
    """Read a manifest; relative entry paths resolve against its directory."""
    base = Path(path).parent
    with open(path) as fh:
        raw = json.load(fh)
    if not isinstance(raw, list):
        raise ValueError(f"{path}: manifest must be a JSON array")
    entries = []
    for item in raw:
        label = item.get("label")
        if label not in (None, 0, 1):
            raise ValueError(f"{path}: label must be 0 or 1, got {label!r}")
        p = Path(item["path"])
        entries.append(ManifestEntry(str(p if p.is_absolute() else base / p), label,
                                     item.get("token_count"), item.get("sha256")))
    return entries


def write_manifest(entries: Iterable[ManifestEntry], path: str | os.PathLike) -> None:
    base = Path(path).parent.resolve()
    rows = []
    for e in entries:
        p = Path(e.path).resolve()
        rel = os.path.relpath(p, base) if p.is_relative_to(base) else str(p)
        rows.append({"path": rel, "label": e.label, "token_count": e.token_count,
                     "sha256": e.sha256})
    Path(path).write_text(json.dumps(rows, indent=2) + "\n")


def write_vocabulary(vocab: Vocabulary, counts: dict[int, int], path: str | os.PathLike) -> None:
    """Tab-separated ``index opcode mnemonic count`` lines."""
    with open(path, "w") as fh:
        fh.write("index\topcode\tmnemonic\tcount\n")
        for i, op in enumerate(vocab.opcode_of):
            fh.write(f"{i}\t{op:02x}\t{mnemonic(op)}\t{counts.get(op, 0)}\n")
