"""Skip-gram opcode embeddings: full-softmax network, training and lookup.

Weights are stored with one row per opcode: ``W_in`` is V x D and its rows are
the embedding vectors (the transpose of a D x V hidden-layer matrix).
``W_out`` is D x V and maps the hidden vector to V output logits.
"""

from __future__ import annotations

import csv
import math
import os
import struct
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .corpus import Vocabulary
from .dex.opcodes import mnemonic, opcode_of
from .errors import (
    BadFileMagic,
    EmptyCorpus,
    NonFiniteLoss,
    TruncatedFile,
    UnknownOpcode,
    UnsupportedVersion,
    ZeroVector,
)

try:
    import numba
except ImportError:  # pragma: no cover
    numba = None

LR_FLOOR = 1e-4


@dataclass
class TrainConfig:
    window: int = 5
    dim: int = 2
    lr0: float = 0.025
    epochs: int = 5
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self) -> None:
        if self.window < 1 or self.dim < 1 or self.epochs < 1:
            raise ValueError("window, dim and epochs must be >= 1")
        if not self.lr0 > 0:
            raise ValueError("lr0 must be positive")


@dataclass
class EmbeddingModel:
    W_in: np.ndarray
    W_out: np.ndarray
    seed: int = 0
    config: TrainConfig | None = None

    @property
    def V(self) -> int:
        return self.W_in.shape[0]

    @property
    def D(self) -> int:
        return self.W_in.shape[1]


@dataclass
class TrainTrace:
    epoch_loss: list[float] = field(default_factory=list)
    pair_count: int = 0


def init_model(V: int, D: int, seed: int = 0) -> EmbeddingModel:
    if V < 2 or D < 1:
        raise ValueError(f"need V >= 2 and D >= 1, got V={V}, D={D}")
    rng = np.random.default_rng(seed)
    W_in = rng.uniform(-0.5 / D, 0.5 / D, size=(V, D))
    return EmbeddingModel(W_in, np.zeros((D, V)), seed)


def softmax(u: np.ndarray) -> np.ndarray:
    z = np.exp(u - u.max())
    return z / z.sum()


def forward(model: EmbeddingModel, center: int) -> np.ndarray:
    """Probability of every vocabulary entry appearing near ``center``."""
    return softmax(model.W_in[center] @ model.W_out)


def pair_loss(model: EmbeddingModel, center: int, context: int) -> float:
    u = model.W_in[center] @ model.W_out
    m = u.max()
    return float(m + math.log(np.exp(u - m).sum()) - u[context])


def gradients(model: EmbeddingModel, center: int, context: int) -> tuple[float, np.ndarray, np.ndarray]:
    """Loss, d/dW_in[center] (length D) and d/dW_out (D x V)."""
    h = model.W_in[center]
    u = h @ model.W_out
    m = u.max()
    z = np.exp(u - m)
    s = z.sum()
    loss = float(m + math.log(s) - u[context])
    e = z / s
    e[context] -= 1.0
    return loss, model.W_out @ e, np.outer(h, e)


def train_step(model: EmbeddingModel, center: int, context: int, lr: float) -> float:
    """One SGD update on a (center, context) pair; returns the pre-update loss."""
    loss, g_in, g_out = gradients(model, center, context)
    if not math.isfinite(loss):
        raise NonFiniteLoss(f"loss {loss} on pair ({center}, {context})")
    model.W_out -= lr * g_out
    model.W_in[center] -= lr * g_in
    return loss


def _epoch_py(W_in, W_out, centers, contexts, order, lr0, total, step0, losses):
    model = EmbeddingModel(W_in, W_out)
    for n, k in enumerate(order):
        losses[n] = train_step(model, centers[k], contexts[k], _lr(lr0, step0 + n, total))


def _lr(lr0: float, step: int, total: int) -> float:
    if total <= 1:
        return lr0
    return lr0 * (1.0 - (1.0 - LR_FLOOR) * step / (total - 1))


if numba is not None:
    _lr_jit = numba.njit(cache=True)(_lr)

    @numba.njit(cache=True)
    def _epoch_jit(W_in, W_out, centers, contexts, order, lr0, total, step0, losses):
        D, V = W_out.shape
        u = np.empty(V)
        g = np.empty(D)
        h = np.empty(D)
        for n in range(order.shape[0]):
            k = order[n]
            c = centers[k]
            o = contexts[k]
            lr = _lr_jit(lr0, step0 + n, total)
            for d in range(D):
                h[d] = W_in[c, d]
            m = -np.inf
            for j in range(V):
                acc = 0.0
                for d in range(D):
                    acc += h[d] * W_out[d, j]
                u[j] = acc
                if acc > m:
                    m = acc
            uo = u[o]
            s = 0.0
            for j in range(V):
                u[j] = math.exp(u[j] - m)
                s += u[j]
            loss = m + math.log(s) - uo
            losses[n] = loss
            if not math.isfinite(loss):
                return n
            for d in range(D):
                g[d] = 0.0
            for j in range(V):
                e = u[j] / s
                if j == o:
                    e -= 1.0
                for d in range(D):
                    g[d] += W_out[d, j] * e
                    W_out[d, j] -= lr * e * h[d]
            for d in range(D):
                W_in[c, d] -= lr * g[d]
        return -1


def train(centers: np.ndarray, contexts: np.ndarray, config: TrainConfig,
          V: int, *, use_jit: bool = True) -> tuple[EmbeddingModel, TrainTrace]:
    """Train on pre-generated (center, context) index arrays."""
    centers = np.ascontiguousarray(centers, dtype=np.int64)
    contexts = np.ascontiguousarray(contexts, dtype=np.int64)
    n = len(centers)
    if n == 0:
        raise EmptyCorpus("no training pairs")
    model = init_model(V, config.dim, config.seed)
    model.config = config
    # separate streams: initialisation must not depend on shuffling
    rng = np.random.default_rng([config.seed, 1])
    total = n * config.epochs
    trace = TrainTrace(pair_count=n)
    losses = np.empty(n)
    for epoch in range(config.epochs):
        order = rng.permutation(n) if config.shuffle else np.arange(n)
        if use_jit and numba is not None:
            bad = _epoch_jit(model.W_in, model.W_out, centers, contexts, order,
                             config.lr0, total, epoch * n, losses)
            if bad >= 0:
                raise NonFiniteLoss(f"non-finite loss at epoch {epoch}, step {bad}")
        else:
            try:
                _epoch_py(model.W_in, model.W_out, centers, contexts, order,
                          config.lr0, total, epoch * n, losses)
            except NonFiniteLoss as exc:
                raise NonFiniteLoss(f"epoch {epoch}: {exc}") from None
        trace.epoch_loss.append(float(losses.mean()))
    return model, trace


def train_model(sequences, vocab: Vocabulary, config: TrainConfig, **kw) -> tuple[EmbeddingModel, TrainTrace]:
    from .corpus import corpus_pairs

    centers, contexts = corpus_pairs(sequences, vocab, config.window)
    return train(centers, contexts, config, vocab.V, **kw)


# -- embedding table --------------------------------------------------------

@dataclass
class EmbeddingTable:
    opcodes: tuple[int, ...]
    vectors: np.ndarray  # V x D

    def __post_init__(self) -> None:
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.shape[0] != len(self.opcodes):
            raise ValueError("one vector per opcode required")
        if not np.all(np.isfinite(self.vectors)):
            raise ValueError("embedding table contains non-finite values")
        self._index = {op: i for i, op in enumerate(self.opcodes)}

    @property
    def V(self) -> int:
        return len(self.opcodes)

    @property
    def D(self) -> int:
        return self.vectors.shape[1]

    def __contains__(self, opcode: int) -> bool:
        return opcode in self._index

    def index(self, opcode: int | str) -> int:
        if isinstance(opcode, str):
            opcode = opcode_of(opcode)
        try:
            return self._index[opcode]
        except KeyError:
            raise UnknownOpcode(opcode) from None

    def __getitem__(self, opcode: int | str) -> np.ndarray:
        return self.vectors[self.index(opcode)]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, EmbeddingTable):
            return NotImplemented
        return self.opcodes == other.opcodes and np.array_equal(self.vectors, other.vectors)

    def as_dict(self) -> dict[str, np.ndarray]:
        return {mnemonic(op): self.vectors[i] for i, op in enumerate(self.opcodes)}


def embeddings(model: EmbeddingModel, vocab: Vocabulary) -> EmbeddingTable:
    if model.V != vocab.V:
        raise ValueError(f"model has V={model.V}, vocabulary has V={vocab.V}")
    return EmbeddingTable(vocab.opcode_of, model.W_in.copy())


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ZeroVector("cosine similarity of a zero vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def nearest(table: EmbeddingTable, opcode: int | str, k: int = 5) -> list[tuple[int, float]]:
    """Top-k opcodes by cosine similarity to ``opcode`` (ties: lower byte first).

    Zero vectors in the table are skipped since their similarity is undefined.
    """
    q = table.index(opcode)
    if not 1 <= k < table.V:
        raise ValueError(f"k must lie in [1, {table.V - 1}]")
    query = table.vectors[q]
    qn = np.linalg.norm(query)
    if qn == 0:
        raise ZeroVector(f"query opcode {table.opcodes[q]:#04x} has a zero vector")
    norms = np.linalg.norm(table.vectors, axis=1)
    scored = []
    for i, op in enumerate(table.opcodes):
        if i == q or norms[i] == 0:
            continue
        sim = float(np.clip(table.vectors[i] @ query / (norms[i] * qn), -1.0, 1.0))
        scored.append((op, sim))
    scored.sort(key=lambda t: (-t[1], t[0]))
    return scored[:k]


# -- file formats -----------------------------------------------------------

O2VT_MAGIC = b"O2VT"
O2VT_VERSION = 1
_O2VT_HEADER = struct.Struct("<4sHII")


def encode_table_records(table: EmbeddingTable) -> bytes:
    """V records of (u8 opcode, D x f32 LE); shared with the dataset container."""
    rec = np.zeros(table.V, dtype=[("op", "u1"), ("vec", "<f4", (table.D,))])
    rec["op"] = table.opcodes
    rec["vec"] = table.vectors
    return rec.tobytes()


def decode_table_records(buf: bytes, offset: int, V: int, D: int) -> tuple[EmbeddingTable, int]:
    dtype = np.dtype([("op", "u1"), ("vec", "<f4", (D,))])
    end = offset + V * dtype.itemsize
    if end > len(buf):
        raise TruncatedFile("embedding table truncated")
    rec = np.frombuffer(buf, dtype=dtype, count=V, offset=offset)
    return EmbeddingTable(tuple(int(o) for o in rec["op"]),
                          rec["vec"].astype(np.float64).reshape(V, D)), end


def encode_table(table: EmbeddingTable) -> bytes:
    return _O2VT_HEADER.pack(O2VT_MAGIC, O2VT_VERSION, table.V, table.D) + encode_table_records(table)


def decode_table(buf: bytes) -> EmbeddingTable:
    if len(buf) < _O2VT_HEADER.size:
        raise TruncatedFile("O2VT header truncated")
    magic, version, V, D = _O2VT_HEADER.unpack_from(buf)
    if magic != O2VT_MAGIC:
        raise BadFileMagic(f"expected O2VT magic, got {magic!r}")
    if version != O2VT_VERSION:
        raise UnsupportedVersion(f"O2VT version {version}")
    table, _ = decode_table_records(buf, _O2VT_HEADER.size, V, D)
    return table


def save_table(table: EmbeddingTable, path: str | os.PathLike) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_table(table))


def load_table(path: str | os.PathLike) -> EmbeddingTable:
    with open(path, "rb") as fh:
        return decode_table(fh.read())


def save_table_text(table: EmbeddingTable, path: str | os.PathLike) -> None:
    with open(path, "w") as fh:
        fh.write(f"{table.V} {table.D}\n")
        for op, vec in zip(table.opcodes, table.vectors):
            fh.write(mnemonic(op) + " " + " ".join(repr(float(x)) for x in vec) + "\n")


def load_table_text(path: str | os.PathLike) -> EmbeddingTable:
    with open(path) as fh:
        V, D = map(int, fh.readline().split())
        ops, rows = [], []
        for _ in range(V):
            name, *vals = fh.readline().split()
            if len(vals) != D:
                raise TruncatedFile(f"{path}: expected {D} values for {name}")
            ops.append(opcode_of(name))
            rows.append([float(v) for v in vals])
    return EmbeddingTable(tuple(ops), np.array(rows).reshape(V, D))


def write_trace(trace: TrainTrace, path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "mean_loss"])
        for i, loss in enumerate(trace.epoch_loss, 1):
            w.writerow([i, repr(loss)])


def read_trace(path: str | os.PathLike) -> TrainTrace:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return TrainTrace([float(r["mean_loss"]) for r in rows])


def config_dict(config: TrainConfig) -> dict:
    return asdict(config)


def within_between_similarity(table: EmbeddingTable, groups: Sequence[Sequence[int]]) -> tuple[float, float]:
    """Mean pairwise cosine within groups and across groups."""
    within, cross = [], []
    for gi, ga in enumerate(groups):
        for gj, gb in enumerate(groups):
            if gj < gi:
                continue
            for a in ga:
                for b in gb:
                    if gi == gj and a >= b:
                        continue
                    (within if gi == gj else cross).append(cosine_similarity(table[a], table[b]))
    return float(np.mean(within)), float(np.mean(cross))
