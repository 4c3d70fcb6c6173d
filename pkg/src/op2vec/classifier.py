"""Two-channel 1-D convolutional classifier over embedded programs.

Architecture: (conv -> ReLU -> max-pool)* -> conv -> ReLU -> global max pool
-> (dense -> ReLU)* -> dense -> sigmoid. Backpropagation is written out by
hand in float64 so the gradients can be checked against finite differences.
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import asdict, dataclass, field
from typing import Literal, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .dataset import EmbeddedProgram
from .errors import (
    BadFileMagic,
    EmptyDataset,
    LengthMismatch,
    NonFiniteLoss,
    ShapeMismatch,
    SingleClassDataset,
    TruncatedFile,
    UnsupportedVersion,
)

LossName = Literal["cross-entropy", "mse"]


@dataclass
class ClassifierConfig:
    input_length: int = 2048
    channels: int = 2
    conv_layers: list[tuple[int, int]] = field(default_factory=lambda: [(16, 8), (32, 8)])
    pool_widths: list[int] = field(default_factory=lambda: [4])
    dense_widths: list[int] = field(default_factory=list)
    loss: LossName = "cross-entropy"
    lr: float = 0.05
    momentum: float = 0.9
    epochs: int = 20
    batch_size: int = 16
    seed: int = 0
    threshold: float = 0.5
    val_fraction: float = 0.2

    def __post_init__(self) -> None:
        self.conv_layers = [tuple(int(v) for v in layer) for layer in self.conv_layers]
        self.pool_widths = [int(p) for p in self.pool_widths]
        self.dense_widths = [int(w) for w in self.dense_widths]
        if not self.conv_layers:
            raise ValueError("at least one conv layer is required")
        if len(self.pool_widths) != len(self.conv_layers) - 1:
            raise ValueError("need one pooling width between each pair of conv layers")
        widths = [self.input_length, self.channels, *self.pool_widths, *self.dense_widths,
                  *(v for layer in self.conv_layers for v in layer)]
        if min(widths) < 1:
            raise ValueError("all widths must be positive")
        if self.loss not in ("cross-entropy", "mse"):
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.feature_length() < 1:
            raise ValueError(f"input_length {self.input_length} too short for the conv stack")

    def feature_length(self) -> int:
        n = self.input_length
        for i, (_, k) in enumerate(self.conv_layers):
            n = n - k + 1
            if i < len(self.pool_widths):
                n //= self.pool_widths[i]
        return n

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ClassifierConfig":
        return cls(**d)


def param_shapes(config: ClassifierConfig) -> list[tuple[str, tuple[int, ...]]]:
    shapes = []
    c_in = config.channels
    for i, (filters, kernel) in enumerate(config.conv_layers):
        shapes += [(f"conv{i}.W", (kernel, c_in, filters)), (f"conv{i}.b", (filters,))]
        c_in = filters
    for i, width in enumerate(config.dense_widths):
        shapes += [(f"dense{i}.W", (width, c_in)), (f"dense{i}.b", (width,))]
        c_in = width
    shapes += [("out.W", (1, c_in)), ("out.b", (1,))]
    return shapes


@dataclass
class ClassifierModel:
    config: ClassifierConfig
    params: dict[str, np.ndarray]

    def copy(self) -> "ClassifierModel":
        return ClassifierModel(self.config, {k: v.copy() for k, v in self.params.items()})


def init_classifier(config: ClassifierConfig, seed: int | None = None) -> ClassifierModel:
    rng = np.random.default_rng(config.seed if seed is None else seed)
    params = {}
    for name, shape in param_shapes(config):
        if name.endswith(".b"):
            params[name] = np.zeros(shape)
            continue
        fan_in = int(np.prod(shape[:-1])) if name.startswith("conv") else shape[1]
        gain = 1.0 if name == "out.W" else 6.0
        limit = math.sqrt(gain / fan_in)
        params[name] = rng.uniform(-limit, limit, size=shape)
    return ClassifierModel(config, params)


def zero_classifier(config: ClassifierConfig) -> ClassifierModel:
    return ClassifierModel(config, {n: np.zeros(s) for n, s in param_shapes(config)})


# -- layers -----------------------------------------------------------------

def _conv_forward(x, W, b):
    K, C, F = W.shape
    B, L, _ = x.shape
    T = L - K + 1
    # (B, T, C, K) -> (B, T, K, C) so columns line up with W.reshape(K*C, F)
    cols = sliding_window_view(x, K, axis=1).transpose(0, 1, 3, 2).reshape(B * T, K * C)
    z = (cols @ W.reshape(K * C, F)).reshape(B, T, F) + b
    return z, cols


def _conv_backward(dz, cols, x_shape, W):
    K, C, F = W.shape
    B, L, _ = x_shape
    T = L - K + 1
    dz2 = dz.reshape(B * T, F)
    dW = (cols.T @ dz2).reshape(K, C, F)
    db = dz2.sum(axis=0)
    dcols = (dz2 @ W.reshape(K * C, F).T).reshape(B, T, K, C)
    dx = np.zeros(x_shape)
    for k in range(K):
        dx[:, k:k + T, :] += dcols[:, :, k, :]
    return dx, dW, db


def _pool_forward(a, p):
    B, T, F = a.shape
    Tp = T // p
    win = a[:, :Tp * p].reshape(B, Tp, p, F)
    idx = win.argmax(axis=2)
    return np.take_along_axis(win, idx[:, :, None, :], axis=2)[:, :, 0, :], idx


def _pool_backward(dout, idx, a_shape, p):
    B, T, F = a_shape
    Tp = dout.shape[1]
    dwin = np.zeros((B, Tp, p, F))
    np.put_along_axis(dwin, idx[:, :, None, :], dout[:, :, None, :], axis=2)
    da = np.zeros(a_shape)
    da[:, :Tp * p] = dwin.reshape(B, Tp * p, F)
    return da


def _forward(model: ClassifierModel, X: np.ndarray):
    cfg, P = model.config, model.params
    cache = []
    a = X
    n_conv = len(cfg.conv_layers)
    for i in range(n_conv):
        z, cols = _conv_forward(a, P[f"conv{i}.W"], P[f"conv{i}.b"])
        r = np.maximum(z, 0.0)
        entry = {"x_shape": a.shape, "cols": cols, "z": z}
        if i < n_conv - 1:
            r2, idx = _pool_forward(r, cfg.pool_widths[i])
            entry.update(pool_idx=idx, r_shape=r.shape)
            r = r2
        cache.append(entry)
        a = r
    gidx = a.argmax(axis=1)
    h = np.take_along_axis(a, gidx[:, None, :], axis=1)[:, 0, :]
    global_cache = (gidx, a.shape)
    dense_cache = []
    for i in range(len(cfg.dense_widths)):
        z = h @ P[f"dense{i}.W"].T + P[f"dense{i}.b"]
        dense_cache.append((h, z))
        h = np.maximum(z, 0.0)
    logit = (h @ P["out.W"].T + P["out.b"])[:, 0]
    return logit, (cache, global_cache, dense_cache, h)


def _backward(model: ClassifierModel, dlogit: np.ndarray, caches) -> dict[str, np.ndarray]:
    cfg, P = model.config, model.params
    cache, (gidx, a_shape), dense_cache, h = caches
    grads = {}
    dl = dlogit[:, None]
    grads["out.W"] = dl.T @ h
    grads["out.b"] = dl.sum(axis=0)
    dh = dl @ P["out.W"]
    for i in reversed(range(len(cfg.dense_widths))):
        h_in, z = dense_cache[i]
        dz = dh * (z > 0)
        grads[f"dense{i}.W"] = dz.T @ h_in
        grads[f"dense{i}.b"] = dz.sum(axis=0)
        dh = dz @ P[f"dense{i}.W"]
    da = np.zeros(a_shape)
    np.put_along_axis(da, gidx[:, None, :], dh[:, None, :], axis=1)
    for i in reversed(range(len(cfg.conv_layers))):
        entry = cache[i]
        if "pool_idx" in entry:
            da = _pool_backward(da, entry["pool_idx"], entry["r_shape"], cfg.pool_widths[i])
        dz = da * (entry["z"] > 0)
        da, grads[f"conv{i}.W"], grads[f"conv{i}.b"] = _conv_backward(
            dz, entry["cols"], entry["x_shape"], P[f"conv{i}.W"])
    return grads


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                    np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


def _check_batch(model: ClassifierModel, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2:
        X = X[None]
    cfg = model.config
    if X.ndim != 3 or X.shape[1:] != (cfg.input_length, cfg.channels):
        raise ShapeMismatch(f"expected frames of shape ({cfg.input_length}, {cfg.channels}), "
                            f"got {X.shape[1:] if X.ndim == 3 else X.shape}")
    return X


def predict_proba(model: ClassifierModel, X: np.ndarray, batch_size: int = 64) -> np.ndarray:
    X = _check_batch(model, X)
    out = [sigmoid(_forward(model, X[i:i + batch_size])[0]) for i in range(0, len(X), batch_size)]
    return np.concatenate(out) if out else np.empty(0)


def forward_pass(model: ClassifierModel, frame: np.ndarray) -> float:
    """Probability that a single L x D frame is malicious."""
    frame = np.asarray(frame)
    if frame.ndim != 2:
        raise ShapeMismatch(f"frame must be L x D, got shape {frame.shape}")
    return float(predict_proba(model, frame[None])[0])


def loss_and_grads(model: ClassifierModel, X: np.ndarray, y: np.ndarray):
    """Mean batch loss and its gradient for every parameter."""
    X = _check_batch(model, X)
    y = np.asarray(y, dtype=np.float64)
    B = len(X)
    logit, caches = _forward(model, X)
    p = sigmoid(logit)
    if model.config.loss == "cross-entropy":
        loss = float(np.mean(np.logaddexp(0.0, logit) - y * logit))
        dlogit = (p - y) / B
    else:
        loss = float(np.mean(0.5 * (p - y) ** 2))
        dlogit = (p - y) * p * (1.0 - p) / B
    return loss, _backward(model, dlogit, caches)


def batch_loss(model: ClassifierModel, X: np.ndarray, y: np.ndarray) -> float:
    X = _check_batch(model, X)
    y = np.asarray(y, dtype=np.float64)
    logit, _ = _forward(model, X)
    if model.config.loss == "cross-entropy":
        return float(np.mean(np.logaddexp(0.0, logit) - y * logit))
    return float(np.mean(0.5 * (sigmoid(logit) - y) ** 2))


# -- squared-error primitives ----------------------------------------------

def linear(W: np.ndarray, x: np.ndarray) -> np.ndarray:
    """y_k = sum_i w_ki x_i."""
    W = np.asarray(W, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if W.ndim != 2 or W.shape[1] != x.shape[-1]:
        raise ShapeMismatch(f"weights {W.shape} incompatible with input {x.shape}")
    return W @ x


def mse_loss(pred, target) -> float:
    """Half the summed squared error, 0.5 * sum_k (y_k - t_k)^2."""
    y = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if y.shape != t.shape:
        raise LengthMismatch(f"prediction shape {y.shape} != target shape {t.shape}")
    return 0.5 * float(np.sum((y - t) ** 2))


def mse_grad(pred, target, x) -> np.ndarray:
    """dE/dw_ji = (y_j - t_j) * x_i for a linear layer y = W x."""
    y = np.atleast_1d(np.asarray(pred, dtype=np.float64))
    t = np.atleast_1d(np.asarray(target, dtype=np.float64))
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    if y.shape != t.shape or y.ndim != 1 or x.ndim != 1:
        raise ShapeMismatch(f"pred {y.shape}, target {t.shape}, input {x.shape}")
    return np.outer(y - t, x)


# -- data handling ----------------------------------------------------------

def pad_or_truncate(program: EmbeddedProgram | np.ndarray, L: int) -> np.ndarray:
    data = program.data if isinstance(program, EmbeddedProgram) else np.asarray(program)
    if L < 1:
        raise ValueError("L must be >= 1")
    out = np.zeros((L, data.shape[1]), dtype=data.dtype)
    n = min(L, data.shape[0])
    out[:n] = data[:n]
    return out


def frames(records: Sequence[EmbeddedProgram], L: int) -> tuple[np.ndarray, np.ndarray]:
    if not records:
        raise EmptyDataset("no records")
    X = np.stack([pad_or_truncate(r, L) for r in records]).astype(np.float64)
    y = np.array([r.label for r in records], dtype=np.float64)
    return X, y


def stratified_split(labels: np.ndarray, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Indices (train, held_out); each class contributes round(fraction * n_c)."""
    rng = np.random.default_rng([seed, 2])
    train, held = [], []
    for cls in (0, 1):
        idx = np.flatnonzero(labels == cls)
        idx = idx[rng.permutation(len(idx))]
        k = int(round(fraction * len(idx)))
        if len(idx) >= 2:
            k = min(max(k, 1 if fraction > 0 else 0), len(idx) - 1)
        else:
            k = 0
        held.append(idx[:k])
        train.append(idx[k:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(held))


# -- metrics ----------------------------------------------------------------

@dataclass(frozen=True)
class Metrics:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @property
    def accuracy(self) -> float | None:
        return (self.tp + self.tn) / self.total if self.total else None

    @property
    def precision(self) -> float | None:
        d = self.tp + self.fp
        return self.tp / d if d else None

    @property
    def recall(self) -> float | None:
        d = self.tp + self.fn
        return self.tp / d if d else None

    @property
    def f1(self) -> float | None:
        p, r = self.precision, self.recall
        if p is None or r is None or p + r == 0:
            return None
        return 2 * p * r / (p + r)

    def to_dict(self) -> dict:
        return {"tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn,
                "accuracy": self.accuracy, "precision": self.precision,
                "recall": self.recall, "f1": self.f1}

    @classmethod
    def from_predictions(cls, y_true, y_pred) -> "Metrics":
        t = np.asarray(y_true).astype(bool)
        p = np.asarray(y_pred).astype(bool)
        return cls(int(np.sum(t & p)), int(np.sum(~t & p)),
                   int(np.sum(~t & ~p)), int(np.sum(t & ~p)))


def evaluate(model: ClassifierModel, records, threshold: float | None = None) -> Metrics:
    """Confusion counts for records (EmbeddedPrograms or an (X, y) pair)."""
    if isinstance(records, tuple):
        X, y = records
    else:
        X, y = frames(records, model.config.input_length)
    if len(X) == 0:
        raise EmptyDataset("cannot evaluate an empty dataset")
    thr = model.config.threshold if threshold is None else threshold
    return Metrics.from_predictions(y, predict_proba(model, X) >= thr)


# -- training ---------------------------------------------------------------

@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    metrics: Metrics | None  # held-out; None when the split is empty

    def to_dict(self) -> dict:
        out = {"epoch": self.epoch, "train_loss": self.train_loss}
        out.update(self.metrics.to_dict() if self.metrics else {})
        return out


def train_classifier(records: Sequence[EmbeddedProgram] | tuple[np.ndarray, np.ndarray],
                     config: ClassifierConfig, *, progress=None) -> tuple[ClassifierModel, list[EpochStats]]:
    """Mini-batch SGD with momentum; held-out metrics reported after each epoch."""
    X, y = records if isinstance(records, tuple) else frames(records, config.input_length)
    if len(X) == 0:
        raise EmptyDataset("no records")
    train_idx, held_idx = stratified_split(y, config.val_fraction, config.seed)
    if len(np.unique(y[train_idx])) < 2:
        raise SingleClassDataset("training split must contain both labels")
    model = init_classifier(config)
    velocity = {k: np.zeros_like(v) for k, v in model.params.items()}
    rng = np.random.default_rng([config.seed, 3])
    history = []
    for epoch in range(1, config.epochs + 1):
        order = train_idx[rng.permutation(len(train_idx))]
        total, seen = 0.0, 0
        for start in range(0, len(order), config.batch_size):
            batch = order[start:start + config.batch_size]
            loss, grads = loss_and_grads(model, X[batch], y[batch])
            if not math.isfinite(loss):
                raise NonFiniteLoss(f"non-finite loss at epoch {epoch}, batch {start // config.batch_size}")
            for name, g in grads.items():
                velocity[name] = config.momentum * velocity[name] - config.lr * g
                model.params[name] += velocity[name]
            total += loss * len(batch)
            seen += len(batch)
        metrics = evaluate(model, (X[held_idx], y[held_idx])) if len(held_idx) else None
        stats = EpochStats(epoch, total / seen, metrics)
        history.append(stats)
        if progress is not None:
            progress(stats)
    return model, history


# -- checkpoint -------------------------------------------------------------

O2VC_MAGIC = b"O2VC"
O2VC_VERSION = 1


def encode_checkpoint(model: ClassifierModel) -> bytes:
    cfg = model.config.to_json().encode()
    parts = [O2VC_MAGIC, struct.pack("<HI", O2VC_VERSION, len(cfg)), cfg]
    shapes = param_shapes(model.config)
    parts.append(struct.pack("<I", len(shapes)))
    for name, shape in shapes:
        arr = model.params[name]
        if arr.shape != shape:
            raise ShapeMismatch(f"{name} has shape {arr.shape}, config implies {shape}")
        parts.append(struct.pack(f"<I{len(shape)}I", len(shape), *shape))
        parts.append(arr.astype("<f4").tobytes())
    return b"".join(parts)


def decode_checkpoint(buf: bytes) -> ClassifierModel:
    if len(buf) < 10:
        raise TruncatedFile("O2VC header truncated")
    if buf[:4] != O2VC_MAGIC:
        raise BadFileMagic(f"expected O2VC magic, got {bytes(buf[:4])!r}")
    version, n = struct.unpack_from("<HI", buf, 4)
    if version != O2VC_VERSION:
        raise UnsupportedVersion(f"O2VC version {version}")
    off = 10
    if off + n + 4 > len(buf):
        raise TruncatedFile("O2VC config truncated")
    config = ClassifierConfig.from_dict(json.loads(buf[off:off + n]))
    off += n
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    expected = param_shapes(config)
    if count != len(expected):
        raise ShapeMismatch(f"checkpoint has {count} tensors, config implies {len(expected)}")
    params = {}
    try:
        for name, shape in expected:
            (ndim,) = struct.unpack_from("<I", buf, off)
            dims = struct.unpack_from(f"<{ndim}I", buf, off + 4)
            off += 4 + 4 * ndim
            if tuple(dims) != shape:
                raise ShapeMismatch(f"{name}: stored shape {dims}, config implies {shape}")
            size = int(np.prod(dims))
            if off + 4 * size > len(buf):
                raise TruncatedFile(f"{name} truncated")
            params[name] = np.frombuffer(buf, "<f4", size, off).reshape(dims).astype(np.float64)
            off += 4 * size
    except struct.error:
        raise TruncatedFile("O2VC tensor header truncated") from None
    return ClassifierModel(config, params)


def save_checkpoint(model: ClassifierModel, path: str | os.PathLike) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_checkpoint(model))


def load_checkpoint(path: str | os.PathLike) -> ClassifierModel:
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())
