"""Command-line pipeline: extract -> corpus -> train-embeddings -> embed
-> train-classifier -> evaluate, plus ``report`` for figures.

Configuration precedence: command-line flags > JSON config file >
``OP2VEC_SEED`` (seed only) > built-in defaults.
"""

from __future__ import annotations

import argparse
import glob
import json
import logging
import os
import sys
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

from . import __version__
from .apk import load_dex_inputs
from .classifier import (
    ClassifierConfig,
    evaluate,
    load_checkpoint,
    save_checkpoint,
    train_classifier,
)
from .corpus import (
    ManifestEntry,
    build_vocabulary,
    file_sha256,
    read_manifest,
    write_manifest,
    write_vocabulary,
)
from .dataset import embed_sequence, read_dataset, write_dataset
from .dex.parser import OpcodeSequence, extract_opcodes
from .dex.seqio import read_opsq, write_opsq, write_text
from .embedding import (
    TrainConfig,
    embeddings,
    load_table,
    read_trace,
    save_table,
    save_table_text,
    train_model,
    write_trace,
)
from .errors import Op2VecError

log = logging.getLogger("op2vec")


@dataclass
class PipelineConfig:
    seed: int = 0
    vocab_mode: str = "full-table"
    unk_policy: str = "error"
    embedding: TrainConfig = field(default_factory=TrainConfig)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)


def _pick(cls, raw: dict, section: str):
    known = {f.name for f in fields(cls)}
    unknown = set(raw) - known
    if unknown:
        raise ValueError(f"unknown {section} config keys: {sorted(unknown)}")
    return raw


def load_config(path: str | None, overrides: argparse.Namespace) -> PipelineConfig:
    raw: dict = {}
    if path:
        with open(path) as fh:
            raw = json.load(fh)
    top = {k: raw[k] for k in ("seed", "vocab_mode", "unk_policy") if k in raw}
    unknown = set(raw) - {"seed", "vocab_mode", "unk_policy", "embedding", "classifier"}
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    emb = dict(_pick(TrainConfig, raw.get("embedding", {}), "embedding"))
    clf = dict(_pick(ClassifierConfig, raw.get("classifier", {}), "classifier"))

    seed = top.get("seed")
    if seed is None and os.environ.get("OP2VEC_SEED"):
        seed = int(os.environ["OP2VEC_SEED"])
    if getattr(overrides, "seed", None) is not None:
        seed = overrides.seed
        emb["seed"] = clf["seed"] = seed
    seed = 0 if seed is None else int(seed)
    emb.setdefault("seed", seed)
    clf.setdefault("seed", seed)

    for attr, key in (("window", "window"), ("dim", "dim"), ("lr0", "lr0"),
                      ("emb_epochs", "epochs")):
        if getattr(overrides, attr, None) is not None:
            emb[key] = getattr(overrides, attr)
    if getattr(overrides, "no_shuffle", False):
        emb["shuffle"] = False
    for attr, key in (("input_length", "input_length"), ("lr", "lr"), ("epochs", "epochs"),
                      ("batch_size", "batch_size"), ("loss", "loss"), ("threshold", "threshold")):
        if getattr(overrides, attr, None) is not None:
            clf[key] = getattr(overrides, attr)
    cfg = PipelineConfig(seed=seed,
                         vocab_mode=top.get("vocab_mode", "full-table"),
                         unk_policy=top.get("unk_policy", "error"),
                         embedding=TrainConfig(**emb),
                         classifier=ClassifierConfig(**clf))
    if getattr(overrides, "vocab_mode", None):
        cfg.vocab_mode = overrides.vocab_mode
    if getattr(overrides, "unk_policy", None):
        cfg.unk_policy = overrides.unk_policy
    return cfg


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, sort_keys=True) + "\n")
    sys.stdout.flush()


def _progress(i: int, total: int, every: int, what: str) -> None:
    if every and (i % every == 0 or i == total):
        log.info("%s %d/%d", what, i, total)


def _map(fn, items: list, jobs: int):
    if jobs <= 1 or len(items) <= 1:
        yield from map(fn, items)
        return
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        yield from pool.map(fn, items, chunksize=max(1, len(items) // (4 * jobs)))


def _extract_one(job: tuple[str, str, bool]) -> list[int]:
    path, policy, check = job
    ops: list[int] = []
    for blob in load_dex_inputs(path):
        ops.extend(extract_opcodes(blob.data, source=blob.source, unk_policy=policy,
                                   check_checksum=check))
    return ops


def _load_labels(path: str | None) -> dict[str, int | None]:
    if not path:
        return {}
    return {str(Path(e.path).resolve()): e.label for e in read_manifest(path)}


def expand_inputs(patterns: list[str]) -> list[str]:
    """Literal paths pass through; anything else is a glob, sorted for stable order."""
    out = []
    for pat in patterns:
        if Path(pat).exists() or not glob.has_magic(pat):
            out.append(pat)
            continue
        hits = sorted(glob.glob(pat, recursive=True))
        if not hits:
            raise FileNotFoundError(f"no input matches {pat!r}")
        out.extend(hits)
    return out


def cmd_extract(args: argparse.Namespace) -> int:
    inputs = expand_inputs([str(p) for p in args.inputs])
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    labels = _load_labels(args.labels)
    policy = args.unk_policy or "error"
    jobs = [(p, policy, not args.no_checksum) for p in inputs]
    entries, used = [], Counter()
    text_seqs = []
    for i, (path, ops) in enumerate(zip(inputs, _map(_extract_one, jobs, args.jobs)), 1):
        stem = Path(path).stem
        used[stem] += 1
        name = stem if used[stem] == 1 else f"{stem}-{used[stem]}"
        target = out / f"{name}.opsq"
        write_opsq(ops, target)
        label = labels.get(str(Path(path).resolve()), args.label)
        entries.append(ManifestEntry(str(target), label, len(ops), file_sha256(target)))
        text_seqs.append(ops)
        _progress(i, len(inputs), args.progress_every, "extracted")
    write_manifest(entries, out / "manifest.json")
    if args.text:
        write_text(text_seqs, out / "opcodes.txt")
    _emit({"files": len(entries), "total_tokens": sum(e.token_count for e in entries),
           "manifest": str(out / "manifest.json")})
    return 0


def _load_sequences(manifest: str) -> list[OpcodeSequence]:
    seqs = []
    for entry in read_manifest(manifest):
        if entry.sha256 and file_sha256(entry.path) != entry.sha256:
            raise Op2VecError(f"{entry.path}: sha256 does not match manifest")
        seqs.append(read_opsq(entry.path, entry.label))
    return seqs


def cmd_corpus(args: argparse.Namespace) -> int:
    seqs = _load_sequences(args.manifest)
    vocab = build_vocabulary(seqs, args.vocab_mode or "full-table")
    counts = Counter(op for s in seqs for op in s.opcodes)
    Path(args.output).parent.mkdir(parents=True, exist_ok=True)
    write_vocabulary(vocab, counts, args.output)
    _emit({"files": len(seqs), "total_tokens": sum(len(s) for s in seqs),
           "V": vocab.V, "distinct_opcodes": len(counts)})
    return 0


def cmd_train_embeddings(args: argparse.Namespace) -> int:
    cfg = load_config(args.config, args)
    seqs = _load_sequences(args.manifest)
    vocab = build_vocabulary(seqs, cfg.vocab_mode)
    log.info("training skip-gram: V=%d D=%d window=%d epochs=%d", vocab.V, cfg.embedding.dim,
             cfg.embedding.window, cfg.embedding.epochs)
    model, trace = train_model(seqs, vocab, cfg.embedding)
    table = embeddings(model, vocab)
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_table(table, out)
    trace_path = out.with_suffix(".trace.csv")
    write_trace(trace, trace_path)
    if args.text:
        save_table_text(table, args.text)
    _emit({"V": table.V, "D": table.D, "pairs": trace.pair_count,
           "epoch_loss": trace.epoch_loss, "table": str(out), "trace": str(trace_path)})
    return 0


def _embed_one(job):
    seq, table, policy = job
    return embed_sequence(seq, table, policy)


def cmd_embed(args: argparse.Namespace) -> int:
    table = load_table(args.table)
    seqs = _load_sequences(args.manifest)
    missing = [s.source for s in seqs if s.label is None]
    if missing:
        raise Op2VecError(f"manifest entries without a label: {missing[:3]}")
    policy = args.unk_policy or "error"
    jobs = [(s, table, policy) for s in seqs]
    records = []
    for i, rec in enumerate(_map(_embed_one, jobs, args.jobs), 1):
        records.append(rec)
        _progress(i, len(jobs), args.progress_every, "embedded")
    Path(args.output).parent.mkdir(parents=True, exist_ok=True)
    summary = write_dataset(records, args.output, table)
    _emit({"records": summary.record_count, "V": summary.V, "D": summary.D,
           "dataset": summary.path})
    return 0


def cmd_train_classifier(args: argparse.Namespace) -> int:
    cfg = load_config(args.config, args)
    records = read_dataset(args.dataset)
    ccfg = cfg.classifier
    if records and records[0].data.shape[1] != ccfg.channels:
        ccfg = ClassifierConfig(**{**asdict(ccfg), "channels": records[0].data.shape[1]})
    history = []

    def report(stats):
        row = stats.to_dict()
        history.append(row)
        _emit(row)
        log.info("epoch %d loss %.4f", stats.epoch, stats.train_loss)

    model, _ = train_classifier(records, ccfg, progress=report)
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, out)
    from .report import write_history_csv

    write_history_csv(history, out.with_suffix(".history.csv"))
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    model = load_checkpoint(args.model)
    metrics = evaluate(model, read_dataset(args.dataset), args.threshold)
    _emit(metrics.to_dict())
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    from . import report
    from .dex.opcodes import opcode_of

    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    table = load_table(args.table)
    opcodes = None
    if args.manifest:
        opcodes = sorted({op for s in _load_sequences(args.manifest) for op in s.opcodes})
    if args.opcodes:
        opcodes = [int(t, 16) if all(c in "0123456789abcdefABCDEF" for c in t) and len(t) <= 2
                   else opcode_of(t) for t in args.opcodes.split(",")]
    written = []
    report.write_embedding_csv(table, out / "embeddings.csv", opcodes)
    written.append(out / "embeddings.csv")
    written.append(report.plot_embeddings(table, out / f"embeddings.{args.format}", opcodes,
                                          annotate=opcodes is not None))
    if args.trace:
        written.append(report.plot_loss(read_trace(args.trace), out / f"embedding_loss.{args.format}"))
    if args.history:
        written.append(report.plot_history(report.read_history_csv(args.history),
                                           out / f"classifier_history.{args.format}"))
    _emit({"files": [str(p) for p in written]})
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="op2vec", description="Op2Vec opcode-embedding pipeline for Android malware datasets.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def common(sp, jobs=False):
        sp.add_argument("--progress-every", type=int, default=100, metavar="N")
        if jobs:
            sp.add_argument("-j", "--jobs", type=int, default=1)

    def emb_flags(sp):
        sp.add_argument("-c", "--config")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--window", type=int)
        sp.add_argument("--dim", type=int)
        sp.add_argument("--lr0", type=float)
        sp.add_argument("--emb-epochs", type=int)
        sp.add_argument("--no-shuffle", action="store_true")
        sp.add_argument("--vocab-mode", choices=["full-table", "observed"])

    sp = sub.add_parser("extract", help="extract opcode sequences from APK/DEX files")
    sp.add_argument("inputs", nargs="+")
    sp.add_argument("-o", "--output", required=True)
    sp.add_argument("--label", type=int, choices=[0, 1])
    sp.add_argument("--labels", help="JSON manifest of {path, label} for the inputs")
    sp.add_argument("--unk-policy", choices=["error", "skip", "unk"])
    sp.add_argument("--no-checksum", action="store_true")
    sp.add_argument("--text", action="store_true", help="also write opcodes.txt")
    common(sp, jobs=True)
    sp.set_defaults(func=cmd_extract)

    sp = sub.add_parser("corpus", help="build the vocabulary file")
    sp.add_argument("-m", "--manifest", required=True)
    sp.add_argument("-o", "--output", required=True)
    sp.add_argument("--vocab-mode", choices=["full-table", "observed"])
    sp.set_defaults(func=cmd_corpus)

    sp = sub.add_parser("train-embeddings", help="train skip-gram opcode embeddings")
    sp.add_argument("-m", "--manifest", required=True)
    sp.add_argument("-o", "--output", required=True)
    sp.add_argument("--text", help="also write the word2vec-style text table here")
    emb_flags(sp)
    sp.set_defaults(func=cmd_train_embeddings)

    sp = sub.add_parser("embed", help="replace opcodes by their vectors")
    sp.add_argument("-t", "--table", required=True)
    sp.add_argument("-m", "--manifest", required=True)
    sp.add_argument("-o", "--output", required=True)
    sp.add_argument("--unk-policy", choices=["error", "zero"])
    common(sp, jobs=True)
    sp.set_defaults(func=cmd_embed)

    sp = sub.add_parser("train-classifier", help="train the 1-D CNN on an embedded dataset")
    sp.add_argument("-d", "--dataset", required=True)
    sp.add_argument("-o", "--output", required=True)
    sp.add_argument("-c", "--config")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--input-length", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--loss", choices=["cross-entropy", "mse"])
    sp.add_argument("--threshold", type=float)
    sp.set_defaults(func=cmd_train_classifier)

    sp = sub.add_parser("evaluate", help="print confusion-matrix metrics as JSON")
    sp.add_argument("-d", "--dataset", required=True)
    sp.add_argument("--model", required=True)
    sp.add_argument("--threshold", type=float)
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("report", help="render embedding and training figures")
    sp.add_argument("-t", "--table", required=True)
    sp.add_argument("-o", "--output", required=True)
    sp.add_argument("--trace", help="trace CSV from train-embeddings")
    sp.add_argument("--history", help="history CSV from train-classifier")
    sp.add_argument("-m", "--manifest", help="plot only opcodes occurring in this corpus")
    sp.add_argument("--opcodes", help="comma-separated mnemonics or hex bytes to plot")
    sp.add_argument("--format", choices=["png", "svg", "pdf"], default="png")
    sp.set_defaults(func=cmd_report)
    return p


def run(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(stream=sys.stderr, format="op2vec: %(message)s",
                        level=logging.DEBUG if args.verbose > 1 else
                        logging.INFO if args.verbose else logging.WARNING, force=True)
    try:
        return args.func(args)
    except (Op2VecError, OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"op2vec {args.command}: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())
