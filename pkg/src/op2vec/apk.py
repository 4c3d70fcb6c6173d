"""APK ingest: find and read the classes*.dex entries of an APK (ZIP) archive."""

from __future__ import annotations

import os
import re
import zipfile
import zlib
from dataclasses import dataclass, field
from pathlib import Path

from .errors import CorruptEntry, EntryNotFound, NotAnArchive

MIN_DEX_SIZE = 0x70
_DEX_NAME = re.compile(r"classes(?:([2-9]|[1-9]\d+))?\.dex")
_ZIP_MAGICS = (b"PK\x03\x04", b"PK\x05\x06")


@dataclass(frozen=True)
class ApkEntry:
    name: str
    compressed_size: int
    uncompressed_size: int


@dataclass(frozen=True)
class ApkArchive:
    path: str
    entries: tuple[ApkEntry, ...]


@dataclass(frozen=True)
class DexBlob:
    source: str
    data: bytes = field(repr=False)
    ordinal: int

    def __post_init__(self) -> None:
        if self.ordinal < 1:
            raise ValueError(f"ordinal must be >= 1, got {self.ordinal}")
        if len(self.data) < MIN_DEX_SIZE:
            raise CorruptEntry(f"{self.source}: {len(self.data)} bytes is too small for a DEX file")


def dex_ordinal(name: str) -> int | None:
    """1 for classes.dex, N for classesN.dex, None for anything else."""
    m = _DEX_NAME.fullmatch(name)
    if m is None:
        return None
    return int(m.group(1)) if m.group(1) else 1


def _open(apk_path: str | os.PathLike) -> zipfile.ZipFile:
    with open(apk_path, "rb") as fh:
        head = fh.read(4)
    if head not in _ZIP_MAGICS:
        raise NotAnArchive(f"{apk_path}: not a ZIP archive (signature {head!r})")
    try:
        return zipfile.ZipFile(apk_path)
    except zipfile.BadZipFile as exc:
        # ZIP signature present, so the container itself is damaged
        raise CorruptEntry(f"{apk_path}: {exc}") from exc


def open_archive(apk_path: str | os.PathLike) -> ApkArchive:
    with _open(apk_path) as zf:
        infos = zf.infolist()
    names = [i.filename for i in infos]
    if len(set(names)) != len(names):
        raise CorruptEntry(f"{apk_path}: duplicate entry names")
    return ApkArchive(str(apk_path), tuple(
        ApkEntry(i.filename, i.compress_size, i.file_size) for i in infos))


def list_dex_entries(apk_path: str | os.PathLike) -> list[str]:
    archive = open_archive(apk_path)
    found = [(dex_ordinal(e.name), e.name) for e in archive.entries]
    return [name for ordinal, name in sorted(f for f in found if f[0] is not None)]


def read_dex_blob(apk_path: str | os.PathLike, entry: str) -> DexBlob:
    ordinal = dex_ordinal(entry)
    with _open(apk_path) as zf:
        try:
            info = zf.getinfo(entry)
        except KeyError:
            raise EntryNotFound(f"{apk_path}: no entry {entry!r}") from None
        try:
            data = zf.read(info)  # zipfile verifies the CRC-32 on full reads
        except (zipfile.BadZipFile, zlib.error, EOFError) as exc:
            raise CorruptEntry(f"{apk_path}!{entry}: {exc}") from exc
    if len(data) != info.file_size:
        raise CorruptEntry(f"{apk_path}!{entry}: size {len(data)} != declared {info.file_size}")
    return DexBlob(f"{apk_path}!{entry}", data, ordinal or 1)


def read_all_dex(apk_path: str | os.PathLike) -> list[DexBlob]:
    """Every DEX entry in ordinal order (multidex apps yield several blobs)."""
    return [read_dex_blob(apk_path, name) for name in list_dex_entries(apk_path)]


def load_dex_inputs(path: str | os.PathLike) -> list[DexBlob]:
    """Blobs for either an APK or a bare .dex file."""
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head == b"dex\n":
        return [DexBlob(str(path), path.read_bytes(), 1)]
    return read_all_dex(path)
