import hashlib
import zipfile

import pytest

from conftest import make_zip
from op2vec.apk import dex_ordinal, list_dex_entries, load_dex_inputs, open_archive, read_all_dex, read_dex_blob
from op2vec.errors import CorruptEntry, EntryNotFound, NotAnArchive


def write(tmp_path, name, members, **kw):
    path = tmp_path / name
    path.write_bytes(make_zip(members, **kw))
    return path


@pytest.mark.parametrize("name,expected", [
    ("classes.dex", 1), ("classes2.dex", 2), ("classes10.dex", 10),
    ("classes1.dex", None), ("classes0.dex", None), ("lib/classes.dex", None),
    ("classes.dex.bak", None), ("resources.arsc", None),
])
def test_dex_ordinal(name, expected):
    assert dex_ordinal(name) == expected


def test_only_classes_dex(tmp_path, fixture_dex):
    path = write(tmp_path, "a.apk", {"classes.dex": fixture_dex})
    assert list_dex_entries(path) == ["classes.dex"]


def test_multidex_sorted_by_ordinal(tmp_path, fixture_dex):
    path = write(tmp_path, "a.apk", {
        "classes10.dex": fixture_dex, "resources.arsc": b"x", "classes2.dex": fixture_dex,
        "classes.dex": fixture_dex,
    })
    assert list_dex_entries(path) == ["classes.dex", "classes2.dex", "classes10.dex"]
    blobs = read_all_dex(path)
    assert [b.ordinal for b in blobs] == [1, 2, 10]


def test_no_dex_entries(tmp_path):
    path = write(tmp_path, "a.apk", {"AndroidManifest.xml": b"<m/>"})
    assert list_dex_entries(path) == []


def test_read_blob(fixture_apk, fixture_dex):
    blob = read_dex_blob(fixture_apk, "classes.dex")
    assert blob.data.startswith(b"dex\n")
    assert blob.data == fixture_dex
    assert blob.ordinal == 1
    assert blob.source.endswith("fixture.apk!classes.dex")


def test_entry_sizes(fixture_apk, fixture_dex):
    archive = open_archive(fixture_apk)
    entry = {e.name: e for e in archive.entries}["classes.dex"]
    assert entry.uncompressed_size == len(fixture_dex)


def test_stored_compression(tmp_path, fixture_dex):
    path = write(tmp_path, "s.apk", {"classes.dex": fixture_dex}, compression=zipfile.ZIP_STORED)
    assert read_dex_blob(path, "classes.dex").data == fixture_dex


def test_missing_entry(fixture_apk):
    with pytest.raises(EntryNotFound):
        read_dex_blob(fixture_apk, "missing.dex")


def test_truncated_archive(fixture_apk):
    data = fixture_apk.read_bytes()
    fixture_apk.write_bytes(data[:-16])
    with pytest.raises(CorruptEntry):
        read_dex_blob(fixture_apk, "classes.dex")


def test_crc_failure(tmp_path, fixture_dex):
    raw = bytearray(make_zip({"classes.dex": fixture_dex}, compression=zipfile.ZIP_STORED))
    pos = raw.find(b"dex\n035")
    raw[pos + 200] ^= 0xFF  # inside the stored data, after the local header
    path = tmp_path / "bad.apk"
    path.write_bytes(bytes(raw))
    with pytest.raises(CorruptEntry):
        read_dex_blob(path, "classes.dex")


def test_not_an_archive(tmp_path):
    path = tmp_path / "x.apk"
    path.write_bytes(b"hello world, not a zip")
    with pytest.raises(NotAnArchive):
        list_dex_entries(path)


def test_io_error(tmp_path):
    with pytest.raises(OSError):
        list_dex_entries(tmp_path / "nope.apk")


def test_bare_dex_bypasses_zip(tmp_path, fixture_dex):
    path = tmp_path / "classes.dex"
    path.write_bytes(fixture_dex)
    [blob] = load_dex_inputs(path)
    assert blob.data == fixture_dex


def test_ingest_is_read_only(tmp_path, fixture_dex):
    path = write(tmp_path, "a.apk", {"classes.dex": fixture_dex, "classes2.dex": fixture_dex})
    before = hashlib.sha256(path.read_bytes()).digest()
    blobs = [read_dex_blob(path, n) for n in list_dex_entries(path)]
    assert [b.ordinal for b in blobs] == sorted({b.ordinal for b in blobs})
    assert hashlib.sha256(path.read_bytes()).digest() == before
