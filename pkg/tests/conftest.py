from __future__ import annotations

import io
import zipfile

import pytest

from dexasm import (
    ClassSpec,
    Method,
    assemble,
    fill_array_payload,
    packed_switch_payload,
    sparse_switch_payload,
)

# Hand-assembled method exercising every payload kind and widths 1, 2, 3 and 5.
# Offsets in code units are noted on the right.
MAIN_INSNS = [
    0x1012,                      # 0  const/4 v0, #1
    0x0038, 0x0004,              # 1  if-eqz v0, +4
    0x0090, 0x0000,              # 3  add-int v0, v0, v0
    0x002B, 19, 0x0000,          # 5  packed-switch v0, +19  -> 24
    0x002C, 26, 0x0000,          # 8  sparse-switch v0, +26  -> 34
    0x0026, 33, 0x0000,          # 11 fill-array-data v0, +33 -> 44
    0x0018, 0, 0, 0, 0,          # 14 const-wide v0, #0
    0x0071, 0x0000, 0x0000,      # 19 invoke-static {}, meth@0
    0x000E,                      # 22 return-void
    0x0000,                      # 23 nop (payload alignment)
    *packed_switch_payload(1, [2, 3, 4]),        # 24 width 10
    *sparse_switch_payload([1, 9], [2, 3]),      # 34 width 10
    *fill_array_payload(1, b"\x01\x02\x03"),     # 44 width 6
]

FIXTURE_CLASSES = [
    ClassSpec("La/Alpha;",
              direct=[Method("a_main", MAIN_INSNS), Method("b_tail", [0x0000, 0x000E])],
              virtual=[Method("c_virt", [0x0113, 0x0005, 0x1007, 0x000E])]),
    ClassSpec("Lb/Beta;", direct=[Method("d_only", [0x001A, 0x0000, 0x0027])]),
    ClassSpec("Lc/Empty;"),
]

# Opcode column written out by hand from the listing above.
FIXTURE_OPCODES = [
    0x12, 0x38, 0x90, 0x2B, 0x2C, 0x26, 0x18, 0x71, 0x0E, 0x00,   # a_main
    0x00, 0x0E,                                                   # b_tail
    0x13, 0x07, 0x0E,                                             # c_virt
    0x1A, 0x27,                                                   # d_only
]
FIXTURE_INSNS_SIZES = [len(MAIN_INSNS), 2, 4, 3]


@pytest.fixture(scope="session")
def fixture_dex() -> bytes:
    return assemble(FIXTURE_CLASSES)


def make_zip(members: dict[str, bytes], compression=zipfile.ZIP_DEFLATED) -> bytes:
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", compression) as zf:
        for name, data in members.items():
            zf.writestr(name, data)
    return buf.getvalue()


@pytest.fixture
def fixture_apk(tmp_path, fixture_dex):
    path = tmp_path / "fixture.apk"
    path.write_bytes(make_zip({
        "AndroidManifest.xml": b"<manifest/>",
        "classes.dex": fixture_dex,
        "resources.arsc": b"\x02\x00\x0c\x00",
    }))
    return path


# Acceptance outcomes, keyed by criterion number: (status, title, seconds).
ACCEPTANCE: dict[int, tuple[str, str, float]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        status, title, secs = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:>2}: {status:<4} {title} ({secs:.2f}s)")
