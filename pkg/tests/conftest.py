from __future__ import annotations

import pytest

from peevader import corpusgen as cg
from peevader.bank import build_bank
from peevader.pe import parse_pe


def rd(buf: bytes, off: int, n: int) -> int:
    """Little-endian field read, independent of the parser under test."""
    return int.from_bytes(buf[off:off + n], "little")


def hexdump_fields(buf: bytes) -> dict:
    """Re-derive the headline header fields straight from the bytes."""
    lfanew = rd(buf, 0x3C, 4)
    coff = lfanew + 4
    nsec = rd(buf, coff + 2, 2)
    opt_size = rd(buf, coff + 16, 2)
    opt = coff + 20
    table = opt + opt_size
    secs = []
    for i in range(nsec):
        h = table + 40 * i
        secs.append(dict(name=buf[h:h + 8].rstrip(b"\0"), vsize=rd(buf, h + 8, 4),
                         va=rd(buf, h + 12, 4), raw_size=rd(buf, h + 16, 4),
                         raw_ptr=rd(buf, h + 20, 4), chars=rd(buf, h + 36, 4)))
    return dict(e_lfanew=lfanew, nsec=nsec, magic=rd(buf, opt, 2), entry=rd(buf, opt + 0x10, 4),
                file_alignment=rd(buf, opt + 0x24, 4), size_of_image=rd(buf, opt + 0x38, 4),
                size_of_headers=rd(buf, opt + 0x3C, 4), checksum=rd(buf, opt + 0x40, 4),
                sections=secs)


@pytest.fixture(scope="session")
def malicious():
    return cg.generate_suite(1, "malicious", 7)[0]


@pytest.fixture(scope="session")
def benign():
    return cg.generate_suite(1, "benign", 7)[0]


@pytest.fixture(scope="session")
def tight():
    return cg.generate_suite(1, "tight", 7)[0]


@pytest.fixture(scope="session")
def mal_img(malicious):
    return parse_pe(malicious)


@pytest.fixture(scope="session")
def benign_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("benign")
    cg.write_suite(cg.generate_suite(5, "benign", 99), d)
    return d


@pytest.fixture(scope="session")
def bank(benign_dir):
    return build_bank(benign_dir)


@pytest.fixture(scope="session")
def malicious_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("malicious")
    cg.write_suite(cg.generate_suite(10, "malicious", 3), d)
    return d


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
