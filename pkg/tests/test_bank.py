from __future__ import annotations

import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from peevader import corpusgen as cg
from peevader.bank import (BLOCK_SIZE, MAGIC, ContentBank, EmptyBank, build_bank, sample_block,
                           sample_name)


def test_names_harvested(tmp_path):
    for i in range(3):
        spec = cg.GenSpec([cg.SectionSpec(b".text", 0x200, 0x200, cg.CODE, "low"),
                           cg.SectionSpec(b".rdata", 0x200, 0x200, cg.RDATA, "low")], seed=i)
        (tmp_path / f"b{i}.exe").write_bytes(cg.generate(spec))
    bank = build_bank(tmp_path)
    names = dict(bank.names)
    assert names[b".text\0\0\0"] == 3 and names[b".rdata\0\0"] == 3


def test_empty_directory(tmp_path):
    with pytest.raises(EmptyBank):
        build_bank(tmp_path)


def test_unparseable_only(tmp_path):
    (tmp_path / "junk.bin").write_bytes(b"not a pe")
    with pytest.raises(EmptyBank):
        build_bank(tmp_path)


def test_digest_stable(benign_dir):
    assert build_bank(benign_dir).seed_digest == build_bank(benign_dir).seed_digest


def test_blocks_are_bounded_and_unique(bank):
    datas = [b for _, b in bank.blocks]
    assert all(0 < len(b) <= BLOCK_SIZE for b in datas)
    assert len(set(datas)) == len(datas)


def test_file_format_layout():
    bank = ContentBank.from_parts([(b".text", 2)], [(b".text", b"ABCD")])
    blob = bank.to_bytes()
    want = (MAGIC + struct.pack("<I", 1) + struct.pack("<I", 8) + b".text\0\0\0" + struct.pack("<I", 2)
            + struct.pack("<I", 1) + struct.pack("<I", 8) + b".text\0\0\0"
            + struct.pack("<I", 4) + b"ABCD")
    assert blob == want


def test_save_load_round_trip(bank, tmp_path):
    bank.save(tmp_path / "bank.bin")
    back = ContentBank.load(tmp_path / "bank.bin")
    assert back == bank
    assert back.to_bytes() == bank.to_bytes()


@pytest.mark.parametrize("blob", [b"", b"PEBANK02" + bytes(8), MAGIC + b"\x05\0\0\0", ])
def test_bad_bank_bytes(blob):
    with pytest.raises(ValueError):
        ContentBank.from_bytes(blob)


def test_trailing_bytes_rejected(bank):
    with pytest.raises(ValueError):
        ContentBank.from_bytes(bank.to_bytes() + b"\0")


def test_sample_deterministic(bank):
    a = sample_block(bank, 16, np.random.default_rng(4))
    b = sample_block(bank, 16, np.random.default_rng(4))
    assert a == b and len(a) == 16


def test_sample_longer_than_blocks(bank):
    n = max(len(b) for _, b in bank.blocks) * 3 + 5
    assert len(sample_block(bank, n, np.random.default_rng(0))) == n


def test_sample_is_substring():
    bank = ContentBank.from_parts([], [(b"x", b"ABCD")])
    allowed = {b"ABCD"[i:i + 2] for i in range(3)}
    seen = {sample_block(bank, 2, np.random.default_rng(s)) for s in range(200)}
    assert seen == allowed


def test_sample_empty_bank_fallback():
    empty = ContentBank.from_parts([], [])
    assert len(sample_block(empty, 10, np.random.default_rng(0))) == 10
    with pytest.raises(EmptyBank):
        sample_block(empty, 10, np.random.default_rng(0), fallback_random=False)


def test_single_name():
    bank = ContentBank.from_parts([(b".text", 1)], [])
    assert sample_name(bank, np.random.default_rng(1)) == b".text\0\0\0"


def test_weighted_names_monte_carlo():
    bank = ContentBank.from_parts([(b"a", 3), (b"b", 1)], [])
    rng = np.random.default_rng(11)
    first = sum(sample_name(bank, rng) == b"a".ljust(8, b"\0") for _ in range(10_000))
    assert abs(first / 10_000 - 0.75) <= 0.03


def test_name_seed_determinism(bank):
    assert sample_name(bank, np.random.default_rng(5)) == sample_name(bank, np.random.default_rng(5))


@settings(max_examples=60, deadline=None)
@given(st.lists(st.binary(min_size=1, max_size=64), min_size=1, max_size=5), st.integers(1, 300),
       st.integers(0, 2**32))
def test_property_sample_length_and_provenance(blocks, n, seed):
    bank = ContentBank.from_parts([], [(b"s", b) for b in blocks])
    out = sample_block(bank, n, np.random.default_rng(seed))
    assert len(out) == n
    if n <= min(len(b) for b in blocks):
        assert any(out in b for b in blocks)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.binary(min_size=1, max_size=8), st.integers(1, 50)), max_size=4),
       st.lists(st.tuples(st.binary(max_size=8), st.binary(max_size=100)), max_size=4))
def test_property_serialization_round_trip(names, blocks):
    bank = ContentBank.from_parts(names, blocks)
    assert ContentBank.from_bytes(bank.to_bytes()) == bank
