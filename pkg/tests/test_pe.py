from __future__ import annotations

import dataclasses
import struct

import pytest
from hypothesis import given, settings, strategies as st

from peevader import corpusgen as cg
from peevader.pe import (CANONICAL_STUB, InconsistentModel, MalformedPe, align_up, inspect_lines,
                         locate_slack, parse_pe, serialize_pe, update_checksum)

from conftest import hexdump_fields, rd


def one_text(**kw) -> bytes:
    return cg.generate(cg.GenSpec([cg.SectionSpec(b".text", 0x180, 0x200, cg.CODE)], **kw))


def test_minimal_pe_fields_match_hexdump():
    data = one_text()
    img = parse_pe(data)
    ref = hexdump_fields(data)
    assert len(img.sections) == ref["nsec"] == 1
    assert img.dos.e_lfanew == ref["e_lfanew"] == 0x40 + len(CANONICAL_STUB)
    assert data[img.dos.e_lfanew:img.dos.e_lfanew + 4] == b"PE\0\0"
    s = img.sections[0]
    r = ref["sections"][0]
    assert (s.name.rstrip(b"\0"), s.virtual_size, s.virtual_address, s.raw_size, s.raw_ptr) == \
        (r["name"], r["vsize"], r["va"], r["raw_size"], r["raw_ptr"])
    assert img.opt.size_of_headers == ref["size_of_headers"]
    assert img.opt.file_alignment == ref["file_alignment"]


@pytest.mark.parametrize("seed", range(30))
def test_random_specs_match_hexdump(seed):
    data = cg.generate(cg.random_spec(seed))
    img = parse_pe(data)
    ref = hexdump_fields(data)
    assert img.opt.magic == ref["magic"]
    assert img.opt.checksum == ref["checksum"]
    assert img.opt.size_of_image == ref["size_of_image"]
    assert [(s.raw_ptr, s.raw_size, s.virtual_size) for s in img.sections] == \
        [(r["raw_ptr"], r["raw_size"], r["vsize"]) for r in ref["sections"]]


def test_empty_input_rejected():
    with pytest.raises(MalformedPe):
        parse_pe(b"")


def test_lfanew_at_file_end_rejected():
    buf = bytearray(0x80)
    buf[:2] = b"MZ"
    struct.pack_into("<I", buf, 0x3C, len(buf))
    with pytest.raises(MalformedPe):
        parse_pe(bytes(buf))


@pytest.mark.parametrize("mutate, why", [
    (lambda b: b.__setitem__(slice(0, 2), b"ZM"), "magic"),
    (lambda b: b.__setitem__(slice(0x80, 0x84), b"PX\0\0"), "signature"),
    (lambda b: struct.pack_into("<I", b, 0x3C, 0x10), "lfanew below header"),
])
def test_corrupt_headers_rejected(mutate, why):
    buf = bytearray(one_text())
    mutate(buf)
    with pytest.raises(MalformedPe):
        parse_pe(bytes(buf))


def test_truncated_section_data_rejected():
    data = one_text()
    with pytest.raises(MalformedPe):
        parse_pe(data[:-0x10])


def test_overlapping_sections_rejected():
    data = bytearray(cg.generate(cg.GenSpec([cg.SectionSpec(b".text", 0x200, 0x200, cg.CODE),
                                             cg.SectionSpec(b".data", 0x200, 0x200)])))
    img = parse_pe(bytes(data))
    second = img.section_table_offset + 40
    struct.pack_into("<I", data, second + 20, img.sections[0].raw_ptr)
    with pytest.raises(MalformedPe):
        parse_pe(bytes(data))


def test_round_trip_identity(malicious):
    assert serialize_pe(parse_pe(malicious)) == malicious


def test_serialize_detects_stale_model(mal_img):
    stale = dataclasses.replace(mal_img, overlay_offset=mal_img.overlay_offset + 1)
    with pytest.raises(InconsistentModel):
        serialize_pe(stale)


def test_pe32plus_parses():
    data = one_text(pe32plus=True)
    img = parse_pe(data)
    assert img.opt.magic == 0x20B and img.opt.is_pe32plus
    assert rd(data, img.opt.offset + 0x40, 4) == img.opt.checksum


def test_slack_zero_when_sizes_equal():
    img = parse_pe(cg.generate(cg.GenSpec([cg.SectionSpec(b".text", 0x200, 0x200, cg.CODE)])))
    assert locate_slack(img) == []


def test_slack_length_arithmetic():
    img = parse_pe(cg.generate(cg.GenSpec([cg.SectionSpec(b".text", 0x10, 0x200, cg.CODE)])))
    (idx, off, length), = locate_slack(img)
    assert (idx, length) == (0, 0x1F0)
    assert off == img.sections[0].raw_ptr + 0x10


def test_two_section_slack_by_hand():
    spec = cg.GenSpec([cg.SectionSpec(b".text", 0x150, 0x200, cg.CODE),
                       cg.SectionSpec(b".data", 0x300, 0x400)])
    img = parse_pe(cg.generate(spec))
    # headers: 0x40 dos + 0x40 stub + 4 + 20 + 224 + 2*40 + 0x80 slack = 0x2b8 -> 0x400
    assert img.opt.size_of_headers == 0x400
    assert locate_slack(img) == [(0, 0x400 + 0x150, 0xB0), (1, 0x600 + 0x300, 0x100)]


def test_virtual_size_zero_has_no_slack():
    img = parse_pe(cg.generate(cg.GenSpec([cg.SectionSpec(b".data", 0, 0x200)])))
    assert img.sections[0].mapped_size == 0x200
    assert locate_slack(img) == []


def test_checksum_zeroed():
    img = parse_pe(one_text(checksum=0xDEADBEEF))
    out = update_checksum(img)
    assert rd(out.raw, img.opt.checksum_offset, 4) == 0
    diff = [i for i in range(len(img.raw)) if img.raw[i] != out.raw[i]]
    assert all(img.opt.checksum_offset <= i < img.opt.checksum_offset + 4 for i in diff)


def test_zero_checksum_unchanged():
    img = parse_pe(one_text())
    assert update_checksum(img).raw == img.raw


def test_inspect_lines_format(mal_img):
    lines = inspect_lines(mal_img)
    assert all(" = " in ln for ln in lines)
    fields = dict(ln.split(" = ") for ln in lines)
    assert int(fields["e_lfanew"], 16) == mal_img.dos.e_lfanew
    assert int(fields["number_of_sections"], 16) == len(mal_img.sections)


@pytest.mark.parametrize("v, a, want", [(0, 0x200, 0), (1, 0x200, 0x200), (0x200, 0x200, 0x200),
                                        (0x201, 0x1000, 0x1000)])
def test_align_up(v, a, want):
    assert align_up(v, a) == want


@settings(max_examples=150, deadline=None)
@given(st.integers(0, 2**31))
def test_property_structural_invariants(seed):
    data = cg.generate(cg.random_spec(seed))
    img = parse_pe(data)
    assert serialize_pe(img) == data
    assert data[img.dos.e_lfanew:img.dos.e_lfanew + 4] == b"PE\0\0"
    extents = sorted((s.raw_ptr, s.raw_end) for s in img.sections if s.raw_size)
    for (a0, a1), (b0, _) in zip(extents, extents[1:]):
        assert a1 <= b0
    assert all(0 <= s.raw_ptr and s.raw_end <= len(data) for s in img.sections)
    assert img.overlay_offset >= max((s.raw_end for s in img.sections), default=0)


@settings(max_examples=200, deadline=None)
@given(st.binary(max_size=600))
def test_property_garbage_never_crashes(blob):
    try:
        img = parse_pe(blob)
    except MalformedPe:
        return
    assert serialize_pe(img) == blob


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31), st.data())
def test_property_bitflips_parse_or_reject(seed, data):
    buf = bytearray(cg.generate(cg.random_spec(seed)))
    for _ in range(data.draw(st.integers(1, 8))):
        i = data.draw(st.integers(0, min(len(buf), 0x400) - 1))
        buf[i] ^= 1 << data.draw(st.integers(0, 7))
    try:
        img = parse_pe(bytes(buf))
    except MalformedPe:
        return
    assert serialize_pe(img) == bytes(buf)
