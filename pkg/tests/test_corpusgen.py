from __future__ import annotations

import pytest
from hypothesis import given, settings, strategies as st

from peevader import corpusgen as cg
from peevader.oracle import builtin_score
from peevader.pe import CANONICAL_STUB, parse_pe
from peevader.transforms import ActionKind, ActionSpec, NoHeaderRoom, apply


def test_canonical_stub_text():
    assert b"This program cannot be run in DOS mode" in CANONICAL_STUB
    assert CANONICAL_STUB.startswith(bytes.fromhex("0e1fba0e00b409cd21b8014ccd21"))


def test_low_entropy_single_section_scores_benign():
    spec = cg.GenSpec([cg.SectionSpec(b".text", 0x800, 0x800, cg.CODE, "low")])
    assert builtin_score(parse_pe(cg.generate(spec))) < 0.5


def test_high_entropy_custom_odd_scores_malicious():
    spec = cg.GenSpec([cg.SectionSpec(b"UPX1", 0x800, 0x800, cg.CODE, "high")], stub=b"\x01" * 32)
    assert builtin_score(parse_pe(cg.generate(spec))) > 0.5


def test_same_seed_same_bytes():
    spec = cg.random_spec(12)
    assert cg.generate(spec) == cg.generate(spec)
    assert cg.generate_suite(3, "malicious", 4) == cg.generate_suite(3, "malicious", 4)


def test_singleton_suite():
    assert len(cg.generate_suite(1, "benign", 0)) == 1


@pytest.mark.parametrize("profile, side", [("malicious", 1), ("benign", 0), ("tight", 1)])
def test_suite_side_of_threshold(profile, side):
    files = cg.generate_suite(20, profile, 5)
    assert len(set(files)) == 20
    assert all((builtin_score(parse_pe(f)) >= 0.5) == bool(side) for f in files)


def test_profile_separation():
    mal = [builtin_score(parse_pe(f)) for f in cg.generate_suite(40, "malicious", 8)]
    ben = [builtin_score(parse_pe(f)) for f in cg.generate_suite(40, "benign", 8)]
    assert min(mal) - max(ben) >= 0.2


def test_tight_profile_has_no_header_room():
    for data in cg.generate_suite(10, "tight", 1):
        with pytest.raises(NoHeaderRoom):
            apply(parse_pe(data), ActionSpec(ActionKind.SECTION_ADD, 0x200))


@pytest.mark.parametrize("bad", [
    dict(sections=[]),
    dict(sections=[cg.SectionSpec(b"toolongname", 0x200, 0x200)]),
    dict(sections=[cg.SectionSpec(b".text", 0x200, 0x123)]),
    dict(sections=[cg.SectionSpec(b".text", 0x200, 0x200)], file_alignment=0x300),
    dict(sections=[cg.SectionSpec(b".text", 0x200, 0x200)], section_alignment=0x100),
    dict(sections=[cg.SectionSpec(b".text", 0x200, 0x200, entropy="medium")]),
])
def test_invalid_specs(bad):
    with pytest.raises(cg.InvalidSpec):
        cg.generate(cg.GenSpec(**bad))


def test_write_suite(tmp_path):
    paths = cg.write_suite([b"a", b"b"], tmp_path / "d")
    assert [p.name for p in paths] == ["sample_0000.exe", "sample_0001.exe"]
    assert paths[1].read_bytes() == b"b"


def test_overlay_and_header_slack():
    spec = cg.GenSpec([cg.SectionSpec(b".text", 0x200, 0x200, cg.CODE)], overlay_len=0x123,
                      header_slack=0x100)
    img = parse_pe(cg.generate(spec))
    assert len(img.overlay) == 0x123
    assert not any(img.raw[img.section_table_end:img.section_table_end + 0x100])


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31))
def test_property_generated_files_parse(seed):
    spec = cg.random_spec(seed)
    img = parse_pe(cg.generate(spec))
    assert len(img.sections) == len(spec.sections)
    assert [s.name.rstrip(b"\0") for s in img.sections] == [s.name for s in spec.sections]
    assert len(img.overlay) == spec.overlay_len
    assert img.opt.is_pe32plus == spec.pe32plus
