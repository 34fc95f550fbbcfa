"""Apply each action once and check that the mapped code and data survive."""
import tempfile

from peevader import corpusgen as cg
from peevader.bank import build_bank
from peevader.oracle import builtin_score
from peevader.pe import parse_pe
from peevader.transforms import (ActionKind, ActionSpec, NoHeaderRoom, NotApplicable, apply,
                                 check_equivalence)

with tempfile.TemporaryDirectory() as d:
    cg.write_suite(cg.generate_suite(5, "benign", 4), d)
    bank = build_bank(d)

img = parse_pe(cg.generate_suite(1, "malicious", 2)[0])
print(f"original: {len(img.raw)} bytes, score {builtin_score(img):.3f}")

sizes = {ActionKind.EXTEND_DOS: img.opt.file_alignment, ActionKind.EDIT_DOS: 1}
for kind in ActionKind:
    spec = ActionSpec(kind, sizes.get(kind, 4096), block_id=0, seed=7)
    try:
        out = apply(img, spec, bank)
    except (NotApplicable, NoHeaderRoom) as exc:
        print(f"{kind.value:14s} skipped: {exc}")
        continue
    eq = check_equivalence(img, out)
    print(f"{kind.value:14s} +{len(out.raw) - len(img.raw):5d} bytes  "
          f"score {builtin_score(out):.3f}  equivalent={eq.ok}")

tight = parse_pe(cg.generate_suite(1, "tight", 2)[0])
try:
    apply(tight, ActionSpec(ActionKind.SECTION_ADD, 512))
except NoHeaderRoom as exc:
    print(f"tight layout refuses a new section: {exc}")
