"""Generate a synthetic PE, parse it, and look at where free space lives."""
from peevader import corpusgen as cg
from peevader.oracle import FEATURE_NAMES, builtin_score, features
from peevader.pe import inspect_lines, locate_slack, parse_pe, serialize_pe

spec = cg.GenSpec([
    cg.SectionSpec(b".text", 0x1A0, 0x200, cg.CODE),
    cg.SectionSpec(b"UPX1", 0x800, 0x800, cg.DATA),
], overlay_len=0x100, seed=1)
data = cg.generate(spec)
img = parse_pe(data)

print("\n".join(inspect_lines(img)[:8]), "...")
print(f"round trip identical: {serialize_pe(img) == data}")

# Slack is on-disk space past each section's mapped size; loaders never map it.
for idx, off, length in locate_slack(img):
    print(f"section {idx} slack: {length:#x} bytes at {off:#x}")
print(f"overlay: {len(img.overlay):#x} bytes from {img.overlay_offset:#x}")

for name, value in zip(FEATURE_NAMES, features(img)):
    print(f"{name:20s} {value:.3f}")
print(f"builtin score {builtin_score(img):.3f}")
