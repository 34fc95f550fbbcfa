"""A full campaign against the builtin scorer, then per-action isolation."""
import tempfile
from pathlib import Path

from peevader import corpusgen as cg
from peevader.bank import build_bank
from peevader.campaign import CampaignConfig, iteration_histogram, run_campaign

root = Path(tempfile.mkdtemp(prefix="peevader-demo-"))
cg.write_suite(cg.generate_suite(10, "benign", 99), root / "benign")
build_bank(root / "benign").save(root / "bank.bin")
cg.write_suite(cg.generate_suite(40, "malicious", 1), root / "mal")

combined = run_campaign(CampaignConfig(root / "mal", root / "bank.bin", seed=0,
                                       output_dir=root / "combined"))
g = combined.groups["combined"]
print(f"combined: {g.evaded}/{g.attacked} evaded, mean iterations {g.mean_iterations:.2f}")
print("histogram (iterations 1..20):", iteration_histogram(combined))

isolated = run_campaign(CampaignConfig(root / "mal", root / "bank.bin", seed=0, mode="isolation",
                                       output_dir=root / "isolation"))
for label, grp in isolated.groups.items():
    print(f"{label:14s} evasion {grp.evasion_rate:.2f}  no-improvement {grp.no_improvement_rate:.2f}"
          f"  broken {grp.broken_rate:.2f}")
print(f"reports written under {root}")
