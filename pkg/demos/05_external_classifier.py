"""Plugging in an outside detector through the subprocess protocol."""
import sys
import tempfile
from pathlib import Path

from peevader import corpusgen as cg
from peevader.oracle import MalformedResponse, Oracle, OracleConfig

root = Path(tempfile.mkdtemp(prefix="peevader-clf-"))
clf = root / "size_detector.py"
# Any program works as long as it prints exactly one "score=<decimal>" line.
clf.write_text(
    "import os, sys\n"
    "size = os.path.getsize(sys.argv[1])\n"
    "print(f'score={min(1.0, 20000 / size):.4f}')\n"
)
oracle = Oracle(OracleConfig.from_string(f"cmd:{sys.executable} {clf}"))
for data in cg.generate_suite(3, "malicious", 5):
    v = oracle.classify(data)
    print(f"{len(data):6d} bytes -> score {v.score:.4f} detected={v.detected}")

broken = root / "chatty.py"
broken.write_text("print('I think it is malware')\n")
try:
    Oracle(OracleConfig("subprocess", f"{sys.executable} {broken}")).score(b"MZ")
except MalformedResponse as exc:
    print(f"malformed detector output is reported, not crashed on: {exc}")
