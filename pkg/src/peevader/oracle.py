"""Classifier interface: a maliciousness confidence in [0, 1] per file.

Three backends share one :class:`Oracle` front end:

* ``builtin``: a fixed logistic scorer over five static features. It stands
  in for a real detector and is attackable by design.
* ``cmd:<command>``: runs ``<command> <path>`` and reads ``score=<decimal>``.
* ``http:<url>``: POSTs the raw bytes and reads ``{"score": <decimal>}``.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import re
import shlex
import subprocess
import tempfile
import threading
import urllib.error
import urllib.request
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Union

import numpy as np

from .pe import CANONICAL_STUB, MalformedPe, PeImage, parse_pe

TIMEOUT_ENV = "PEEVADER_ORACLE_TIMEOUT"

BENIGN_SECTION_NAMES = frozenset({".text", ".rdata", ".data", ".rsrc", ".reloc"})

# logit = BIAS + sum(WEIGHTS * features); the printable-fraction weight is negative.
FEATURE_NAMES = ("exec_entropy", "odd_section_names", "overlay_ratio", "custom_dos_stub", "printable_fraction")
WEIGHTS = np.array([3.0, 2.0, 0.5, 1.5, -8.0])
BIAS = -1.0

_PRINTABLE = np.zeros(256, dtype=bool)
_PRINTABLE[0x20:0x7F] = True
_PRINTABLE[[0x09, 0x0A, 0x0D]] = True


class OracleFailure(RuntimeError):
    """Base class for classifier backend errors."""


class BackendUnavailable(OracleFailure):
    pass


class MalformedResponse(OracleFailure):
    pass


def weight_digest() -> str:
    blob = json.dumps({"bias": BIAS, "weights": WEIGHTS.tolist(), "features": FEATURE_NAMES})
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _entropy_bits(data: bytes) -> float:
    if not data:
        return 0.0
    counts = np.bincount(np.frombuffer(data, dtype=np.uint8), minlength=256)
    p = counts[counts > 0] / len(data)
    return float(-(p * np.log2(p)).sum())


def features(img: PeImage) -> np.ndarray:
    raw = img.raw
    execs = [s for s in img.sections if s.is_executable and s.raw_size]
    f1 = float(np.mean([_entropy_bits(img.section_bytes(s)) for s in execs])) / 8 if execs else 0.0
    if img.sections:
        odd = sum(s.display_name not in BENIGN_SECTION_NAMES for s in img.sections)
        f2 = odd / len(img.sections)
    else:
        f2 = 0.0
    f3 = (len(raw) - img.overlay_offset) / len(raw)
    f4 = 0.0 if raw[0x40:0x40 + len(CANONICAL_STUB)] == CANONICAL_STUB else 1.0
    f5 = float(_PRINTABLE[np.frombuffer(raw, dtype=np.uint8)].mean())
    return np.array([f1, f2, f3, f4, f5])


def builtin_score(img: PeImage) -> float:
    z = BIAS + float(WEIGHTS @ features(img))
    return 1.0 / (1.0 + math.exp(-z))


@dataclass(frozen=True)
class Verdict:
    score: float
    detected: bool
    threshold: float


@dataclass
class OracleConfig:
    backend: str = "builtin"  # "builtin" | "subprocess" | "http"
    target: str = ""  # command line or URL for the adapter backends
    threshold: float = 0.5
    timeout: float = 30.0
    cache: bool = True
    max_in_flight: int = 4

    def __post_init__(self):
        if not 0 < self.threshold < 1:
            raise ValueError("threshold must lie strictly between 0 and 1")
        if self.backend not in ("builtin", "subprocess", "http"):
            raise ValueError(f"unknown backend {self.backend!r}")
        if self.backend != "builtin" and not self.target:
            raise ValueError(f"{self.backend} backend needs a command or URL")

    @classmethod
    def from_string(cls, text: str, **kw) -> "OracleConfig":
        """Parse the CLI form ``builtin``, ``cmd:<command>`` or ``http:<url>``."""
        if text == "builtin":
            return cls("builtin", **kw)
        if text.startswith("cmd:"):
            return cls("subprocess", text[4:], **kw)
        if text.startswith(("http:", "https:")):
            rest = text[5:]
            url = rest if rest.startswith(("http://", "https://")) else text
            return cls("http", url, **kw)
        raise ValueError(f"unrecognized oracle {text!r}")


_SCORE_LINE = re.compile(r"score=([0-9]*\.?[0-9]+(?:[eE][-+]?[0-9]+)?)")


def _checked(value) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise MalformedResponse(f"score is not a number: {value!r}")
    value = float(value)
    if not 0.0 <= value <= 1.0:
        raise MalformedResponse(f"score out of range: {value}")
    return value


class Oracle:
    """Thread-safe scoring front end with memoization and a query counter.

    ``score_fn`` overrides the configured backend; tests use it to build
    crafted oracles.
    """

    def __init__(self, config: Optional[OracleConfig] = None,
                 score_fn: Optional[Callable[[bytes], float]] = None):
        self.config = config or OracleConfig()
        env = os.environ.get(TIMEOUT_ENV)
        self.timeout = float(env) if env else self.config.timeout
        self._score_fn = score_fn
        self._cache: dict[bytes, float] = {}
        self._lock = threading.Lock()
        self._slots = threading.BoundedSemaphore(max(1, self.config.max_in_flight))
        self.queries = 0

    @property
    def threshold(self) -> float:
        return self.config.threshold

    def score(self, data: bytes) -> float:
        with self._lock:
            self.queries += 1
        key = hashlib.sha256(data).digest() if self.config.cache else None
        if key is not None:
            with self._lock:
                hit = self._cache.get(key)
            if hit is not None:
                return hit
        value = _checked(self._compute(data))
        if key is not None:
            with self._lock:
                self._cache[key] = value
        return value

    def classify(self, data: bytes) -> Verdict:
        s = self.score(data)
        return Verdict(s, s >= self.threshold, self.threshold)

    def _compute(self, data: bytes) -> float:
        if self._score_fn is not None:
            return self._score_fn(data)
        backend = self.config.backend
        if backend == "builtin":
            return builtin_score(parse_pe(data))
        with self._slots:
            if backend == "subprocess":
                return self._run_subprocess(data)
            return self._post_http(data)

    def _run_subprocess(self, data: bytes) -> float:
        fd, path = tempfile.mkstemp(suffix=".exe", prefix="peevader-")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(data)
            try:
                proc = subprocess.run(shlex.split(self.config.target) + [path],
                                      capture_output=True, timeout=self.timeout)
            except subprocess.TimeoutExpired as exc:
                raise BackendUnavailable(f"classifier timed out after {self.timeout}s") from exc
            except OSError as exc:
                raise BackendUnavailable(f"cannot run classifier: {exc}") from exc
        finally:
            os.unlink(path)
        if proc.returncode != 0:
            raise BackendUnavailable(f"classifier exited with status {proc.returncode}")
        out = proc.stdout.decode("utf-8", "replace")
        lines = out.splitlines()
        if len(lines) != 1:
            raise MalformedResponse(f"expected one output line, got {len(lines)}")
        m = _SCORE_LINE.fullmatch(lines[0].strip())
        if not m:
            raise MalformedResponse(f"unparseable classifier output: {lines[0][:80]!r}")
        return _checked(float(m.group(1)))

    def _post_http(self, data: bytes) -> float:
        req = urllib.request.Request(self.config.target, data=data, method="POST",
                                     headers={"Content-Type": "application/octet-stream"})
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                status = resp.status
                body = resp.read()
        except urllib.error.HTTPError as exc:
            raise BackendUnavailable(f"HTTP {exc.code}") from exc
        except (urllib.error.URLError, OSError) as exc:
            raise BackendUnavailable(f"HTTP request failed: {exc}") from exc
        if status != 200:
            raise BackendUnavailable(f"HTTP {status}")
        try:
            payload = json.loads(body)
        except ValueError as exc:
            raise MalformedResponse("response body is not JSON") from exc
        if not isinstance(payload, dict) or "score" not in payload:
            raise MalformedResponse("response JSON lacks a score")
        return _checked(payload["score"])


def classify(oracle: Union[Oracle, OracleConfig], data: bytes) -> Verdict:
    if isinstance(oracle, OracleConfig):
        oracle = Oracle(oracle)
    return oracle.classify(data)


@dataclass(frozen=True)
class FilterEntry:
    path: Path
    score: Optional[float]
    reason: str = ""


def filter_dataset(directory: Union[str, Path], oracle: Union[Oracle, OracleConfig]
                   ) -> tuple[list[FilterEntry], list[FilterEntry]]:
    """Split a directory into files the oracle detects and everything else.

    Dropped entries carry a reason: ``below-threshold``, ``parse`` or
    ``oracle: <error>``.
    """
    if isinstance(oracle, OracleConfig):
        oracle = Oracle(oracle)
    kept: list[FilterEntry] = []
    dropped: list[FilterEntry] = []
    for path in sorted(p for p in Path(directory).iterdir() if p.is_file()):
        data = path.read_bytes()
        try:
            parse_pe(data)
        except MalformedPe:
            dropped.append(FilterEntry(path, None, "parse"))
            continue
        try:
            verdict = oracle.classify(data)
        except OracleFailure as exc:
            dropped.append(FilterEntry(path, None, f"oracle: {exc}"))
            continue
        if verdict.detected:
            kept.append(FilterEntry(path, verdict.score))
        else:
            dropped.append(FilterEntry(path, verdict.score, "below-threshold"))
    return kept, dropped
