"""Goodware content harvested from benign PE files.

Blocks come from the first 8 x 4 KiB of every section's raw data; section
names are counted so renames can favour common ones.

On-disk format (little-endian)::

    b"PEBANK01"
    u32 name_count, then per name:   u32 len, name bytes, u32 occurrences
    u32 block_count, then per block: u32 len, source-section name bytes,
                                     u32 len, block bytes
"""

from __future__ import annotations

import hashlib
import struct
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

from .pe import MalformedPe, parse_pe

MAGIC = b"PEBANK01"
BLOCK_SIZE = 4096
BLOCKS_PER_SECTION = 8
MAX_BLOCK = 64 * 1024


class EmptyBank(ValueError):
    pass


@dataclass(frozen=True)
class ContentBank:
    names: tuple[tuple[bytes, int], ...]
    blocks: tuple[tuple[bytes, bytes], ...]  # (source section name, data)
    seed_digest: str

    @classmethod
    def from_parts(cls, names, blocks) -> "ContentBank":
        names = tuple((n.ljust(8, b"\0")[:8], int(c)) for n, c in names)
        blocks = tuple((t.ljust(8, b"\0")[:8], bytes(b)) for t, b in blocks)
        if any(len(b) > MAX_BLOCK for _, b in blocks):
            raise ValueError(f"blocks are limited to {MAX_BLOCK} bytes")
        h = hashlib.sha256()
        for n, c in names:
            h.update(n + struct.pack("<I", c))
        for t, b in blocks:
            h.update(t + struct.pack("<I", len(b)) + b)
        return cls(names, blocks, h.hexdigest())

    @property
    def is_empty(self) -> bool:
        return not self.blocks

    def to_bytes(self) -> bytes:
        out = bytearray(MAGIC)
        out += struct.pack("<I", len(self.names))
        for name, count in self.names:
            out += struct.pack("<I", len(name)) + name + struct.pack("<I", count)
        out += struct.pack("<I", len(self.blocks))
        for tag, data in self.blocks:
            out += struct.pack("<I", len(tag)) + tag + struct.pack("<I", len(data)) + data
        return bytes(out)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "ContentBank":
        if blob[:8] != MAGIC:
            raise ValueError("not a content bank (bad magic)")
        pos = 8

        def take(n: int) -> bytes:
            nonlocal pos
            if pos + n > len(blob):
                raise ValueError("truncated content bank")
            chunk = blob[pos:pos + n]
            pos += n
            return chunk

        def u32() -> int:
            return struct.unpack("<I", take(4))[0]

        names = []
        for _ in range(u32()):
            name = take(u32())
            names.append((name, u32()))
        blocks = []
        for _ in range(u32()):
            tag = take(u32())
            blocks.append((tag, take(u32())))
        if pos != len(blob):
            raise ValueError("trailing bytes after content bank")
        return cls.from_parts(names, blocks)

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: Union[str, Path]) -> "ContentBank":
        return cls.from_bytes(Path(path).read_bytes())


def build_bank(directory: Union[str, Path]) -> ContentBank:
    """Harvest names and blocks from every parseable file in ``directory``."""
    counts: Counter[bytes] = Counter()
    blocks: list[tuple[bytes, bytes]] = []
    seen: set[bytes] = set()
    parsed = 0
    for path in sorted(p for p in Path(directory).iterdir() if p.is_file()):
        try:
            img = parse_pe(path.read_bytes())
        except MalformedPe:
            continue
        parsed += 1
        for sec in img.sections:
            counts[sec.name] += 1
            data = img.section_bytes(sec)
            for k in range(BLOCKS_PER_SECTION):
                block = data[k * BLOCK_SIZE:(k + 1) * BLOCK_SIZE]
                if not block:
                    break
                if block not in seen:
                    seen.add(block)
                    blocks.append((sec.name, block))
    if parsed == 0:
        raise EmptyBank(f"no parseable PE files in {directory}")
    return ContentBank.from_parts(counts.items(), blocks)


def sample_block(bank: ContentBank, length: int, rng: np.random.Generator,
                 fallback_random: bool = True) -> bytes:
    """Exactly ``length`` bytes cut from bank blocks chosen by ``rng``.

    When the remaining need fits inside the chosen block a random contiguous
    slice is taken; otherwise the whole block is used and another is drawn.
    """
    if length < 1:
        raise ValueError("length must be >= 1")
    if bank is None or bank.is_empty:
        if not fallback_random:
            raise EmptyBank("bank has no blocks")
        return rng.bytes(length)
    out = bytearray()
    while len(out) < length:
        _, block = bank.blocks[int(rng.integers(len(bank.blocks)))]
        need = length - len(out)
        if need <= len(block):
            start = int(rng.integers(0, len(block) - need + 1))
            out += block[start:start + need]
        else:
            out += block
    return bytes(out)


def sample_name(bank: ContentBank, rng: np.random.Generator) -> bytes:
    """An 8-byte section name drawn with probability proportional to its count."""
    if bank is None or not bank.names:
        raise EmptyBank("bank has no section names")
    weights = np.array([c for _, c in bank.names], dtype=float)
    idx = int(rng.choice(len(weights), p=weights / weights.sum()))
    return bank.names[idx][0]
