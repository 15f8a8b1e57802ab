"""Small deterministic helpers: stable digests, seed derivation, records.

Python's builtin hash() is salted per process, so anything that must be
reproducible across runs goes through sha256 here.
"""

from __future__ import annotations

import hashlib
import json
from typing import Any

import numpy as np


def stable_digest(data: bytes) -> str:
    """Hex sha256 of raw bytes."""
    return hashlib.sha256(data).hexdigest()


def digest_text(text: str) -> str:
    return stable_digest(text.encode("utf-8"))


def derive_seed(master: int, *labels: object) -> int:
    """Derive a 63-bit child seed from a master seed and a label path.

    Stable across platforms and Python versions (unlike hash()).
    """
    h = hashlib.sha256(str(int(master)).encode("ascii"))
    for label in labels:
        h.update(b"/")
        h.update(str(label).encode("utf-8"))
    return int.from_bytes(h.digest()[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF


def rng_for(master: int, *labels: object) -> np.random.Generator:
    """A PCG64 generator seeded from derive_seed(master, *labels)."""
    return np.random.Generator(np.random.PCG64(derive_seed(master, *labels)))


def record_line(record: dict[str, Any]) -> str:
    """Canonical one-line JSON encoding used by all line-record files.

    Sorted keys, no whitespace, ASCII-only: identical records always produce
    identical bytes.
    """
    return json.dumps(record, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


def parse_record_line(line: str) -> dict[str, Any]:
    rec = json.loads(line)
    if not isinstance(rec, dict):
        raise ValueError("record line is not a JSON object")
    return rec
