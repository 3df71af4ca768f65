"""Deterministic serialization and hashing helpers.

Every file this package writes goes through `canonical_json`, so reruns
with the same inputs produce byte-identical outputs: keys are sorted,
floats are printed with 17 significant digits (enough to round-trip any
float64 exactly), and non-finite values are rejected outright.
"""

from __future__ import annotations

import hashlib
import json
import math
from typing import Any

import numpy as np


def format_float(value: float) -> str:
    """17-significant-digit decimal form; round-trips float64 exactly."""
    if not math.isfinite(value):
        raise ValueError(f"non-finite value in canonical output: {value!r}")
    return format(value, ".17g")


def canonical_json(value: Any) -> str:
    """Serialize to canonical JSON: sorted keys, compact, deterministic floats."""
    out: list[str] = []
    _write(value, out)
    return "".join(out)


def _write(value: Any, out: list[str]) -> None:
    # bool is an int subclass, so it has to be tested first.
    if isinstance(value, bool) or isinstance(value, np.bool_):
        out.append("true" if value else "false")
    elif value is None:
        out.append("null")
    elif isinstance(value, str):
        out.append(json.dumps(value))
    elif isinstance(value, (int, np.integer)):
        out.append(str(int(value)))
    elif isinstance(value, (float, np.floating)):
        out.append(format_float(float(value)))
    elif isinstance(value, np.ndarray):
        _write(value.tolist(), out)
    elif isinstance(value, dict):
        keys = list(value.keys())
        if any(not isinstance(k, str) for k in keys):
            raise TypeError("canonical JSON requires string keys")
        out.append("{")
        for i, k in enumerate(sorted(keys)):
            if i:
                out.append(",")
            out.append(json.dumps(k))
            out.append(":")
            _write(value[k], out)
        out.append("}")
    elif isinstance(value, (list, tuple)):
        out.append("[")
        for i, item in enumerate(value):
            if i:
                out.append(",")
            _write(item, out)
        out.append("]")
    else:
        raise TypeError(f"cannot serialize {type(value).__name__} canonically")


def write_canonical(path: str, value: Any) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write(canonical_json(value))
        fh.write("\n")


def stable_hash64(text: str) -> int:
    """Process-independent 64-bit hash (Python's builtin `hash` is salted)."""
    digest = hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def per_image_seed(seed: int, image_id: str) -> int:
    """Derive the per-image RNG seed as seed XOR hash(image_id)."""
    return (int(seed) ^ stable_hash64(image_id)) & 0x7FFFFFFFFFFFFFFF
