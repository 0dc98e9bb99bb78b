"""Shared helpers: guarded order-statistic indices, seeded streams, key-value files."""

from __future__ import annotations

import hashlib
import math

import numpy as np

# Absolute snap tolerance for products like (1 - alpha) * (n + 1) that are
# integers in exact arithmetic but may land a few ulp above one in floats.
_CEIL_SNAP = 1e-9


def ceil_count(v: float) -> int:
    """Ceiling of ``v`` that snaps to the nearest integer when within 1e-9.

    Order-statistic indices are defined through expressions such as
    ``ceil(c * n)``; without the snap, float rounding can push an exact
    integer product infinitesimally high and shift the index by one.
    """
    r = round(v)
    if abs(v - r) < _CEIL_SNAP:
        return int(r)
    return int(math.ceil(v))


def derive_seed(seed: int, role: str) -> int:
    """Stable 64-bit sub-seed for (seed, role), independent of platform."""
    digest = hashlib.blake2b(f"{seed}:{role}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def row_uniforms(seed: int, n: int) -> np.ndarray:
    """Per-row uniforms u_0..u_{n-1} on [0, 1).

    Counter-based: u_i is the i-th output of a Philox stream keyed by the
    seed, so each value depends only on (seed, row index) and not on n or
    on evaluation order.
    """
    gen = np.random.Generator(np.random.Philox(key=seed % (1 << 128)))
    return gen.random(n)


def write_kv(path, pairs: dict) -> None:
    """Write a flat key=value text file (one pair per line, repr floats)."""
    lines = []
    for key, value in pairs.items():
        if isinstance(value, float):
            value = repr(value)
        lines.append(f"{key}={value}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def read_kv(path) -> dict:
    """Read a flat key=value text file written by :func:`write_kv`."""
    pairs = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"malformed key=value line {lineno}: {line!r}")
            key, _, value = line.partition("=")
            pairs[key.strip()] = value.strip()
    return pairs


def format_float(v: float) -> str:
    """Shortest round-trip decimal form, stable across runs."""
    return repr(float(v))
