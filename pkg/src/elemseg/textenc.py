"""Frozen deterministic text embedding via signed trigram hashing.

Used for both referring expressions and element texts. Holds no trainable
state: equal normalized strings always map to equal vectors.
"""

from __future__ import annotations

import functools

import numpy as np

DEFAULT_DIM = 64
DEFAULT_SEED = 0x5EED

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1

_ALLOWED = frozenset("abcdefghijklmnopqrstuvwxyz0123456789 ")


def normalize_text(raw) -> str:
    """Lowercase, drop non-ASCII, turn punctuation/whitespace into single spaces."""
    if isinstance(raw, bytes):
        raw = raw.decode("utf-8", errors="ignore")
    s = raw.lower().encode("ascii", errors="ignore").decode("ascii")
    s = "".join(ch if ch in _ALLOWED else " " for ch in s)
    return " ".join(s.split())


def _fnv1a64(data: bytes, seed: int) -> int:
    h = (_FNV_OFFSET ^ seed) & _MASK64
    for b in data:
        h ^= b
        h = (h * _FNV_PRIME) & _MASK64
    return h


@functools.lru_cache(maxsize=65536)
def _encode_normalized(text: str, dim: int, seed: int) -> np.ndarray:
    v = np.zeros(dim, dtype=np.float32)
    if not text:
        v.setflags(write=False)
        return v
    padded = "^" + text + "$"
    for i in range(len(padded) - 2):
        h = _fnv1a64(padded[i:i + 3].encode("utf-8"), seed)
        sign = 1.0 if (h >> 63) == 0 else -1.0
        v[h % dim] += sign
    norm = float(np.linalg.norm(v))
    if norm == 0.0:
        # signs cancelled across every bucket; fall back to a unit basis vector
        v[_fnv1a64(text.encode("utf-8"), seed) % dim] = 1.0
    else:
        v /= norm
    v.setflags(write=False)
    return v


def encode_text(raw, dim: int = DEFAULT_DIM, seed: int = DEFAULT_SEED) -> np.ndarray:
    """Embed a string as a unit-norm float32 vector (zero vector for empty text)."""
    return _encode_normalized(normalize_text(raw), dim, seed).copy()
