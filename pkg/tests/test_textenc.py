import numpy as np
import pytest

from elemseg.textenc import DEFAULT_DIM, DEFAULT_SEED, encode_text, normalize_text


def reference_encode(raw, dim=DEFAULT_DIM, seed=DEFAULT_SEED):
    """Second implementation of the trigram-hash embedding, written
    independently: explicit FNV-1a over each padded trigram, bucket from the
    low bits, sign from the top bit, then L2 normalization."""
    text = normalize_text(raw)
    if not text:
        return np.zeros(dim, dtype=np.float32)

    def fnv(data):
        h = 0xCBF29CE484222325 ^ seed
        for byte in data:
            h = ((h ^ byte) * 0x100000001B3) % (1 << 64)
        return h

    padded = f"^{text}$"
    trigrams = [padded[i - 2:i + 1] for i in range(2, len(padded))]
    v = np.zeros(dim, dtype=np.float64)
    for tri in trigrams:
        h = fnv(tri.encode())
        v[h % dim] += -1.0 if h & (1 << 63) else 1.0
    norm = np.sqrt((v * v).sum())
    if norm == 0:
        v[fnv(text.encode()) % dim] = 1.0
        norm = 1.0
    return (v / norm).astype(np.float32)


class TestNormalize:
    def test_lowercase_and_punctuation(self):
        assert normalize_text("Click the LOGIN button!") == "click the login button"

    def test_non_ascii_dropped_punctuation_spaced(self):
        assert normalize_text("  Héllo--World  ") == "hllo world"

    def test_empty(self):
        assert normalize_text("") == ""

    def test_whitespace_runs_collapse(self):
        assert normalize_text("a\t\tb \n c") == "a b c"

    def test_bytes_input(self):
        assert normalize_text(b"Send \xf0\x9f\x98\x80 now") == "send now"

    def test_idempotent(self):
        for s in ("Click HERE!", "  a  b  ", "tabs\tand\nnewlines", "123-456"):
            once = normalize_text(s)
            assert normalize_text(once) == once


class TestEncode:
    def test_deterministic_over_random_strings(self, rng):
        alphabet = list("abcdefghijklmnopqrstuvwxyz0123456789 ÄöΩ!?-_")
        for _ in range(1000):
            n = int(rng.integers(0, 24))
            s = "".join(rng.choice(alphabet) for _ in range(n))
            first = encode_text(s)
            second = encode_text(s)
            np.testing.assert_array_equal(first, second)

    def test_empty_is_zero_vector(self):
        assert not encode_text("").any()
        assert not encode_text("  --  ").any()

    def test_matches_independent_reimplementation(self):
        for s in ("cat", "the login button", "a", "42 items", "ok"):
            np.testing.assert_allclose(encode_text(s), reference_encode(s), atol=1e-7)

    def test_unit_norm_or_zero(self, rng):
        alphabet = list("abcdefghij 05?!")
        for _ in range(300):
            n = int(rng.integers(0, 12))
            s = "".join(rng.choice(alphabet) for _ in range(n))
            norm = float(np.linalg.norm(encode_text(s)))
            assert norm == 0.0 or abs(norm - 1.0) <= 1e-5

    def test_hash_discrimination(self):
        assert not np.array_equal(encode_text("abc"), encode_text("abd"))

    def test_dimension_and_dtype(self):
        v = encode_text("send", dim=32)
        assert v.shape == (32,) and v.dtype == np.float32

    def test_normalized_equivalence(self):
        np.testing.assert_array_equal(encode_text("Click SEND!"), encode_text("click send"))

    def test_returned_array_is_caller_owned(self):
        v = encode_text("send")
        v[0] = 99.0
        assert encode_text("send")[0] != 99.0
