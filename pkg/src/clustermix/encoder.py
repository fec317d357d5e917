"""Deterministic text embeddings via signed feature hashing.

Stands in for a pretrained sentence encoder: instructions only need to
embed so that similar task templates land near each other. Unigrams and
bigrams are hashed into a fixed number of buckets with a +/-1 sign from
the hash parity and the result is L2-normalized.

The hash function (blake2b, 8-byte digest, fixed key below) and the
bucket/sign derivation are frozen constants; changing either is a
breaking change for every stored clustering and checkpoint.
"""
from __future__ import annotations

import hashlib
import re

import numpy as np

DEFAULT_DIM = 64
HASH_KEY = b"clustermix-embed-v1"

_TOKEN_RE = re.compile(r"[a-z0-9]+")


def tokenize(text: str) -> list[str]:
    """Lowercase word tokens: maximal alphanumeric runs."""
    return _TOKEN_RE.findall(text.lower())


def _hash64(feature: str) -> int:
    digest = hashlib.blake2b(feature.encode("utf-8"), digest_size=8, key=HASH_KEY).digest()
    return int.from_bytes(digest, "little")


def encode_instruction(text: str, dim: int = DEFAULT_DIM) -> np.ndarray:
    """Hash token unigrams and bigrams into a unit-norm vector.

    Bit 0 of the 64-bit hash gives the sign, the remaining bits pick the
    bucket. Empty text maps to the zero vector; any non-empty text has
    L2 norm 1.
    """
    if dim < 8:
        raise ValueError(f"embedding dimension must be >= 8, got {dim}")
    vec = np.zeros(dim, dtype=np.float64)
    tokens = tokenize(text)
    features = list(tokens)
    features.extend(f"{a} {b}" for a, b in zip(tokens, tokens[1:]))
    for feature in features:
        h = _hash64(feature)
        sign = 1.0 if h & 1 == 0 else -1.0
        vec[(h >> 1) % dim] += sign
    norm = float(np.linalg.norm(vec))
    if norm > 0.0:
        vec /= norm
    return vec


def encode_many(texts: list[str], dim: int = DEFAULT_DIM) -> np.ndarray:
    return np.stack([encode_instruction(t, dim) for t in texts]) if texts else np.zeros((0, dim))


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(a @ b / (na * nb))
