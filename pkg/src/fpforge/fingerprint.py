"""Bit-vector fingerprints, binomial matching and the fingerprint registry.

A fingerprint is a length-``n`` binary vector allocated to one model (or one
training set).  Detection decodes a vector from an image and asks how likely
it is that ``k`` of ``n`` bits agree with a registered fingerprint by chance.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from datetime import datetime, timezone
from fractions import Fraction
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from filelock import FileLock

from .errors import CollisionError, ConflictError, InvalidArgument

DEFAULT_LENGTH = 100
DEFAULT_THRESHOLD = 0.75


def _as_bit_array(bits) -> np.ndarray:
    arr = np.asarray(bits)
    if arr.ndim != 1:
        raise InvalidArgument(f"fingerprint bits must be 1-D, got shape {arr.shape}")
    if arr.size == 0:
        raise InvalidArgument("fingerprint must have at least one bit")
    if arr.dtype == bool:
        return arr.astype(np.uint8)
    if not np.all((arr == 0) | (arr == 1)):
        raise InvalidArgument("fingerprint bits must be 0 or 1")
    return arr.astype(np.uint8)


@dataclass(frozen=True, eq=False)
class Fingerprint:
    """An immutable binary vector ``w`` of length ``n``."""

    bits: np.ndarray

    def __post_init__(self):
        arr = _as_bit_array(self.bits)
        arr.setflags(write=False)
        object.__setattr__(self, "bits", arr)

    @property
    def n(self) -> int:
        return int(self.bits.size)

    def __len__(self):
        return self.n

    def __eq__(self, other):
        if not isinstance(other, Fingerprint):
            return NotImplemented
        return self.n == other.n and bool(np.array_equal(self.bits, other.bits))

    def __hash__(self):
        return hash((self.n, self.bits.tobytes()))

    def __repr__(self):
        return f"Fingerprint(n={self.n}, hex={self.to_hex()!r})"

    def complement(self) -> "Fingerprint":
        return Fingerprint(1 - self.bits)

    def to_hex(self) -> str:
        """Big-endian packing: bit 0 is the most significant bit of an n-bit integer."""
        value = int("".join(map(str, self.bits.tolist())), 2)
        return value.to_bytes((self.n + 7) // 8, "big").hex()

    @classmethod
    def from_hex(cls, hex_str: str, n: int) -> "Fingerprint":
        if n < 1:
            raise InvalidArgument("n must be positive")
        raw = bytes.fromhex(hex_str)
        if len(raw) != (n + 7) // 8:
            raise InvalidArgument(f"hex string has {len(raw)} bytes, expected {(n + 7) // 8} for n={n}")
        value = int.from_bytes(raw, "big")
        if value >> n:
            raise InvalidArgument("hex string has non-zero padding bits")
        return cls(np.array([int(c) for c in format(value, f"0{n}b")], dtype=np.uint8))

    def to_dict(self) -> dict:
        return {"fingerprint_hex": self.to_hex(), "n": self.n}

    @classmethod
    def from_dict(cls, d: dict) -> "Fingerprint":
        return cls.from_hex(d["fingerprint_hex"], int(d["n"]))


@dataclass(frozen=True, eq=False)
class DecodedFingerprint:
    """Decoder sigmoid outputs and their hard bits (``prob >= 0.5`` -> 1)."""

    probs: np.ndarray
    bits: np.ndarray = field(init=False)

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=np.float64)
        if probs.ndim != 1 or probs.size == 0:
            raise InvalidArgument("probs must be a non-empty 1-D sequence")
        if np.any(probs < 0) or np.any(probs > 1) or np.any(np.isnan(probs)):
            raise InvalidArgument("probs must lie in [0, 1]")
        object.__setattr__(self, "probs", probs)
        object.__setattr__(self, "bits", (probs >= 0.5).astype(np.uint8))

    @property
    def n(self) -> int:
        return int(self.probs.size)

    def to_fingerprint(self) -> Fingerprint:
        return Fingerprint(self.bits)


def _bits_of(x) -> np.ndarray:
    if isinstance(x, (Fingerprint, DecodedFingerprint)):
        return x.bits
    return _as_bit_array(x)


def sample_fingerprint(n: int = DEFAULT_LENGTH, seed: Optional[int] = None) -> Fingerprint:
    if n < 1:
        raise InvalidArgument(f"fingerprint length must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    return Fingerprint(rng.integers(0, 2, size=n, dtype=np.uint8))


def matched_bits(a, b) -> int:
    a, b = _bits_of(a), _bits_of(b)
    if a.size != b.size:
        raise InvalidArgument(f"length mismatch: {a.size} vs {b.size}")
    return int(np.count_nonzero(a == b))


def bitwise_accuracy(a, b) -> float:
    """Fraction of positions where ``a`` and ``b`` agree."""
    return matched_bits(a, b) / _bits_of(a).size


@lru_cache(maxsize=None)
def _tail_numerator(k: int, n: int) -> int:
    return sum(math.comb(n, i) for i in range(k, n + 1))


def match_pvalue_exact(k: int, n: int) -> Fraction:
    """P(X >= k) for X ~ Binomial(n, 1/2), inclusive of k, as an exact fraction."""
    k, n = int(k), int(n)
    if n < 1:
        raise InvalidArgument("n must be positive")
    if k < 0 or k > n:
        raise InvalidArgument(f"need 0 <= k <= n, got k={k}, n={n}")
    return Fraction(_tail_numerator(k, n), 1 << n)


def match_pvalue(k: int, n: int) -> float:
    """Correctly rounded float of :func:`match_pvalue_exact`.

    Near k = 0 the tail is within 2**-53 of 1 and rounds to 1.0.
    """
    return float(match_pvalue_exact(k, n))


def required_matches(threshold: float, n: int) -> int:
    """Smallest ``k`` with ``k / n >= threshold``."""
    k = math.ceil(round(threshold * n, 9))
    return max(k, 0)


@dataclass(frozen=True)
class MatchResult:
    matched_bits: int
    n: int
    accuracy: float
    p_value: float
    verified: bool
    confidence: Optional[float]

    def to_dict(self) -> dict:
        return {
            "matched_bits": self.matched_bits,
            "n": self.n,
            "accuracy": self.accuracy,
            "p_value": self.p_value,
            "verified": self.verified,
            "confidence": self.confidence,
        }


def verify_match(decoded, reference, threshold: float = DEFAULT_THRESHOLD) -> MatchResult:
    k = matched_bits(decoded, reference)
    n = _bits_of(reference).size
    p = match_pvalue(k, n)
    verified = k >= required_matches(threshold, n)
    return MatchResult(
        matched_bits=k,
        n=n,
        accuracy=k / n,
        p_value=p,
        verified=verified,
        confidence=1.0 - p if verified else None,
    )


def false_match_rate(num_registered: int, n: int = DEFAULT_LENGTH, threshold: float = DEFAULT_THRESHOLD) -> float:
    """Union bound on the chance that a random decode matches any of M entries."""
    if num_registered < 0:
        raise InvalidArgument("num_registered must be >= 0")
    if num_registered == 0:
        return 0.0
    k = required_matches(threshold, n)
    if k > n:
        return 0.0
    return min(1.0, num_registered * match_pvalue(k, n))


def _now_rfc3339() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass(frozen=True)
class RegistryEntry:
    model_id: str
    fingerprint: Fingerprint
    codec_id: str
    created_at: str = field(default_factory=_now_rfc3339)

    def to_json(self) -> str:
        return json.dumps(
            {
                "model_id": self.model_id,
                "fingerprint_hex": self.fingerprint.to_hex(),
                "n": self.fingerprint.n,
                "codec_id": self.codec_id,
                "created_at": self.created_at,
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, line: str) -> "RegistryEntry":
        d = json.loads(line)
        created = d["created_at"]
        datetime.fromisoformat(created)  # validate RFC 3339 shape
        return cls(
            model_id=d["model_id"],
            fingerprint=Fingerprint.from_hex(d["fingerprint_hex"], int(d["n"])),
            codec_id=d["codec_id"],
            created_at=created,
        )


class Registry:
    """Model-id -> fingerprint database, optionally persisted as JSON lines.

    Writes take a file lock and re-read the file first, so several processes
    can share one registry file with a single writer at a time.
    """

    def __init__(self, path: Optional[os.PathLike] = None, threshold: float = DEFAULT_THRESHOLD):
        self.path = Path(path) if path is not None else None
        self.threshold = threshold
        self._entries: dict[str, RegistryEntry] = {}
        if self.path is not None and self.path.exists():
            self.reload()

    def reload(self):
        self._entries = {}
        if self.path is None or not self.path.exists():
            return
        with open(self.path) as f:
            for line in f:
                if line.strip():
                    e = RegistryEntry.from_json(line)
                    self._entries[e.model_id] = e

    def __len__(self):
        return len(self._entries)

    def __iter__(self):
        return iter(self.entries())

    def __contains__(self, model_id):
        return model_id in self._entries

    def entries(self) -> list[RegistryEntry]:
        return sorted(self._entries.values(), key=lambda e: e.model_id)

    def get(self, model_id: str) -> RegistryEntry:
        return self._entries[model_id]

    def _check_new(self, model_id: str, fingerprint: Fingerprint):
        if model_id in self._entries:
            raise ConflictError(f"model_id {model_id!r} already registered")
        for e in self._entries.values():
            if e.fingerprint.n != fingerprint.n:
                continue
            k = matched_bits(e.fingerprint, fingerprint)
            if k >= required_matches(self.threshold, fingerprint.n):
                raise CollisionError(
                    f"fingerprint agrees with {e.model_id!r} on {k}/{fingerprint.n} bits"
                )

    def register(self, model_id: str, fingerprint: Fingerprint, codec_id: str) -> RegistryEntry:
        if not model_id:
            raise InvalidArgument("model_id must be non-empty")
        entry = RegistryEntry(model_id=model_id, fingerprint=fingerprint, codec_id=codec_id)
        if self.path is None:
            self._check_new(model_id, fingerprint)
            self._entries[model_id] = entry
            return entry
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with FileLock(str(self.path) + ".lock"):
            self.reload()
            self._check_new(model_id, fingerprint)
            with open(self.path, "a") as f:
                f.write(entry.to_json() + "\n")
            self._entries[model_id] = entry
        return entry

    def matrix(self) -> tuple[list[str], np.ndarray]:
        entries = self.entries()
        if not entries:
            return [], np.zeros((0, 0), dtype=np.uint8)
        return [e.model_id for e in entries], np.stack([e.fingerprint.bits for e in entries])


def register(registry: Registry, model_id: str, fingerprint: Fingerprint, codec_id: str) -> RegistryEntry:
    return registry.register(model_id, fingerprint, codec_id)


def attribute(decoded, registry: Registry, threshold: float = DEFAULT_THRESHOLD) -> Optional[str]:
    """Return the registered model whose fingerprint best matches ``decoded``.

    ``None`` means no entry reaches the threshold (the image is treated as
    real or of unknown origin).
    """
    return attribute_many(np.asarray(_bits_of(decoded))[None, :], registry, threshold)[0]


def attribute_many(bits: np.ndarray, registry: Registry, threshold: float = DEFAULT_THRESHOLD) -> list[Optional[str]]:
    """Vectorised :func:`attribute` over an ``(N, n)`` array of hard bits."""
    bits = np.asarray(bits, dtype=np.uint8)
    ids, mat = registry.matrix()
    if not ids:
        return [None] * len(bits)
    if mat.shape[1] != bits.shape[1]:
        raise InvalidArgument(f"decoded length {bits.shape[1]} != registry length {mat.shape[1]}")
    n = bits.shape[1]
    agree = (bits[:, None, :] == mat[None, :, :]).sum(axis=2)  # (N, M)
    need = required_matches(threshold, n)
    # ids are sorted, so argmax picks the lexicographically smallest id on ties;
    # equal n means equal agreement gives equal p-value.
    best = agree.argmax(axis=1)
    out: list[Optional[str]] = []
    for i, j in enumerate(best):
        out.append(ids[j] if agree[i, j] >= need else None)
    return out


def load_fingerprint(spec: str, n: int = DEFAULT_LENGTH) -> Fingerprint:
    """Parse ``hex:<hex>``, ``seed:<int>`` or a path to a JSON file with hex + n."""
    if spec.startswith("hex:"):
        return Fingerprint.from_hex(spec[4:], n)
    if spec.startswith("seed:"):
        return sample_fingerprint(n, int(spec[5:]))
    with open(spec) as f:
        return Fingerprint.from_dict(json.load(f))
