"""Artificial fingerprints for generative models: embed, transfer, detect, attribute."""

__version__ = "0.1.0"

from .fingerprint import (  # noqa: E402
    DecodedFingerprint,
    Fingerprint,
    MatchResult,
    Registry,
    RegistryEntry,
    attribute,
    bitwise_accuracy,
    false_match_rate,
    match_pvalue,
    sample_fingerprint,
    verify_match,
)
