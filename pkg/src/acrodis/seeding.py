"""Deterministic derivation of named sub-seeds from one root seed."""

from __future__ import annotations

import hashlib


def derive_seed(root_seed: int, name: str) -> int:
    """Stable 63-bit seed for a named stochastic component."""
    digest = hashlib.sha256(f"{root_seed}/{name}".encode()).digest()
    return int.from_bytes(digest[:8], "big") >> 1
