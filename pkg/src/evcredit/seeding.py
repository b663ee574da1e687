"""Stage-specific seeds derived from one global seed."""

from __future__ import annotations

import hashlib


def derive_seed(seed: int, stage: str) -> int:
    """63-bit seed from the sha256 of ``"<seed>:<stage>"``."""
    digest = hashlib.sha256(f"{int(seed)}:{stage}".encode()).digest()
    return int.from_bytes(digest[:8], "big") >> 1
