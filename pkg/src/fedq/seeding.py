"""Deterministic seed derivation.

All randomness flows from a single root seed; each subsystem derives its own
child seed by hashing the root together with a short label, so adding or
reordering consumers never perturbs another subsystem's stream.
"""

from __future__ import annotations

import hashlib

# Child seeds are kept in [0, 2^63) so they are valid for any RNG constructor.
_MASK = (1 << 63) - 1


def split_seed(root: int, label: str) -> int:
    """Derive a child seed from ``root`` and a namespacing ``label``."""
    digest = hashlib.sha256(f"{root}:{label}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") & _MASK
