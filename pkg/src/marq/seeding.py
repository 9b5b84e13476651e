"""Per-component seed derivation from one run seed.

``derive_seed(seed, tag) = (seed + H(tag)) mod 2**64`` where ``H`` is the
first 8 bytes (little-endian) of the SHA-256 of the UTF-8 tag. Tags name the
component and, where needed, the step and item, e.g. ``"mask/12/3"``.
"""

from __future__ import annotations

import hashlib

_MOD = 2**64


def tag_hash(tag: str) -> int:
    return int.from_bytes(hashlib.sha256(tag.encode("utf-8")).digest()[:8], "little")


def derive_seed(seed: int, tag: str) -> int:
    return (int(seed) + tag_hash(tag)) % _MOD
