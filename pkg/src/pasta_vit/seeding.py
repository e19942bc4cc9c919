"""Seed derivation: every random stream comes from (global seed, stage name, index)."""

import hashlib


def derive_seed(seed: int, *names) -> int:
    key = ":".join([str(int(seed))] + [str(n) for n in names])
    return int.from_bytes(hashlib.sha256(key.encode()).digest()[:4], "little") & 0x7FFFFFFF
