"""Deterministic seed derivation.

``derive_seed(global_seed, *labels)`` hashes the JSON encoding of its
arguments with SHA-256 and keeps the first 8 bytes (big-endian, masked to
63 bits). Any subset of a run can therefore be replayed from the global
seed and the labels of the piece being rerun.
"""

import hashlib
import json

import numpy as np


def derive_seed(*labels) -> int:
    blob = json.dumps([_plain(x) for x in labels], separators=(",", ":")).encode("utf-8")
    return int.from_bytes(hashlib.sha256(blob).digest()[:8], "big") & (2**63 - 1)


def derive_rng(*labels) -> np.random.Generator:
    return np.random.default_rng(derive_seed(*labels))


def _plain(x):
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating,)):
        return float(x)
    if isinstance(x, (tuple, list)):
        return [_plain(v) for v in x]
    return x
