"""64-bit FNV-1a used for provenance tags in file headers and reports."""
from __future__ import annotations

import json

import numpy as np

_OFFSET = 0xCBF29CE484222325
_PRIME = 0x100000001B3
_MASK = (1 << 64) - 1


def fnv1a64(data: bytes) -> int:
    h = _OFFSET
    for byte in data:
        h ^= byte
        h = (h * _PRIME) & _MASK
    return h


def hash_array(values) -> int:
    return fnv1a64(np.ascontiguousarray(values, dtype="<f8").tobytes())


def hash_json(obj) -> int:
    return fnv1a64(json.dumps(obj, sort_keys=True, separators=(",", ":")).encode())
