"""Deterministic child-seed derivation.

A child stream is keyed by the master seed plus any mix of strings and
integers (component name, time step, protocol...), so components never
share random state and reruns are bit-identical.
"""

from __future__ import annotations

import hashlib

import numpy as np


def child_seed(master: int, *keys) -> int:
    h = hashlib.sha256(repr((int(master),) + tuple(keys)).encode())
    return int.from_bytes(h.digest()[:8], "little")


def child_rng(master: int, *keys) -> np.random.Generator:
    return np.random.default_rng(child_seed(master, *keys))
