"""Deterministic seed derivation.

All randomness flows from user-visible integer seeds through named
sub-streams, so that any command replays byte-identically and independent
stages never share a stream. Tags may nest; they are flattened into the
SeedSequence entropy.
"""

from __future__ import annotations

import numpy as np


def _flatten(parts):
    out = []
    stack = list(parts)
    while stack:
        p = stack.pop(0)
        if isinstance(p, (tuple, list)):
            stack = list(p) + stack
        elif isinstance(p, np.random.SeedSequence):
            out.extend(p.entropy if isinstance(p.entropy, (list, tuple)) else [p.entropy])
            out.extend(p.spawn_key)
        else:
            out.append(int(p))
    return out


def seed_seq(*parts):
    return np.random.SeedSequence(_flatten(parts))


def rng(*parts):
    return np.random.default_rng(seed_seq(*parts))
