"""Seeded substreams keyed by integer tuples (counter-based Philox)."""

from __future__ import annotations

import numpy as np

PURPOSES = {
    "site_n": 0,
    "alpha": 1,
    "theta": 2,
    "covariates": 3,
    "treatment": 4,
    "noise": 5,
    "mcmc": 6,
    "cohort": 7,
    "onestage": 8,
}


def substream(seed: int, *key: int | str) -> np.random.Generator:
    """Independent generator for ``(seed, *key)``; string keys go through PURPOSES."""
    spawn_key = tuple(PURPOSES[k] if isinstance(k, str) else int(k) for k in key)
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed), spawn_key=spawn_key)))


def child_seed(seed: int, *key: int | str) -> int:
    """A 63-bit integer seed derived from ``(seed, *key)``."""
    return int(substream(seed, *key).integers(0, 2**63 - 1))
