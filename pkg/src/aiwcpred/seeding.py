"""Seed derivation: every random stream is a named child of one root seed."""

from __future__ import annotations

import os
import zlib

import numpy as np

SEED_ENV = "AIWC_PREDICT_SEED"
DEFAULT_SEED = 0


def root_seed(cli_value: int | None) -> int:
    """``--seed`` if given, else ``$AIWC_PREDICT_SEED``, else 0."""
    if cli_value is not None:
        return int(cli_value)
    env = os.environ.get(SEED_ENV)
    if env is None or not env.strip():
        return DEFAULT_SEED
    try:
        return int(env, 0)
    except ValueError:
        raise ValueError(f"{SEED_ENV} must be an integer, got {env!r}") from None


def _key(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part)
    return zlib.crc32(str(part).encode())


def derive(seed: int, *path) -> int:
    """A 64-bit seed for the stream named by ``path`` under ``seed``.

    Uses ``SeedSequence(seed, spawn_key=path)`` with string parts hashed by
    CRC-32, so e.g. ``derive(s, "forest")`` and ``derive(s, "sa", 3)`` are
    independent and stable across runs and platforms.
    """
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(_key(p) for p in path))
    return int(ss.generate_state(1, np.uint64)[0])
