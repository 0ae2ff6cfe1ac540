"""Named random streams derived from one root seed."""

from typing import Sequence

import numpy as np

STREAMS = ("data", "init", "dropout", "eval")


def stream_seed(seed: int, name: str, *indices: int) -> np.random.SeedSequence:
    if name not in STREAMS:
        raise ValueError(f"stream must be one of {STREAMS} but {name!r} given")
    return np.random.SeedSequence([seed, STREAMS.index(name), *indices])


def seed_stream(seed: int, name: str, *indices: int) -> np.random.Generator:
    """Generator for stream ``name``; extra indices derive independent sub-streams."""
    return np.random.default_rng(stream_seed(seed, name, *indices))


def derived_int(seed: int, name: str, indices: Sequence[int] = ()) -> int:
    return int(stream_seed(seed, name, *indices).generate_state(1)[0] >> 1)
