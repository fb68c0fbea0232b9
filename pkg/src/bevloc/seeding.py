"""Deterministic random-number streams.

Every stochastic component draws from a numpy Generator derived from a
``SeedSequence`` over ``(root_seed, stream, *keys)``. Streams are enumerated
here so independent components never share a stream by accident; torch's
global RNG is never used.
"""

from __future__ import annotations

import numpy as np

# stream ids (stable across versions; append only)
SCENE = 1
APPEARANCE = 2
EPISODE = 3
PARAMS = 4
TRAIN = 5
EVAL = 6
RANSAC = 7
PROBE = 8


def rng(*keys: int) -> np.random.Generator:
    """Generator for an integer key path, e.g. ``rng(seed, SCENE, index)``."""
    return np.random.default_rng(np.random.SeedSequence(list(keys)))


def generator_state(gen: np.random.Generator) -> dict:
    """JSON-serializable snapshot of a PCG64 generator."""
    state = gen.bit_generator.state
    return {
        "bit_generator": state["bit_generator"],
        "state": int(state["state"]["state"]),
        "inc": int(state["state"]["inc"]),
        "has_uint32": int(state["has_uint32"]),
        "uinteger": int(state["uinteger"]),
    }


def restore_generator(snapshot: dict) -> np.random.Generator:
    if snapshot["bit_generator"] != "PCG64":
        raise ValueError(f"unsupported bit generator {snapshot['bit_generator']!r}")
    bg = np.random.PCG64()
    bg.state = {
        "bit_generator": "PCG64",
        "state": {"state": int(snapshot["state"]), "inc": int(snapshot["inc"])},
        "has_uint32": int(snapshot["has_uint32"]),
        "uinteger": int(snapshot["uinteger"]),
    }
    return np.random.Generator(bg)
