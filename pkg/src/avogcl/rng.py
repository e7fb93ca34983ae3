"""Named, independent random streams derived from one master seed.

Every stage of the pipeline (embedding init, splitting, batch sampling,
candidate sampling, noise) pulls from its own stream so that turning a stage
on or off never shifts the draws seen by the others.
"""

from __future__ import annotations

import zlib

import numpy as np


def named_stream(master_seed: int, name: str) -> np.random.Generator:
    """Return a Generator for `name`, reproducible across runs and platforms."""
    tag = zlib.crc32(name.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence(entropy=master_seed, spawn_key=(tag,)))


def generator_state(gen: np.random.Generator) -> dict:
    """JSON-serializable snapshot of a Generator's bit-generator state."""
    state = gen.bit_generator.state
    return {
        "bit_generator": state["bit_generator"],
        "state": {k: str(v) for k, v in state["state"].items()},
        "has_uint32": state["has_uint32"],
        "uinteger": state["uinteger"],
    }


def restore_generator(snapshot: dict) -> np.random.Generator:
    """Rebuild a Generator from a `generator_state` snapshot."""
    if snapshot["bit_generator"] != "PCG64":
        raise ValueError(f"unsupported bit generator {snapshot['bit_generator']!r}")
    gen = np.random.default_rng(0)
    gen.bit_generator.state = {
        "bit_generator": "PCG64",
        "state": {k: int(v) for k, v in snapshot["state"].items()},
        "has_uint32": snapshot["has_uint32"],
        "uinteger": snapshot["uinteger"],
    }
    return gen
