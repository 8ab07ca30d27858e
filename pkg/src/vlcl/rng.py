"""Named random streams derived from a single base seed.

Every stochastic site in the codebase pulls from its own stream, keyed by a
string name. Streams are derived by hashing (seed, name), so adding a new
site never perturbs the draws of existing ones, and any single site can be
reproduced in isolation.
"""
from __future__ import annotations

import hashlib

import numpy as np


def _derive_seed(base_seed: int, name: str) -> int:
    digest = hashlib.sha256(f"{base_seed}/{name}".encode("utf-8")).digest()
    return int.from_bytes(digest[:16], "little")


class RngHub:
    """Factory and registry for named np.random.Generator streams."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._streams: dict[str, np.random.Generator] = {}

    def stream(self, name: str) -> np.random.Generator:
        """Return the generator for `name`, creating it on first use."""
        gen = self._streams.get(name)
        if gen is None:
            gen = np.random.default_rng(_derive_seed(self.seed, name))
            self._streams[name] = gen
        return gen

    def state_dict(self) -> dict:
        """JSON-serializable snapshot of every instantiated stream."""
        return {
            "seed": self.seed,
            "streams": {name: gen.bit_generator.state for name, gen in self._streams.items()},
        }

    @classmethod
    def from_state(cls, state: dict) -> "RngHub":
        hub = cls(state["seed"])
        for name, bg_state in state["streams"].items():
            gen = np.random.default_rng(0)
            gen.bit_generator.state = bg_state
            hub._streams[name] = gen
        return hub
