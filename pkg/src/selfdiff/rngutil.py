"""Named random substreams derived from one root seed.

Every component (data order, noise, augmentation, init) owns an independent
generator, so varying one leaves the others' draws untouched, and stream
states can be captured for exact training resumption.
"""

from __future__ import annotations

import numpy as np
import torch

STREAM_NAMES = ("data", "noise", "augment", "init", "global")


def _child_seed(root: int, index: int) -> int:
    ss = np.random.SeedSequence(entropy=root, spawn_key=(index,))
    return int(ss.generate_state(1, np.uint64)[0] >> 1)


class SeedStreams:
    def __init__(self, seed: int, names: tuple[str, ...] = STREAM_NAMES):
        self.seed = int(seed)
        self.names = names
        self._gens = {
            name: torch.Generator().manual_seed(_child_seed(self.seed, i))
            for i, name in enumerate(names)
        }

    def __getattr__(self, name: str) -> torch.Generator:
        gens = self.__dict__.get("_gens", {})
        if name in gens:
            return gens[name]
        raise AttributeError(name)

    def get(self, name: str) -> torch.Generator:
        return self._gens[name]

    def seed_torch_global(self) -> None:
        torch.manual_seed(_child_seed(self.seed, len(self.names) + 7))

    def state(self) -> dict[str, np.ndarray]:
        out = {name: g.get_state().numpy() for name, g in self._gens.items()}
        out["torch_global"] = torch.get_rng_state().numpy()
        return out

    def load_state(self, states: dict[str, np.ndarray]) -> None:
        for name, g in self._gens.items():
            g.set_state(torch.from_numpy(np.asarray(states[name]).copy()))
        torch.set_rng_state(torch.from_numpy(np.asarray(states["torch_global"]).copy()))
