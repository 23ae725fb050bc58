"""Named random sub-streams derived from a single run seed.

Every stochastic component (pairing, coefficients, noise, init, shuffling,
crop/flip) draws from its own stream so changing one consumer never shifts
the draws of another.
"""

from __future__ import annotations

import zlib

import numpy as np
import torch


def _key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def substream(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=(_key(name),)))


def derived_seed(seed: int, name: str) -> int:
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(_key(name),))
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def torch_generator(seed: int, name: str) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(derived_seed(seed, name))
    return g
