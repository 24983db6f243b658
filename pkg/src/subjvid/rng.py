"""Named random sub-streams derived from one integer seed.

Each consumer asks for its own stream by name, so adding a new consumer never
shifts the draws seen by existing ones.
"""

from __future__ import annotations

import zlib

import numpy as np
import torch


def _key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def substream(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), _key(name)]))


def torch_generator(seed: int, name: str) -> torch.Generator:
    ss = np.random.SeedSequence([int(seed), _key(name)])
    g = torch.Generator()
    g.manual_seed(int(ss.generate_state(1, dtype=np.uint64)[0] & 0x7FFF_FFFF_FFFF_FFFF))
    return g


def child_seed(seed: int, name: str) -> int:
    ss = np.random.SeedSequence([int(seed), _key(name)])
    return int(ss.generate_state(1, dtype=np.uint32)[0])
