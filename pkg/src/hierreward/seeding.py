"""Named random substreams.

Every consumer derives its generator from (seed, stream name, integer keys),
so adding a consumer never shifts the draws seen by another one.
"""

from __future__ import annotations

import zlib

import numpy as np

CALIBRATION = "calibration"
SELECTION = "selection"
ROLLOUT = "rollout"
MINIBATCH = "minibatch"
JUDGE_SIM = "judge-sim"
INIT_POLICY = "init-policy"
REFERENCE = "reference"


def stream_id(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def substream(seed: int, name: str, *keys: int) -> np.random.Generator:
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF, stream_id(name), *(int(k) for k in keys)]
    return np.random.default_rng(np.random.SeedSequence(entropy))
