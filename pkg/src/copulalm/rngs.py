"""Counter-based random streams keyed by (seed, purpose, indices).

Every consumer of randomness opens its own stream from the run seed plus a
fixed purpose code and loop indices (epoch, batch, ...). Streams are therefore
reproducible regardless of execution order or parallelism.
"""

from __future__ import annotations

import numpy as np

_PURPOSES = {
    "init": 1,
    "shuffle": 2,
    "dropout_enc": 3,
    "dropout_dec": 4,
    "noise_z": 5,
    "noise_q": 6,
    "eval": 7,
    "grad_gate": 8,
    "generate": 9,
}


def stream(seed: int, purpose: str, *indices: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), _PURPOSES[purpose], *[int(i) for i in indices]])
