"""Counter-based random streams.

Every random draw in nftlab comes from a Philox generator whose key is the
run seed and whose counter words carry the stream coordinates, e.g.
``(purpose, iteration)``, question and sample slot.  Streams are therefore
independent of the order in which they are requested.
"""

from __future__ import annotations

import numpy as np

# Stream purposes, packed into the top bits of the first coordinate word.
ROLLOUT = 1
BATCH = 2
QUESTIONS = 3
INIT = 4
TEST = 5

_MASK64 = (1 << 64) - 1


def stream(seed: int, purpose: int, *key: int) -> np.random.Generator:
    """Generator for stream ``(purpose, *key)`` of run ``seed``.

    ``key`` holds at most three non-negative integers; the first may use up
    to 48 bits, the others 64.
    """
    if len(key) > 3:
        raise ValueError("stream key has at most three coordinates")
    words = list(key) + [0] * (3 - len(key))
    if any(w < 0 for w in words) or words[0] >= 1 << 48:
        raise ValueError(f"invalid stream key {key}")
    words[0] |= purpose << 48
    seed = int(seed)
    bitgen = np.random.Philox(
        key=[seed & _MASK64, (seed >> 64) & _MASK64],
        counter=[0, words[0], words[1] & _MASK64, words[2] & _MASK64],
    )
    return np.random.Generator(bitgen)
