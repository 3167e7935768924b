"""Run-length encoding of binary masks over row-major order.

The encoding is a list of run lengths alternating background/foreground and
starting with background, so a mask beginning with foreground starts with a
zero run. The run sum always equals height * width; the round trip is
bit-exact. This is the on-the-wire and in-log mask format.
"""

from __future__ import annotations

import numpy as np


def encode(mask: np.ndarray) -> list[int]:
    flat = np.asarray(mask, dtype=bool).reshape(-1)
    if flat.size == 0:
        return []
    changes = np.flatnonzero(np.diff(flat.astype(np.int8))) + 1
    bounds = np.concatenate([[0], changes, [flat.size]])
    runs = np.diff(bounds).tolist()
    if flat[0]:
        runs = [0] + runs
    return [int(r) for r in runs]


def decode(runs: list[int], shape: tuple[int, int]) -> np.ndarray:
    h, w = shape
    total = h * w
    if sum(runs) != total:
        raise ValueError(f"run lengths sum to {sum(runs)}, expected {total}")
    if any(r < 0 for r in runs):
        raise ValueError("negative run length")
    flat = np.zeros(total, dtype=bool)
    pos = 0
    value = False
    for run in runs:
        if value:
            flat[pos:pos + run] = True
        pos += run
        value = not value
    return flat.reshape(h, w)
