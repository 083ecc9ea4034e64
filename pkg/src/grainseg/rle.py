"""Run-length codec for binary masks over row-major pixel order.

The wire form lists [start, length] pairs of foreground runs in the
flattened mask plus the shape, which keeps click-round-trip payloads
small for the interactive service.
"""

from __future__ import annotations

import numpy as np


def rle_encode(mask: np.ndarray) -> dict:
    """Encode a 2-D boolean mask as {"h", "w", "runs"}."""
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {mask.shape}")
    flat = mask.ravel()
    # transitions between runs: prepend/append background sentinels
    padded = np.concatenate(([False], flat, [False]))
    changes = np.flatnonzero(padded[1:] != padded[:-1])
    starts = changes[0::2]
    ends = changes[1::2]
    runs = [[int(s), int(e - s)] for s, e in zip(starts, ends)]
    return {"h": int(mask.shape[0]), "w": int(mask.shape[1]), "runs": runs}


def rle_decode(payload: dict) -> np.ndarray:
    """Inverse of :func:`rle_encode`."""
    h, w = int(payload["h"]), int(payload["w"])
    flat = np.zeros(h * w, dtype=bool)
    for start, length in payload["runs"]:
        if start < 0 or length < 0 or start + length > h * w:
            raise ValueError(f"run [{start},{length}] exceeds {h * w} pixels")
        flat[start : start + length] = True
    return flat.reshape(h, w)
