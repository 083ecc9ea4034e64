"""Click encoding and the click-sampling strategies used by the protocols.

Covers the dense 2-channel disk-map encoding, the deterministic
center-first click, the largest-error-region corrective click, and
seeded negative sampling inside a predicted mask.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .core import (
    CROSS,
    BinaryMask,
    Click,
    ClickSet,
    Polarity,
    ProbabilityMap,
    interior_most_point,
)
from .errors import ContractViolation, EmptyMaskError, NoErrorRegion


@dataclass(frozen=True)
class ClickSimConfig:
    disk_radius: int = 3
    d_min: int = 5

    def __post_init__(self) -> None:
        if self.disk_radius < 1 or self.d_min < 1:
            raise ContractViolation("disk_radius and d_min must be >= 1")


def encode_disk_map(clicks: ClickSet, h: int, w: int, cfg: ClickSimConfig) -> np.ndarray:
    """Rasterize clicks into an h x w x 2 binary disk map.

    Channel 0 marks Euclidean disks of radius ``disk_radius`` around
    positive clicks, channel 1 around negatives. Overlaps saturate at 1.
    """
    out = np.zeros((h, w, 2), dtype=np.float64)
    if len(clicks) == 0:
        return out
    rows = np.arange(h)[:, None]
    cols = np.arange(w)[None, :]
    r2 = cfg.disk_radius**2
    for click in clicks:
        if not (0 <= click.row < h and 0 <= click.col < w):
            raise ContractViolation(f"click ({click.row},{click.col}) outside {h}x{w} raster")
        channel = 0 if click.is_positive else 1
        disk = (rows - click.row) ** 2 + (cols - click.col) ** 2 <= r2
        out[:, :, channel][disk] = 1.0
    return out


def first_click(gt: BinaryMask) -> Click:
    """Positive click at the interior-most point of the target."""
    if gt.is_empty():
        raise EmptyMaskError("cannot place the first click on an empty target")
    r, c = interior_most_point(gt)
    return Click(r, c, Polarity.POSITIVE)


def next_click_from_error(pred: BinaryMask, gt: BinaryMask) -> Click:
    """Corrective click at the interior of the largest error component.

    False-negative components yield a positive click, false-positive
    components a negative one. Equal-size components prefer the
    false-negative side, then the component seen first in row-major order.
    """
    if pred.shape != gt.shape:
        raise ContractViolation(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    fn = np.logical_and(gt.pixels, ~pred.pixels)
    fp = np.logical_and(pred.pixels, ~gt.pixels)
    if not fn.any() and not fp.any():
        raise NoErrorRegion("prediction equals ground truth")

    best = None  # (size, polarity_rank, first_pixel_index, component_mask, polarity)
    for region, polarity, rank in ((fn, Polarity.POSITIVE, 0), (fp, Polarity.NEGATIVE, 1)):
        if not region.any():
            continue
        labels, count = ndimage.label(region, structure=CROSS)
        flat = labels.ravel()
        sizes = np.bincount(flat)
        sizes[0] = 0
        for lab in range(1, count + 1):
            comp = labels == lab
            key = (-int(sizes[lab]), rank, int(np.argmax(flat == lab)))
            if best is None or key < best[0]:
                best = (key, comp, polarity)
    comp_mask, polarity = best[1], best[2]
    r, c = interior_most_point(BinaryMask(comp_mask))
    return Click(r, c, polarity)


def sample_negative_in_mask(
    current: ProbabilityMap,
    existing: ClickSet,
    threshold: float,
    cfg: ClickSimConfig,
    rng: int | np.random.Generator,
) -> Click | None:
    """Seeded uniform negative click inside the binarized current mask.

    Only pixels at Euclidean distance >= d_min from every existing click
    are admissible; returns None when no pixel qualifies.
    """
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    fg = current.pixels >= threshold
    if not fg.any():
        return None
    admissible = fg
    if len(existing) > 0:
        h, w = fg.shape
        rows = np.arange(h)[:, None]
        cols = np.arange(w)[None, :]
        d2_min = cfg.d_min**2
        far = np.ones_like(fg)
        for click in existing:
            far &= (rows - click.row) ** 2 + (cols - click.col) ** 2 >= d2_min
        admissible = fg & far
    if not admissible.any():
        return None
    candidates = np.flatnonzero(admissible)
    pick = int(rng.choice(candidates))
    r, c = np.unravel_index(pick, fg.shape)
    return Click(int(r), int(c), Polarity.NEGATIVE)
