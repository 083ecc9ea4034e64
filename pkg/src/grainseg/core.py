"""Core domain types and raster primitives.

Everything here is pure and operates on small dense numpy arrays:
images in [0,1], boolean masks, per-pixel probability maps, and sparse
clicks. Connectivity is 4-connected throughout and ties are broken
lexicographically by (row, col) so every operation is reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
from PIL import Image as PILImage
from scipy import ndimage

from .errors import ContractViolation, EmptyMaskError

MIN_IMAGE_SIDE = 16

# 4-connectivity structuring element, used for labeling and hole filling.
CROSS = ndimage.generate_binary_structure(2, 1)


class MaskRole(str, Enum):
    GROUND_TRUTH = "ground_truth"
    PROPOSAL = "proposal"
    PREDICTION = "prediction"


class Polarity(str, Enum):
    POSITIVE = "positive"
    NEGATIVE = "negative"


class ProposalSource(str, Enum):
    LOOP_PREDICTION = "loop_prediction"
    COMPLEMENT = "complement"
    GROUND_TRUTH_PART = "ground_truth_part"


@dataclass(frozen=True)
class Image:
    """A dense 3-channel image with values normalized to [0,1]."""

    pixels: np.ndarray
    id: str

    def __post_init__(self) -> None:
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ContractViolation(f"image must be h x w x 3, got {px.shape}")
        h, w = px.shape[:2]
        if h < MIN_IMAGE_SIDE or w < MIN_IMAGE_SIDE:
            raise ContractViolation(f"image sides must be >= {MIN_IMAGE_SIDE}, got {h}x{w}")
        if px.min() < 0.0 or px.max() > 1.0:
            raise ContractViolation("image values must lie in [0,1]")
        object.__setattr__(self, "pixels", px)

    @property
    def h(self) -> int:
        return self.pixels.shape[0]

    @property
    def w(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True)
class BinaryMask:
    """A single-channel boolean raster tied to an image's geometry."""

    pixels: np.ndarray
    role: MaskRole = MaskRole.PREDICTION

    def __post_init__(self) -> None:
        px = np.asarray(self.pixels)
        if px.ndim != 2:
            raise ContractViolation(f"mask must be 2-D, got shape {px.shape}")
        px = px.astype(bool)
        if self.role in (MaskRole.GROUND_TRUTH, MaskRole.PROPOSAL) and not px.any():
            raise EmptyMaskError(f"{self.role.value} mask must have foreground")
        object.__setattr__(self, "pixels", px)
        object.__setattr__(self, "role", MaskRole(self.role))

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape

    @property
    def area(self) -> int:
        return int(self.pixels.sum())

    def is_empty(self) -> bool:
        return not self.pixels.any()


@dataclass(frozen=True)
class ProbabilityMap:
    """Per-pixel foreground probability in [0,1]."""

    pixels: np.ndarray

    def __post_init__(self) -> None:
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 2:
            raise ContractViolation(f"probability map must be 2-D, got shape {px.shape}")
        if px.min() < 0.0 or px.max() > 1.0:
            raise ContractViolation("probability values must lie in [0,1]")
        object.__setattr__(self, "pixels", px)

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape


@dataclass(frozen=True)
class Click:
    row: int
    col: int
    polarity: Polarity

    def __post_init__(self) -> None:
        object.__setattr__(self, "row", int(self.row))
        object.__setattr__(self, "col", int(self.col))
        object.__setattr__(self, "polarity", Polarity(self.polarity))

    @property
    def is_positive(self) -> bool:
        return self.polarity is Polarity.POSITIVE


@dataclass
class ClickSet:
    """Ordered collection of clicks; order is the interaction order."""

    clicks: list[Click] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.clicks)

    def __iter__(self):
        return iter(self.clicks)

    def append(self, click: Click) -> None:
        self.clicks.append(click)

    def copy(self) -> "ClickSet":
        return ClickSet(list(self.clicks))

    def positives(self) -> list[Click]:
        return [c for c in self.clicks if c.is_positive]

    def negatives(self) -> list[Click]:
        return [c for c in self.clicks if not c.is_positive]


@dataclass(frozen=True)
class Proposal:
    """A mined part mask, always a single component inside its parent object."""

    mask: BinaryMask
    parent_object_id: str
    proposal_id: str
    source: ProposalSource

    def __post_init__(self) -> None:
        object.__setattr__(self, "source", ProposalSource(self.source))


@dataclass(frozen=True)
class GranularityRecord:
    """Scale and semantic granularity of one proposal plus their blend."""

    scale_granularity: float
    semantic_granularity: float
    combined: float
    lam: float

    def __post_init__(self) -> None:
        expected = (1.0 - self.lam) * self.scale_granularity + self.lam * self.semantic_granularity
        if abs(self.combined - expected) > 1e-12:
            raise ContractViolation(
                f"combined={self.combined} is not the lam={self.lam} blend of "
                f"scale={self.scale_granularity} and semantic={self.semantic_granularity}"
            )


def iou(a: BinaryMask, b: BinaryMask) -> float:
    """Intersection over union of two same-shape masks. Both empty -> 1.0."""
    if a.shape != b.shape:
        raise ContractViolation(f"mask shapes differ: {a.shape} vs {b.shape}")
    inter = np.logical_and(a.pixels, b.pixels).sum()
    union = np.logical_or(a.pixels, b.pixels).sum()
    if union == 0:
        return 1.0
    return float(inter) / float(union)


def distance_to_background(m: BinaryMask) -> np.ndarray:
    """Exact Euclidean distance to the nearest background pixel.

    The raster is padded with a one-pixel background ring first, so the
    image border counts as background (a full-canvas mask still has a
    well-defined interior).
    """
    padded = np.pad(m.pixels, 1, mode="constant", constant_values=False)
    dist = ndimage.distance_transform_edt(padded)
    return dist[1:-1, 1:-1]


def interior_most_point(m: BinaryMask) -> tuple[int, int]:
    """Foreground pixel farthest from background; ties go to smallest (row, col)."""
    if m.is_empty():
        raise EmptyMaskError("cannot locate the interior of an empty mask")
    dist = distance_to_background(m)
    # argmax on the flattened array picks the first maximum in row-major
    # order, which is exactly the lexicographic tie-break.
    r, c = np.unravel_index(int(np.argmax(dist)), dist.shape)
    return int(r), int(c)


def largest_connected_component(m: BinaryMask) -> BinaryMask:
    """Keep only the largest 4-connected component (empty in -> empty out).

    Equal-size components are resolved in favor of the one whose first
    pixel in row-major order comes first.
    """
    if m.is_empty():
        return BinaryMask(np.zeros(m.shape, dtype=bool))
    labels, count = ndimage.label(m.pixels, structure=CROSS)
    if count == 1:
        return BinaryMask(m.pixels.copy())
    flat = labels.ravel()
    sizes = np.bincount(flat)
    sizes[0] = 0
    best_size = sizes.max()
    candidates = np.flatnonzero(sizes == best_size)
    if len(candidates) == 1:
        keep = candidates[0]
    else:
        uniq, first_idx = np.unique(flat, return_index=True)
        first_of = dict(zip(uniq.tolist(), first_idx.tolist()))
        keep = min(candidates, key=lambda lab: first_of[int(lab)])
    return BinaryMask(labels == keep)


def fill_holes(m: BinaryMask) -> BinaryMask:
    """Turn background regions not 4-connected to the border into foreground."""
    filled = ndimage.binary_fill_holes(m.pixels, structure=CROSS)
    return BinaryMask(filled)


def save_mask(m: BinaryMask, path: Path | str) -> None:
    """Write a mask as an 8-bit single-channel image with values {0, 255}."""
    arr = np.where(m.pixels, 255, 0).astype(np.uint8)
    PILImage.fromarray(arr, mode="L").save(path)


def load_mask(path: Path | str, role: MaskRole = MaskRole.PREDICTION) -> BinaryMask:
    """Read a mask written by :func:`save_mask`."""
    arr = np.asarray(PILImage.open(path).convert("L"))
    return BinaryMask(arr >= 128, role=role)
