"""Mask engine: mine part proposals from a frozen object-level segmenter.

One run drives the model through a seeded loop: a positive click inside
the object with the object mask as the mask prompt, then repeated
negative clicks sampled from the current prediction, chaining each
prediction back in as the next mask prompt. Every intermediate
binarized prediction is a candidate part; within-object complements are
added and everything is clipped, cleaned, and deduplicated.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .clicks import ClickSimConfig, encode_disk_map, sample_negative_in_mask
from .core import (
    BinaryMask,
    Click,
    ClickSet,
    Image,
    MaskRole,
    Polarity,
    ProbabilityMap,
    Proposal,
    ProposalSource,
    fill_holes,
    iou,
    largest_connected_component,
)
from .errors import EmptyMaskError
from .model import PromptBundle, Segmenter, binarize


@dataclass(frozen=True)
class LoopConfig:
    min_iters: int = 3
    max_iters: int = 6
    binarize_threshold: float = 0.5
    rng_seed: int = 0
    min_area: int = 16
    dedup_iou: float = 0.95

    def __post_init__(self) -> None:
        if not 1 <= self.min_iters <= self.max_iters:
            raise ValueError("need 1 <= min_iters <= max_iters")


@dataclass
class LoopResult:
    candidates: list[Proposal] = field(default_factory=list)
    clicks: ClickSet = field(default_factory=ClickSet)


def _predict(
    model: Segmenter, image: Image, clicks: ClickSet, prev_mask: np.ndarray, click_cfg: ClickSimConfig
) -> ProbabilityMap:
    disk = encode_disk_map(clicks, image.h, image.w, click_cfg)
    return model.predict(image, PromptBundle(disk_map=disk, prev_mask=prev_mask, granularity=None))


def loop_simulate(
    image: Image,
    gt: BinaryMask,
    model: Segmenter,
    cfg: LoopConfig,
    click_cfg: ClickSimConfig,
    object_id: str = "obj",
) -> LoopResult:
    """Run one seeded mining loop; returns raw candidates plus the click set."""
    if gt.is_empty():
        raise EmptyMaskError("cannot mine proposals for an empty object")
    rng = np.random.default_rng(cfg.rng_seed)
    n_iters = int(rng.integers(cfg.min_iters, cfg.max_iters + 1))

    fg = np.flatnonzero(gt.pixels)
    pick = int(rng.choice(fg))
    r, c = np.unravel_index(pick, gt.shape)
    clicks = ClickSet([Click(int(r), int(c), Polarity.POSITIVE)])

    current = _predict(model, image, clicks, gt.pixels.astype(np.float64), click_cfg)
    result = LoopResult(clicks=clicks)
    for t in range(1, n_iters + 1):
        neg = sample_negative_in_mask(current, clicks, cfg.binarize_threshold, click_cfg, rng)
        if neg is None:
            break
        clicks.append(neg)
        current = _predict(model, image, clicks, current.pixels, click_cfg)
        candidate = binarize(current, cfg.binarize_threshold)
        if candidate.is_empty():
            continue
        result.candidates.append(
            Proposal(
                mask=BinaryMask(candidate.pixels, role=MaskRole.PROPOSAL),
                parent_object_id=object_id,
                proposal_id=f"{object_id}-loop{t}",
                source=ProposalSource.LOOP_PREDICTION,
            )
        )
    return result


def add_complements(proposals: list[Proposal], gt: BinaryMask) -> list[Proposal]:
    """Append the within-object complement of every proposal; originals kept.

    Complements that come out empty (proposal covers the object) are not
    representable and are skipped; post-processing would drop them anyway.
    """
    out = list(proposals)
    for p in proposals:
        comp = np.logical_and(gt.pixels, ~p.mask.pixels)
        if not comp.any():
            continue
        out.append(
            Proposal(
                mask=BinaryMask(comp, role=MaskRole.PROPOSAL),
                parent_object_id=p.parent_object_id,
                proposal_id=f"{p.proposal_id}-comp",
                source=ProposalSource.COMPLEMENT,
            )
        )
    return out


def post_process(proposals: list[Proposal], gt: BinaryMask, cfg: LoopConfig | None = None) -> list[Proposal]:
    """Clip to the object, fill holes, keep the largest component, filter.

    Drops proposals that end up empty, equal the full object, or fall
    below ``min_area``; near-duplicates (IoU >= dedup_iou against an
    already-kept proposal) keep only the first occurrence.
    """
    cfg = cfg or LoopConfig()
    kept: list[Proposal] = []
    for p in proposals:
        clipped = np.logical_and(p.mask.pixels, gt.pixels)
        if not clipped.any():
            continue
        filled = fill_holes(BinaryMask(clipped))
        # filling can bleed into background notches the proposal encircles
        # inside a concave object; containment in gt has priority
        filled = BinaryMask(np.logical_and(filled.pixels, gt.pixels))
        cleaned = largest_connected_component(filled)
        if cleaned.is_empty():
            continue
        if cleaned.area < cfg.min_area:
            continue
        if np.array_equal(cleaned.pixels, gt.pixels):
            continue
        if any(iou(cleaned, k.mask) >= cfg.dedup_iou for k in kept):
            continue
        kept.append(
            Proposal(
                mask=BinaryMask(cleaned.pixels, role=MaskRole.PROPOSAL),
                parent_object_id=p.parent_object_id,
                proposal_id=p.proposal_id,
                source=p.source,
            )
        )
    return kept


@dataclass
class MineResult:
    proposals: list[Proposal]
    clicks: ClickSet


def mine_object(
    image: Image,
    gt: BinaryMask,
    model: Segmenter,
    cfg: LoopConfig,
    click_cfg: ClickSimConfig,
    object_id: str = "obj",
) -> MineResult:
    """Full mining pipeline for one object: loop, complements, post-process."""
    loop = loop_simulate(image, gt, model, cfg, click_cfg, object_id=object_id)
    with_comps = add_complements(loop.candidates, gt)
    final = post_process(with_comps, gt, cfg)
    return MineResult(proposals=final, clicks=loop.clicks)
