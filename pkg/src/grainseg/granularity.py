"""Granularity quantification for mined proposals.

Scale granularity is the proposal's area fraction of its parent object.
Semantic granularity compares probability spreads: the pre-trained
segmenter is probed with a single positive click, and the peak
difference of its probability map restricted to the proposal is divided
by the peak difference restricted to the whole object. The two are
blended linearly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .clicks import ClickSimConfig, encode_disk_map
from .core import (
    BinaryMask,
    Click,
    ClickSet,
    GranularityRecord,
    Image,
    Polarity,
    ProbabilityMap,
    Proposal,
    interior_most_point,
)
from .errors import ContractViolation, EmptyMaskError
from .model import PromptBundle, Segmenter


@dataclass(frozen=True)
class EstimatorConfig:
    lam: float = 0.5
    epsilon: float = 1e-8
    # where the probing click lands: the proposal's interior (default) or
    # the parent object's interior
    click_target: str = "proposal"

    def __post_init__(self) -> None:
        if not 0.0 <= self.lam <= 1.0:
            raise ContractViolation("lam must lie in [0,1]")
        if self.click_target not in ("proposal", "object"):
            raise ContractViolation("click_target must be 'proposal' or 'object'")


def _require_contained(p: Proposal, gt: BinaryMask) -> None:
    if gt.is_empty():
        raise EmptyMaskError("ground truth mask is empty")
    if p.mask.is_empty():
        raise EmptyMaskError("proposal mask is empty")
    if np.logical_and(p.mask.pixels, ~gt.pixels).any():
        raise ContractViolation("proposal mask must be contained in the object mask")


def scale_granularity(p: Proposal, gt: BinaryMask) -> float:
    """Area(proposal) / Area(object), by pixel count."""
    _require_contained(p, gt)
    return p.mask.area / gt.area


def semantic_probability_map(
    image: Image,
    p: Proposal,
    gt: BinaryMask,
    model: Segmenter,
    click_cfg: ClickSimConfig | None = None,
    cfg: EstimatorConfig | None = None,
) -> ProbabilityMap:
    """Probe the segmenter with one positive click and the object as mask prompt."""
    if p.mask.is_empty():
        raise EmptyMaskError("proposal mask is empty")
    click_cfg = click_cfg or ClickSimConfig()
    cfg = cfg or EstimatorConfig()
    target = p.mask if cfg.click_target == "proposal" else gt
    r, c = interior_most_point(target)
    clicks = ClickSet([Click(r, c, Polarity.POSITIVE)])
    disk = encode_disk_map(clicks, image.h, image.w, click_cfg)
    bundle = PromptBundle(
        disk_map=disk,
        prev_mask=gt.pixels.astype(np.float64),
        granularity=None,
    )
    return model.predict(image, bundle)


def peak_difference(m: ProbabilityMap, region: BinaryMask) -> float:
    """max - min of the probability map over the region's foreground."""
    if m.shape != region.shape:
        raise ContractViolation(f"shapes differ: {m.shape} vs {region.shape}")
    if region.is_empty():
        raise EmptyMaskError("peak difference needs a nonempty region")
    values = m.pixels[region.pixels]
    return float(values.max() - values.min())


def semantic_granularity(
    m: ProbabilityMap, p: Proposal, gt: BinaryMask, cfg: EstimatorConfig | None = None
) -> float:
    """Peak-difference ratio proposal/object; a flat object map yields 1.0."""
    cfg = cfg or EstimatorConfig()
    _require_contained(p, gt)
    denom = peak_difference(m, gt)
    if denom < cfg.epsilon:
        return 1.0
    return peak_difference(m, p.mask) / denom


def estimate(
    image: Image,
    p: Proposal,
    gt: BinaryMask,
    model: Segmenter,
    cfg: EstimatorConfig | None = None,
    click_cfg: ClickSimConfig | None = None,
) -> GranularityRecord:
    """Full granularity record: scale, semantic, and their linear blend."""
    cfg = cfg or EstimatorConfig()
    scale = scale_granularity(p, gt)
    prob = semantic_probability_map(image, p, gt, model, click_cfg, cfg)
    semantic = semantic_granularity(prob, p, gt, cfg)
    combined = (1.0 - cfg.lam) * scale + cfg.lam * semantic
    return GranularityRecord(
        scale_granularity=scale,
        semantic_granularity=semantic,
        combined=combined,
        lam=cfg.lam,
    )
