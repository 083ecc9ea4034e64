"""Training loops: normalized focal loss, iterative click simulation,
object-level pretraining, and granularity-controllable fine-tuning.

The iterative strategy samples a click budget k per example, derives
intermediate clicks from prediction errors without gradient tracking,
and backpropagates only through the final forward pass.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from scipy.ndimage import distance_transform_edt

from .clicks import ClickSimConfig, encode_disk_map, first_click, next_click_from_error
from .core import BinaryMask, Click, ClickSet, Image, Polarity
from .errors import ContractViolation, EmptyStoreError
from .model import PromptBundle, Segmenter, binarize, bundle_to_tensors, granularity_bin
from .store import GranularitySampler, ProposalStore, StoreRecord


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 55
    lr: float = 5e-5
    lr_decay_epoch: int = 50
    lr_decay_factor: float = 0.1
    max_iter_clicks: int = 3
    focal_gamma: float = 2.0
    batch_size: int = 8
    seed: int = 0
    binarize_threshold: float = 0.5

    def __post_init__(self) -> None:
        if self.lr_decay_epoch > self.epochs:
            raise ContractViolation("lr_decay_epoch must be <= epochs")
        if self.max_iter_clicks < 1:
            raise ContractViolation("max_iter_clicks must be >= 1")


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    """Step schedule: base lr, decayed once at lr_decay_epoch (0-indexed)."""
    if epoch >= cfg.lr_decay_epoch:
        return cfg.lr * cfg.lr_decay_factor
    return cfg.lr


def nfl_loss(pred: torch.Tensor, target: torch.Tensor, gamma: float = 2.0, eps: float = 1e-8) -> torch.Tensor:
    """Normalized focal loss on probabilities.

    With p_t the probability assigned to the true class per pixel:
    loss = -(sum (1-p_t)^gamma * log p_t) / max(sum (1-p_t)^gamma, eps).
    gamma=0 reduces to mean binary cross-entropy.
    """
    if pred.shape != target.shape:
        raise ContractViolation(f"pred shape {tuple(pred.shape)} != target {tuple(target.shape)}")
    pred = pred.clamp(1e-6, 1.0 - 1e-6)
    target = target.to(pred.dtype)
    p_t = pred * target + (1.0 - pred) * (1.0 - target)
    weight = (1.0 - p_t) ** gamma
    numer = -(weight * torch.log(p_t)).sum()
    denom = torch.clamp(weight.sum(), min=eps)
    return numer / denom


def _forward_probs(
    model: Segmenter,
    image: Image,
    clicks: ClickSet,
    prev_mask: np.ndarray,
    granularity: float | None,
    click_cfg: ClickSimConfig,
) -> torch.Tensor:
    disk = encode_disk_map(clicks, image.h, image.w, click_cfg)
    bundle = PromptBundle(disk_map=disk, prev_mask=prev_mask, granularity=granularity)
    dtype = next(model.parameters()).dtype
    img_t, prompt_t, bins_t = bundle_to_tensors(image, bundle, model.config, dtype)
    return model(img_t, prompt_t, bins_t)[0]


def iterative_loss(
    image: Image,
    target: BinaryMask,
    granularity: float | None,
    model: Segmenter,
    cfg: TrainConfig,
    click_cfg: ClickSimConfig,
    rng: np.random.Generator,
    initial_clicks: ClickSet | None = None,
    initial_prev_mask: np.ndarray | None = None,
) -> torch.Tensor:
    """One iterative-strategy example: k clicks, gradient only on the last pass.

    The first click is the target's interior point with an empty mask
    prompt (callers may override the starting clicks and mask prompt);
    later clicks come from the largest error region of the intermediate
    (no-grad) prediction, which also becomes the next mask prompt. If an
    intermediate prediction already matches the target the click
    derivation is skipped.
    """
    k = int(rng.integers(1, cfg.max_iter_clicks + 1))
    clicks = initial_clicks.copy() if initial_clicks is not None else ClickSet([first_click(target)])
    prev = initial_prev_mask if initial_prev_mask is not None else np.zeros(target.shape, dtype=np.float64)
    for _ in range(k - 1):
        with torch.no_grad():
            probs = _forward_probs(model, image, clicks, prev, granularity, click_cfg)
        prob_np = probs.detach().cpu().numpy().astype(np.float64)
        pred_mask = binarize_np(prob_np, cfg.binarize_threshold)
        if np.array_equal(pred_mask, target.pixels):
            break
        clicks.append(next_click_from_error(BinaryMask(pred_mask), target))
        prev = np.clip(prob_np, 0.0, 1.0)
    probs = _forward_probs(model, image, clicks, prev, granularity, click_cfg)
    target_t = torch.from_numpy(target.pixels.astype(np.float32)).to(probs.dtype)
    return nfl_loss(probs, target_t, gamma=cfg.focal_gamma)


def binarize_np(prob: np.ndarray, threshold: float) -> np.ndarray:
    return prob >= threshold


def iterative_training_step(
    image: Image,
    proposal_mask: BinaryMask,
    granularity: float,
    model: Segmenter,
    cfg: TrainConfig,
    click_cfg: ClickSimConfig,
    rng: np.random.Generator,
) -> torch.Tensor:
    """GCL example loss: proposal as target, its granularity as the prompt."""
    return iterative_loss(image, proposal_mask, granularity, model, cfg, click_cfg, rng)


@dataclass
class MetricsLog:
    steps: list[dict]
    epoch_means: list[float]

    def write(self, path: Path | str) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            for row in self.steps:
                fh.write(json.dumps(row) + "\n")


def _run_epochs(
    model: Segmenter,
    cfg: TrainConfig,
    steps_per_epoch: int,
    draw_example,
    params: list[torch.nn.Parameter],
) -> MetricsLog:
    """Shared epoch/step/optimizer loop; draw_example(rng) -> loss tensor."""
    optimizer = torch.optim.Adam(params, lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    log = MetricsLog(steps=[], epoch_means=[])
    for epoch in range(cfg.epochs):
        lr = lr_at_epoch(cfg, epoch)
        for group in optimizer.param_groups:
            group["lr"] = lr
        epoch_losses: list[float] = []
        for step in range(steps_per_epoch):
            optimizer.zero_grad()
            batch_loss = torch.zeros((), dtype=next(model.parameters()).dtype)
            for _ in range(cfg.batch_size):
                batch_loss = batch_loss + draw_example(rng)
            batch_loss = batch_loss / cfg.batch_size
            batch_loss.backward()
            optimizer.step()
            value = float(batch_loss.detach())
            epoch_losses.append(value)
            log.steps.append({"epoch": epoch, "step": step, "loss": value, "lr": lr})
        log.epoch_means.append(float(np.mean(epoch_losses)))
    return log


def train(
    store: ProposalStore,
    images: dict[str, Image],
    model: Segmenter,
    cfg: TrainConfig,
    click_cfg: ClickSimConfig | None = None,
    sampling: str = "inverse",
    lam_override: float | None = None,
) -> MetricsLog:
    """Granularity-controllable fine-tuning over sampled store records.

    Only parameters left trainable by the adapter injection are updated.
    ``lam_override`` re-blends each record's stored scale and semantic
    granularities with a different weight at training time.
    """
    records, _ = store.load()
    if not records:
        raise EmptyStoreError("proposal store is empty")
    known = [r for r in records if r.image_id in images]
    if not known:
        raise EmptyStoreError("no store record references a known image")
    click_cfg = click_cfg or ClickSimConfig()
    sampler = GranularitySampler(known, mode=sampling, bins=model.config.granularity_bins)
    params = [p for p in model.parameters() if p.requires_grad]
    if not params:
        raise ContractViolation("model has no trainable parameters; inject adapters first")

    mask_cache: dict[str, BinaryMask] = {}

    def draw_example(rng: np.random.Generator) -> torch.Tensor:
        record = sampler.sample(rng)
        if record.proposal_id not in mask_cache:
            mask_cache[record.proposal_id] = store.load_mask(record)
        g = record.granularity.combined
        if lam_override is not None:
            g = (1.0 - lam_override) * record.granularity.scale_granularity + (
                lam_override * record.granularity.semantic_granularity
            )
        return iterative_training_step(
            images[record.image_id], mask_cache[record.proposal_id], g, model, cfg, click_cfg, rng
        )

    was_training = model.training
    model.train()
    steps_per_epoch = max(len(known) // cfg.batch_size, 1)
    try:
        return _run_epochs(model, cfg, steps_per_epoch, draw_example, params)
    finally:
        model.train(was_training)


def _phantom_blob(target: BinaryMask, rng: np.random.Generator) -> np.ndarray:
    """A random disk or bar overlapping the target's neighborhood.

    Stands in for a neighboring object swallowed by a stale mask prompt;
    the blob may straddle the target boundary so the corrective answer
    is bounded by the target's true silhouette.
    """
    h, w = target.shape
    boundary_dist = distance_transform_edt(~target.pixels)
    band = np.flatnonzero((boundary_dist >= 0) & (boundary_dist <= 12) & ~target.pixels)
    if band.size == 0:
        band = np.flatnonzero(~target.pixels)
    if band.size == 0:
        return np.zeros((h, w), dtype=bool)
    cr, cc = np.unravel_index(int(rng.choice(band)), (h, w))
    rows = np.arange(h)[:, None]
    cols = np.arange(w)[None, :]
    if rng.uniform() < 0.5:
        radius = rng.uniform(4, 12)
        return (rows - cr) ** 2 + (cols - cc) ** 2 <= radius**2
    ang = rng.uniform(0, np.pi)
    length = rng.uniform(10, 26)
    er = cr + np.sin(ang) * length
    ec = cc + np.cos(ang) * length
    half_width = rng.uniform(2.5, 5.0)
    v = np.array([er - cr, ec - cc])
    t = np.clip(((rows - cr) * v[0] + (cols - cc) * v[1]) / max(float(v @ v), 1e-9), 0, 1)
    return (rows - (cr + t * v[0])) ** 2 + (cols - (cc + t * v[1])) ** 2 <= half_width**2


def augmented_start(
    target: BinaryMask, click_cfg: ClickSimConfig, rng: np.random.Generator
) -> tuple[ClickSet, np.ndarray | None]:
    """Click and mask-prompt augmentation for pretraining examples.

    Half the examples start plain (empty mask prompt, interior-point or
    uniform positive click). 35% start from an oversized prompt - the
    dilated target plus whole phantom blobs - with negative clicks in
    the excess, teaching the model to strip the coherent region around a
    negative click down to a semantic boundary (the state the mining
    loop drives it into). 15% start from an eroded prompt plus a second
    positive click in the missing ring.
    """
    if rng.uniform() < 0.7:
        clicks = ClickSet([first_click(target)])
    else:
        fg = np.flatnonzero(target.pixels)
        r, c = np.unravel_index(int(rng.choice(fg)), target.shape)
        clicks = ClickSet([Click(int(r), int(c), Polarity.POSITIVE)])

    roll = rng.uniform()
    prev: np.ndarray | None = None
    if roll < 0.35:
        grow = int(rng.integers(1, 7))
        dist_outside = distance_transform_edt(~target.pixels)
        oversized = target.pixels | (dist_outside <= grow)
        for _ in range(int(rng.integers(1, 3))):
            oversized |= _phantom_blob(target, rng)
        excess = np.flatnonzero(oversized & ~target.pixels)
        for _ in range(int(rng.integers(1, 3))):
            if excess.size == 0:
                break
            for _attempt in range(8):
                r, c = np.unravel_index(int(rng.choice(excess)), target.shape)
                if all(np.hypot(r - k.row, c - k.col) >= click_cfg.d_min for k in clicks):
                    clicks.append(Click(int(r), int(c), Polarity.NEGATIVE))
                    break
        prev = oversized.astype(np.float64)
    elif roll < 0.50:
        shrink = int(rng.integers(1, 5))
        dist_inside = distance_transform_edt(target.pixels)
        undersized = target.pixels & (dist_inside > shrink)
        missing = np.flatnonzero(target.pixels & ~undersized)
        for _attempt in range(8):
            if missing.size == 0:
                break
            r, c = np.unravel_index(int(rng.choice(missing)), target.shape)
            if all(np.hypot(r - k.row, c - k.col) >= click_cfg.d_min for k in clicks):
                clicks.append(Click(int(r), int(c), Polarity.POSITIVE))
                break
        prev = undersized.astype(np.float64)
    return clicks, prev


def pretrain_object_level(
    dataset: list[tuple[Image, BinaryMask]],
    model: Segmenter,
    cfg: TrainConfig,
    click_cfg: ClickSimConfig | None = None,
    augment_clicks: bool = True,
) -> MetricsLog:
    """Object-level pretraining with the granularity prompt disabled.

    Click augmentation keeps prompts informative on multi-object scenes;
    without it a single-object dataset lets the model ignore clicks
    entirely, which would leave nothing for proposal mining to exploit.
    """
    if not dataset:
        raise EmptyStoreError("pretraining dataset is empty")
    click_cfg = click_cfg or ClickSimConfig()
    params = [p for p in model.parameters() if p.requires_grad]

    def draw_example(rng: np.random.Generator) -> torch.Tensor:
        image, target = dataset[int(rng.integers(len(dataset)))]
        initial_clicks = initial_prev = None
        if augment_clicks:
            initial_clicks, initial_prev = augmented_start(target, click_cfg, rng)
        return iterative_loss(
            image, target, None, model, cfg, click_cfg, rng,
            initial_clicks=initial_clicks, initial_prev_mask=initial_prev,
        )

    was_training = model.training
    model.train()
    steps_per_epoch = max(len(dataset) // cfg.batch_size, 1)
    try:
        return _run_epochs(model, cfg, steps_per_epoch, draw_example, params)
    finally:
        model.train(was_training)
