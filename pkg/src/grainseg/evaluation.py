"""Protocol-faithful evaluation: simulated clicks, NoC@k, IoU@1, sweeps.

The simulated user places the first click at the target's interior,
then corrects the largest error region; predictions chain back in as
mask prompts. NoC@k is the first click index reaching IoU >= k, capped
at max_clicks. Sweeps rerun the protocol at each granularity and emit
IoU-granularity curve rows.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from PIL import Image as PILImage

from .clicks import ClickSimConfig, encode_disk_map, first_click, next_click_from_error
from .core import BinaryMask, ClickSet, Image, MaskRole, ProbabilityMap, load_mask
from .errors import ContractViolation, EmptyMaskError
from .model import PromptBundle, Segmenter, binarize

# predict_fn(image, clicks, prev_mask, granularity) -> probability array
PredictFn = Callable[[Image, ClickSet, np.ndarray, float | None], np.ndarray]

CURVE_COLUMNS = ("instance_id", "granularity", "k", "iou", "clicks_used")


@dataclass(frozen=True)
class EvalConfig:
    iou_thresholds: tuple[float, ...] = (0.85, 0.90)
    max_clicks: int = 20
    binarize_threshold: float = 0.5
    granularity_sweep: tuple[float, ...] = tuple(round(0.1 * i, 1) for i in range(11))
    curve_click_counts: tuple[int, ...] = (1, 3, 5)

    def __post_init__(self) -> None:
        if self.max_clicks < 1:
            raise ContractViolation("max_clicks must be >= 1")
        if any(not (0.0 < t < 1.0) for t in self.iou_thresholds):
            raise ContractViolation("iou thresholds must lie in (0,1)")


@dataclass
class InstanceResult:
    instance_id: str
    granularity_used: float | None
    ious: list[float]
    noc: dict[float, int]

    @property
    def clicks_used(self) -> int:
        return len(self.ious)

    def iou_at_click(self, k: int) -> float:
        """IoU after k clicks; runs that stopped early hold their last value."""
        return self.ious[min(k, len(self.ious)) - 1]

    @property
    def iou_at_1(self) -> float:
        return self.ious[0]


def make_predict_fn(model: Segmenter, click_cfg: ClickSimConfig | None = None) -> PredictFn:
    """Adapt a segmenter to the harness's prediction signature."""
    click_cfg = click_cfg or ClickSimConfig()

    def predict(image: Image, clicks: ClickSet, prev_mask: np.ndarray, granularity: float | None) -> np.ndarray:
        disk = encode_disk_map(clicks, image.h, image.w, click_cfg)
        bundle = PromptBundle(disk_map=disk, prev_mask=prev_mask, granularity=granularity)
        return model.predict(image, bundle).pixels

    return predict


def evaluate_instance(
    image: Image,
    target: BinaryMask,
    predict_fn: PredictFn,
    granularity: float | None,
    cfg: EvalConfig,
    instance_id: str = "instance",
) -> InstanceResult:
    """Run the simulated-click protocol on one target."""
    if target.is_empty():
        raise EmptyMaskError("evaluation target is empty")
    stop_at = max(cfg.iou_thresholds)
    clicks = ClickSet([first_click(target)])
    prev = np.zeros(target.shape, dtype=np.float64)
    ious: list[float] = []
    for _ in range(cfg.max_clicks):
        prob = np.clip(predict_fn(image, clicks, prev, granularity), 0.0, 1.0)
        pred = binarize(ProbabilityMap(prob), cfg.binarize_threshold)
        inter = np.logical_and(pred.pixels, target.pixels).sum()
        union = np.logical_or(pred.pixels, target.pixels).sum()
        ious.append(float(inter) / float(union) if union else 1.0)
        if ious[-1] >= stop_at or len(ious) == cfg.max_clicks:
            break
        clicks.append(next_click_from_error(pred, target))
        prev = prob
    noc = {}
    for threshold in cfg.iou_thresholds:
        reached = [i + 1 for i, v in enumerate(ious) if v >= threshold]
        noc[threshold] = reached[0] if reached else cfg.max_clicks
    return InstanceResult(instance_id=instance_id, granularity_used=granularity, ious=ious, noc=noc)


@dataclass
class SweepResult:
    # per instance: {granularity -> InstanceResult}
    per_instance: dict[str, dict[float, InstanceResult]] = field(default_factory=dict)
    sweep: tuple[float, ...] = ()

    def curve_points(self, ks: Sequence[int]) -> list[dict]:
        rows = []
        for instance_id, by_g in self.per_instance.items():
            for g, result in by_g.items():
                for k in ks:
                    rows.append(
                        {
                            "instance_id": instance_id,
                            "granularity": g,
                            "k": k,
                            "iou": result.iou_at_click(k),
                            "clicks_used": result.clicks_used,
                        }
                    )
        return rows

    def mean_iou_by_granularity(self, k: int) -> dict[float, float]:
        out = {}
        for g in self.sweep:
            values = [by_g[g].iou_at_click(k) for by_g in self.per_instance.values()]
            out[g] = float(np.mean(values))
        return out

    def optimal_noc(self, threshold: float) -> float:
        """Mean over instances of the best NoC across the sweep (ties -> larger g)."""
        best = []
        for by_g in self.per_instance.values():
            candidates = [(by_g[g].noc[threshold], -g) for g in self.sweep]
            best.append(min(candidates)[0])
        return float(np.mean(best))

    def optimal_granularity(self, instance_id: str) -> float:
        """Granularity maximizing IoU@1 for one instance; ties go to larger g."""
        by_g = self.per_instance[instance_id]
        return max(self.sweep, key=lambda g: (by_g[g].iou_at_1, g))

    def best_iou_at_1(self, instance_id: str) -> float:
        by_g = self.per_instance[instance_id]
        return max(by_g[g].iou_at_1 for g in self.sweep)


def evaluate_sweep(
    dataset: list[tuple[str, Image, BinaryMask]],
    predict_fn: PredictFn,
    cfg: EvalConfig,
    curve_path: Path | str | None = None,
) -> SweepResult:
    """Rerun the protocol at every sweep granularity for every instance."""
    if not dataset:
        raise ContractViolation("sweep needs a nonempty dataset")
    result = SweepResult(sweep=cfg.granularity_sweep)
    for instance_id, image, target in dataset:
        by_g: dict[float, InstanceResult] = {}
        for g in cfg.granularity_sweep:
            by_g[g] = evaluate_instance(image, target, predict_fn, g, cfg, instance_id=instance_id)
        result.per_instance[instance_id] = by_g
    if curve_path is not None:
        write_curve_file(result, cfg, curve_path)
    return result


def write_curve_file(result: SweepResult, cfg: EvalConfig, path: Path | str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=CURVE_COLUMNS)
        writer.writeheader()
        for row in result.curve_points(cfg.curve_click_counts):
            writer.writerow(row)


def optimal_granularity_histogram(result: SweepResult) -> dict[float, int]:
    """Frequency of per-instance optimal (argmax IoU@1) granularities."""
    histogram: dict[float, int] = {g: 0 for g in result.sweep}
    for instance_id in result.per_instance:
        histogram[result.optimal_granularity(instance_id)] += 1
    return histogram


@dataclass
class FixedEvalSummary:
    mean_noc: dict[float, float]
    mean_iou_at_1: float
    per_instance: list[InstanceResult]


def evaluate_fixed(
    dataset: list[tuple[str, Image, BinaryMask]],
    predict_fn: PredictFn,
    granularity: float | None,
    cfg: EvalConfig,
) -> FixedEvalSummary:
    """Evaluate every instance at one fixed granularity (or with none)."""
    if not dataset:
        raise ContractViolation("evaluation needs a nonempty dataset")
    results = [
        evaluate_instance(image, target, predict_fn, granularity, cfg, instance_id=instance_id)
        for instance_id, image, target in dataset
    ]
    mean_noc = {
        t: float(np.mean([r.noc[t] for r in results])) for t in cfg.iou_thresholds
    }
    return FixedEvalSummary(
        mean_noc=mean_noc,
        mean_iou_at_1=float(np.mean([r.iou_at_1 for r in results])),
        per_instance=results,
    )


def write_summary(summary: dict, path: Path | str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)


def load_folder(root: Path | str, level: str = "object") -> list[tuple[str, Image, BinaryMask]]:
    """Generic image+mask folder loader.

    Expects images/<id>.png plus objects/<id>.png for object level or
    parts/<id>__<k>.png for part level (the part's parent image is <id>).
    """
    root = Path(root)
    images_dir = root / "images"
    if not images_dir.is_dir():
        raise FileNotFoundError(f"no images/ directory under {root}")
    dataset: list[tuple[str, Image, BinaryMask]] = []
    images: dict[str, Image] = {}
    for img_path in sorted(images_dir.glob("*.png")):
        arr = np.asarray(PILImage.open(img_path).convert("RGB"), dtype=np.float64) / 255.0
        images[img_path.stem] = Image(arr, id=img_path.stem)
    if level == "object":
        # single-object images use objects/<id>.png; multi-object training
        # canvases use objects/<id>__<k>.png, one file per target
        for mask_path in sorted((root / "objects").glob("*.png")):
            image_id = mask_path.stem.split("__")[0]
            if image_id in images:
                dataset.append(
                    (mask_path.stem, images[image_id], load_mask(mask_path, role=MaskRole.GROUND_TRUTH))
                )
    elif level == "part":
        for mask_path in sorted((root / "parts").glob("*.png")):
            image_id = mask_path.stem.split("__")[0]
            if image_id in images:
                dataset.append(
                    (mask_path.stem, images[image_id], load_mask(mask_path, role=MaskRole.GROUND_TRUTH))
                )
    else:
        raise ValueError(f"unknown level {level!r}")
    return dataset
