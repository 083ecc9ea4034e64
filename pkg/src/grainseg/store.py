"""Append-only store of mask-granularity pairs and the training sampler.

Layout on disk: ``index.jsonl`` with one JSON record per line plus a
``masks/`` directory of 8-bit {0,255} PNG files. The sampler weights
each record by the inverse of its granularity-bin population so every
non-empty bin is drawn with equal total probability; a uniform mode is
kept for ablation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .core import (
    BinaryMask,
    GranularityRecord,
    Image,
    MaskRole,
    Proposal,
    ProposalSource,
    load_mask,
    save_mask,
)
from .errors import EmptyStoreError
from .model import granularity_bin

INDEX_NAME = "index.jsonl"
MASKS_DIR = "masks"
IMAGES_DIR = "images"

# Index field names are a public contract; renaming breaks stored data.
_FIELDS = ("image_id", "object_id", "proposal_id", "granularity", "mask_path", "source")


@dataclass(frozen=True)
class StoreRecord:
    image_id: str
    object_id: str
    proposal_id: str
    granularity: GranularityRecord
    mask_path: str
    source: ProposalSource

    def to_json(self) -> str:
        return json.dumps(
            {
                "image_id": self.image_id,
                "object_id": self.object_id,
                "proposal_id": self.proposal_id,
                "granularity": {
                    "scale": self.granularity.scale_granularity,
                    "semantic": self.granularity.semantic_granularity,
                    "combined": self.granularity.combined,
                    "lambda": self.granularity.lam,
                },
                "mask_path": self.mask_path,
                "source": self.source.value,
            },
            sort_keys=True,
        )

    @staticmethod
    def from_json(line: str) -> "StoreRecord":
        raw = json.loads(line)
        missing = [f for f in _FIELDS if f not in raw]
        if missing:
            raise ValueError(f"record missing fields {missing}")
        g = raw["granularity"]
        return StoreRecord(
            image_id=raw["image_id"],
            object_id=raw["object_id"],
            proposal_id=raw["proposal_id"],
            granularity=GranularityRecord(
                scale_granularity=g["scale"],
                semantic_granularity=g["semantic"],
                combined=g["combined"],
                lam=g["lambda"],
            ),
            mask_path=raw["mask_path"],
            source=ProposalSource(raw["source"]),
        )


@dataclass
class IndexDiagnostic:
    line_number: int
    message: str


class ProposalStore:
    """Filesystem-backed mask-granularity store."""

    def __init__(self, root: Path | str):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        (self.root / MASKS_DIR).mkdir(exist_ok=True)

    @property
    def index_path(self) -> Path:
        return self.root / INDEX_NAME

    def append(self, record: StoreRecord) -> None:
        """Append one record; the line is flushed atomically."""
        with open(self.index_path, "a", encoding="utf-8") as fh:
            fh.write(record.to_json() + "\n")
            fh.flush()

    def add_proposal(self, image_id: str, proposal: Proposal, granularity: GranularityRecord) -> StoreRecord:
        """Persist a proposal's mask and append its record."""
        rel = f"{MASKS_DIR}/{proposal.proposal_id}.png"
        save_mask(proposal.mask, self.root / rel)
        record = StoreRecord(
            image_id=image_id,
            object_id=proposal.parent_object_id,
            proposal_id=proposal.proposal_id,
            granularity=granularity,
            mask_path=rel,
            source=proposal.source,
        )
        self.append(record)
        return record

    def scan(self, diagnostics: list[IndexDiagnostic] | None = None) -> Iterator[StoreRecord]:
        """Yield records in insertion order; bad lines become diagnostics."""
        if not self.index_path.exists():
            return
        with open(self.index_path, encoding="utf-8") as fh:
            for line_number, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    yield StoreRecord.from_json(line)
                except (ValueError, KeyError, TypeError) as exc:
                    if diagnostics is not None:
                        diagnostics.append(IndexDiagnostic(line_number, str(exc)))

    def load(self) -> tuple[list[StoreRecord], list[IndexDiagnostic]]:
        diagnostics: list[IndexDiagnostic] = []
        records = list(self.scan(diagnostics))
        return records, diagnostics

    def load_mask(self, record: StoreRecord) -> BinaryMask:
        return load_mask(self.root / record.mask_path, role=MaskRole.PROPOSAL)

    def save_image(self, image: Image) -> None:
        """Keep the referenced image alongside the store so training is self-contained."""
        from PIL import Image as PILImage

        path = self.root / IMAGES_DIR / f"{image.id}.png"
        path.parent.mkdir(exist_ok=True)
        arr = (image.pixels * 255).round().astype(np.uint8)
        PILImage.fromarray(arr, mode="RGB").save(path)

    def load_images(self) -> dict[str, Image]:
        from PIL import Image as PILImage

        images: dict[str, Image] = {}
        images_dir = self.root / IMAGES_DIR
        if not images_dir.is_dir():
            return images
        for path in sorted(images_dir.glob("*.png")):
            arr = np.asarray(PILImage.open(path).convert("RGB"), dtype=np.float64) / 255.0
            images[path.stem] = Image(arr, id=path.stem)
        return images

    def __len__(self) -> int:
        return sum(1 for _ in self.scan())


@dataclass
class SamplerState:
    """Histogram of record granularities over the prompt's discretization bins."""

    bin_counts: np.ndarray
    bins: int

    @staticmethod
    def from_records(records: list[StoreRecord], bins: int = 11) -> "SamplerState":
        counts = np.zeros(bins, dtype=np.int64)
        for record in records:
            counts[granularity_bin(record.granularity.combined, bins)] += 1
        return SamplerState(bin_counts=counts, bins=bins)


def sample_weights(records: list[StoreRecord], state: SamplerState, mode: str = "inverse") -> np.ndarray:
    """Per-record selection probabilities under the chosen sampling mode."""
    if not records:
        raise EmptyStoreError("no records to sample from")
    if mode == "uniform":
        return np.full(len(records), 1.0 / len(records))
    if mode != "inverse":
        raise ValueError(f"unknown sampling mode {mode!r}")
    weights = np.array(
        [1.0 / state.bin_counts[granularity_bin(r.granularity.combined, state.bins)] for r in records]
    )
    return weights / weights.sum()


def sample(
    records: list[StoreRecord],
    rng: int | np.random.Generator,
    mode: str = "inverse",
    bins: int = 11,
    state: SamplerState | None = None,
) -> StoreRecord:
    """Draw one record; inverse mode equalizes granularity bins."""
    if not records:
        raise EmptyStoreError("cannot sample from an empty store")
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    state = state or SamplerState.from_records(records, bins)
    probs = sample_weights(records, state, mode)
    return records[int(rng.choice(len(records), p=probs))]


class GranularitySampler:
    """Reusable sampler over a fixed record list (training hot path)."""

    def __init__(self, records: list[StoreRecord], mode: str = "inverse", bins: int = 11):
        if not records:
            raise EmptyStoreError("cannot build a sampler over an empty store")
        self.records = records
        self.state = SamplerState.from_records(records, bins)
        self.probs = sample_weights(records, self.state, mode)

    def sample(self, rng: np.random.Generator) -> StoreRecord:
        return self.records[int(rng.choice(len(self.records), p=self.probs))]
