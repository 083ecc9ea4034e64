"""The interactive segmenter: a small patch-transformer with prompt fusion.

The image and a 3-channel prompt stack (positive disks, negative disks,
previous mask kept continuous) are patch-embedded separately and summed.
When a granularity value is supplied, its bin embedding is added to every
patch token as a global bias. A two-scale token fuse feeds a stack of
transposed convolutions that brings features back to pixel resolution,
ending in a sigmoid so outputs are per-pixel foreground probabilities.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .core import BinaryMask, Image, ProbabilityMap
from .errors import CheckpointError, ContractViolation

CHECKPOINT_MAGIC = "grainseg-checkpoint"


@dataclass(frozen=True)
class SegmenterConfig:
    patch_size: int = 8
    embed_dim: int = 96
    depth: int = 4
    num_heads: int = 4
    image_size: int = 128
    granularity_bins: int = 11

    def __post_init__(self) -> None:
        if self.image_size % self.patch_size != 0:
            raise ContractViolation("image_size must be divisible by patch_size")
        if self.embed_dim % self.num_heads != 0:
            raise ContractViolation("embed_dim must be divisible by num_heads")
        if self.patch_size & (self.patch_size - 1) != 0:
            raise ContractViolation("patch_size must be a power of two")


@dataclass
class PromptBundle:
    """Dense prompts accompanying one image: disk map, previous mask, granularity."""

    disk_map: np.ndarray                 # h x w x 2
    prev_mask: np.ndarray                # h x w, float in [0,1]
    granularity: float | None = None     # None disables the granularity prompt


def granularity_bin(g: float, bins: int) -> int:
    """Round-half-up bin index for a granularity value in [0,1]."""
    idx = math.floor(g * (bins - 1) + 0.5)
    return min(max(idx, 0), bins - 1)


class Attention(nn.Module):
    """Multi-head self-attention with separate Q/K/V projections."""

    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.scale = self.head_dim**-0.5
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        q = self.q_proj(x).view(b, n, self.num_heads, self.head_dim).transpose(1, 2)
        k = self.k_proj(x).view(b, n, self.num_heads, self.head_dim).transpose(1, 2)
        v = self.v_proj(x).view(b, n, self.num_heads, self.head_dim).transpose(1, 2)
        attn = torch.softmax(q @ k.transpose(-2, -1) * self.scale, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, d)
        return self.out_proj(out)


class Block(nn.Module):
    def __init__(self, dim: int, num_heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, dim * mlp_ratio),
            nn.GELU(),
            nn.Linear(dim * mlp_ratio, dim),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        x = x + self.mlp(self.norm2(x))
        return x


class Segmenter(nn.Module):
    """Prompt-fused patch transformer with a pixelwise probability head."""

    def __init__(self, config: SegmenterConfig):
        super().__init__()
        self.config = config
        d = config.embed_dim
        p = config.patch_size
        grid = config.image_size // p

        self.patch_embed_image = nn.Conv2d(3, d, kernel_size=p, stride=p)
        self.patch_embed_prompt = nn.Conv2d(3, d, kernel_size=p, stride=p)
        self.pos_embed = nn.Parameter(torch.zeros(1, grid * grid, d))
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        self.granularity_table = nn.Embedding(config.granularity_bins, d)
        nn.init.trunc_normal_(self.granularity_table.weight, std=0.02)

        self.blocks = nn.ModuleList(Block(d, config.num_heads) for _ in range(config.depth))
        self.norm = nn.LayerNorm(d)
        self.mid_proj = nn.Linear(d, d)

        stages = int(math.log2(p))
        ups: list[nn.Module] = []
        ch = d
        for _ in range(stages):
            nxt = max(ch // 2, 8)
            ups.append(nn.ConvTranspose2d(ch, nxt, kernel_size=2, stride=2))
            ups.append(nn.GELU())
            ch = nxt
        ups.append(nn.Conv2d(ch, 1, kernel_size=1))
        self.neck = nn.Sequential(*ups)

    def _pos_embed_for(self, gh: int, gw: int) -> torch.Tensor:
        grid = self.config.image_size // self.config.patch_size
        pos = self.pos_embed
        if (gh, gw) == (grid, grid):
            return pos
        # bilinear resampling of the learned grid for off-size inputs
        pos2d = pos.reshape(1, grid, grid, -1).permute(0, 3, 1, 2)
        pos2d = F.interpolate(pos2d, size=(gh, gw), mode="bilinear", align_corners=False)
        return pos2d.permute(0, 2, 3, 1).reshape(1, gh * gw, -1)

    def forward(
        self,
        image: torch.Tensor,
        prompts: torch.Tensor,
        granularity_bins: torch.Tensor | None = None,
    ) -> torch.Tensor:
        """image (B,3,H,W), prompts (B,3,H,W) -> probabilities (B,H,W).

        H and W must be multiples of patch_size. ``granularity_bins`` is a
        (B,) long tensor of bin indices, or None to disable the prompt.
        """
        if image.shape[-2:] != prompts.shape[-2:]:
            raise ContractViolation("image and prompt rasters must share H x W")
        h, w = image.shape[-2:]
        p = self.config.patch_size
        if h % p != 0 or w % p != 0:
            raise ContractViolation(f"H and W must be multiples of patch_size={p}")
        gh, gw = h // p, w // p

        tokens = self.patch_embed_image(image) + self.patch_embed_prompt(prompts)
        tokens = tokens.flatten(2).transpose(1, 2)  # (B, N, D)
        tokens = tokens + self._pos_embed_for(gh, gw)
        if granularity_bins is not None:
            tokens = tokens + self.granularity_table(granularity_bins)[:, None, :]

        mid = None
        mid_index = len(self.blocks) // 2
        for i, block in enumerate(self.blocks):
            tokens = block(tokens)
            if i + 1 == mid_index:
                mid = tokens
        fused = self.norm(tokens)
        if mid is not None:
            fused = fused + self.mid_proj(mid)

        grid_feat = fused.transpose(1, 2).reshape(image.shape[0], -1, gh, gw)
        logits = self.neck(grid_feat).squeeze(1)
        return torch.sigmoid(logits)

    @torch.no_grad()
    def predict(self, image: Image, prompts: PromptBundle) -> ProbabilityMap:
        """Inference entry point on domain types; pads off-grid sizes."""
        h, w = image.h, image.w
        if prompts.disk_map.shape != (h, w, 2):
            raise ContractViolation(f"disk map shape {prompts.disk_map.shape} != ({h},{w},2)")
        if prompts.prev_mask.shape != (h, w):
            raise ContractViolation(f"prev mask shape {prompts.prev_mask.shape} != ({h},{w})")
        was_training = self.training
        self.eval()
        try:
            dtype = next(self.parameters()).dtype
            img_t, prompt_t, bins_t = bundle_to_tensors(image, prompts, self.config, dtype)
            p = self.config.patch_size
            pad_h = (-h) % p
            pad_w = (-w) % p
            if pad_h or pad_w:
                img_t = F.pad(img_t, (0, pad_w, 0, pad_h))
                prompt_t = F.pad(prompt_t, (0, pad_w, 0, pad_h))
            prob = self.forward(img_t, prompt_t, bins_t)[0, :h, :w]
            arr = prob.detach().cpu().numpy().astype(np.float64)
        finally:
            self.train(was_training)
        return ProbabilityMap(np.clip(arr, 0.0, 1.0))


def bundle_to_tensors(
    image: Image,
    prompts: PromptBundle,
    config: SegmenterConfig,
    dtype: torch.dtype = torch.float32,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor | None]:
    """Convert domain inputs into the (1,3,H,W) tensors the module consumes."""
    img_t = torch.from_numpy(np.ascontiguousarray(image.pixels.transpose(2, 0, 1))).to(dtype)
    stack = np.stack(
        [prompts.disk_map[:, :, 0], prompts.disk_map[:, :, 1], prompts.prev_mask], axis=0
    )
    prompt_t = torch.from_numpy(np.ascontiguousarray(stack)).to(dtype)
    bins_t = None
    if prompts.granularity is not None:
        idx = granularity_bin(float(prompts.granularity), config.granularity_bins)
        bins_t = torch.tensor([idx], dtype=torch.long)
    return img_t.unsqueeze(0), prompt_t.unsqueeze(0), bins_t


def build_segmenter(config: SegmenterConfig, seed: int = 0) -> Segmenter:
    """Construct a segmenter with seeded, reproducible initialization."""
    torch.manual_seed(seed)
    model = Segmenter(config)
    model.eval()
    return model


def binarize(p: ProbabilityMap, threshold: float) -> BinaryMask:
    """Foreground wherever probability >= threshold."""
    if not (0.0 < threshold < 1.0):
        raise ContractViolation("threshold must lie strictly inside (0,1)")
    return BinaryMask(p.pixels >= threshold)


def save_checkpoint(model: Segmenter, path: Path | str, lora_rank: int | None = None) -> None:
    """Write a self-describing checkpoint (config metadata + parameters)."""
    payload = {
        "magic": CHECKPOINT_MAGIC,
        "version": 1,
        "config": asdict(model.config),
        "lora_rank": lora_rank,
        "state_dict": model.state_dict(),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path: Path | str, expected_config: SegmenterConfig | None = None) -> Segmenter:
    """Rebuild a segmenter from :func:`save_checkpoint` output.

    Raises CheckpointError for missing or malformed files and when the
    stored config disagrees with ``expected_config``.
    """
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:  # corrupt file, wrong format
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("magic") != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path} is not a segmenter checkpoint")
    config = SegmenterConfig(**payload["config"])
    if expected_config is not None and config != expected_config:
        raise CheckpointError(
            f"checkpoint config {config} does not match expected {expected_config}"
        )
    model = build_segmenter(config)
    if payload.get("lora_rank") is not None:
        from .lora import inject_lora

        inject_lora(model, payload["lora_rank"])
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model
