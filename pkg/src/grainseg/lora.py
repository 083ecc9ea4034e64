"""Low-rank adapters for the attention Q/K projections.

Each wrapped projection computes ``W x + B(A x)`` with the base weight W
frozen, A Gaussian-initialized and B zero-initialized, so the adapted
model is exactly the base model until the first gradient update.
"""

from __future__ import annotations

from pathlib import Path

import torch
from torch import nn

from .errors import CheckpointError, ContractViolation
from .model import Attention, Segmenter


class LoraLinear(nn.Module):
    """A frozen linear layer plus a trainable rank-r update."""

    def __init__(self, base: nn.Linear, rank: int, a_std: float | None = None):
        super().__init__()
        d_out, d_in = base.weight.shape
        if rank >= min(d_out, d_in):
            raise ContractViolation(f"rank {rank} must be below dim {min(d_out, d_in)}")
        self.base = base
        for param in self.base.parameters():
            param.requires_grad = False
        self.rank = rank
        std = a_std if a_std is not None else 1.0 / rank
        self.lora_a = nn.Parameter(torch.randn(rank, d_in) * std)
        self.lora_b = nn.Parameter(torch.zeros(d_out, rank))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.base(x) + (x @ self.lora_a.T) @ self.lora_b.T

    def update_matrix(self) -> torch.Tensor:
        """The dense rank-<=r weight update B @ A."""
        return self.lora_b @ self.lora_a


def inject_lora(model: Segmenter, rank: int = 8, train_prompt_embed: bool = False) -> Segmenter:
    """Wrap every attention Q and K projection with a rank-r adapter.

    Mutates ``model`` in place and returns it. After injection the
    trainable set is exactly {all A, all B, granularity embedding table}
    (plus the prompt patch embedding when ``train_prompt_embed``); every
    other parameter is frozen. Injecting twice is an error.
    """
    for block_idx, block in enumerate(model.blocks):
        attn = block.attn
        if not isinstance(attn, Attention):
            raise ContractViolation(f"block {block_idx} has no attention module")
        if isinstance(attn.q_proj, LoraLinear) or isinstance(attn.k_proj, LoraLinear):
            raise ContractViolation("model already carries adapters")

    for param in model.parameters():
        param.requires_grad = False
    for block in model.blocks:
        block.attn.q_proj = LoraLinear(block.attn.q_proj, rank)
        block.attn.k_proj = LoraLinear(block.attn.k_proj, rank)
    for param in model.granularity_table.parameters():
        param.requires_grad = True
    if train_prompt_embed:
        for param in model.patch_embed_prompt.parameters():
            param.requires_grad = True
    return model


def is_adapted(model: Segmenter) -> bool:
    return any(isinstance(block.attn.q_proj, LoraLinear) for block in model.blocks)


def adapter_modules(model: Segmenter) -> list[LoraLinear]:
    mods: list[LoraLinear] = []
    for block in model.blocks:
        for proj in (block.attn.q_proj, block.attn.k_proj):
            if isinstance(proj, LoraLinear):
                mods.append(proj)
    return mods


def adapter_parameter_count(model: Segmenter) -> int:
    """Number of trainable weights held in adapters (A and B only)."""
    return sum(m.lora_a.numel() + m.lora_b.numel() for m in adapter_modules(model))


def trainable_parameters(model: Segmenter) -> list[nn.Parameter]:
    return [p for p in model.parameters() if p.requires_grad]


def save_adapter(model: Segmenter, path: Path | str) -> None:
    """Write only the adapter matrices and the granularity table."""
    if not is_adapted(model):
        raise ContractViolation("model has no adapters to save")
    state = {
        name: tensor
        for name, tensor in model.state_dict().items()
        if ".lora_a" in name or ".lora_b" in name or name.startswith("granularity_table.")
    }
    payload = {"magic": "grainseg-adapter", "rank": adapter_modules(model)[0].rank, "state": state}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_adapter(model: Segmenter, path: Path | str) -> Segmenter:
    """Apply an adapter-only checkpoint on top of a base model."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"adapter checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or payload.get("magic") != "grainseg-adapter":
        raise CheckpointError(f"{path} is not an adapter checkpoint")
    if not is_adapted(model):
        inject_lora(model, payload["rank"])
    missing, unexpected = model.load_state_dict(payload["state"], strict=False)
    if unexpected:
        raise CheckpointError(f"adapter state has unexpected tensors: {unexpected}")
    return model
