"""Noise predictor ``eps_theta(x_t, t, cond)`` with optional LoRA adapters.

A residual MLP on ``[x_t, time embedding, condition embedding]``.  Every
activation is SiLU: the regularizer differentiates through input gradients
of this network, so piecewise-linear activations would leave it with a
second derivative that vanishes almost everywhere.

Conditions are discrete labels.  The embedding table holds one row per
label plus a final learnable null row used by classifier-free guidance.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F
from torch import nn


@dataclass
class DenoiserConfig:
    data_dim: int = 2
    hidden_width: int = 256
    depth: int = 4
    time_embed_dim: int = 32
    cond_embed_dim: int = 16
    num_conditions: int = 8

    def __post_init__(self):
        for name, value in asdict(self).items():
            if int(value) != value or value < 1:
                raise ValueError(f"DenoiserConfig.{name} must be a positive integer, got {value!r}")


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal embedding of integer steps, shape ``(len(t), dim)``."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / max(half, 1))
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, t.to(torch.float64)[:, None] / 1000.0], dim=-1)
    return emb


def lora_apply(W0: torch.Tensor, B: torch.Tensor, A: torch.Tensor) -> torch.Tensor:
    """Effective weight ``W0 + B @ A`` for ``W0`` of shape ``(d, k)``."""
    if B.dim() != 2 or A.dim() != 2 or W0.dim() != 2:
        raise ValueError("lora_apply expects matrices")
    d, k = W0.shape
    if B.shape[0] != d or A.shape[1] != k or B.shape[1] != A.shape[0]:
        raise ValueError(f"shape mismatch: W0 {tuple(W0.shape)}, B {tuple(B.shape)}, A {tuple(A.shape)}")
    return W0 + B @ A


class LoraLinear(nn.Linear):
    """``nn.Linear`` whose weight may carry a low-rank update ``B @ A``."""

    def __init__(self, in_features: int, out_features: int, bias: bool = True):
        super().__init__(in_features, out_features, bias=bias)
        self.register_parameter("lora_A", None)
        self.register_parameter("lora_B", None)

    @property
    def effective_weight(self) -> torch.Tensor:
        if self.lora_A is None:
            return self.weight
        return lora_apply(self.weight, self.lora_B, self.lora_A)

    def forward(self, x):
        return F.linear(x, self.effective_weight, self.bias)


class ResidualBlock(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.fc1 = LoraLinear(width, width)
        self.fc2 = LoraLinear(width, width)

    def forward(self, h):
        return h + self.fc2(F.silu(self.fc1(F.silu(h))))


class Denoiser(nn.Module):
    def __init__(self, config: DenoiserConfig):
        super().__init__()
        self.config = config
        c = config
        self.cond_table = nn.Embedding(c.num_conditions + 1, c.cond_embed_dim)
        nn.init.normal_(self.cond_table.weight, std=1.0)
        self.inp = LoraLinear(c.data_dim + c.time_embed_dim + c.cond_embed_dim, c.hidden_width)
        self.blocks = nn.ModuleList(ResidualBlock(c.hidden_width) for _ in range(c.depth))
        self.out = LoraLinear(c.hidden_width, c.data_dim)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    @property
    def null_id(self) -> int:
        return self.config.num_conditions

    def embed(self, labels) -> torch.Tensor:
        """Condition embeddings for integer labels; ``null_id`` selects the null row."""
        labels = torch.as_tensor(labels, dtype=torch.long)
        if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) > self.null_id):
            raise ValueError(f"unknown condition id in {labels.tolist()}")
        return self.cond_table(labels)

    def null_embedding(self) -> torch.Tensor:
        return self.cond_table.weight[self.null_id]

    def forward(self, x_t: torch.Tensor, t, cond: torch.Tensor) -> torch.Tensor:
        c = self.config
        if x_t.shape[-1] != c.data_dim:
            raise ValueError(f"expected data_dim {c.data_dim}, got {x_t.shape[-1]}")
        if cond.shape[-1] != c.cond_embed_dim:
            raise ValueError(f"expected cond_embed_dim {c.cond_embed_dim}, got {cond.shape[-1]}")
        squeeze = x_t.dim() == 1
        x = x_t.reshape(-1, c.data_dim)
        n = x.shape[0]
        t = torch.as_tensor(t, dtype=torch.long).reshape(-1).expand(n) if torch.as_tensor(t).numel() == 1 \
            else torch.as_tensor(t, dtype=torch.long).reshape(n)
        temb = timestep_embedding(t, c.time_embed_dim).to(x.dtype)
        cond = cond.to(x.dtype).reshape(-1, c.cond_embed_dim).expand(n, -1)
        h = self.inp(torch.cat([x, temb, cond], dim=-1))
        for block in self.blocks:
            h = block(h)
        out = self.out(F.silu(h))
        return out.reshape(x_t.shape) if squeeze else out


def predict_noise(model: Denoiser, x_t: torch.Tensor, t, cond: torch.Tensor) -> torch.Tensor:
    return model(x_t, t, cond)


@dataclass
class LoraAdapter:
    """Handles on the ``(B, A)`` factors injected into a model, keyed by layer name."""

    rank: int
    factors: dict[str, tuple[nn.Parameter, nn.Parameter]]

    def parameters(self):
        for B, A in self.factors.values():
            yield B
            yield A


def lora_targets(model: Denoiser) -> dict[str, LoraLinear]:
    """Hidden-to-hidden layers; the input and output projections are too
    narrow on one side to carry a rank-8 update."""
    return {name: mod for name, mod in model.named_modules()
            if isinstance(mod, LoraLinear) and name.startswith("blocks.")}


def init_lora(model: Denoiser, rank: int, seed: int, freeze_embeddings: bool = True) -> LoraAdapter:
    """Attach zero-initialized LoRA factors and freeze the base weights.

    ``B`` starts at zero so the adapted model reproduces the base model
    exactly; ``A`` is Gaussian with std ``1/sqrt(k)`` from ``seed``.
    """
    targets = lora_targets(model)
    if rank < 1:
        raise ValueError("LoRA rank must be >= 1")
    for name, mod in targets.items():
        if rank > min(mod.weight.shape):
            raise ValueError(f"rank {rank} exceeds min dimension of {name} {tuple(mod.weight.shape)}")
    for p in model.parameters():
        p.requires_grad_(False)
    if not freeze_embeddings:
        model.cond_table.weight.requires_grad_(True)
    gen = torch.Generator().manual_seed(seed)
    factors = {}
    for name, mod in targets.items():
        d, k = mod.weight.shape
        dtype = mod.weight.dtype
        A = torch.randn(rank, k, generator=gen, dtype=torch.float64).div(math.sqrt(k)).to(dtype)
        mod.lora_A = nn.Parameter(A)
        mod.lora_B = nn.Parameter(torch.zeros(d, rank, dtype=dtype))
        factors[name] = (mod.lora_B, mod.lora_A)
    return LoraAdapter(rank, factors)
