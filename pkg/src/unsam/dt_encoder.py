"""ViT encoder with a frozen backbone and per-layer domain bypass adapters.

Each transformer layer computes::

    h_attn = h + MSA(LN(h))
    h_out  = h_attn + MLP(LN(h_attn)) + (h_attn @ w_com[l]) @ w_spec[k][l]

``w_com`` (d x r) is shared by every domain and carried across domain
boundaries during sequential training; ``w_spec[k]`` (r x d) belongs to
domain ``k`` only.  The up-projections start at zero, so an untrained
bypass reproduces the frozen backbone exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from scipy.fft import dct
from torch import nn

from .core import ZERO_SHOT_STRATEGIES, RunConfig, TokenGrid
from .errors import DomainError, ShapeError, ValidationError


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        *lead, N, d = x.shape
        qkv = self.qkv(x).reshape(*lead, N, 3, self.heads, d // self.heads).movedim(-3, 0)
        q, k, v = (t.transpose(-3, -2) for t in qkv)     # (..., heads, N, d_head)
        attn = (q @ k.transpose(-2, -1)) * (d // self.heads) ** -0.5
        out = attn.softmax(dim=-1) @ v
        return self.proj(out.transpose(-3, -2).reshape(*lead, N, d))


class MLP(nn.Module):
    def __init__(self, dim: int, hidden: int, out: int | None = None):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, out or dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class Block(nn.Module):
    """Pre-norm transformer layer of the frozen backbone."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = MLP(dim, dim * mlp_ratio)

    def attend(self, h):
        return h + self.attn(self.norm1(h))

    def forward(self, h):
        h_attn = self.attend(h)
        return h_attn + self.mlp(self.norm2(h_attn))


class PatchEmbed(nn.Module):
    def __init__(self, in_channels: int, dim: int, patch_size: int, grid: tuple[int, int]):
        super().__init__()
        self.patch_size = patch_size
        self.proj = nn.Conv2d(in_channels, dim, patch_size, stride=patch_size)
        self.pos = nn.Parameter(torch.zeros(grid[0] * grid[1], dim))

    def forward(self, images: torch.Tensor) -> TokenGrid:
        p = self.patch_size
        if images.dim() != 4:
            raise ShapeError(f"expected B x C x H x W images, got {tuple(images.shape)}")
        H, W = images.shape[-2:]
        if H % p or W % p:
            raise ShapeError(f"image size {(H, W)} is not divisible by patch size {p}")
        return TokenGrid.from_spatial(self.proj(images))


def dct_stem(in_channels: int, patch_size: int, dim: int) -> torch.Tensor:
    """Patch-embedding weights from the orthonormal 2-D DCT-II basis.

    Filter ``i`` is the i-th lowest frequency (zig-zag order) applied to the
    channel mean, so ``dim >= patch_size**2`` keeps a grey patch losslessly.
    Stands in for pretrained stem weights.
    """
    p = patch_size
    basis = dct(np.eye(p), norm="ortho", axis=0)    # rows are 1-D basis functions
    freqs = sorted(((u, v) for u in range(p) for v in range(p)), key=lambda t: (t[0] + t[1], t))
    w = np.zeros((dim, in_channels, p, p))
    for i, (u, v) in enumerate(freqs[:dim]):
        w[i] = np.outer(basis[u], basis[v])[None] / np.sqrt(in_channels)
    return torch.from_numpy(w).float()


class DomainBypass(nn.Module):
    """Low-rank domain-common down projection followed by a domain-specific up projection."""

    def __init__(self, depth: int, dim: int, rank: int, num_domains: int):
        super().__init__()
        if rank >= dim:
            raise ValidationError(f"adapter rank {rank} must be below dim {dim}")
        self.w_com = nn.Parameter(torch.randn(depth, dim, rank) * 0.02)
        self.w_spec = nn.ParameterList(
            [nn.Parameter(torch.zeros(depth, rank, dim)) for _ in range(num_domains)]
        )
        # snapshots of w_com taken at each domain boundary, keyed by the finished domain
        self.common_history: dict[int, torch.Tensor] = {}

    @property
    def num_domains(self) -> int:
        return len(self.w_spec)

    def spec(self, domain_id: int) -> torch.Tensor:
        if not 0 <= domain_id < self.num_domains:
            raise DomainError(f"domain {domain_id} outside [0, {self.num_domains})")
        return self.w_spec[domain_id]

    def forward(self, h_attn: torch.Tensor, layer: int, w_up: torch.Tensor) -> torch.Tensor:
        return (h_attn @ self.w_com[layer]) @ w_up[layer]


@dataclass
class EncoderOutput:
    per_layer: list[TokenGrid]

    @property
    def final(self) -> TokenGrid:
        return self.per_layer[-1]


class DTEncoder(nn.Module):
    def __init__(self, cfg: RunConfig, num_domains: int):
        super().__init__()
        self.cfg = cfg
        self.patch_embed = PatchEmbed(cfg.in_channels, cfg.dim, cfg.patch_size, cfg.grid)
        self.blocks = nn.ModuleList(
            [Block(cfg.dim, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth)]
        )
        # K slots are allocated even when shared so both settings draw the same init
        self.bypass = DomainBypass(cfg.depth, cfg.dim, cfg.adapter_rank, num_domains)
        self._init_backbone()
        self.freeze_backbone()

    def _init_backbone(self):
        if self.cfg.stem_init == "dct":
            with torch.no_grad():
                self.patch_embed.proj.weight.copy_(
                    dct_stem(self.cfg.in_channels, self.cfg.patch_size, self.cfg.dim))
                self.patch_embed.proj.bias.zero_()
        nn.init.trunc_normal_(self.patch_embed.pos, std=0.02)
        for m in self.blocks.modules():
            if isinstance(m, nn.Linear):
                nn.init.trunc_normal_(m.weight, std=0.02)
                nn.init.zeros_(m.bias)

    def backbone_parameters(self):
        yield from self.patch_embed.named_parameters(prefix="patch_embed")
        yield from self.blocks.named_parameters(prefix="blocks")

    def freeze_backbone(self):
        for _, p in self.backbone_parameters():
            p.requires_grad_(False)

    def adapter_index(self, domain_id: int) -> int:
        """Adapter slot used by ``domain_id`` (always 0 when adapters are shared)."""
        if domain_id < 0:
            raise DomainError(f"negative domain id {domain_id}")
        if not self.cfg.domain_specific_adapters:
            return 0
        if domain_id >= self.bypass.num_domains:
            raise DomainError(f"domain {domain_id} has no adapter")
        return domain_id

    def domain_bypass(self, h_attn: TokenGrid, layer: int, domain_id: int) -> TokenGrid:
        w_up = self.bypass.spec(self.adapter_index(domain_id))
        return TokenGrid(self.bypass(h_attn.data, layer, w_up), h_attn.grid)

    def layer_forward(self, h: TokenGrid, layer: int, domain_id: int | None = None,
                      w_up: torch.Tensor | None = None) -> TokenGrid:
        if not 0 <= layer < len(self.blocks):
            raise ValidationError(f"layer {layer} outside [0, {len(self.blocks)})")
        if w_up is None:
            w_up = self.bypass.spec(self.adapter_index(domain_id))
        block = self.blocks[layer]
        h_attn = block.attend(h.data)
        out = h_attn + block.mlp(block.norm2(h_attn)) + self.bypass(h_attn, layer, w_up)
        return TokenGrid(out, h.grid)

    def forward(self, images: torch.Tensor, domain_id: int | None = None,
                w_up: torch.Tensor | None = None) -> EncoderOutput:
        """Encode a batch.  Give either ``domain_id`` or explicit up-projection weights."""
        if w_up is None:
            w_up = self.bypass.spec(self.adapter_index(domain_id))
        h = self.embed(images)
        per_layer = []
        for layer in range(len(self.blocks)):
            h = self.layer_forward(h, layer, w_up=w_up)
            per_layer.append(h)
        return EncoderOutput(per_layer)

    encode = forward

    def embed(self, images: torch.Tensor) -> TokenGrid:
        """Normalise, patchify and add the position table."""
        if self.cfg.input_norm == "image":
            mean = images.mean(dim=(-2, -1), keepdim=True)
            std = images.std(dim=(-2, -1), keepdim=True)
            images = (images - mean) / (std + 1e-6)
        h = self.patch_embed(images)
        if h.N != self.patch_embed.pos.shape[0]:
            raise ShapeError(
                f"image gives {h.N} tokens but the position table holds {self.patch_embed.pos.shape[0]}"
            )
        return TokenGrid(h.data + self.patch_embed.pos, h.grid)

    def backbone_forward(self, images: torch.Tensor) -> EncoderOutput:
        h = self.embed(images)
        per_layer = []
        for block in self.blocks:
            h = TokenGrid(block(h.data), h.grid)
            per_layer.append(h)
        return EncoderOutput(per_layer)

    @torch.no_grad()
    def inherit_common(self, from_domain: int) -> None:
        """Carry ``w_com`` from domain ``from_domain`` into domain ``from_domain + 1``.

        The live parameter is already shared; this records the boundary
        value and re-asserts it so domain ``from_domain + 1`` starts bitwise
        from it.
        """
        snapshot = self.bypass.w_com.detach().clone()
        self.bypass.common_history[from_domain] = snapshot
        self.bypass.w_com.copy_(snapshot)

    def select_inference_adapter(self, strategy: str, trained_domains: list[int],
                                 domain_id: int | None = None) -> torch.Tensor:
        if strategy not in ZERO_SHOT_STRATEGIES:
            raise ValidationError(f"unknown adapter strategy {strategy!r}")
        if not trained_domains:
            raise DomainError("no trained domain to draw adapter weights from")
        if strategy == "specified":
            if domain_id not in trained_domains:
                raise DomainError(f"domain {domain_id} was never trained")
            return self.bypass.spec(self.adapter_index(domain_id))
        if strategy == "last":
            return self.bypass.spec(self.adapter_index(trained_domains[-1]))
        slots = sorted({self.adapter_index(k) for k in trained_domains})
        return torch.stack([self.bypass.spec(s) for s in slots]).mean(dim=0)
