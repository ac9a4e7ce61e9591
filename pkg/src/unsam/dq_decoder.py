"""Domain-query decoder.

The gated self-prompt is added to the last encoder embedding, then two
blocks of (query self-attention, query->image attention, MLP,
image->query attention) run against the per-domain query set.  The image
side is upscaled 4x, the queries are attended once more, mean pooled and
projected to the upscaled width, and the mask is their per-pixel inner
product.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

from .core import RunConfig, TokenGrid
from .dt_encoder import MLP, Attention
from .errors import DomainError, ShapeError


def sinusoidal_encoding(grid: tuple[int, int], dim: int) -> torch.Tensor:
    """Fixed 2-D sine/cosine table of shape ``(H_t*W_t) x dim``.

    Half the channels encode the row, half the column.
    """
    h, w = grid
    quarter = dim // 4
    freqs = 1.0 / (10000 ** (torch.arange(quarter, dtype=torch.float64) / max(quarter, 1)))
    ys, xs = torch.meshgrid(torch.arange(h, dtype=torch.float64),
                            torch.arange(w, dtype=torch.float64), indexing="ij")
    parts = []
    for coord in (ys.reshape(-1), xs.reshape(-1)):
        angles = coord[:, None] * freqs[None, :]
        parts += [angles.sin(), angles.cos()]
    table = torch.cat(parts, dim=1)
    if table.shape[1] < dim:
        table = F.pad(table, (0, dim - table.shape[1]))
    return table.float()


def attention_weights(queries, keys):
    return torch.softmax(queries @ keys.transpose(-2, -1) / math.sqrt(queries.shape[-1]), dim=-1)


def query_to_image_attention(q, f, psi):
    """q <- softmax(q (f + psi)^T / sqrt(d)) f + q"""
    if q.shape[-1] != f.shape[-1] or f.shape[-2:] != psi.shape[-2:]:
        raise ShapeError(f"q {tuple(q.shape)}, f {tuple(f.shape)}, psi {tuple(psi.shape)}")
    return attention_weights(q, f + psi) @ f + q


def image_to_query_attention(f, q, psi):
    """f <- softmax((f + psi) q^T / sqrt(d)) q + f"""
    if q.shape[-1] != f.shape[-1] or f.shape[-2:] != psi.shape[-2:]:
        raise ShapeError(f"q {tuple(q.shape)}, f {tuple(f.shape)}, psi {tuple(psi.shape)}")
    return attention_weights(f + psi, q) @ q + f


def fuse_prompt(h_L: TokenGrid, g_hat: torch.Tensor) -> TokenGrid:
    """Broadcast-add the per-token gate value across every channel."""
    g_flat = g_hat
    if g_hat.dim() >= 2 and tuple(g_hat.shape[-2:]) == tuple(h_L.grid):
        g_flat = g_hat.flatten(-2)
    if g_flat.shape[-1] != h_L.N:
        raise ShapeError(f"{g_flat.shape[-1]} prompt tokens for {h_L.N} image tokens")
    return TokenGrid(h_L.data + g_flat[..., None], h_L.grid)


class DecoderBlock(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_dim: int):
        super().__init__()
        self.self_attn = Attention(dim, heads)
        self.norm = nn.LayerNorm(dim)
        self.mlp = MLP(dim, mlp_dim)

    def forward(self, q, f, psi):
        q = q + self.self_attn(q)
        q = query_to_image_attention(q, f, psi)
        q = q + self.mlp(self.norm(q))
        f = image_to_query_attention(f, q, psi)
        return q, f


class Upscale(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.up1 = nn.ConvTranspose2d(dim, dim // 2, kernel_size=2, stride=2)
        self.up2 = nn.ConvTranspose2d(dim // 2, dim // 4, kernel_size=2, stride=2)

    def forward(self, f: TokenGrid) -> torch.Tensor:
        return self.up2(F.gelu(self.up1(f.to_spatial())))


class DQDecoder(nn.Module):
    def __init__(self, cfg: RunConfig, num_domains: int):
        super().__init__()
        self.cfg = cfg
        d, grid = cfg.dim, cfg.grid
        n_tokens = grid[0] * grid[1]
        # with shared queries every domain routes to slot 0; the rest stay unused
        self.queries = nn.ParameterList(
            [nn.Parameter(torch.randn(n_tokens, d) * cfg.query_init_std)
             for _ in range(num_domains)]
        )
        self.register_buffer("psi", sinusoidal_encoding(grid, d))
        mlp_dim = cfg.decoder_mlp_dim or 2 * d
        self.blocks = nn.ModuleList([DecoderBlock(d, cfg.decoder_heads, mlp_dim) for _ in range(2)])
        self.upscale = Upscale(d)
        # one output head per class; binary segmentation uses a single one
        self.out_mlps = nn.ModuleList([
            nn.Sequential(nn.Linear(d, d), nn.ReLU(), nn.Linear(d, d // 4))
            for _ in range(cfg.num_classes)
        ])

    def query_index(self, domain_id: int) -> int:
        if domain_id < 0:
            raise DomainError(f"negative domain id {domain_id}")
        if not self.cfg.domain_specific_queries:
            return 0
        if domain_id >= len(self.queries):
            raise DomainError(f"domain {domain_id} has no query set")
        return domain_id

    def query(self, domain_id: int) -> torch.Tensor:
        return self.queries[self.query_index(domain_id)]

    def final_query_update(self, q, f):
        q = query_to_image_attention(q, f, self.psi)
        pooled = q.mean(dim=-2)
        return torch.stack([mlp(pooled) for mlp in self.out_mlps], dim=-2)

    @staticmethod
    def predict_mask(F_map: torch.Tensor, q_out: torch.Tensor,
                     size: tuple[int, int] | None = None) -> torch.Tensor:
        """Logits ``B x C x H x W`` from map ``B x d' x h x w`` and ``B x C x d'`` queries."""
        if F_map.shape[-3] != q_out.shape[-1]:
            raise ShapeError(f"map has {F_map.shape[-3]} channels, query {q_out.shape[-1]}")
        logits = torch.einsum("bchw,bkc->bkhw", F_map, q_out)
        if size is not None and tuple(logits.shape[-2:]) != tuple(size):
            logits = F.interpolate(logits, size=size, mode="bilinear", align_corners=False)
        return logits

    def forward(self, h_L: TokenGrid, g_hat: torch.Tensor, domain_id: int | None = None,
                size: tuple[int, int] | None = None,
                query: torch.Tensor | None = None) -> torch.Tensor:
        if query is None:
            query = self.query(domain_id)
        f = fuse_prompt(h_L, g_hat)
        q = query.expand(f.data.shape[0], -1, -1)
        fd = f.data
        for block in self.blocks:
            q, fd = block(q, fd, self.psi)
        F_map = self.upscale(TokenGrid(fd, f.grid))
        q_out = self.final_query_update(q, fd)
        return self.predict_mask(F_map, q_out, size)

    decode = forward
