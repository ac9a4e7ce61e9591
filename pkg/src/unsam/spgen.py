"""Multi-scale self-prompt generation.

Three encoder layers are tapped and mapped to 1/2x, 1x and 2x the token
resolution, merged top-down FPN style, pooled back to the token grid and
scored per token.  Tokens whose foreground probability clears ``tau`` are
kept as the self-prompt; the rest are zeroed.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .core import RunConfig, TokenGrid, default_spgen_taps
from .errors import ShapeError, ValidationError


@dataclass
class MultiScalePyramid:
    levels: list[torch.Tensor]   # B x d_s x h x w, coarsest first
    fused: TokenGrid


class SPGen(nn.Module):
    def __init__(self, cfg: RunConfig):
        super().__init__()
        d, ds = cfg.dim, cfg.fpn_dim or cfg.dim // 2
        self.taps = tuple(cfg.spgen_taps) if cfg.spgen_taps else default_spgen_taps(cfg.depth)
        if len(self.taps) != 3:
            raise ValidationError(f"exactly three taps are needed, got {self.taps}")
        self.down = nn.Conv2d(d, ds, kernel_size=2, stride=2)
        self.same = nn.Conv2d(d, ds, kernel_size=1)
        self.up = nn.ConvTranspose2d(d, ds, kernel_size=2, stride=2)
        self.lateral = nn.ModuleList([nn.Conv2d(ds, ds, kernel_size=1) for _ in range(3)])
        self.head = nn.Conv2d(ds, 1, kernel_size=1)

    def multiscale_fuse(self, per_layer: list[TokenGrid]) -> MultiScalePyramid:
        if len(per_layer) <= max(self.taps):
            raise ShapeError(f"{len(per_layer)} layers given, taps {self.taps} need more")
        tapped = [per_layer[i] for i in self.taps]
        if len({t.grid for t in tapped}) != 1 or len({t.d for t in tapped}) != 1:
            raise ShapeError("tapped layers disagree in grid or width")
        x_half, x_one, x_two = (t.to_spatial() for t in tapped)
        levels = [self.down(x_half), self.same(x_one), self.up(x_two)]
        p = self.lateral[0](levels[0])
        for lateral, level in zip(self.lateral[1:], levels[1:]):
            p = lateral(level) + F.interpolate(p, scale_factor=2, mode="nearest")
        fused = F.avg_pool2d(p, kernel_size=2)
        return MultiScalePyramid(levels, TokenGrid.from_spatial(fused))

    def predict_foreground(self, h_ms: TokenGrid) -> torch.Tensor:
        """Per-token logits laid out as ``B x H_t x W_t``."""
        return self.head(h_ms.to_spatial())[:, 0]

    def forward(self, per_layer: list[TokenGrid]) -> torch.Tensor:
        return self.predict_foreground(self.multiscale_fuse(per_layer).fused)


def downsample_gt(mask, grid: tuple[int, int]) -> torch.Tensor:
    """Token labels: a cell is foreground if any of its pixels is.

    ``mask`` is ``H x W`` or ``B x H x W`` (array or tensor).
    """
    mask = torch.as_tensor(mask)
    H, W = mask.shape[-2:]
    if H % grid[0] or W % grid[1]:
        raise ShapeError(f"mask {(H, W)} cannot be pooled onto grid {grid}")
    m = mask.reshape(-1, 1, H, W).float()
    y = F.max_pool2d(m, kernel_size=(H // grid[0], W // grid[1]))
    return y.reshape(*mask.shape[:-2], *grid)


def spgen_loss(g: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Mean binary cross-entropy of token logits ``g`` against labels ``y``."""
    if g.shape != y.shape:
        raise ShapeError(f"logits {tuple(g.shape)} vs labels {tuple(y.shape)}")
    y = y.to(g.dtype)
    # -[y log s(g) + (1-y) log(1-s(g))] == softplus(g) - y g
    return (F.softplus(g) - y * g).mean()


def gate(g: torch.Tensor, tau: float) -> torch.Tensor:
    """Keep logits whose sigmoid is >= tau, zero the rest."""
    if not 0.0 <= tau <= 1.0:
        raise ValidationError(f"tau must lie in [0, 1], got {tau}")
    keep = torch.sigmoid(g) >= torch.tensor(tau, dtype=g.dtype)
    return torch.where(keep, g, torch.zeros_like(g))


def retained_tokens(g: torch.Tensor, tau: float) -> int:
    return int((torch.sigmoid(g) >= torch.tensor(tau, dtype=g.dtype)).sum())
