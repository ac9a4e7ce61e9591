"""Shared types, run configuration and seeding."""

from __future__ import annotations

import dataclasses
import math
import os
import random
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np
import torch
import yaml

from .errors import ConfigError, ShapeError, ValidationError

CONFIG_ENV_VAR = "UNSAM_CONFIG"
ZERO_SHOT_STRATEGIES = ("specified", "mean", "last")
# ``lambda`` is the file key; it is a Python keyword, hence ``lam`` on the dataclass
_FILE_KEYS = {"lam": "lambda"}
_FIELD_NAMES = {v: k for k, v in _FILE_KEYS.items()}


@dataclass(frozen=True)
class DomainRegistry:
    """Ordered set of domains; ``domain_id`` is the position in ``names``."""

    names: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        if len(self.names) < 1:
            raise ValidationError("registry needs at least one domain")
        if len(set(self.names)) != len(self.names):
            raise ValidationError(f"duplicate domain names in {self.names}")

    @property
    def K(self) -> int:
        return len(self.names)

    @property
    def domains(self) -> list[tuple[int, str]]:
        return list(enumerate(self.names))

    def id_of(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise ValidationError(f"unknown domain name {name!r}") from None

    def __len__(self):
        return len(self.names)


@dataclass
class TokenGrid:
    """N x d token array together with its (H_t, W_t) spatial layout.

    ``data`` may carry leading batch dimensions, i.e. shape ``(..., N, d)``.
    """

    data: torch.Tensor
    grid: tuple[int, int]

    def __post_init__(self):
        h, w = self.grid
        if self.data.shape[-2] != h * w:
            raise ShapeError(f"{self.data.shape[-2]} tokens do not fit grid {self.grid}")

    @property
    def N(self) -> int:
        return self.data.shape[-2]

    @property
    def d(self) -> int:
        return self.data.shape[-1]

    def to_spatial(self) -> torch.Tensor:
        """``(..., N, d)`` -> ``(..., d, H_t, W_t)``."""
        h, w = self.grid
        x = self.data.reshape(*self.data.shape[:-2], h, w, self.d)
        return x.movedim(-1, -3)

    @classmethod
    def from_spatial(cls, x: torch.Tensor) -> "TokenGrid":
        h, w = x.shape[-2:]
        data = x.movedim(-3, -1).reshape(*x.shape[:-3], h * w, x.shape[-3])
        return cls(data, (h, w))


@dataclass
class ImageSample:
    image: np.ndarray          # C x H x W float in [0, 1]
    instance_map: np.ndarray   # H x W integer labels
    domain_id: int
    sample_id: str = ""

    @property
    def semantic_mask(self) -> np.ndarray:
        return self.instance_map > 0

    def validate(self, patch_size: int | None = None):
        if self.image.ndim != 3:
            raise ValidationError(f"image must be C x H x W, got {self.image.shape}")
        if self.image.shape[1:] != self.instance_map.shape:
            raise ValidationError(
                f"image {self.image.shape[1:]} and instance map {self.instance_map.shape} disagree"
            )
        if patch_size is not None and any(s % patch_size for s in self.instance_map.shape):
            raise ShapeError(f"size {self.instance_map.shape} not divisible by patch {patch_size}")


@dataclass(frozen=True)
class RunConfig:
    """Flat run configuration.  Every field maps to one top-level key of the config file."""

    # model
    image_size: int = 128
    in_channels: int = 3
    patch_size: int = 8
    dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: int = 4
    adapter_rank: int = 8
    fpn_dim: int | None = None          # d_s, defaults to dim // 2
    spgen_taps: tuple[int, ...] | None = None
    decoder_heads: int = 1
    decoder_mlp_dim: int | None = None  # defaults to 2 * dim
    num_classes: int = 1
    stem_init: str = "dct"              # frozen patch embedding: dct | random
    input_norm: str = "image"           # per-image channel standardisation: image | none
    query_init_std: float = 0.02
    domain_specific_adapters: bool = True
    domain_specific_queries: bool = True
    # self-prompt and loss
    tau: float = 0.95
    lam: float = 0.8
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    dice_eps: float = 1.0
    # optimisation
    lr: float = 1e-4
    lr_decay: float = 0.98
    batch_size: int = 4
    epochs: int = 30
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    reset_optimizer_per_domain: bool = True
    # inference
    semantic_threshold: float = 0.5
    connectivity: int = 8
    zero_shot_adapter_strategy: str = "specified"
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        # yaml gives lists; keep the dataclass hashable
        if self.spgen_taps is not None:
            object.__setattr__(self, "spgen_taps", tuple(int(t) for t in self.spgen_taps))
        self.validate()

    def validate(self):
        for name in ("image_size", "in_channels", "patch_size", "dim", "depth", "heads",
                     "mlp_ratio", "adapter_rank", "decoder_heads", "num_classes",
                     "batch_size", "epochs"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise ValidationError(f"{name} must be a positive integer, got {value!r}")
        for name in ("tau", "lam", "semantic_threshold"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValidationError(f"{name} must lie in [0, 1], got {value!r}")
        for name in ("lr", "lr_decay", "dice_eps"):
            if not getattr(self, name) > 0:
                raise ValidationError(f"{name} must be positive")
        if self.focal_gamma < 0 or not 0 <= self.focal_alpha <= 1:
            raise ValidationError("focal_gamma must be >= 0 and focal_alpha in [0, 1]")
        if self.adapter_rank >= self.dim:
            raise ValidationError(f"adapter_rank {self.adapter_rank} must be below dim {self.dim}")
        if self.image_size % self.patch_size:
            raise ValidationError("image_size must be divisible by patch_size")
        if self.dim % self.heads or self.dim % self.decoder_heads:
            raise ValidationError("dim must be divisible by heads and decoder_heads")
        if self.dim % 4:
            raise ValidationError("dim must be divisible by 4 (upscaling halves channels twice)")
        if self.connectivity not in (4, 8):
            raise ValidationError("connectivity must be 4 or 8")
        if self.zero_shot_adapter_strategy not in ZERO_SHOT_STRATEGIES:
            raise ValidationError(
                f"zero_shot_adapter_strategy must be one of {ZERO_SHOT_STRATEGIES}"
            )
        if self.stem_init not in ("dct", "random"):
            raise ValidationError("stem_init must be dct or random")
        if self.input_norm not in ("image", "none"):
            raise ValidationError("input_norm must be image or none")
        if self.dtype not in ("float32", "float64"):
            raise ValidationError("dtype must be float32 or float64")
        if self.spgen_taps is not None and any(not 0 <= t < self.depth for t in self.spgen_taps):
            raise ValidationError(f"spgen_taps {self.spgen_taps} outside [0, {self.depth})")

    @property
    def grid(self) -> tuple[int, int]:
        n = self.image_size // self.patch_size
        return n, n

    @property
    def torch_dtype(self) -> torch.dtype:
        return getattr(torch, self.dtype)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        out = {_FILE_KEYS.get(k, k): v for k, v in dataclasses.asdict(self).items()}
        if out["spgen_taps"] is not None:
            out["spgen_taps"] = list(out["spgen_taps"])
        return out

    @classmethod
    def from_dict(cls, data: dict[str, Any] | None) -> "RunConfig":
        data = {_FIELD_NAMES.get(k, k): v for k, v in (data or {}).items()}
        known = {f.name for f in fields(cls)}
        for key in data:
            if key not in known:
                raise ConfigError(f"unknown configuration key {key!r}", key=key)
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


def load_config(path: str | os.PathLike | None = None) -> RunConfig:
    """Read a flat ``key: value`` YAML file; missing keys take defaults.

    With ``path=None`` the file named by ``$UNSAM_CONFIG`` is used, or pure
    defaults when the variable is unset.
    """
    if path is None:
        path = os.environ.get(CONFIG_ENV_VAR)
        if path is None:
            return RunConfig()
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        line = getattr(getattr(exc, "problem_mark", None), "line", None)
        where = f" (line {line + 1})" if line is not None else ""
        raise ConfigError(f"cannot parse {path}{where}: {exc}") from exc
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return RunConfig.from_dict(data)


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)


def save_config(cfg: RunConfig, path: str | os.PathLike) -> None:
    Path(path).write_text(dump_config(cfg))


def seed_all(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)


def default_spgen_taps(depth: int) -> tuple[int, int, int]:
    """0-based layer indices ceil(L/3)-1, ceil(2L/3)-1, L-1."""
    return (math.ceil(depth / 3) - 1, math.ceil(2 * depth / 3) - 1, depth - 1)
