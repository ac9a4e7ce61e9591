"""Synthetic multi-domain nuclei generator and on-disk dataset format.

Layout of a dataset directory::

    manifest.txt      "# unsam-dataset v1" header, then tab-separated
                      id, image file, label file, domain id, split
    images/<id>.png   8-bit RGB (generated images are quantised to k/255,
                      so the round trip is exact)
    labels/<id>.png   16-bit single-channel instance map
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .core import DomainRegistry, ImageSample
from .errors import FormatError, GenerationError, ValidationError
from .metrics import relabel_sequential

MANIFEST_HEADER = "# unsam-dataset v1"
MANIFEST_NAME = "manifest.txt"


@dataclass(frozen=True)
class DomainSpec:
    name: str
    count_range: tuple[int, int] = (4, 8)
    radius_range: tuple[float, float] = (6.0, 10.0)
    eccentricity_range: tuple[float, float] = (0.0, 0.6)
    fg_color: tuple[float, float, float] = (0.35, 0.15, 0.55)
    bg_color: tuple[float, float, float] = (0.92, 0.85, 0.90)
    color_jitter: float = 0.04
    noise: float = 0.03
    allow_overlap: bool = False
    min_gap: float = 3.0      # pixel clearance between non-overlapping nuclei
    max_retries: int = 200

    def __post_init__(self):
        for name in ("count_range", "radius_range", "eccentricity_range", "fg_color", "bg_color"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        lo, hi = self.count_range
        if lo < 1 or hi < lo:
            raise ValidationError(f"{self.name}: bad count range {self.count_range}")
        lo, hi = self.radius_range
        if lo < 2 or hi < lo:
            raise ValidationError(f"{self.name}: radii must be >= 2 px, got {self.radius_range}")
        lo, hi = self.eccentricity_range
        if not 0 <= lo <= hi < 1:
            raise ValidationError(f"{self.name}: eccentricity must lie in [0, 1)")
        if len(self.fg_color) != 3 or len(self.bg_color) != 3:
            raise ValidationError(f"{self.name}: colours are RGB triples")

    @classmethod
    def from_dict(cls, data: dict) -> "DomainSpec":
        try:
            return cls(**data)
        except TypeError as exc:
            raise ValidationError(f"bad domain spec {data!r}: {exc}") from exc


@dataclass
class Dataset:
    samples: list[ImageSample]
    splits: list[str] = field(default_factory=list)
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.splits:
            self.splits = ["train"] * len(self.samples)
        if len(self.splits) != len(self.samples):
            raise ValidationError("one split tag per sample is required")

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    def __iter__(self):
        return iter(self.samples)

    def subset(self, split: str) -> "Dataset":
        keep = [i for i, s in enumerate(self.splits) if s == split]
        return Dataset([self.samples[i] for i in keep], [split] * len(keep),
                       dict(self.provenance, split=split))

    @property
    def train(self) -> "Dataset":
        return self.subset("train")

    @property
    def test(self) -> "Dataset":
        return self.subset("test")


def _ellipse_mask(shape, cy, cx, a, b, theta):
    yy, xx = np.mgrid[: shape[0], : shape[1]]
    dy, dx = yy - cy, xx - cx
    c, s = np.cos(theta), np.sin(theta)
    u, v = dx * c + dy * s, -dx * s + dy * c
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def generate_image(spec: DomainSpec, size: int, rng: np.random.Generator,
                   domain_id: int = 0, sample_id: str = "") -> ImageSample:
    n = int(rng.integers(spec.count_range[0], spec.count_range[1] + 1))
    labels = np.zeros((size, size), dtype=np.int32)
    clearance = np.zeros((size, size), dtype=bool)
    placed = 0
    for _ in range(spec.max_retries * n):
        if placed == n:
            break
        a = rng.uniform(*spec.radius_range)
        ecc = rng.uniform(*spec.eccentricity_range)
        b = max(a * np.sqrt(1 - ecc**2), 2.0)
        theta = rng.uniform(0, np.pi)
        margin = a + 1
        if size <= 2 * margin:
            raise GenerationError(f"{spec.name}: nucleus radius {a:.1f} does not fit {size} px")
        cy, cx = rng.uniform(margin, size - margin, size=2)
        blob = _ellipse_mask(labels.shape, cy, cx, a, b, theta)
        if not spec.allow_overlap and (blob & clearance).any():
            continue
        placed += 1
        labels[blob] = placed
        grow = spec.min_gap
        clearance |= _ellipse_mask(labels.shape, cy, cx, a + grow, b + grow, theta)
    if placed < n:
        raise GenerationError(
            f"{spec.name}: placed {placed} of {n} nuclei after {spec.max_retries * n} tries"
        )
    # overlapping blobs may hide earlier ones entirely
    if spec.allow_overlap:
        labels = relabel_sequential(labels)

    bg = np.asarray(spec.bg_color) + rng.normal(0, spec.color_jitter, 3)
    fg = np.asarray(spec.fg_color) + rng.normal(0, spec.color_jitter, 3)
    image = np.where(labels[None] > 0, fg[:, None, None], bg[:, None, None])
    image = image + rng.normal(0, spec.noise, image.shape)
    image = np.round(np.clip(image, 0, 1) * 255) / 255
    return ImageSample(image.astype(np.float32), labels, domain_id, sample_id)


def generate_domain(spec: DomainSpec, n_images: int, size: int = 128, seed: int = 0,
                    domain_id: int = 0) -> Dataset:
    """Images are drawn from per-image streams seeded by (seed, index)."""
    samples = [
        generate_image(spec, size, np.random.default_rng([seed, i]), domain_id,
                       f"{spec.name}_{i:04d}")
        for i in range(n_images)
    ]
    return Dataset(samples, provenance={"spec": asdict(spec), "seed": seed, "size": size})


def make_registry(specs: list[DomainSpec], n_images: int = 8, size: int = 128, seed: int = 0,
                  test_fraction: float = 0.25):
    """Build the registry and one train/test-split dataset per domain, ids in list order."""
    if not specs:
        raise ValidationError("at least one domain spec is required")
    registry = DomainRegistry(tuple(s.name for s in specs))
    datasets = []
    for k, spec in enumerate(specs):
        ds = generate_domain(spec, n_images, size, seed=seed * 1000 + k, domain_id=k)
        n_test = int(round(test_fraction * n_images))
        order = np.random.default_rng([seed, k, 7]).permutation(n_images)
        test_ids = set(order[:n_test].tolist())
        ds.splits = ["test" if i in test_ids else "train" for i in range(n_images)]
        datasets.append(ds)
    return registry, datasets


def save_dataset(ds: Dataset, directory) -> Path:
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    (directory / "labels").mkdir(parents=True, exist_ok=True)
    lines = [MANIFEST_HEADER]
    for i, (sample, split) in enumerate(zip(ds.samples, ds.splits)):
        sid = sample.sample_id or f"sample_{i:04d}"
        if sample.instance_map.max(initial=0) > 65535:
            raise ValidationError(f"{sid}: more instances than a 16-bit map can hold")
        img = np.round(np.clip(sample.image, 0, 1) * 255).astype(np.uint8)
        Image.fromarray(np.moveaxis(img, 0, -1).squeeze()).save(directory / "images" / f"{sid}.png")
        Image.fromarray(sample.instance_map.astype(np.uint16)).save(directory / "labels" / f"{sid}.png")
        lines.append(f"{sid}\timages/{sid}.png\tlabels/{sid}.png\t{sample.domain_id}\t{split}")
    (directory / MANIFEST_NAME).write_text("\n".join(lines) + "\n")
    if ds.provenance:
        (directory / "provenance.json").write_text(json.dumps(ds.provenance, indent=2))
    return directory


def load_dataset(directory) -> Dataset:
    directory = Path(directory)
    manifest = directory / MANIFEST_NAME
    if not manifest.exists():
        raise FormatError(f"{directory} has no {MANIFEST_NAME}")
    lines = manifest.read_text().splitlines()
    if not lines or lines[0].strip() != MANIFEST_HEADER:
        raise FormatError(f"{manifest}: missing or unsupported header")
    samples, splits = [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 5:
            raise FormatError(f"{manifest}:{lineno}: expected 5 tab-separated fields")
        sid, image_file, label_file, domain, split = parts
        paths = directory / image_file, directory / label_file
        for p in paths:
            if not p.exists():
                raise FormatError(f"{manifest}:{lineno}: {p} is missing")
        img = np.asarray(Image.open(paths[0]))
        img = img[..., None] if img.ndim == 2 else img
        image = np.moveaxis(img, -1, 0).astype(np.float32) / 255.0
        labels = np.asarray(Image.open(paths[1])).astype(np.int32)
        sample = ImageSample(image, labels, int(domain), sid)
        sample.validate()
        samples.append(sample)
        splits.append(split)
    provenance = {}
    if (directory / "provenance.json").exists():
        provenance = json.loads((directory / "provenance.json").read_text())
    return Dataset(samples, splits, provenance)
