"""Generate a few synthetic nuclei domains and look at how they differ.

Writes a contact sheet (image row, instance-map row) per domain to
``demos/out/domains.png`` and prints per-domain statistics.

    python3 demos/synthetic_domains.py
"""

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from unsam.data import DomainSpec, make_registry

OUT = Path(__file__).parent / "out"

# Three stand-ins for different stains, magnifications and densities.
specs = [
    DomainSpec("purple_sparse", count_range=(5, 8), radius_range=(8, 12)),
    DomainSpec("brown_dense", count_range=(10, 14), radius_range=(6, 9), min_gap=2,
               fg_color=(0.45, 0.3, 0.15), bg_color=(0.8, 0.85, 0.95), noise=0.06),
    DomainSpec("pale_large", count_range=(3, 5), radius_range=(12, 16), eccentricity_range=(0.3, 0.8),
               fg_color=(0.55, 0.45, 0.7), bg_color=(0.95, 0.93, 0.97), noise=0.02),
]
registry, datasets = make_registry(specs, n_images=6, size=128, seed=0)

for k, name in registry.domains:
    ds = datasets[k]
    counts = [s.instance_map.max() for s in ds]
    cover = np.mean([s.semantic_mask.mean() for s in ds])
    fg = np.mean([s.image[:, s.semantic_mask].mean(axis=1) for s in ds], axis=0)
    print(f"domain {k} {name:14s} nuclei/image {np.mean(counts):4.1f}  "
          f"foreground {cover:5.1%}  mean fg RGB {np.round(fg, 2)}  "
          f"split {ds.splits.count('train')} train / {ds.splits.count('test')} test")

OUT.mkdir(exist_ok=True)
fig, axes = plt.subplots(2 * registry.K, 4, figsize=(8, 4 * registry.K))
for k, ds in enumerate(datasets):
    for i in range(4):
        axes[2 * k, i].imshow(np.moveaxis(ds[i].image, 0, -1))
        axes[2 * k + 1, i].imshow(ds[i].instance_map, cmap="nipy_spectral", interpolation="nearest")
    axes[2 * k, 0].set_ylabel(registry.names[k])
for ax in axes.flat:
    ax.set_xticks([])
    ax.set_yticks([])
fig.tight_layout()
fig.savefig(OUT / "domains.png", dpi=80)
print(f"wrote {OUT / 'domains.png'}")
