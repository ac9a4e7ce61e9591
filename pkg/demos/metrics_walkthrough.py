"""How the instance metrics react to typical segmentation mistakes.

A ground truth of three nuclei is compared with predictions that merge,
split, shrink or hallucinate nuclei.  Dice barely moves while AJI and PQ
separate the failure modes.

    python3 demos/metrics_walkthrough.py
"""

import numpy as np

from unsam.metrics import METRIC_COLUMNS, connected_components, image_metrics


def disk(shape, cy, cx, r):
    yy, xx = np.mgrid[: shape[0], : shape[1]]
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


shape = (48, 48)
gt = np.zeros(shape, int)
for label, (cy, cx) in enumerate([(12, 12), (12, 25), (34, 30)], start=1):
    gt[disk(shape, cy, cx, 6)] = label

cases = {"perfect": gt.copy()}

# touching nuclei fused into one blob
merged = gt.copy()
merged[10:15, 17:21] = 1
merged[merged == 2] = 1
cases["merge"] = merged

# the big bottom nucleus cut in half
split = gt.copy()
split[(gt == 3) & (np.arange(48)[None, :] > 30)] = 4
cases["split"] = split

# every nucleus eroded by two pixels
shrunk = np.zeros_like(gt)
for label, (cy, cx) in enumerate([(12, 12), (12, 25), (34, 30)], start=1):
    shrunk[disk(shape, cy, cx, 4)] = label
cases["shrink"] = shrunk

# a spurious detection in the background
extra = gt.copy()
extra[disk(shape, 40, 8, 3)] = 4
cases["false positive"] = extra

print(f"{'case':15s}" + "".join(f"{c:>8s}" for c in METRIC_COLUMNS))
for name, pred in cases.items():
    m = image_metrics(gt, pred)
    print(f"{name:15s}" + "".join(f"{m[c]:8.3f}" for c in METRIC_COLUMNS))

# Instances in a prediction come from connected components of the binary mask,
# so a merge in the semantic mask is a merge in the instance map too.
print("\ncomponents in the merged mask:", connected_components(merged > 0).max())
