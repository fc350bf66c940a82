"""Regenerate the random AP fixture and its pycocotools reference values.

Usage: python3 gen_coco_reference.py  (writes next to this script)
"""
import contextlib
import io
import json
import os

import numpy as np
from pycocotools.coco import COCO
from pycocotools.cocoeval import COCOeval

HERE = os.path.dirname(os.path.abspath(__file__))
rng = np.random.default_rng(20240611)

images, anns, dets = [], [], []
for img_id in range(1, 11):
    images.append({"id": img_id, "file_name": f"{img_id:03d}.png", "width": 512, "height": 512})
    for _ in range(rng.integers(0, 9)):
        w, h = rng.uniform(6, 110, size=2)
        x, y = rng.uniform(0, 512 - w), rng.uniform(0, 512 - h)
        anns.append({"id": len(anns) + 1, "image_id": img_id, "category_id": 1,
                     "bbox": [x, y, w, h], "area": w * h, "iscrowd": 0})
        # jittered true positives at a spread of overlaps, some missed
        for _ in range(rng.integers(0, 3)):
            j = rng.uniform(-0.3, 0.3, size=4) * np.array([w, h, w, h])
            dets.append({"image_id": img_id, "category_id": 1,
                         "bbox": [x + j[0], y + j[1], max(1.0, w + j[2]), max(1.0, h + j[3])],
                         "score": float(rng.uniform(0.05, 1.0))})
    for _ in range(rng.integers(0, 5)):
        w, h = rng.uniform(6, 80, size=2)
        dets.append({"image_id": img_id, "category_id": 1,
                     "bbox": [rng.uniform(0, 512 - w), rng.uniform(0, 512 - h), w, h],
                     "score": float(rng.uniform(0.05, 1.0))})

gt = {"images": images, "annotations": anns, "categories": [{"id": 1, "name": "cell"}]}
gt_path = os.path.join(HERE, "ap_random_gt.json")
det_path = os.path.join(HERE, "ap_random_dets.json")
with open(gt_path, "w") as f:
    json.dump(gt, f, indent=1)
with open(det_path, "w") as f:
    json.dump(dets, f, indent=1)

with contextlib.redirect_stdout(io.StringIO()):
    coco = COCO(gt_path)
    ev = COCOeval(coco, coco.loadRes(det_path), "bbox")
    ev.params.iouThrs = np.linspace(0.05, 0.5, 10)
    ev.evaluate()
    ev.accumulate()


def ap(t=None, area=0):
    p = ev.eval["precision"][:, :, 0, area, 2]
    if t is not None:
        p = p[t]
    p = p[p > -1]
    return float(np.mean(p)) if p.size else -1.0


ref = {"ap_mean": ap(), "ap_at_050": ap(t=9), "ap_small": ap(area=1), "ap_medium": ap(area=2),
       "ap_per_threshold": [ap(t=i) for i in range(10)],
       "n_gt": len(anns), "n_dets": len(dets)}
with open(os.path.join(HERE, "ap_random_reference.json"), "w") as f:
    json.dump(ref, f, indent=1)
print(json.dumps(ref, indent=1))
