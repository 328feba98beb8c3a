"""Average precision over interchange records ``{image_id, class, cx, cy, w, h, score?}``."""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

IOU_THRESHOLDS = tuple(np.round(np.arange(0.5, 0.951, 0.05), 2))
SMALL_AREA = 0.01  # fraction of the image
LARGE_AREA = 0.10


@dataclass(frozen=True)
class APSummary:
    ap: float  # mean over IOU_THRESHOLDS
    ap50: float
    ap75: float
    ap_s: float
    ap_m: float
    ap_l: float

    def as_dict(self):
        return asdict(self)


def _xyxy(r):
    return np.array([r["cx"] - r["w"] / 2, r["cy"] - r["h"] / 2, r["cx"] + r["w"] / 2, r["cy"] + r["h"] / 2])


def iou_matrix(a, b) -> np.ndarray:
    """IoU between ``[n, 4]`` and ``[m, 4]`` xyxy arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    inter = np.prod(np.clip(rb - lt, 0, None), axis=-1)
    area_a = np.prod(a[:, 2:] - a[:, :2], axis=-1)
    area_b = np.prod(b[:, 2:] - b[:, :2], axis=-1)
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)


def area_bucket(w, h) -> str:
    area = w * h
    if area < SMALL_AREA:
        return "small"
    return "large" if area > LARGE_AREA else "medium"


def average_precision(recall, precision) -> float:
    """Exact area under the monotone precision envelope."""
    r = np.concatenate([[0.0], recall, [1.0]])
    p = np.concatenate([[0.0], precision, [0.0]])
    p = np.maximum.accumulate(p[::-1])[::-1]
    steps = np.flatnonzero(r[1:] != r[:-1])
    return float(np.sum((r[steps + 1] - r[steps]) * p[steps + 1]))


def _class_ap(dets, gts, threshold, bucket=None) -> float:
    """AP for one class.  ``dets``/``gts`` are lists of records; NaN if there is nothing to find."""
    gt_by_image = defaultdict(list)
    for g in gts:
        gt_by_image[g["image_id"]].append(g)
    ignore = {img: np.array([bucket is not None and area_bucket(g["w"], g["h"]) != bucket for g in gs])
              for img, gs in gt_by_image.items()}
    boxes = {img: np.stack([_xyxy(g) for g in gs]) for img, gs in gt_by_image.items()}
    n_pos = sum(int((~ig).sum()) for ig in ignore.values())
    if n_pos == 0:
        return float("nan")
    # stable sort: equal scores keep input order
    order = np.argsort([-d.get("score", 1.0) for d in dets], kind="stable")
    taken = {img: np.zeros(len(gs), dtype=bool) for img, gs in gt_by_image.items()}
    tp, fp = [], []
    for i in order:
        d = dets[i]
        img = d["image_id"]
        best, best_iou = -1, threshold
        if img in boxes:
            ious = iou_matrix(_xyxy(d)[None], boxes[img])[0]
            # prefer unignored ground truths, as the COCO protocol does
            for prefer_ignored in (False, True):
                for j in np.argsort(-ious, kind="stable"):
                    if ious[j] < best_iou:
                        break
                    if not taken[img][j] and ignore[img][j] == prefer_ignored:
                        best = j
                        break
                if best >= 0:
                    break
        if best >= 0:
            taken[img][best] = True
            if ignore[img][best]:
                continue
            tp.append(1)
            fp.append(0)
        else:
            if bucket is not None and area_bucket(d["w"], d["h"]) != bucket:
                continue
            tp.append(0)
            fp.append(1)
    if not tp:
        return 0.0
    tp = np.cumsum(tp)
    fp = np.cumsum(fp)
    return average_precision(tp / n_pos, tp / (tp + fp))


def _mean_ap(dets_by_class, gts_by_class, threshold, bucket=None) -> float:
    aps = [_class_ap(dets_by_class.get(c, []), gts, threshold, bucket) for c, gts in gts_by_class.items()]
    aps = [a for a in aps if not np.isnan(a)]
    return float(np.mean(aps)) if aps else float("nan")


def compute_ap(detections, ground_truths, iou_thresholds=IOU_THRESHOLDS) -> APSummary:
    """Area-under-PR AP averaged over classes present in the ground truth.

    ``ap`` averages over ``iou_thresholds``; the size-bucketed values use the
    same thresholds with area cut-offs relative to the image.  A value is NaN
    when no ground truth falls in its scope; with no ground truth at all every
    value is NaN.
    """
    dets_by_class, gts_by_class = defaultdict(list), defaultdict(list)
    for d in detections:
        dets_by_class[int(d["class"])].append(d)
    for g in ground_truths:
        gts_by_class[int(g["class"])].append(g)

    def over(bucket):
        vals = [_mean_ap(dets_by_class, gts_by_class, t, bucket) for t in iou_thresholds]
        vals = [v for v in vals if not np.isnan(v)]
        return float(np.mean(vals)) if vals else float("nan")

    return APSummary(
        ap=over(None),
        ap50=_mean_ap(dets_by_class, gts_by_class, 0.5),
        ap75=_mean_ap(dets_by_class, gts_by_class, 0.75),
        ap_s=over("small"),
        ap_m=over("medium"),
        ap_l=over("large"),
    )


def detections_from_outputs(logits, boxes, image_ids=None, top_k: int = 100) -> list:
    """Turn ``[B, N, K]`` logits and ``[B, N, 4]`` boxes into scored records.

    Every (query, class) pair is a candidate scored by its sigmoid; the best
    ``top_k`` per image are kept (no suppression step).
    """
    logits = torch.as_tensor(logits).detach().cpu().double()
    boxes = torch.as_tensor(boxes).detach().cpu().double()
    b, n, k = logits.shape
    scores = torch.sigmoid(logits).reshape(b, n * k).numpy()
    boxes = boxes.numpy()
    ids = range(b) if image_ids is None else image_ids
    out = []
    for bi, img in enumerate(ids):
        order = np.argsort(-scores[bi], kind="stable")[:top_k]
        for flat in order:
            q, c = divmod(int(flat), k)
            cx, cy, w, h = boxes[bi, q]
            out.append({"image_id": int(img), "class": c, "cx": float(cx), "cy": float(cy),
                        "w": float(w), "h": float(h), "score": float(scores[bi, flat])})
    return out


def write_jsonl(records, path) -> Path:
    path = Path(path)
    with path.open("w") as fh:
        for r in records:
            fh.write(json.dumps(r) + "\n")
    return path


def read_jsonl(path) -> list:
    with Path(path).open() as fh:
        return [json.loads(line) for line in fh if line.strip()]
