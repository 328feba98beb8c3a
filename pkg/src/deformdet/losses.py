"""Set-prediction losses: focal classification, L1 and GIoU box terms under Hungarian matching."""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .boxes import box_cxcywh_to_xyxy, generalized_box_iou
from .matching import MatchResult, hungarian_match


@dataclass(frozen=True)
class LossWeights:
    cls: float = 2.0
    l1: float = 5.0
    giou: float = 2.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0


def sigmoid_focal_loss(logits, targets, alpha: float = 0.25, gamma: float = 2.0):
    """Elementwise focal loss on independent sigmoid outputs."""
    prob = torch.sigmoid(logits)
    ce = torch.nn.functional.binary_cross_entropy_with_logits(logits, targets, reduction="none")
    p_t = prob * targets + (1 - prob) * (1 - targets)
    loss = ce * (1 - p_t) ** gamma
    if alpha >= 0:
        loss = (alpha * targets + (1 - alpha) * (1 - targets)) * loss
    return loss


def match_cost(logits, boxes, tgt_labels, tgt_boxes, weights: LossWeights = LossWeights()):
    """``[N, G]`` matching cost mirroring the loss terms (focal-style class + L1 + GIoU)."""
    prob = torch.sigmoid(logits)
    a, g = weights.focal_alpha, weights.focal_gamma
    neg = (1 - a) * prob**g * -torch.log(1 - prob + 1e-8)
    pos = a * (1 - prob) ** g * -torch.log(prob + 1e-8)
    cost_cls = pos[:, tgt_labels] - neg[:, tgt_labels]
    cost_l1 = torch.cdist(boxes, tgt_boxes, p=1)
    cost_giou = -generalized_box_iou(box_cxcywh_to_xyxy(boxes), box_cxcywh_to_xyxy(tgt_boxes))
    return weights.cls * cost_cls + weights.l1 * cost_l1 + weights.giou * cost_giou


def match_batch(logits, boxes, targets, weights: LossWeights = LossWeights()) -> list:
    """One :class:`MatchResult` per image for ``[B, N, K]`` logits and ``[B, N, 4]`` boxes."""
    results = []
    with torch.no_grad():
        for b, tgt in enumerate(targets):
            if len(tgt["labels"]) == 0:
                results.append(MatchResult(pairs=[], total_cost=0.0))
                continue
            cost = match_cost(logits[b], boxes[b], tgt["labels"], tgt["boxes"].to(boxes.dtype), weights)
            results.append(hungarian_match(cost.cpu().numpy()))
    return results


def layer_loss(logits, boxes, targets, weights: LossWeights = LossWeights(), matches=None, num_boxes=None):
    """Loss terms for one set of predictions; returns ``(dict of terms, matches)``."""
    if matches is None:
        matches = match_batch(logits, boxes, targets, weights)
    if num_boxes is None:
        num_boxes = max(sum(len(t["labels"]) for t in targets), 1)

    onehot = torch.zeros_like(logits)
    src_boxes, tgt_boxes = [], []
    for b, (tgt, match) in enumerate(zip(targets, matches)):
        if not match.pairs:
            continue
        qi, ti = match.query_indices, match.target_indices
        onehot[b, qi, tgt["labels"][ti]] = 1.0
        src_boxes.append(boxes[b, qi])
        tgt_boxes.append(tgt["boxes"][ti].to(boxes.dtype))

    loss_cls = sigmoid_focal_loss(logits, onehot, weights.focal_alpha, weights.focal_gamma).sum() / num_boxes
    if src_boxes:
        src = torch.cat(src_boxes)
        tgt = torch.cat(tgt_boxes)
        loss_l1 = (src - tgt).abs().sum() / num_boxes
        giou = torch.diagonal(generalized_box_iou(box_cxcywh_to_xyxy(src), box_cxcywh_to_xyxy(tgt)))
        loss_giou = (1 - giou).sum() / num_boxes
    else:
        loss_l1 = loss_giou = boxes.sum() * 0.0
    return {"cls": loss_cls, "l1": loss_l1, "giou": loss_giou}, matches


def set_loss(layer_outputs, targets, weights: LossWeights = LossWeights(), encoder_output=None):
    """Weighted Hungarian loss summed over every decoder layer's predictions.

    ``layer_outputs`` is a list of ``{"logits": [B, N, K], "boxes": [B, N, 4]}``.
    ``encoder_output`` (two-stage) is supervised class-agnostically.  Returns
    ``(total, breakdown)`` where ``breakdown`` holds the unweighted terms
    summed over layers.
    """
    num_boxes = max(sum(len(t["labels"]) for t in targets), 1)
    terms = {"cls": 0.0, "l1": 0.0, "giou": 0.0}
    total = 0.0
    groups = [(out, targets) for out in layer_outputs]
    if encoder_output is not None:
        binary = [{"labels": torch.zeros_like(t["labels"]), "boxes": t["boxes"]} for t in targets]
        groups.append((encoder_output, binary))
    for out, tgts in groups:
        parts, _ = layer_loss(out["logits"], out["boxes"], tgts, weights, num_boxes=num_boxes)
        total = total + weights.cls * parts["cls"] + weights.l1 * parts["l1"] + weights.giou * parts["giou"]
        for key in terms:
            terms[key] = terms[key] + parts[key]
    breakdown = {k: float(torch.as_tensor(v).detach()) for k, v in terms.items()}
    breakdown["total"] = float(total.detach())
    return total, breakdown
