"""Box parameterizations, iterative refinement and two-stage proposals.

Boxes are normalized ``(cx, cy, w, h)``.  The differentiable functions take
torch tensors so they can sit inside the detector; arrays are accepted and
converted.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .attention import modulate_offsets  # noqa: F401  (re-exported box-size modulation)
from .kernels import DEFAULT_EPS

BASE_OBJECT_SCALE = 0.05
INITIAL_BOX_SIZE = 0.1


def _t(x):
    return x if torch.is_tensor(x) else torch.as_tensor(np.asarray(x, dtype=np.float64))


def inverse_sigmoid(p, eps: float = DEFAULT_EPS):
    p = _t(p).clamp(eps, 1.0 - eps)
    return torch.log(p) - torch.log1p(-p)


def decode_box(reference, raw):
    """Box from head outputs relative to a reference point.

    ``(sig(bx + isig(px)), sig(by + isig(py)), sig(bw), sig(bh))``
    """
    reference, raw = _t(reference), _t(raw)
    center = torch.sigmoid(raw[..., :2] + inverse_sigmoid(reference[..., :2]))
    size = torch.sigmoid(raw[..., 2:4])
    return torch.cat([center, size], dim=-1)


def initial_box(reference, size: float = INITIAL_BOX_SIZE):
    """Starting box for refinement: reference center with ``w = h = size``."""
    reference = _t(reference)
    wh = torch.full_like(reference[..., :2], size)
    return torch.cat([reference[..., :2], wh], dim=-1)


def refine_box(prev, deltas):
    """``sig(delta + isig(prev))`` per coordinate; no gradient reaches ``prev``."""
    prev, deltas = _t(prev), _t(deltas)
    return torch.sigmoid(deltas + inverse_sigmoid(prev.detach()))


def box_cxcywh_to_xyxy(b):
    cx, cy, w, h = b.unbind(-1)
    return torch.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], dim=-1)


def box_xyxy_to_cxcywh(b):
    x0, y0, x1, y1 = b.unbind(-1)
    return torch.stack([(x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0], dim=-1)


def box_area(b):
    return (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])


def box_iou(a, b):
    """Pairwise IoU and union of ``xyxy`` boxes, ``[N, M]`` each."""
    area_a, area_b = box_area(a), box_area(b)
    lt = torch.max(a[:, None, :2], b[None, :, :2])
    rb = torch.min(a[:, None, 2:], b[None, :, 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a[:, None] + area_b[None, :] - inter
    return inter / union, union


def generalized_box_iou(a, b):
    """Pairwise GIoU of ``xyxy`` boxes; lies in ``(-1, 1]``."""
    iou, union = box_iou(a, b)
    lt = torch.min(a[:, None, :2], b[None, :, :2])
    rb = torch.max(a[:, None, 2:], b[None, :, 2:])
    wh = (rb - lt).clamp(min=0)
    hull = wh[..., 0] * wh[..., 1]
    return iou - (hull - union) / hull


@dataclass
class Proposal:
    box: tuple
    score: float
    level: int  # 1-based pyramid level
    center: tuple  # normalized pixel coords


def proposal_priors(grid, level_ids, base_scale: float = BASE_OBJECT_SCALE):
    """Per-pixel prior boxes ``(px, py, 2^l s, 2^l s)`` with 1-based levels ``l``."""
    grid = _t(grid)
    size = base_scale * torch.pow(2.0, _t(level_ids).to(grid.dtype))
    return torch.cat([grid, size[:, None], size[:, None]], dim=-1)


def propose_first_stage(deltas, grid, level_ids, base_scale: float = BASE_OBJECT_SCALE):
    """Decode per-pixel regression outputs ``[..., S, 4]`` around their prior boxes."""
    priors = proposal_priors(grid, level_ids, base_scale).to(_t(deltas).dtype)
    return torch.sigmoid(_t(deltas) + inverse_sigmoid(priors))


def top_k_proposals(scores, k: int) -> np.ndarray:
    """Indices of the ``k`` best scores, descending, ties to the lower index."""
    s = scores.detach().cpu().numpy() if torch.is_tensor(scores) else np.asarray(scores)
    if k > s.shape[-1]:
        raise ValueError(f"k={k} exceeds the {s.shape[-1]} available proposals")
    order = np.argsort(-s, axis=-1, kind="stable")
    return order[..., :k]


def as_proposals(boxes, scores, grid, level_ids) -> list:
    """Per-pixel :class:`Proposal` records for one image."""
    boxes = _t(boxes).detach().cpu().numpy()
    scores = _t(scores).detach().cpu().numpy()
    grid = np.asarray(grid)
    return [
        Proposal(tuple(map(float, b)), float(s), int(l), tuple(map(float, g)))
        for b, s, g, l in zip(boxes, scores, grid, np.asarray(level_ids))
    ]
