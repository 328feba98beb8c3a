"""Deformable transformer encoder/decoder and the end-to-end detector."""

from __future__ import annotations

import contextlib
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from .attention import AttnConfig, DeformAttnParams, MacCounter, init_deform_params
from .boxes import decode_box, initial_box, propose_first_stage, refine_box, top_k_proposals
from .pyramid import Backbone, level_shapes, normalized_grid, sine_encode, sine_positional_embedding
from .torch_ops import ms_deform_sample

MODES = ("plain", "refine", "two_stage")
ATTENTIONS = ("deformable", "dense")


@dataclass
class ModelConfig:
    d_model: int = 64
    n_heads: int = 8
    n_points: int = 4
    n_levels: int = 4
    enc_layers: int = 2
    dec_layers: int = 2
    ffn_dim: int = 256
    num_queries: int = 30
    num_classes: int = 3
    image_size: int = 64
    mode: str = "plain"
    attention: str = "deformable"
    share_heads: bool | None = None  # None: shared in plain mode only
    init_box_size: float = 0.1
    base_scale: float = 0.05

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.attention not in ATTENTIONS:
            raise ValueError(f"attention must be one of {ATTENTIONS}, got {self.attention!r}")
        if self.attention == "dense" and self.mode != "plain":
            raise ValueError("the dense-attention ablation only supports plain mode")
        if not 1 <= self.enc_layers <= 6 or not 1 <= self.dec_layers <= 6:
            raise ValueError("encoder/decoder depth must be in 1..6")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.mode == "two_stage" and self.num_queries > sum(h * w for h, w in self.shapes):
            raise ValueError("two-stage mode needs at least num_queries encoder pixels")

    @property
    def attn(self) -> AttnConfig:
        return AttnConfig(self.n_heads, self.d_model, self.n_points, self.n_levels)

    @property
    def shapes(self):
        return level_shapes(self.image_size, self.image_size, self.n_levels)

    @property
    def heads_shared(self) -> bool:
        return self.mode == "plain" if self.share_heads is None else self.share_heads


def _tally(module, term, n):
    if module.counter is not None:
        module.counter.add(term, n)


class DenseAttention(nn.Module):
    """Multi-head attention over every key (query/key/value/output projections)."""

    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.d_model, self.n_heads = d_model, n_heads
        self.q_proj = nn.Linear(d_model, d_model)
        self.k_proj = nn.Linear(d_model, d_model)
        self.v_proj = nn.Linear(d_model, d_model)
        self.out_proj = nn.Linear(d_model, d_model)
        self.counter = None

    def forward(self, query, key, value):
        b, nq, c = query.shape
        nk = key.shape[1]
        m, cv = self.n_heads, c // self.n_heads
        q = self.q_proj(query).view(b, nq, m, cv).transpose(1, 2)
        k = self.k_proj(key).view(b, nk, m, cv).transpose(1, 2)
        v = self.v_proj(value).view(b, nk, m, cv).transpose(1, 2)
        attn = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(cv), dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, nq, c)
        if self.counter is not None:
            _tally(self, "query_proj", b * nq * c * c)
            _tally(self, "key_proj", b * nk * c * c)
            _tally(self, "value_proj", b * nk * c * c)
            _tally(self, "query_key", b * nq * nk * c)
            _tally(self, "weighted_sum", b * nq * nk * c)
            _tally(self, "output_proj", b * nq * c * c)
        return self.out_proj(out)


class MSDeformAttn(nn.Module):
    """Multi-scale deformable attention; sampling runs through the numpy kernel."""

    def __init__(self, config: AttnConfig, refinement_mode: bool = False):
        super().__init__()
        self.config = config
        m, c, lv, k = config.n_heads, config.d_model, config.n_levels, config.n_points
        self.sampling_offsets = nn.Linear(c, m * lv * k * 2)
        self.attention_weights = nn.Linear(c, m * lv * k)
        self.value_proj = nn.Linear(c, c)
        self.output_proj = nn.Linear(c, c)
        self.counter = None
        self.reset_parameters(refinement_mode)

    def reset_parameters(self, refinement_mode: bool = False):
        init = init_deform_params(self.config, refinement_mode)
        with torch.no_grad():
            self.sampling_offsets.weight.copy_(torch.from_numpy(init.offset_weight))
            self.sampling_offsets.bias.copy_(torch.from_numpy(init.offset_bias))
            self.attention_weights.weight.copy_(torch.from_numpy(init.attn_weight))
            self.attention_weights.bias.copy_(torch.from_numpy(init.attn_bias))
        nn.init.xavier_uniform_(self.value_proj.weight)
        nn.init.zeros_(self.value_proj.bias)
        nn.init.xavier_uniform_(self.output_proj.weight)
        nn.init.zeros_(self.output_proj.bias)

    def to_params(self) -> DeformAttnParams:
        def a(t):
            return t.detach().cpu().double().numpy().copy()

        return DeformAttnParams(
            value_weight=a(self.value_proj.weight),
            value_bias=a(self.value_proj.bias),
            output_weight=a(self.output_proj.weight),
            output_bias=a(self.output_proj.bias),
            offset_weight=a(self.sampling_offsets.weight),
            offset_bias=a(self.sampling_offsets.bias),
            attn_weight=a(self.attention_weights.weight),
            attn_bias=a(self.attention_weights.bias),
        )

    def forward(self, query, reference, value_input, shapes):
        """query ``[B, Nq, C]``; reference ``[B, Nq, 2]`` points or ``[B, Nq, 4]`` boxes; value_input ``[B, S, C]``."""
        cfg = self.config
        b, nq, c = query.shape
        m, lv, k, cv = cfg.n_heads, cfg.n_levels, cfg.n_points, cfg.head_dim
        value = self.value_proj(value_input).view(b, -1, m, cv)
        offsets = self.sampling_offsets(query).view(b, nq, m, lv, k, 2)
        weights = torch.softmax(self.attention_weights(query).view(b, nq, m, lv * k), -1).view(b, nq, m, lv, k)
        scale = query.new_tensor([(w - 1, h - 1) for h, w in shapes]).view(1, 1, 1, lv, 1, 2)
        ref = reference[:, :, None, None, None, :]
        if reference.shape[-1] == 4:
            loc = (ref[..., :2] + offsets * ref[..., 2:]) * scale
        else:
            loc = ref * scale + offsets
        heads = ms_deform_sample(value, shapes, loc, weights)
        if self.counter is not None:
            n_pix = value_input.shape[1]
            _tally(self, "value_proj", b * n_pix * c * c)
            _tally(self, "sampling_head", b * nq * c * 3 * m * lv * k)
            _tally(self, "sampling", b * nq * m * lv * k * cv * 5)
            _tally(self, "output_proj", b * nq * c * c)
        return self.output_proj(heads.reshape(b, nq, c))


class FFN(nn.Module):
    def __init__(self, d_model, hidden):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(d_model, hidden), nn.ReLU(), nn.Linear(hidden, d_model))

    def forward(self, x):
        return self.net(x)


class MLP(nn.Module):
    def __init__(self, d_in, hidden, d_out, n_layers=3):
        super().__init__()
        dims = [d_in] + [hidden] * (n_layers - 1)
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims, dims[1:] + [d_out]))

    def forward(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = torch.relu(x)
        return x


class EncoderLayer(nn.Module):
    """Self-attention over all pyramid pixels (each pixel's reference is itself) + FFN, post-norm."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.deformable = cfg.attention == "deformable"
        self.attn = MSDeformAttn(cfg.attn) if self.deformable else DenseAttention(cfg.d_model, cfg.n_heads)
        self.norm1 = nn.LayerNorm(cfg.d_model)
        self.ffn = FFN(cfg.d_model, cfg.ffn_dim)
        self.norm2 = nn.LayerNorm(cfg.d_model)

    def forward(self, src, pos, reference, shapes):
        q = src + pos
        if self.deformable:
            attended = self.attn(q, reference, src, shapes)
        else:
            attended = self.attn(q, q, src)
        src = self.norm1(src + attended)
        return self.norm2(src + self.ffn(src))


class DecoderLayer(nn.Module):
    """Dense self-attention among queries, cross-attention into encoder memory, FFN; post-norm."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.deformable = cfg.attention == "deformable"
        self.self_attn = DenseAttention(cfg.d_model, cfg.n_heads)
        self.norm1 = nn.LayerNorm(cfg.d_model)
        if self.deformable:
            self.cross_attn = MSDeformAttn(cfg.attn, refinement_mode=cfg.mode != "plain")
        else:
            self.cross_attn = DenseAttention(cfg.d_model, cfg.n_heads)
        self.norm2 = nn.LayerNorm(cfg.d_model)
        self.ffn = FFN(cfg.d_model, cfg.ffn_dim)
        self.norm3 = nn.LayerNorm(cfg.d_model)

    def forward(self, tgt, query_pos, reference, memory, memory_pos, shapes):
        q = tgt + query_pos
        tgt = self.norm1(tgt + self.self_attn(q, q, tgt))
        q = tgt + query_pos
        if self.deformable:
            attended = self.cross_attn(q, reference, memory, shapes)
        else:
            attended = self.cross_attn(q, memory + memory_pos, memory)
        tgt = self.norm2(tgt + attended)
        return self.norm3(tgt + self.ffn(tgt))


def predict_reference_points(query_pos, proj: nn.Linear):
    """Normalized 2-d reference points: ``sigmoid(Linear(query_pos))``."""
    return torch.sigmoid(proj(query_pos))


class Detector(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.d_model
        self.backbone = Backbone(c, cfg.n_levels)
        self.level_embed = nn.Parameter(torch.randn(cfg.n_levels, c) * 0.02)
        self.encoder = nn.ModuleList(EncoderLayer(cfg) for _ in range(cfg.enc_layers))
        self.decoder = nn.ModuleList(DecoderLayer(cfg) for _ in range(cfg.dec_layers))

        n_heads = 1 if cfg.heads_shared else cfg.dec_layers
        self.class_heads = nn.ModuleList(nn.Linear(c, cfg.num_classes) for _ in range(n_heads))
        self.bbox_heads = nn.ModuleList(MLP(c, c, 4) for _ in range(n_heads))
        prior_bias = -math.log((1 - 0.01) / 0.01)
        for head in self.class_heads:
            nn.init.constant_(head.bias, prior_bias)
        for head in self.bbox_heads:
            nn.init.zeros_(head.layers[-1].weight)
            nn.init.zeros_(head.layers[-1].bias)

        if cfg.mode == "two_stage":
            self.enc_output = nn.Linear(c, c)
            self.enc_output_norm = nn.LayerNorm(c)
            self.enc_class_head = nn.Linear(c, 1)
            nn.init.constant_(self.enc_class_head.bias, prior_bias)
            self.enc_bbox_head = MLP(c, c, 4)
            nn.init.zeros_(self.enc_bbox_head.layers[-1].weight)
            nn.init.zeros_(self.enc_bbox_head.layers[-1].bias)
            self.pos_trans = nn.Linear(2 * c, 2 * c)
            self.pos_trans_norm = nn.LayerNorm(2 * c)
        else:
            self.query_pos = nn.Parameter(torch.randn(cfg.num_queries, c))
            if cfg.attention == "deformable":
                self.reference_head = nn.Linear(c, 2)

        shapes = cfg.shapes
        pos = np.concatenate([sine_positional_embedding(h, w, c).reshape(c, -1).T for h, w in shapes])
        grid = np.concatenate([normalized_grid(s) for s in shapes])
        levels = np.concatenate([np.full(h * w, lvl + 1) for lvl, (h, w) in enumerate(shapes)])
        self.register_buffer("pixel_pos", torch.as_tensor(pos, dtype=torch.float32), persistent=False)
        self.register_buffer("pixel_grid", torch.as_tensor(grid, dtype=torch.float32), persistent=False)
        self.register_buffer("pixel_level", torch.as_tensor(levels), persistent=False)

    def head(self, layer: int):
        i = 0 if self.cfg.heads_shared else layer
        return self.class_heads[i], self.bbox_heads[i]

    def attention_modules(self):
        return [mod for mod in self.modules() if isinstance(mod, (MSDeformAttn, DenseAttention))]

    def encode(self, images):
        pyramid = self.backbone(images)
        shapes = pyramid.shapes
        if shapes != self.cfg.shapes:
            raise ValueError(f"pyramid shapes {shapes} differ from configured {self.cfg.shapes}")
        src = torch.cat([lvl.flatten(2).transpose(1, 2) for lvl in pyramid.levels], dim=1)
        pos = self.pixel_pos.to(src.dtype)
        pos = pos + torch.repeat_interleave(self.level_embed, torch.tensor([h * w for h, w in shapes]), dim=0)
        ref = self.pixel_grid.to(src.dtype)[None].expand(src.shape[0], -1, -1)
        for layer in self.encoder:
            src = layer(src, pos, ref, shapes)
        return src, pos, shapes

    def _proposals(self, memory):
        out = self.enc_output_norm(self.enc_output(memory))
        logits = self.enc_class_head(out)
        boxes = propose_first_stage(
            self.enc_bbox_head(out), self.pixel_grid.to(memory.dtype), self.pixel_level, self.cfg.base_scale
        )
        return logits, boxes

    def _proposal_queries(self, boxes):
        c = self.cfg.d_model
        feats = sine_encode(boxes.detach().cpu().numpy(), c // 2)
        emb = self.pos_trans_norm(self.pos_trans(torch.as_tensor(feats, dtype=boxes.dtype)))
        return emb[..., :c], emb[..., c:]

    def forward(self, images):
        cfg = self.cfg
        memory, memory_pos, shapes = self.encode(images)
        b = memory.shape[0]
        result = {"layers": [], "references": []}

        if cfg.mode == "two_stage":
            enc_logits, enc_boxes = self._proposals(memory)
            result["encoder"] = {"logits": enc_logits, "boxes": enc_boxes}
            idx = torch.as_tensor(top_k_proposals(enc_logits[..., 0], cfg.num_queries))
            box = torch.gather(enc_boxes, 1, idx[..., None].expand(-1, -1, 4)).detach()
            query_pos, tgt = self._proposal_queries(box)
        else:
            query_pos = self.query_pos[None].expand(b, -1, -1)
            tgt = torch.zeros_like(query_pos)
            if cfg.attention == "deformable":
                point = predict_reference_points(query_pos, self.reference_head)
                box = initial_box(point, cfg.init_box_size) if cfg.mode == "refine" else None

        for d, layer in enumerate(self.decoder):
            cls_head, bbox_head = self.head(d)
            if cfg.attention == "dense":
                result["references"].append(None)
                tgt = layer(tgt, query_pos, None, memory, memory_pos, shapes)
                boxes = torch.sigmoid(bbox_head(tgt))
            elif cfg.mode == "plain":
                result["references"].append(point)
                tgt = layer(tgt, query_pos, point, memory, memory_pos, shapes)
                boxes = decode_box(point, bbox_head(tgt))
            else:
                reference = box if d == 0 else box.detach()
                result["references"].append(reference)
                tgt = layer(tgt, query_pos, reference, memory, memory_pos, shapes)
                box = refine_box(reference, bbox_head(tgt))
                boxes = box
            result["layers"].append({"logits": cls_head(tgt), "boxes": boxes})
        return result


def run_model(images, model: Detector):
    """Per-decoder-layer ``{"logits", "boxes"}`` predictions for a batch of images."""
    if images.dim() == 3:
        images = images[None]
    return model(images)["layers"]


@contextlib.contextmanager
def count_macs(model: Detector):
    """Tally multiply-accumulates of every attention module while the block runs."""
    counter = MacCounter()
    modules = model.attention_modules()
    for mod in modules:
        mod.counter = counter
    try:
        yield counter
    finally:
        for mod in modules:
            mod.counter = None


def config_dict(cfg: ModelConfig) -> dict:
    return asdict(cfg)
