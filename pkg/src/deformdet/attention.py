"""Dense multi-head attention and (multi-scale) deformable attention in numpy.

Shapes follow a batch-first layout throughout:

* queries ``[B, Nq, C]`` (a leading batch axis may be omitted)
* pyramid levels ``[B, C, H_l, W_l]``
* sampling offsets ``[B, Nq, M, L, K, 2]`` and weights ``[B, Nq, M, L, K]``

Head ``m`` uses rows ``m*Cv:(m+1)*Cv`` of the value/query/key projections and
columns ``m*Cv:(m+1)*Cv`` of the output projection.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field, fields, replace

import numpy as np
import scipy.sparse as sp

from .kernels import corner_weights, softmax, softmax_backward

# Direction of head m at initialization, as (x, y) multiples of the point index k.
INIT_DIRECTIONS = np.array(
    [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)], dtype=np.float64
)


@dataclass(frozen=True)
class AttnConfig:
    n_heads: int = 8
    d_model: int = 64
    n_points: int = 4
    n_levels: int = 4
    value_dim: int | None = None  # per-head value width; d_model // n_heads when None

    def __post_init__(self):
        if min(self.n_heads, self.d_model, self.n_points, self.n_levels) < 1:
            raise ValueError("all attention sizes must be >= 1")
        if self.value_dim is None and self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")

    @property
    def head_dim(self) -> int:
        return self.value_dim if self.value_dim is not None else self.d_model // self.n_heads


class MacCounter(Counter):
    """Multiply-accumulate tally keyed by cost term; ops add to it as they execute."""

    def add(self, term: str, n) -> None:
        self[term] += int(n)

    @property
    def total(self) -> int:
        return int(sum(self.values()))


def _tally(counter, term, n):
    if counter is not None:
        counter.add(term, n)


@dataclass
class DenseAttnParams:
    query_weight: np.ndarray  # stacked U_m, [C, C]
    key_weight: np.ndarray  # stacked V_m, [C, C]
    value_weight: np.ndarray  # stacked W'_m, [C, C]
    output_weight: np.ndarray  # [W_1 ... W_M], [C, C]
    query_bias: np.ndarray | None = None
    key_bias: np.ndarray | None = None
    value_bias: np.ndarray | None = None
    output_bias: np.ndarray | None = None

    @classmethod
    def random(cls, config: AttnConfig, rng: np.random.Generator, scale: float | None = None):
        c = config.d_model
        scale = 1.0 / np.sqrt(c) if scale is None else scale
        return cls(*(rng.normal(0.0, scale, (c, c)) for _ in range(4)))


@dataclass
class DeformAttnParams:
    value_weight: np.ndarray  # [M*Cv, C]
    value_bias: np.ndarray  # [M*Cv]
    output_weight: np.ndarray  # [C, M*Cv]
    output_bias: np.ndarray  # [C]
    offset_weight: np.ndarray  # [M*L*K*2, C]
    offset_bias: np.ndarray  # [M*L*K*2]
    attn_weight: np.ndarray  # [M*L*K, C]
    attn_bias: np.ndarray  # [M*L*K]

    def items(self):
        return [(f.name, getattr(self, f.name)) for f in fields(self)]

    def copy(self) -> "DeformAttnParams":
        return DeformAttnParams(**{k: np.array(v, copy=True) for k, v in self.items()})


@dataclass
class SamplingPlan:
    """Per-query sampling offsets and attention weights.

    With ``normalized=False`` offsets are in pixels of each level and are added
    after rescaling the reference point; with ``normalized=True`` they are in
    normalized image units and added before rescaling.
    """

    offsets: np.ndarray  # [B, Nq, M, L, K, 2]
    weights: np.ndarray  # [B, Nq, M, L, K]
    normalized: bool = False


@dataclass
class CostModel:
    flops_dense: int
    flops_deform: int
    breakdown: dict = field(default_factory=dict)


def _batched(a, ndim):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == ndim - 1:
        return a[None], True
    if a.ndim != ndim:
        raise ValueError(f"expected {ndim - 1}-d or {ndim}-d input, got shape {a.shape}")
    return a, False


def _levels_as_tokens(pyramid):
    """Flatten ``[B, C, H, W]`` levels into ``[B, H*W, C]`` token arrays."""
    levels = getattr(pyramid, "levels", pyramid)
    tokens, shapes = [], []
    for level in levels:
        data = getattr(level, "data", level)
        data = np.asarray(data, dtype=np.float64)
        if data.ndim == 3:
            data = data[None]
        b, c, h, w = data.shape
        tokens.append(data.reshape(b, c, h * w).transpose(0, 2, 1))
        shapes.append((h, w))
    return tokens, shapes


def level_scales(shapes) -> np.ndarray:
    """Per-level factors mapping normalized [0, 1] coords to pixel coords, ``[L, 2]`` as (x, y)."""
    return np.array([(w - 1, h - 1) for h, w in shapes], dtype=np.float64)


# ---------------------------------------------------------------------------
# dense attention
# ---------------------------------------------------------------------------


def multi_head_attn(
    queries,
    keys,
    params: DenseAttnParams,
    config: AttnConfig,
    *,
    values=None,
    counter: MacCounter | None = None,
    return_weights: bool = False,
    chunk: int = 1024,
):
    """Transformer multi-head attention over all keys.

    ``values`` defaults to ``keys``.  Returns ``[B, Nq, C]`` (and the ``[B, M,
    Nq, Nk]`` attention weights when ``return_weights``).
    """
    z, squeeze = _batched(queries, 3)
    x, _ = _batched(keys, 3)
    v_in = x if values is None else _batched(values, 3)[0]
    b, nq, c = z.shape
    nk = x.shape[1]
    if c != config.d_model or x.shape[2] != c or v_in.shape[1] != nk:
        raise ValueError(f"shape mismatch: queries {z.shape}, keys {x.shape}, values {v_in.shape}")
    m, cv = config.n_heads, config.head_dim

    def proj(a, w, bias):
        out = a @ w.T
        return out if bias is None else out + bias

    q = proj(z, params.query_weight, params.query_bias).reshape(b, nq, m, cv)
    k = proj(x, params.key_weight, params.key_bias).reshape(b, nk, m, cv)
    v = proj(v_in, params.value_weight, params.value_bias).reshape(b, nk, m, cv)
    _tally(counter, "query_proj", b * nq * c * c)
    _tally(counter, "key_proj", b * nk * c * c)
    _tally(counter, "value_proj", b * nk * c * c)

    heads = np.empty((b, nq, m, cv))
    weights = np.empty((b, m, nq, nk)) if return_weights else None
    for start in range(0, nq, chunk):
        sl = slice(start, start + chunk)
        logits = np.einsum("bqmv,bkmv->bmqk", q[:, sl], k) / np.sqrt(cv)
        a = softmax(logits, axis=-1)
        heads[:, sl] = np.einsum("bmqk,bkmv->bqmv", a, v)
        if return_weights:
            weights[:, :, sl] = a
    _tally(counter, "query_key", b * nq * nk * c)
    _tally(counter, "weighted_sum", b * nq * nk * c)

    out = proj(heads.reshape(b, nq, c), params.output_weight, params.output_bias)
    _tally(counter, "output_proj", b * nq * c * c)
    if squeeze:
        out = out[0]
        weights = None if weights is None else weights[0]
    return (out, weights) if return_weights else out


# ---------------------------------------------------------------------------
# deformable attention
# ---------------------------------------------------------------------------


def init_deform_params(
    config: AttnConfig,
    refinement_mode: bool = False,
    rng: np.random.Generator | None = None,
) -> DeformAttnParams:
    """Initial parameters: zero sampling-head weights, uniform attention, directional offsets.

    Offset biases put point ``k`` of head ``m`` at ``k`` times the head's
    direction (8 directions, cycled for more than 8 heads), identically on
    every level.  In refinement mode they are further scaled by ``1/(2K)`` so
    that box-relative samples stay inside the box.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    m, c, k, lv = config.n_heads, config.d_model, config.n_points, config.n_levels
    mv = m * config.head_dim
    bound = np.sqrt(6.0 / (c + mv))

    directions = INIT_DIRECTIONS[np.arange(m) % len(INIT_DIRECTIONS)]
    ks = np.arange(1, k + 1, dtype=np.float64)
    grid = directions[:, None, None, :] * ks[None, None, :, None]  # [M, 1, K, 2]
    grid = np.broadcast_to(grid, (m, lv, k, 2))
    if refinement_mode:
        grid = grid / (2 * k)

    return DeformAttnParams(
        value_weight=rng.uniform(-bound, bound, (mv, c)),
        value_bias=np.zeros(mv),
        output_weight=rng.uniform(-bound, bound, (c, mv)),
        output_bias=np.zeros(c),
        offset_weight=np.zeros((m * lv * k * 2, c)),
        offset_bias=np.array(grid).reshape(-1),
        attn_weight=np.zeros((m * lv * k, c)),
        attn_bias=np.zeros(m * lv * k),
    )


def predict_sampling_params(query, params: DeformAttnParams, config: AttnConfig, counter=None) -> SamplingPlan:
    """Linear projection of each query to ``2MLK`` offsets and ``MLK`` softmaxed weights."""
    z, _ = _batched(query, 3)
    b, nq, c = z.shape
    m, lv, k = config.n_heads, config.n_levels, config.n_points
    offsets = (z @ params.offset_weight.T + params.offset_bias).reshape(b, nq, m, lv, k, 2)
    logits = (z @ params.attn_weight.T + params.attn_bias).reshape(b, nq, m, lv * k)
    weights = softmax(logits, axis=-1).reshape(b, nq, m, lv, k)
    _tally(counter, "sampling_head", b * nq * c * 3 * m * lv * k)
    return SamplingPlan(offsets=offsets, weights=weights)


def sampling_locations(plan: SamplingPlan, reference, shapes) -> np.ndarray:
    """Pixel-space sample positions ``[B, Nq, M, L, K, 2]`` for normalized ``[B, Nq, 2]`` references."""
    scale = level_scales(shapes)[None, None, None, :, None, :]
    ref = np.asarray(reference)[:, :, None, None, None, :2]
    if plan.normalized:
        return (ref + plan.offsets) * scale
    return ref * scale + plan.offsets


def modulate_offsets(plan: SamplingPlan, box) -> SamplingPlan:
    """Scale box-relative offsets by the previous box size: ``(dx * w, dy * h)``.

    The returned plan is in normalized image units; pair it with the box
    center as reference.
    """
    box = np.asarray(box, dtype=np.float64)
    if box.ndim == 2:
        box = box[None]
    wh = box[:, :, None, None, None, 2:4]
    return replace(plan, offsets=plan.offsets * wh, normalized=True)


class BilinearSampler:
    """Bilinear corner bookkeeping for every sample point across all levels.

    ``locations`` is ``[B, Nq, M, L, K, 2]`` in pixel coords of each level.
    Corner arrays have shape ``[B, Nq, M, L, K, 4]``; ``pixel`` indexes the
    level-concatenated ``S = sum_l H_l W_l`` pixels of one image.
    """

    def __init__(self, locations, shapes):
        self.shapes = [tuple(s) for s in shapes]
        self.n_pixels = sum(h * w for h, w in self.shapes)
        # per-level constants broadcast against the trailing [L, K, 2] axes
        starts = np.cumsum([0] + [h * w for h, w in self.shapes])[:-1].reshape(-1, 1, 1)
        hs = np.array([h for h, _ in self.shapes]).reshape(-1, 1, 1)
        ws = np.array([w for _, w in self.shapes]).reshape(-1, 1, 1)
        x0, y0, fx, fy = corner_weights(locations[..., 0], locations[..., 1])
        step = np.array([0, 1])
        xi, yi = x0[..., None] + step, y0[..., None] + step  # [..., 2]
        vx = (xi >= 0) & (xi < ws)
        vy = (yi >= 0) & (yi < hs)
        wx = np.stack([1.0 - fx, fx], axis=-1) * vx
        wy = np.stack([1.0 - fy, fy], axis=-1) * vy
        sign = np.array([-1.0, 1.0])
        # corner c = 2 * dy + dx
        self.weight = (wy[..., :, None] * wx[..., None, :]).reshape(*fx.shape, 4)
        self.dweight_dx = (wy[..., :, None] * (sign * vx)[..., None, :]).reshape(*fx.shape, 4)
        self.dweight_dy = ((sign * vy)[..., :, None] * wx[..., None, :]).reshape(*fx.shape, 4)
        rows = np.clip(yi, 0, hs - 1) * ws + starts
        cols = np.clip(xi, 0, ws - 1)
        self.pixel = (rows[..., :, None] + cols[..., None, :]).reshape(*fx.shape, 4)
        self._head_rows = None

    def head_rows(self):
        """Row of each corner in a ``[B*S*M, D]`` per-head value matrix."""
        if self._head_rows is None:
            b, _, m = self.pixel.shape[:3]
            bi = np.arange(b).reshape(b, 1, 1, 1, 1, 1)
            mi = np.arange(m).reshape(1, 1, m, 1, 1, 1)
            self._head_rows = (bi * self.n_pixels + self.pixel) * m + mi
        return self._head_rows

    def head_matrix(self, attn_weights):
        """Sparse ``[B*Nq*M, B*S*M]`` operator: attention-weighted bilinear sum per head."""
        b, nq, m, lv, k, _ = self.pixel.shape
        coeff = attn_weights[..., None] * self.weight
        per_row = lv * k * 4
        return sp.csr_matrix(
            (coeff.ravel(), self.head_rows().ravel(), np.arange(0, coeff.size + 1, per_row)),
            shape=(b * nq * m, b * self.n_pixels * m),
        )

    def point_matrix(self):
        """Sparse ``[B*Nq*M*L*K, B*S]`` operator returning each bilinear sample."""
        b = self.pixel.shape[0]
        bi = np.arange(b).reshape(b, 1, 1, 1, 1, 1)
        cols = bi * self.n_pixels + self.pixel
        return sp.csr_matrix(
            (self.weight.ravel(), cols.ravel(), np.arange(0, self.weight.size + 1, 4)),
            shape=(self.weight.size // 4, b * self.n_pixels),
        )


def sample_heads(value, shapes, locations, weights, counter=None):
    """Core sampler: ``sum_{l,k} A * value_l(loc)`` per head.

    ``value`` is the ``[B, S, M, Cv]`` projected value with levels concatenated
    along ``S``, ``locations`` ``[B, Nq, M, L, K, 2]`` pixel coords, ``weights``
    ``[B, Nq, M, L, K]``.  Returns ``(heads [B, Nq, M, Cv], saved)`` where
    ``saved`` feeds :func:`sample_heads_backward`.
    """
    b, nq, m, lv, k = weights.shape
    cv = value.shape[-1]
    sampler = BilinearSampler(locations, shapes)
    op = sampler.head_matrix(weights)
    heads = np.asarray(op @ value.reshape(-1, cv)).reshape(b, nq, m, cv)
    _tally(counter, "sampling", b * nq * m * lv * k * cv * 5)
    return heads, (sampler, op)


def sample_heads_backward(grad_heads, value, weights, saved):
    """Gradients of :func:`sample_heads` w.r.t. value, locations and weights."""
    sampler, op = saved
    b, nq, m, cv = grad_heads.shape
    g_flat = grad_heads.reshape(-1, cv)
    grad_value = np.asarray(op.T @ g_flat).reshape(value.shape)
    corners = np.take(value.reshape(-1, cv), sampler.head_rows(), axis=0)  # [B, Nq, M, L, K, 4, Cv]
    dots = np.einsum("bqmlkcv,bqmv->bqmlkc", corners, grad_heads)
    grad_w = np.sum(sampler.weight * dots, axis=-1)
    grad_loc = np.stack(
        [np.sum(sampler.dweight_dx * dots, axis=-1), np.sum(sampler.dweight_dy * dots, axis=-1)], axis=-1
    ) * weights[..., None]
    return grad_value, grad_loc, grad_w


@dataclass
class _DeformCache:
    query: np.ndarray
    reference: np.ndarray
    tokens: list
    shapes: list
    raw_offsets: np.ndarray
    plan: SamplingPlan
    locations: np.ndarray
    value: np.ndarray
    heads: np.ndarray
    saved: list
    params: DeformAttnParams
    config: AttnConfig
    squeeze: bool


def _choose_order(order, n_pixels, nq, config):
    if order == "auto":
        return "pre" if n_pixels <= nq * config.n_levels * config.n_points else "post"
    if order not in ("pre", "post"):
        raise ValueError(f"unknown execution order {order!r}")
    return order


def _project_values(tokens, params, config):
    b = tokens[0].shape[0]
    value = np.concatenate(tokens, axis=1) @ params.value_weight.T + params.value_bias
    return value.reshape(b, -1, config.n_heads, config.head_dim)


def _deform_forward(z, tokens, shapes, plan, locations, params, config, order, counter):
    b, nq, c = z.shape
    m, cv = config.n_heads, config.head_dim
    n_pixels = sum(h * w for h, w in shapes)
    order = _choose_order(order, n_pixels, nq, config)
    value = saved = None
    if order == "pre":
        # project every pixel once, then sample projected values
        value = _project_values(tokens, params, config)
        _tally(counter, "value_proj", b * n_pixels * c * m * cv)
        heads, saved = sample_heads(value, shapes, locations, plan.weights, counter)
    else:
        # sample raw features per head and point, then project each sample with its head's W'_m
        sampler = BilinearSampler(locations, shapes)
        raw = np.asarray(sampler.point_matrix() @ np.concatenate(tokens, axis=1).reshape(-1, c))
        raw = raw.reshape(*plan.weights.shape, c)  # [B, Nq, M, L, K, C]
        mass = sampler.weight.sum(axis=-1)
        proj = np.einsum("bqmlkc,mvc->bqmlkv", raw, params.value_weight.reshape(m, cv, c))
        proj += mass[..., None] * params.value_bias.reshape(1, 1, m, 1, 1, cv)
        heads = np.einsum("bqmlk,bqmlkv->bqmv", plan.weights, proj)
        n_samples = plan.weights.size
        _tally(counter, "sampling", n_samples * (4 * c + cv))
        _tally(counter, "value_proj", n_samples * cv * c)
    out = heads.reshape(b, nq, m * cv) @ params.output_weight.T + params.output_bias
    _tally(counter, "output_proj", b * nq * m * cv * c)
    return out, heads, value, saved


def ms_deform_attn(
    query,
    reference,
    pyramid,
    params: DeformAttnParams,
    config: AttnConfig,
    *,
    order: str = "pre",
    counter: MacCounter | None = None,
    return_cache: bool = False,
):
    """Multi-scale deformable attention.

    ``reference`` holds normalized ``(x, y)`` points ``[B, Nq, 2]``, or boxes
    ``(cx, cy, w, h)`` ``[B, Nq, 4]`` in which case offsets are box-relative
    and scaled by the box size.  ``order`` selects whether values are
    projected before sampling (``"pre"``), after (``"post"``), or whichever
    is cheaper (``"auto"``).
    """
    z, squeeze = _batched(query, 3)
    ref, _ = _batched(reference, 3)
    tokens, shapes = _levels_as_tokens(pyramid)
    if len(shapes) != config.n_levels:
        raise ValueError(f"pyramid has {len(shapes)} levels, config expects {config.n_levels}")
    if ref.shape[-1] not in (2, 4):
        raise ValueError(f"reference must have 2 or 4 coordinates, got {ref.shape[-1]}")

    raw_plan = predict_sampling_params(z, params, config, counter)
    plan = modulate_offsets(raw_plan, ref) if ref.shape[-1] == 4 else raw_plan
    locations = sampling_locations(plan, ref, shapes)
    out, heads, value, saved = _deform_forward(z, tokens, shapes, plan, locations, params, config, order, counter)
    if squeeze:
        out = out[0]
    if not return_cache:
        return out
    if value is None:
        # backward always runs on the pre-projected path; rebuild it
        value = _project_values(tokens, params, config)
        heads, saved = sample_heads(value, shapes, locations, plan.weights)
    cache = _DeformCache(z, ref, tokens, shapes, raw_plan.offsets, plan, locations, value, heads, saved, params, config, squeeze)
    return out, cache


def deform_attn(query, reference_px, feature_map, params: DeformAttnParams, config: AttnConfig, *, order="pre", counter=None):
    """Single-scale deformable attention with pixel-coordinate references."""
    if config.n_levels != 1:
        raise ValueError("single-scale deformable attention needs n_levels == 1")
    z, squeeze = _batched(query, 3)
    ref, _ = _batched(reference_px, 3)
    tokens, shapes = _levels_as_tokens([feature_map])
    plan = predict_sampling_params(z, params, config, counter)
    locations = ref[:, :, None, None, None, :] + plan.offsets
    out, *_ = _deform_forward(z, tokens, shapes, plan, locations, params, config, order, counter)
    return out[0] if squeeze else out


def ms_deform_attn_backward(grad_out, cache: _DeformCache) -> dict:
    """Analytic gradients of :func:`ms_deform_attn`.

    Returns a dict with ``query``, ``reference``, ``pyramid`` (list of
    ``[B, C, H_l, W_l]``) and one entry per :class:`DeformAttnParams` field.
    """
    g_out, _ = _batched(grad_out, 3)
    p, cfg = cache.params, cache.config
    b, nq, c = cache.query.shape
    m, lv, k, cv = cfg.n_heads, cfg.n_levels, cfg.n_points, cfg.head_dim

    heads_flat = cache.heads.reshape(b, nq, m * cv)
    grads = {
        "output_weight": np.einsum("bqo,bqi->oi", g_out, heads_flat),
        "output_bias": g_out.sum(axis=(0, 1)),
    }
    g_heads = (g_out @ p.output_weight).reshape(b, nq, m, cv)

    g_value, g_loc, g_w = sample_heads_backward(g_heads, cache.value, cache.plan.weights, cache.saved)
    g_values = np.split(g_value, np.cumsum([h * w for h, w in cache.shapes])[:-1], axis=1)

    # locations -> offsets / reference
    scale = level_scales(cache.shapes)[None, None, None, :, None, :]
    g_scaled = g_loc * scale
    ref = cache.reference
    g_ref = np.zeros_like(ref)
    if cache.plan.normalized:
        wh = ref[:, :, None, None, None, 2:4]
        g_off = g_scaled * wh
        g_ref[..., :2] = g_scaled.sum(axis=(2, 3, 4))
        g_ref[..., 2:4] = (g_scaled * cache.raw_offsets).sum(axis=(2, 3, 4))
    else:
        g_off = g_loc
        g_ref[..., :2] = g_scaled.sum(axis=(2, 3, 4))

    g_logits = softmax_backward(
        cache.plan.weights.reshape(b, nq, m, lv * k), g_w.reshape(b, nq, m, lv * k)
    ).reshape(b, nq, -1)
    g_off = g_off.reshape(b, nq, -1)
    grads["attn_weight"] = np.einsum("bqo,bqi->oi", g_logits, cache.query)
    grads["attn_bias"] = g_logits.sum(axis=(0, 1))
    grads["offset_weight"] = np.einsum("bqo,bqi->oi", g_off, cache.query)
    grads["offset_bias"] = g_off.sum(axis=(0, 1))
    grads["query"] = g_logits @ p.attn_weight + g_off @ p.offset_weight

    g_pyramid = []
    grads["value_weight"] = np.zeros_like(p.value_weight)
    grads["value_bias"] = np.zeros_like(p.value_bias)
    for gv, tok, (h, w) in zip(g_values, cache.tokens, cache.shapes):
        gv = gv.reshape(b, h * w, m * cv)
        grads["value_weight"] += np.einsum("bso,bsi->oi", gv, tok)
        grads["value_bias"] += gv.sum(axis=(0, 1))
        g_pyramid.append((gv @ p.value_weight).transpose(0, 2, 1).reshape(b, c, h, w))
    grads["pyramid"] = g_pyramid
    grads["reference"] = g_ref
    if cache.squeeze:
        grads["query"] = grads["query"][0]
        grads["reference"] = grads["reference"][0]
        grads["pyramid"] = [g[0] for g in g_pyramid]
    return grads


# ---------------------------------------------------------------------------
# cost model
# ---------------------------------------------------------------------------


def flop_estimate(config: AttnConfig, n_queries: int, n_keys: int) -> CostModel:
    """Multiply-accumulate estimates for dense and deformable attention.

    ``n_keys`` is the number of key pixels (``sum_l H_l W_l`` for a pyramid).
    Sampling terms are summed over the ``L`` levels.
    """
    if n_queries < 1 or n_keys < 1:
        raise ValueError("sizes must be positive")
    c, m, k, lv = config.d_model, config.n_heads, config.n_points, config.n_levels
    nq, nk = int(n_queries), int(n_keys)
    dense = {"query_proj": nq * c * c, "key_proj": nk * c * c, "query_key": nq * nk * c}
    deform = {
        "output_proj": nq * c * c,
        "value_proj": min(nk * c * c, nq * lv * k * c * c),
        "sampling": 5 * nq * lv * k * c,
        "sampling_head": 3 * nq * c * m * lv * k,
    }
    return CostModel(
        flops_dense=sum(dense.values()),
        flops_deform=sum(deform.values()),
        breakdown={"dense": dense, "deform": deform},
    )
