"""Measured attention cost versus feature-map size."""

from __future__ import annotations

import json
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .attention import (AttnConfig, DenseAttnParams, MacCounter, flop_estimate, init_deform_params,
                        ms_deform_attn, multi_head_attn)
from .pyramid import level_shapes, normalized_grid

BENCH_VERSION = 1
DEFAULT_SIZES = (256, 384, 512, 640)


def fit_exponent(x, y) -> float:
    """Slope of ``log y`` against ``log x`` by least squares."""
    return float(np.polyfit(np.log(np.asarray(x, float)), np.log(np.asarray(y, float)), 1)[0])


def _timed(fn):
    counter = MacCounter()
    t = time.perf_counter()
    fn(counter)
    return counter, time.perf_counter() - t


def bench_size(config: AttnConfig, image_size: int, n_queries: int, rng) -> dict:
    shapes = level_shapes(image_size, image_size, config.n_levels)
    n_tokens = sum(h * w for h, w in shapes)
    c = config.d_model
    pyramid = [rng.standard_normal((1, c, h, w)) for h, w in shapes]
    tokens = np.concatenate([lvl.reshape(c, -1).T for lvl in pyramid])[None]
    grid = np.concatenate([normalized_grid(s) for s in shapes])[None]
    dense_params = DenseAttnParams.random(config, rng)
    params = init_deform_params(config, rng=rng)
    params.offset_weight[:] = rng.standard_normal(params.offset_weight.shape) * 0.01
    queries = rng.standard_normal((1, n_queries, c))
    ref_q = rng.random((1, n_queries, 2))

    dense, t_dense = _timed(lambda ctr: multi_head_attn(tokens, tokens, dense_params, config, counter=ctr, chunk=256))
    deform, t_deform = _timed(
        lambda ctr: ms_deform_attn(tokens, grid, pyramid, params, config, order="auto", counter=ctr))
    decoder, t_decoder = _timed(
        lambda ctr: ms_deform_attn(queries, ref_q, pyramid, params, config, order="auto", counter=ctr))
    enc_est = flop_estimate(config, n_tokens, n_tokens)
    dec_est = flop_estimate(config, n_queries, n_tokens)
    return {
        "config": asdict(config),
        "N_q": n_queries,
        "HW": n_tokens,
        "flops_dense": enc_est.flops_dense,
        "flops_deform": enc_est.flops_deform,
        "measured_macs": {"dense": dense.total, "deform": deform.total, "decoder": decoder.total},
        "image_size": image_size,
        "tokens": n_tokens,
        "dense_macs": dense.total,
        "dense_estimate": enc_est.flops_dense,
        "dense_seconds": t_dense,
        "deform_macs": deform.total,
        "deform_estimate": enc_est.flops_deform,
        "deform_seconds": t_deform,
        "decoder_macs": decoder.total,
        "decoder_estimate": dec_est.flops_deform,
        "decoder_seconds": t_decoder,
        "dense_breakdown": dict(dense),
        "deform_breakdown": dict(deform),
        "decoder_breakdown": dict(decoder),
    }


def benchmark(config: AttnConfig = AttnConfig(), sizes=DEFAULT_SIZES, n_queries: int = 30, seed: int = 0) -> dict:
    """Encoder self-attention (dense vs deformable) and decoder cross-attention per image size."""
    if len(sizes) < 4:
        raise ValueError("the sweep needs at least 4 sizes")
    rng = np.random.default_rng(seed)
    rows = [bench_size(config, s, n_queries, rng) for s in sizes]
    tokens = [r["tokens"] for r in rows]
    decoder = np.array([r["decoder_macs"] for r in rows], float)
    return {
        "format_version": BENCH_VERSION,
        "config": asdict(config),
        "n_queries": n_queries,
        "rows": rows,
        "exponents": {
            "dense": fit_exponent(tokens, [r["dense_macs"] for r in rows]),
            "deformable": fit_exponent(tokens, [r["deform_macs"] for r in rows]),
            "decoder": fit_exponent(tokens, decoder),
        },
        "decoder_spread": float((decoder.max() - decoder.min()) / decoder.mean()),
        "estimate_ratios": {
            key: [r[f"{key}_macs"] / r[f"{key}_estimate"] for r in rows] for key in ("dense", "deform", "decoder")
        },
    }


def write_bench(result: dict, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(result, indent=1))
    return path
