"""Autograd bridge running the numpy deformable sampler inside torch models."""

from __future__ import annotations

import torch

from .attention import sample_heads, sample_heads_backward


class MSDeformSample(torch.autograd.Function):
    """``heads = sum_{l,k} A * value_l(loc)`` with the numpy forward/backward kernels.

    value ``[B, S, M, Cv]`` (levels concatenated along ``S``), locations
    ``[B, Nq, M, L, K, 2]`` in pixel coords of each level, weights
    ``[B, Nq, M, L, K]``.
    """

    @staticmethod
    def forward(ctx, value, shapes, locations, weights):
        v = value.detach().cpu().numpy()
        loc = locations.detach().cpu().numpy()
        a = weights.detach().cpu().numpy()
        heads, saved = sample_heads(v, shapes, loc, a)
        ctx.state = (v, a, saved, value.dtype)
        return torch.from_numpy(heads).to(value.dtype)

    @staticmethod
    def backward(ctx, grad_heads):
        v, a, saved, dtype = ctx.state
        g_value, g_loc, g_w = sample_heads_backward(grad_heads.detach().cpu().numpy(), v, a, saved)
        ctx.state = None
        g_value = torch.from_numpy(g_value).to(dtype)
        return g_value, None, torch.from_numpy(g_loc).to(dtype), torch.from_numpy(g_w).to(dtype)


def ms_deform_sample(value, shapes, locations, weights):
    return MSDeformSample.apply(value, tuple(tuple(s) for s in shapes), locations, weights)
