"""Finite-difference suite for every analytic or autograd gradient the detector relies on.

All checks run in double precision with central differences.  Each family
draws fresh random instances; a family passes when every checked entry of
every instance stays under the relative tolerance.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .attention import AttnConfig, init_deform_params, ms_deform_attn, ms_deform_attn_backward
from .boxes import decode_box, refine_box
from .kernels import GradReport, finite_diff_check
from .losses import set_loss

RTOL = 1e-4
STEP = 1e-5


@dataclass
class FamilyResult:
    name: str
    instances: int = 0
    checks: int = 0
    worst_rel: float = 0.0
    failures: list = field(default_factory=list)
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return not self.failures and self.instances > 0

    def add(self, label: str, report: GradReport, rtol: float):
        self.checks += report.n_checked
        self.worst_rel = max(self.worst_rel, report.max_rel_err)
        if not report.passed(rtol):
            self.failures.append((label, report.max_rel_err))


def _ms_deform_instance(rng, box_mode: bool, result: FamilyResult, rtol, step, max_checks):
    cfg = AttnConfig(n_heads=2, d_model=4, n_points=int(rng.integers(1, 4)), n_levels=int(rng.integers(1, 4)))
    params = init_deform_params(cfg, rng=rng)
    for name, value in params.items():
        setattr(params, name, value + rng.normal(0.0, 0.3, value.shape))
    b, nq = 2, 3
    query = rng.normal(size=(b, nq, cfg.d_model))
    shapes = [(int(rng.integers(1, 6)), int(rng.integers(1, 6))) for _ in range(cfg.n_levels)]
    pyramid = [rng.normal(size=(b, cfg.d_model, h, w)) for h, w in shapes]
    reference = rng.uniform(0.05, 0.95, (b, nq, 2))
    if box_mode:
        reference = np.concatenate([reference, rng.uniform(0.1, 0.6, (b, nq, 2))], axis=-1)
    upstream = rng.normal(size=(b, nq, cfg.d_model))
    _, cache = ms_deform_attn(query, reference, pyramid, params, cfg, return_cache=True)
    grads = ms_deform_attn_backward(upstream, cache)

    def scalar(q=query, ref=reference, pyr=pyramid, p=params):
        return float(np.sum(upstream * ms_deform_attn(q, ref, pyr, p, cfg)))

    def check(label, f, x, g):
        result.add(label, finite_diff_check(f, x, g, step, max_checks=max_checks, rng=rng), rtol)

    for name, value in params.items():
        def f(x, name=name):
            p = params.copy()
            setattr(p, name, x)
            return scalar(p=p)
        check(name, f, value, grads[name])
    check("query", lambda x: scalar(q=x), query, grads["query"])
    check("reference", lambda x: scalar(ref=x), reference, grads["reference"])
    for lvl in range(cfg.n_levels):
        def f(x, lvl=lvl):
            pyr = list(pyramid)
            pyr[lvl] = x
            return scalar(pyr=pyr)
        check(f"pyramid[{lvl}]", f, pyramid[lvl], grads["pyramid"][lvl])


def check_ms_deform_attn(n_instances=20, seed=0, rtol=RTOL, step=STEP, max_checks=24) -> FamilyResult:
    """Every parameter, the query, the reference (points and boxes) and every pyramid level."""
    rng = np.random.default_rng(seed)
    result = FamilyResult("ms_deform_attn")
    t = time.perf_counter()
    for i in range(n_instances):
        _ms_deform_instance(rng, box_mode=bool(i % 2), result=result, rtol=rtol, step=step, max_checks=max_checks)
        result.instances += 1
    result.seconds = time.perf_counter() - t
    return result


def _torch_check(fn, x: np.ndarray, rtol, step, result, label):
    """Autograd gradient of ``fn(tensor) -> scalar`` against central differences."""
    xt = torch.tensor(x, dtype=torch.float64, requires_grad=True)
    fn(xt).backward()
    analytic = xt.grad.numpy()
    with torch.no_grad():
        report = finite_diff_check(lambda v: float(fn(torch.from_numpy(v))), x, analytic, step)
    result.add(label, report, rtol)


def check_boxes(n_instances=20, seed=0, rtol=RTOL, step=STEP) -> FamilyResult:
    """Box decoding and refinement, including the gradient block through the previous box."""
    rng = np.random.default_rng(seed)
    result = FamilyResult("decode_box/refine_box")
    t = time.perf_counter()
    for _ in range(n_instances):
        n = 5
        ref = rng.uniform(0.05, 0.95, (n, 2))
        raw = rng.normal(size=(n, 4))
        prev = rng.uniform(0.05, 0.95, (n, 4))
        w = rng.normal(size=(n, 4))
        ref_t, raw_t, prev_t, w_t = (torch.from_numpy(a) for a in (ref, raw, prev, w))

        _torch_check(lambda x: (w_t * decode_box(ref_t, x)).sum(), raw, rtol, step, result, "decode/raw")
        _torch_check(lambda x: (w_t * decode_box(x, raw_t)).sum(), ref, rtol, step, result, "decode/reference")
        _torch_check(lambda x: (w_t * refine_box(prev_t, x)).sum(), raw, rtol, step, result, "refine/deltas")

        # the previous box must receive exactly zero gradient
        p = torch.tensor(prev, requires_grad=True)
        d = torch.tensor(raw, requires_grad=True)
        (w_t * refine_box(p, d)).sum().backward()
        blocked = float(p.grad.abs().max()) if p.grad is not None else 0.0
        result.checks += prev.size
        if blocked != 0.0:
            result.failures.append(("refine/prev blocked", blocked))
        result.instances += 1
    result.seconds = time.perf_counter() - t
    return result


class _Head(torch.nn.Module):
    def __init__(self, c, n_classes):
        super().__init__()
        self.cls = torch.nn.Linear(c, n_classes)
        self.box = torch.nn.Sequential(torch.nn.Linear(c, c), torch.nn.ReLU(), torch.nn.Linear(c, 4))

    def forward(self, feats, ref):
        return {"logits": self.cls(feats), "boxes": decode_box(ref, self.box(feats))}


def check_set_loss(n_instances=20, seed=0, rtol=RTOL, step=STEP) -> FamilyResult:
    """Hungarian set loss differentiated through a small prediction head."""
    rng = np.random.default_rng(seed)
    result = FamilyResult("set_loss")
    t = time.perf_counter()
    for _ in range(n_instances):
        torch.manual_seed(int(rng.integers(2**31)))
        b, n, c, k, layers = 2, 6, 5, 3, 2
        head = _Head(c, k).double()
        feats = [torch.from_numpy(rng.normal(size=(b, n, c))) for _ in range(layers)]
        ref = torch.from_numpy(rng.uniform(0.1, 0.9, (b, n, 2)))
        targets = []
        for _ in range(b):
            g = int(rng.integers(1, 4))
            targets.append({"labels": torch.from_numpy(rng.integers(0, k, g)),
                            "boxes": torch.from_numpy(np.concatenate(
                                [rng.uniform(0.2, 0.8, (g, 2)), rng.uniform(0.05, 0.4, (g, 2))], -1))})
        names = [name for name, _ in head.named_parameters()]
        shapes = [p.shape for p in head.parameters()]
        sizes = [p.numel() for p in head.parameters()]
        flat0 = torch.cat([p.detach().reshape(-1) for p in head.parameters()]).numpy()

        def loss_of(flat):
            chunks = torch.split(flat, sizes)
            state = {nm: ch.reshape(sh) for nm, ch, sh in zip(names, chunks, shapes)}
            outs = [torch.func.functional_call(head, state, (f, ref)) for f in feats]
            return set_loss(outs, targets)[0]

        _torch_check(loss_of, flat0, rtol, step, result, "head parameters")
        result.instances += 1
    result.seconds = time.perf_counter() - t
    return result


def run_suite(seed: int = 0, n_instances: int = 20, rtol: float = RTOL, step: float = STEP) -> list:
    return [
        check_ms_deform_attn(n_instances, seed, rtol, step),
        check_boxes(n_instances, seed, rtol, step),
        check_set_loss(n_instances, seed, rtol, step),
    ]


def format_results(results) -> str:
    lines = []
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        lines.append(f"{status} {r.name}: {r.instances} instances, {r.checks} entries, "
                     f"worst rel err {r.worst_rel:.2e}, {r.seconds:.1f}s")
        lines += [f"    {label}: rel err {err:.2e}" for label, err in r.failures]
    return "\n".join(lines)
