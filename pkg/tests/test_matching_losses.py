import numpy as np
import pytest
import scipy.optimize
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from _oracles import hungarian_brute
from deformdet.gradcheck import check_set_loss
from deformdet.losses import LossWeights, match_cost, set_loss, sigmoid_focal_loss
from deformdet.matching import hungarian_match, linear_sum_assignment

D = torch.float64


def test_diagonal_dominant():
    cost = np.full((3, 3), 10.0)
    np.fill_diagonal(cost, 1.0)
    m = hungarian_match(cost)
    assert m.pairs == [(0, 0), (1, 1), (2, 2)]
    assert m.total_cost == 3.0


def test_single_ground_truth_is_argmin():
    cost = np.random.default_rng(0).normal(size=(7, 1))
    assert hungarian_match(cost).pairs == [(int(np.argmin(cost[:, 0])), 0)]


def test_six_by_six_matches_permutations():
    rng = np.random.default_rng(1)
    for _ in range(20):
        cost = rng.normal(size=(6, 6))
        assert hungarian_match(cost).total_cost == pytest.approx(hungarian_brute(cost), abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 6), st.integers(0, 6), st.integers(0, 2**31))
def test_optimal_for_small_rectangles(n, g, seed):
    g = min(g, n)
    cost = np.random.default_rng(seed).uniform(-5, 5, size=(n, g))
    m = hungarian_match(cost)
    assert len(m.pairs) == g
    assert len({q for q, _ in m.pairs}) == g and len({t for _, t in m.pairs}) == g
    if g:
        assert m.total_cost <= hungarian_brute(cost) + 1e-9


def test_agrees_with_scipy_on_larger_instances():
    rng = np.random.default_rng(2)
    for _ in range(30):
        n, m = sorted(rng.integers(1, 40, size=2))
        cost = rng.normal(size=(n, m))
        cols = linear_sum_assignment(cost)
        r, c = scipy.optimize.linear_sum_assignment(cost)
        assert cost[np.arange(n), cols].sum() == pytest.approx(cost[r, c].sum(), abs=1e-9)


def test_matching_errors():
    with pytest.raises(ValueError):
        hungarian_match(np.zeros((2, 3)))
    with pytest.raises(ValueError):
        hungarian_match(np.array([[np.inf]]))
    assert hungarian_match(np.zeros((3, 0))).pairs == []


def test_focal_loss_limits():
    logits = torch.tensor([30.0, -30.0], dtype=D)
    assert float(sigmoid_focal_loss(logits, torch.tensor([1.0, 0.0], dtype=D)).sum()) < 1e-12
    assert float(sigmoid_focal_loss(torch.zeros(1, dtype=D), torch.ones(1, dtype=D))) > 0


def _instance(rng, n=8, k=3, g=3):
    logits = torch.from_numpy(rng.normal(size=(2, n, k)))
    boxes = torch.from_numpy(np.concatenate([rng.uniform(0.2, 0.8, (2, n, 2)), rng.uniform(0.05, 0.3, (2, n, 2))], -1))
    targets = [{"labels": torch.from_numpy(rng.integers(0, k, g)),
                "boxes": torch.from_numpy(np.concatenate([rng.uniform(0.2, 0.8, (g, 2)),
                                                          rng.uniform(0.05, 0.3, (g, 2))], -1))} for _ in range(2)]
    return logits, boxes, targets


def test_perfect_predictions():
    rng = np.random.default_rng(3)
    _, _, targets = _instance(rng, g=2)
    n, k = 5, 3
    logits = torch.full((2, n, k), -40.0, dtype=D)
    boxes = torch.from_numpy(np.tile([0.9, 0.9, 0.05, 0.05], (2, n, 1)))
    for b, t in enumerate(targets):
        logits[b, :2] = -40.0
        logits[b, torch.arange(2), t["labels"]] = 40.0
        boxes[b, :2] = t["boxes"]
    _, parts = set_loss([{"logits": logits, "boxes": boxes}], targets)
    assert parts["l1"] == pytest.approx(0.0, abs=1e-12)
    assert parts["giou"] == pytest.approx(0.0, abs=1e-12)
    assert parts["cls"] < 1e-12


def test_loss_sums_over_layers_and_weights():
    rng = np.random.default_rng(4)
    logits, boxes, targets = _instance(rng)
    one, parts = set_loss([{"logits": logits, "boxes": boxes}], targets)
    two, _ = set_loss([{"logits": logits, "boxes": boxes}] * 2, targets)
    assert float(two) == pytest.approx(2 * float(one), rel=1e-12)
    w = LossWeights()
    assert float(one) == pytest.approx(w.cls * parts["cls"] + w.l1 * parts["l1"] + w.giou * parts["giou"], rel=1e-12)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31))
def test_loss_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    logits, boxes, targets = _instance(rng)
    base, _ = set_loss([{"logits": logits, "boxes": boxes}], targets)
    qp = torch.from_numpy(rng.permutation(logits.shape[1]))
    gp = [torch.from_numpy(rng.permutation(len(t["labels"]))) for t in targets]
    shuffled_t = [{"labels": t["labels"][p], "boxes": t["boxes"][p]} for t, p in zip(targets, gp)]
    perm, _ = set_loss([{"logits": logits[:, qp], "boxes": boxes[:, qp]}], shuffled_t)
    assert float(perm) == pytest.approx(float(base), abs=1e-10)


def test_match_cost_prefers_the_right_query():
    logits = torch.tensor([[-5.0, -5.0], [5.0, -5.0]], dtype=D)
    boxes = torch.tensor([[0.2, 0.2, 0.1, 0.1], [0.7, 0.7, 0.2, 0.2]], dtype=D)
    cost = match_cost(logits, boxes, torch.tensor([0]), torch.tensor([[0.7, 0.7, 0.2, 0.2]], dtype=D))
    assert hungarian_match(cost.numpy()).pairs == [(1, 0)]


def test_encoder_output_adds_class_agnostic_term():
    rng = np.random.default_rng(5)
    logits, boxes, targets = _instance(rng)
    enc = {"logits": torch.from_numpy(rng.normal(size=(2, 8, 1))), "boxes": boxes}
    base, _ = set_loss([{"logits": logits, "boxes": boxes}], targets)
    with_enc, _ = set_loss([{"logits": logits, "boxes": boxes}], targets, encoder_output=enc)
    assert float(with_enc) > float(base)


def test_loss_gradient_through_head():
    result = check_set_loss(n_instances=3, seed=7)
    assert result.passed and result.worst_rel < 1e-4
