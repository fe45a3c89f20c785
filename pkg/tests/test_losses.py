import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import assume, given, settings, strategies as st

from aslrec.losses import (AmSoftmaxParams, EmbeddingHead, LossError, ScaleSchedule, am_softmax_entropy_loss,
                           center_push_loss, embed_head, pr_product, push_loss, scale_at, total_loss)
from gradcheck import analytic_gradient, assert_grad_close, central_difference


def unit(v):
    v = torch.as_tensor(v, dtype=torch.float64)
    return v / v.norm(dim=-1, keepdim=True)


# ------------------------------------------------------------------ embedding head

def test_head_output_is_unit_norm():
    torch.manual_seed(0)
    head = EmbeddingHead(32, 16)
    out = embed_head(head, torch.randn(4, 32, 2, 3, 3), training=True)
    assert torch.allclose(out.norm(dim=1), torch.ones(4), atol=1e-5)
    single = embed_head(head, torch.randn(32, 2, 3, 3))
    assert single.shape == (16,)
    assert abs(single.norm().item() - 1) < 1e-5


def test_head_pools_constant_channels():
    feats = torch.arange(5.0).view(1, 5, 1, 1, 1).expand(1, 5, 2, 3, 3)
    assert torch.equal(feats.mean(dim=(2, 3, 4)), torch.arange(5.0).view(1, 5))


def test_head_is_scale_invariant_with_frozen_bn():
    torch.manual_seed(0)
    head = EmbeddingHead(32, 16).eval()
    x = torch.randn(3, 32, 2, 3, 3)
    assert torch.allclose(head(x), head(10 * x), atol=1e-6)


def test_head_rejects_zero_embedding():
    head = EmbeddingHead(8, 4).eval()
    torch.nn.init.zeros_(head.proj.weight)
    with pytest.raises(ValueError, match="zero vector"):
        head(torch.randn(1, 8, 1, 2, 2))


# ------------------------------------------------------------------ PR-Product

def test_pr_product_forward_is_inner_product():
    g = torch.Generator().manual_seed(0)
    e = F.normalize(torch.randn(1000, 16, generator=g), dim=1)
    w = F.normalize(torch.randn(7, 16, generator=g), dim=1)
    assert torch.allclose(pr_product(e, w), e @ w.t(), atol=1e-6)


def frozen_pr_surrogate(e0, w_row):
    """PR-Product surrogate with the |sin| gate frozen at e0, as a plain function of e."""
    cos0 = float(e0 @ w_row)
    gate = math.sqrt(max(0.0, 1 - cos0 ** 2))
    return lambda e: gate * (e @ w_row) + (1 - gate) * cos0


@pytest.mark.parametrize("kind", ["aligned", "opposed", "orthogonal", "oblique"])
def test_pr_product_gradient(kind):
    w = unit(torch.randn(3, 8, generator=torch.Generator().manual_seed(1), dtype=torch.float64))
    if kind == "aligned":
        e0 = w[1].clone()
    elif kind == "opposed":
        e0 = -w[1].clone()
    elif kind == "orthogonal":
        v = torch.randn(8, dtype=torch.float64, generator=torch.Generator().manual_seed(2))
        e0 = unit(v - (v @ w[1]) * w[1])
    else:
        e0 = unit(w[1] + torch.randn(8, dtype=torch.float64, generator=torch.Generator().manual_seed(3)))
    grad = analytic_gradient(lambda e: pr_product(e[None], w)[0, 1], e0)
    numeric = central_difference(frozen_pr_surrogate(e0, w[1]), e0)
    assert torch.allclose(grad, numeric, atol=1e-8)
    if kind in ("aligned", "opposed"):
        assert grad.abs().max().item() < 1e-12
    if kind == "orthogonal":
        assert torch.allclose(grad, w[1], atol=1e-8)


# ------------------------------------------------------------------ scale schedule

@pytest.mark.parametrize("epoch,expected", [(0, 30.0), (20, 17.5), (40, 5.0), (55, 5.0)])
def test_scale_schedule(epoch, expected):
    assert scale_at(ScaleSchedule(), epoch) == pytest.approx(expected)


def test_scale_schedule_validates():
    with pytest.raises(ValueError):
        ScaleSchedule(5.0, 30.0)


# ------------------------------------------------------------------ AM-Softmax with entropy clamp

def test_am_softmax_closed_form():
    loss = am_softmax_entropy_loss(torch.tensor([1.0, 0.0], dtype=torch.float64), 0,
                                   AmSoftmaxParams(0.0, 1.0, 0.0))
    assert loss.item() == pytest.approx(math.log1p(math.exp(-1.0)), abs=1e-12)
    assert loss.item() == pytest.approx(0.31326, abs=1e-5)


def test_am_softmax_symmetric_clamp():
    loss = am_softmax_entropy_loss(torch.zeros(2, dtype=torch.float64), 1, AmSoftmaxParams(0.0, 1.0, 1.0))
    assert loss.item() == pytest.approx(0.0, abs=1e-12)


def test_am_softmax_confident_limit():
    cos = torch.tensor([1.0, -1.0, -1.0], dtype=torch.float64)
    params = AmSoftmaxParams(0.0, 60.0, 0.2)
    with_entropy = am_softmax_entropy_loss(cos, 0, params)
    without = am_softmax_entropy_loss(cos, 0, AmSoftmaxParams(0.0, 60.0, 0.0))
    # entropy is tiny when confident, so the clamp removes almost nothing
    assert with_entropy.item() == pytest.approx(without.item(), rel=1e-3, abs=1e-30)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=2, max_size=6), st.data())
def test_am_softmax_plain_case_is_cross_entropy(cos, data):
    label = data.draw(st.integers(0, len(cos) - 1))
    c = torch.tensor(cos, dtype=torch.float64)
    ours = am_softmax_entropy_loss(c, label, AmSoftmaxParams(0.0, 1.0, 0.0))
    ref = F.cross_entropy(c[None], torch.tensor([label]))
    assert abs(ours.item() - ref.item()) < 1e-8


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=2, max_size=6), st.floats(0.5, 64))
def test_scale_preserves_argmax(cos, s):
    c = torch.tensor(cos, dtype=torch.float64)
    top2 = torch.topk(c, 2).values
    assume(top2[0] - top2[1] > 1e-6)
    assert torch.argmax(torch.softmax(s * c, 0)) == torch.argmax(c)


def test_am_softmax_decreasing_in_true_cosine():
    rng = np.random.default_rng(0)
    params = AmSoftmaxParams(0.35, 10.0, 0.2)
    for _ in range(100):
        c = torch.from_numpy(rng.uniform(-1, 1, 5))
        label = int(rng.integers(5))
        c.requires_grad_(True)
        loss = am_softmax_entropy_loss(c, label, params)
        if loss.item() <= 1e-3:
            continue
        loss.backward()
        assert c.grad[label].item() <= 0.0


def test_am_softmax_needs_two_classes():
    with pytest.raises(ValueError):
        am_softmax_entropy_loss(torch.tensor([0.5]), 0, AmSoftmaxParams())


def test_am_softmax_batch_mean():
    c = torch.rand(4, 3, dtype=torch.float64)
    labels = torch.tensor([0, 1, 2, 0])
    params = AmSoftmaxParams()
    per = am_softmax_entropy_loss(c, labels, params, reduction="none")
    assert torch.allclose(am_softmax_entropy_loss(c, labels, params), per.mean())


# ------------------------------------------------------------------ push losses

def test_push_loss_same_label_is_zero():
    e = unit(torch.randn(4, 6, dtype=torch.float64))
    assert push_loss(e, [2, 2, 2, 2]).item() == 0.0


def test_push_loss_hand_values():
    a = torch.tensor([1.0, 0.0], dtype=torch.float64)
    b = torch.tensor([0.9, math.sqrt(1 - 0.81)], dtype=torch.float64)
    assert push_loss(torch.stack([a, b]), [0, 1], 0.3).item() == pytest.approx(0.2)
    c = torch.tensor([0.0, 1.0], dtype=torch.float64)
    assert push_loss(torch.stack([a, c]), [0, 1], 0.3).item() == 0.0


def test_push_loss_permutation_invariant():
    g = torch.Generator().manual_seed(0)
    e = unit(torch.randn(6, 3, generator=g, dtype=torch.float64))
    labels = torch.tensor([0, 0, 1, 1, 2, 2])
    perm = torch.randperm(6, generator=g)
    assert torch.allclose(push_loss(e, labels), push_loss(e[perm], labels[perm]))


def test_center_push_values():
    eye = torch.eye(3, dtype=torch.float64)
    assert center_push_loss(eye[:2]).item() == 0.0
    assert center_push_loss(torch.stack([eye[0], eye[0]])).item() == pytest.approx(0.3)
    assert center_push_loss(torch.stack([eye[0], eye[0], eye[1]])).item() == pytest.approx(0.1)


# ------------------------------------------------------------------ total objective

def test_total_loss_sums_components():
    e = torch.eye(3, dtype=torch.float64)
    total, parts = total_loss(e, e, torch.tensor([0, 1, 2]), e, AmSoftmaxParams(0.0, 1.0, 0.0),
                              tv_terms=[torch.tensor(0.05), torch.tensor(0.05)])
    assert set(parts) == {"am", "push", "cpush", "tv"}
    assert total.item() == pytest.approx(sum(v.item() for v in parts.values()))
    assert parts["tv"].item() == pytest.approx(0.1)


def test_total_loss_names_bad_component():
    e = torch.eye(3, dtype=torch.float64)
    with pytest.raises(LossError, match="tv"):
        total_loss(e, e, torch.tensor([0, 1, 2]), e, AmSoftmaxParams(), tv_terms=[torch.tensor(float("nan"))])


def test_total_loss_gradient_is_sum_of_component_gradients():
    g = torch.Generator().manual_seed(5)
    emb = unit(torch.randn(4, 6, generator=g, dtype=torch.float64))
    w = unit(torch.randn(3, 6, generator=g, dtype=torch.float64))
    labels = torch.tensor([0, 1, 2, 1])
    params = AmSoftmaxParams(0.2, 5.0, 0.1)

    def total(e):
        return total_loss(e @ w.t(), e, labels, w, params, push_margin=0.9)[0]

    comps = [lambda e: am_softmax_entropy_loss(e @ w.t(), labels, params),
             lambda e: push_loss(e, labels, 0.9)]
    summed = sum(analytic_gradient(f, emb) for f in comps)
    assert torch.allclose(analytic_gradient(total, emb), summed)
    assert_grad_close(analytic_gradient(total, emb), central_difference(total, emb))
