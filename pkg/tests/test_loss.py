import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from camhfa import tensor as tn
from camhfa.loss import ClassifierHead, apply_margin, cosine_logits, init_head, margin_softmax_loss
from camhfa.tensor import ContractError, GradTape, Tensor, finite_difference_gradient, max_relative_error


def unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v)


def scalar_loss(e, label, W, margin, scale, margin_type):
    """Plain-float oracle for one embedding."""
    rows = [unit(w) for w in W]
    cos = [float(sum(a * b for a, b in zip(e, r))) for r in rows]
    logits = []
    for c, x in enumerate(cos):
        if c == label:
            if margin_type == "additive-cosine":
                x = x - margin
            elif x >= math.cos(math.pi - margin):
                x = math.cos(math.acos(max(-1.0, min(1.0, x))) + margin)
            else:
                x = x - margin * math.sin(margin)
        logits.append(scale * x)
    m = max(logits)
    return -(logits[label] - m - math.log(sum(math.exp(v - m) for v in logits)))


class TestExamples:
    def test_closed_form_two_classes(self):
        head = ClassifierHead(np.eye(2), margin=0.2, scale=32.0, margin_type="additive-cosine")
        got = margin_softmax_loss([1.0, 0.0], 0, head).item()
        expected = math.log1p(math.exp(32.0 * (0.0 - (1.0 - 0.2))))
        assert got == pytest.approx(expected, rel=1e-12)
        assert scalar_loss([1.0, 0.0], 0, np.eye(2), 0.2, 32.0, "additive-cosine") == pytest.approx(expected, rel=1e-12)

    @pytest.mark.parametrize("margin_type", ["additive-angular", "additive-cosine"])
    @pytest.mark.parametrize("m,s", [(0.0, 1.0), (0.5, 64.0), (0.2, 32.0)])
    def test_single_class_is_zero(self, margin_type, m, s):
        head = ClassifierHead([[0.3, -2.0, 1.0]], m, s, margin_type)
        assert margin_softmax_loss(unit([1.0, 2.0, 3.0]), 0, head).item() == pytest.approx(0.0, abs=1e-15)

    def test_zero_margin_is_plain_cross_entropy(self):
        rng = np.random.default_rng(0)
        W = rng.standard_normal((5, 4))
        e = unit(rng.standard_normal(4))
        head = ClassifierHead(W, margin=0.0, scale=10.0)
        logits = 10.0 * np.array([e @ unit(w) for w in W])
        expected = -(logits[3] - np.log(np.sum(np.exp(logits))))
        assert margin_softmax_loss(e, 3, head).item() == pytest.approx(expected, rel=1e-12)

    @pytest.mark.parametrize("label", [-1, 3, 7])
    def test_label_out_of_range(self, label):
        with pytest.raises(ContractError):
            margin_softmax_loss([1.0, 0.0], label, ClassifierHead(np.ones((3, 2))))

    def test_float_labels_rejected(self):
        with pytest.raises(ContractError):
            margin_softmax_loss([1.0, 0.0], 0.5, ClassifierHead(np.ones((3, 2))))

    @pytest.mark.parametrize("kwargs", [{"margin": -0.1}, {"scale": 0.0}, {"margin_type": "sphere"}])
    def test_head_validation(self, kwargs):
        with pytest.raises(ContractError):
            ClassifierHead(np.ones((2, 2)), **kwargs)

    @pytest.mark.parametrize("seed", range(8))
    @pytest.mark.parametrize("margin_type", ["additive-angular", "additive-cosine"])
    def test_matches_scalar_oracle(self, seed, margin_type):
        rng = np.random.default_rng(seed)
        W = rng.standard_normal((4, 3))
        E = np.stack([unit(rng.standard_normal(3)) for _ in range(3)])
        labels = rng.integers(0, 4, size=3)
        head = ClassifierHead(W, 0.35, 16.0, margin_type)
        expected = np.mean([scalar_loss(E[i], labels[i], W, 0.35, 16.0, margin_type) for i in range(3)])
        assert margin_softmax_loss(E, labels, head).item() == pytest.approx(expected, rel=1e-12)


class TestAngularMargin:
    def test_target_logit_inside_domain(self):
        theta, m = 0.6, 0.2
        out = apply_margin(np.array([[math.cos(theta)]]), np.ones((1, 1)), m, "additive-angular").data
        assert out[0, 0] == pytest.approx(math.cos(theta + m), abs=1e-15)

    def test_fallback_past_pi(self):
        theta, m = math.pi - 0.05, 0.2
        c = math.cos(theta)
        out = apply_margin(np.array([[c]]), np.ones((1, 1)), m, "additive-angular").data
        assert out[0, 0] == pytest.approx(c - m * math.sin(m), abs=1e-15)

    def test_non_target_untouched(self):
        cos = np.array([[0.3, -0.4]])
        out = apply_margin(cos, np.array([[1.0, 0.0]]), 0.2, "additive-angular").data
        assert out[0, 1] == -0.4


class TestProperties:
    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.sampled_from(["additive-angular", "additive-cosine"]))
    def test_non_increasing_in_target_cosine(self, seed, margin_type):
        rng = np.random.default_rng(seed)
        C = int(rng.integers(2, 6))
        others = rng.uniform(-1, 1, size=(1, C))
        onehot = np.zeros((1, C))
        onehot[0, 0] = 1.0

        def loss_at(c0):
            cos = others.copy()
            cos[0, 0] = c0
            logits = apply_margin(cos, onehot, 0.2, margin_type) * 32.0
            return -tn.log_softmax(logits, axis=-1).data[0, 0]

        grid = np.linspace(-1, 1, 41)
        values = [loss_at(c) for c in grid]
        assert all(b <= a + 1e-12 for a, b in zip(values, values[1:]))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_margin_types_agree_at_zero_margin(self, seed):
        rng = np.random.default_rng(seed)
        W = rng.standard_normal((4, 3))
        E = np.stack([unit(rng.standard_normal(3)) for _ in range(2)])
        labels = rng.integers(0, 4, size=2)
        a = margin_softmax_loss(E, labels, ClassifierHead(W, 0.0, 32.0, "additive-angular")).item()
        b = margin_softmax_loss(E, labels, ClassifierHead(W, 0.0, 32.0, "additive-cosine")).item()
        assert abs(a - b) <= 1e-12

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(1e-3, 1e3))
    def test_row_scale_invariance(self, seed, k):
        rng = np.random.default_rng(seed)
        W = rng.standard_normal((4, 3))
        E = np.stack([unit(rng.standard_normal(3)) for _ in range(2)])
        labels = rng.integers(0, 4, size=2)
        scales = rng.uniform(0.1, 10, size=(4, 1)) * k
        a = margin_softmax_loss(E, labels, ClassifierHead(W)).item()
        b = margin_softmax_loss(E, labels, ClassifierHead(W * scales)).item()
        assert abs(a - b) <= 1e-12 * max(1.0, abs(a))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_cosine_logits_bounded(self, seed):
        rng = np.random.default_rng(seed)
        e = unit(rng.standard_normal(5))
        cos = cosine_logits(e, rng.standard_normal((6, 5))).data
        assert np.all(np.abs(cos) <= 1.0 + 1e-15)


@pytest.mark.parametrize("margin_type", ["additive-angular", "additive-cosine"])
def test_gradients_match_finite_differences(margin_type):
    # Moderate scale keeps float64 central differences well above roundoff.
    rng = np.random.default_rng(2)
    head = init_head(4, 3, margin=0.2, scale=4.0, margin_type=margin_type, seed=3)
    E0 = np.stack([unit(rng.standard_normal(3)) for _ in range(2)])
    labels = np.array([1, 3])
    e, W = Tensor(E0, requires_grad=True), Tensor(head.class_weights, requires_grad=True)
    with GradTape() as tape:
        loss = margin_softmax_loss(e, labels, head, W)
    ge, gW = tape.gradient(loss, [e, W])
    ne = finite_difference_gradient(lambda x: margin_softmax_loss(x, labels, head).item(), E0)
    nW = finite_difference_gradient(lambda x: margin_softmax_loss(E0, labels, head, x).item(), head.class_weights)
    assert max_relative_error(ge, ne) <= 1e-5
    assert max_relative_error(gW, nW) <= 1e-5
