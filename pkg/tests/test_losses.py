import numpy as np
import pytest

from cosub import autograd as ag
from cosub.autograd import Tape, Tensor, grad_check, stop_gradient
from cosub.losses import (CosubConfig, bce_with_targets, ce_with_targets, cosub_pair_loss,
                          label_loss, one_hot, paired_label_loss, soft_target_loss, total_loss)

KINDS = ["bce-soft", "bce-hard", "ce-hard"]


def _logits(seed, shape=(6, 4)):
    return Tensor(np.random.default_rng(seed).standard_normal(shape) * 2, requires_grad=True,
                  dtype=np.float64)


def _grads(fn, *tensors):
    for t in tensors:
        t.grad = None
    with Tape() as tape:
        loss = fn()
    tape.backward(loss)
    return [None if t.grad is None else t.grad.copy() for t in tensors]


def test_one_hot_and_smoothing():
    np.testing.assert_array_equal(one_hot([2, 0], 3), [[0, 0, 1], [1, 0, 0]])
    np.testing.assert_allclose(one_hot([1], 4, smoothing=0.2), [[0.05, 0.85, 0.05, 0.05]])
    with pytest.raises(ValueError, match="out of range"):
        one_hot([3], 3)


def test_bce_matches_closed_form():
    z = np.array([[-3.0, 0.5], [2.0, 0.0]])
    t = np.array([[0.0, 1.0], [0.3, 0.5]])
    p = 1 / (1 + np.exp(-z))
    ref = -(t * np.log(p) + (1 - t) * np.log(1 - p)).mean()
    assert float(bce_with_targets(Tensor(z, dtype=np.float64), t).data) == pytest.approx(ref, rel=1e-12)


def test_ce_matches_closed_form():
    z = np.array([[1.0, 2.0, 0.5], [0.0, -1.0, 3.0]])
    t = one_hot([1, 2], 3, np.float64)
    logp = z - np.log(np.exp(z).sum(-1, keepdims=True))
    ref = -(t * logp).sum(-1).mean()
    assert float(ce_with_targets(Tensor(z, dtype=np.float64), t).data) == pytest.approx(ref, rel=1e-12)


def test_unknown_kinds_rejected():
    y = _logits(0)
    with pytest.raises(ValueError):
        label_loss(y, [0] * 6, "mse")
    with pytest.raises(ValueError):
        soft_target_loss(y, y, "kl")
    with pytest.raises(ValueError):
        CosubConfig(1.5)
    with pytest.raises(ValueError):
        CosubConfig(0.5, loss_kind="kl")


def test_pair_shape_mismatch_rejected():
    with pytest.raises(ag.ShapeError):
        cosub_pair_loss(_logits(0), _logits(1, (5, 4)))


@pytest.mark.parametrize("kind", KINDS)
def test_bundle_identity_and_symmetry(kind):
    y1, y2 = _logits(1), _logits(2)
    labels = np.array([0, 1, 2, 3, 0, 1])
    cfg = CosubConfig(0.3, loss_kind=kind)
    b = total_loss(y1, y2, labels, cfg)
    expected = 0.3 * float(b.label_part.data) + 0.7 * float(b.cosub_part.data)
    assert float(b.total.data) == pytest.approx(expected, rel=1e-6)
    assert float(total_loss(y2, y1, labels, cfg).total.data) == pytest.approx(float(b.total.data),
                                                                              rel=1e-12)


def test_lambda_one_is_label_part_and_cosub_gradient_free():
    y1, y2 = _logits(3), _logits(4)
    labels = np.arange(6) % 4
    b = total_loss(y1, y2, labels, CosubConfig(1.0))
    assert float(b.total.data) == float(b.label_part.data)
    g_total = _grads(lambda: total_loss(y1, y2, labels, CosubConfig(1.0)).total, y1, y2)
    g_label = _grads(lambda: paired_label_loss(y1, y2, labels), y1, y2)
    for a, c in zip(g_total, g_label):
        np.testing.assert_array_equal(a, c)


def test_lambda_zero_identical_outputs_is_stationary():
    z = np.random.default_rng(5).standard_normal((4, 3))
    y1 = Tensor(z, requires_grad=True, dtype=np.float64)
    y2 = Tensor(z.copy(), requires_grad=True, dtype=np.float64)
    g1, g2 = _grads(lambda: total_loss(y1, y2, [0, 1, 2, 0], CosubConfig(0.0)).total, y1, y2)
    np.testing.assert_allclose(g1, 0, atol=1e-15)
    np.testing.assert_allclose(g2, 0, atol=1e-15)


def test_bce_soft_gradient_closed_form():
    # d/dy1 of L(y1, sg(sigmoid(y2))) is (sigmoid(y1) - sigmoid(y2)) / numel
    y1, y2 = _logits(6), _logits(7)
    (g1,) = _grads(lambda: soft_target_loss(y1, y2), y1)
    s = lambda v: 1 / (1 + np.exp(-v))  # noqa: E731
    np.testing.assert_allclose(g1, (s(y1.data) - s(y2.data)) / y1.data.size, rtol=1e-12)


@pytest.mark.parametrize("kind", KINDS)
def test_teacher_side_is_detached(kind):
    y1, y2 = _logits(8), _logits(9)
    live = _grads(lambda: soft_target_loss(y1, y2, kind), y1, y2)
    const = Tensor(y2.data.copy(), dtype=np.float64)
    frozen = _grads(lambda: soft_target_loss(y1, const, kind), y1)
    np.testing.assert_array_equal(live[0], frozen[0])
    assert live[1] is None


@pytest.mark.parametrize("kind", KINDS)
def test_soft_target_loss_gradient_check(kind):
    y1 = _logits(10)
    teacher = Tensor(np.random.default_rng(11).standard_normal((6, 4)), dtype=np.float64)
    report = grad_check(lambda: soft_target_loss(y1, teacher, kind), [y1])
    assert report.max_rel_error < 1e-4, report


@pytest.mark.parametrize("kind", ["bce", "ce"])
def test_label_loss_gradient_check(kind):
    y = _logits(12)
    report = grad_check(lambda: label_loss(y, [0, 1, 2, 3, 3, 1], kind, 0.1), [y])
    assert report.max_rel_error < 1e-4, report


def test_hard_targets_use_teacher_argmax():
    teacher = Tensor(np.array([[0.1, 2.0, -1.0]]), dtype=np.float64)
    y = Tensor(np.zeros((1, 3)), dtype=np.float64)
    a = float(soft_target_loss(y, teacher, "ce-hard").data)
    b = float(ce_with_targets(y, one_hot([1], 3, np.float64)).data)
    assert a == b
    assert float(soft_target_loss(y, stop_gradient(teacher), "bce-hard").data) == float(
        bce_with_targets(y, one_hot([1], 3, np.float64)).data)


def test_values_reports_none_for_absent_parts():
    y1, y2 = _logits(13), _logits(14)
    v = total_loss(y1, y2, np.zeros(6, int), CosubConfig()).values()
    assert set(v) == {"loss", "label_loss", "cosub_loss", "teacher_loss"}
    assert v["teacher_loss"] is None and v["cosub_loss"] is not None
