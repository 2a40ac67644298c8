"""Classification losses and the combined co-training objective.

All losses are means: over samples for CE, over samples and classes for BCE,
so the label and co-training terms are on comparable scales.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor, stop_gradient

LOSS_KINDS = ("bce-soft", "bce-hard", "ce-hard")


@dataclass(frozen=True)
class CosubConfig:
    lam: float = 0.5
    loss_kind: str = "bce-soft"
    label_loss: str = "bce"
    label_smoothing: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {self.lam}")
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"loss_kind must be one of {LOSS_KINDS}, got {self.loss_kind!r}")
        if self.label_loss not in ("bce", "ce"):
            raise ValueError(f"label_loss must be 'bce' or 'ce', got {self.label_loss!r}")
        if self.label_smoothing < 0:
            raise ValueError("label_smoothing must be >= 0")


@dataclass
class LossBundle:
    total: Tensor
    label_part: Tensor
    cosub_part: Tensor | None = None
    teacher_part: Tensor | None = None

    def values(self) -> dict[str, float | None]:
        def val(t):
            return None if t is None else float(t.data)

        return {
            "loss": val(self.total),
            "label_loss": val(self.label_part),
            "cosub_loss": val(self.cosub_part),
            "teacher_loss": val(self.teacher_part),
        }


def one_hot(labels, num_classes: int, dtype=np.float32, smoothing: float = 0.0) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"label out of range for {num_classes} classes: "
                         f"min {labels.min()}, max {labels.max()}")
    t = np.zeros((labels.shape[0], num_classes), dtype=dtype)
    t[np.arange(labels.shape[0]), labels] = 1.0
    if smoothing:
        t = t * (1.0 - smoothing) + smoothing / num_classes
    return t.astype(dtype)


def bce_with_targets(logits: Tensor, targets) -> Tensor:
    """Mean of ``softplus(z) - t*z``, the sigmoid BCE with target probabilities ``t``."""
    t = targets.data if isinstance(targets, Tensor) else np.asarray(targets, dtype=logits.dtype)
    return ag.mean(ag.softplus(logits) - ag.mul(logits, Tensor(t, dtype=logits.dtype)))


def ce_with_targets(logits: Tensor, targets) -> Tensor:
    t = targets.data if isinstance(targets, Tensor) else np.asarray(targets, dtype=logits.dtype)
    per_row = ag.sum_(ag.mul(ag.log_softmax(logits), Tensor(t, dtype=logits.dtype)), axis=-1)
    return -ag.mean(per_row)


def label_loss(logits: Tensor, labels, kind: str = "bce", label_smoothing: float = 0.0) -> Tensor:
    t = one_hot(labels, logits.shape[-1], logits.dtype, label_smoothing)
    if kind == "bce":
        return bce_with_targets(logits, t)
    if kind == "ce":
        return ce_with_targets(logits, t)
    raise ValueError(f"unknown label loss {kind!r}")


def soft_target_loss(student: Tensor, teacher: Tensor, kind: str = "bce-soft") -> Tensor:
    """Loss of ``student`` against targets derived from ``stop_gradient(teacher)``."""
    if student.shape != teacher.shape:
        raise ag.ShapeError(f"student logits {student.shape} vs teacher logits {teacher.shape}")
    z = stop_gradient(teacher).data
    if kind == "bce-soft":
        return bce_with_targets(student, ag.expit(z))
    hard = one_hot(np.argmax(z, axis=-1), z.shape[-1], student.dtype)
    if kind == "bce-hard":
        return bce_with_targets(student, hard)
    if kind == "ce-hard":
        return ce_with_targets(student, hard)
    raise ValueError(f"unknown co-training loss {kind!r}")


def cosub_pair_loss(y1: Tensor, y2: Tensor, kind: str = "bce-soft") -> Tensor:
    """Symmetrized ``(L(y1, sg(y2)) + L(y2, sg(y1))) / 2``."""
    if y1.shape != y2.shape:
        raise ag.ShapeError(f"cosub pair shapes differ: {y1.shape} and {y2.shape}")
    return (soft_target_loss(y1, y2, kind) + soft_target_loss(y2, y1, kind)) * 0.5


def paired_label_loss(y1: Tensor, y2: Tensor, labels, kind: str = "bce",
                      label_smoothing: float = 0.0) -> Tensor:
    return (label_loss(y1, labels, kind, label_smoothing)
            + label_loss(y2, labels, kind, label_smoothing)) * 0.5


def total_loss(y1: Tensor, y2: Tensor, labels, config: CosubConfig) -> LossBundle:
    """``lam * label_part + (1 - lam) * cosub_part`` for a pair of submodel outputs."""
    label_part = paired_label_loss(y1, y2, labels, config.label_loss, config.label_smoothing)
    cosub_part = cosub_pair_loss(y1, y2, config.loss_kind)
    total = label_part * config.lam + cosub_part * (1.0 - config.lam)
    return LossBundle(total, label_part, cosub_part)
