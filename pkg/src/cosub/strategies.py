"""Training strategies as per-batch step functions, and the epoch loop.

Strategies and their storage (model weights x optimizer states):

============  =======  =========
supervised    1x       1x
kd            2x       1x        frozen pre-trained teacher
mean-teacher  2x       1x        EMA copy of the student as teacher
cotrain       2x       2x        two models teaching each other
cosub         1x       1x        two submodels of one model per sample
kd+cosub      2x       1x
============  =======  =========

Teachers never require gradients, so their forward passes are not recorded
on the tape at all.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .autograd import Tape
from .blocks import Model, build_model, forward, load_checkpoint, save_checkpoint
from .dataio import AugmentPolicy, Batch, Dataset, make_cosub_batches
from .losses import (CosubConfig, LossBundle, label_loss, paired_label_loss,
                     soft_target_loss, total_loss)
from .optim import AdamW, OptimConfig, lr_at, make_optimizer
from .sdepth import DropPattern, SDConfig, interleave, sample_pattern

log = logging.getLogger(__name__)

STRATEGIES = ("supervised", "cosub", "kd", "mean-teacher", "cotrain", "kd+cosub")


class TrainingDiverged(FloatingPointError):
    def __init__(self, message: str, last_good: dict | None = None):
        super().__init__(message)
        self.last_good = last_good


@dataclass(frozen=True)
class StrategyConfig:
    kind: str = "cosub"
    cosub: CosubConfig = CosubConfig()
    ema_momentum: float = 0.9999
    teacher_checkpoint: str | None = None
    duplicate: bool | None = None

    def __post_init__(self):
        if self.kind not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.kind!r}; expected one of {STRATEGIES}")
        if not 0.0 <= self.ema_momentum <= 1.0:
            raise ValueError(f"ema_momentum must lie in [0, 1], got {self.ema_momentum}")

    @property
    def duplicates(self) -> bool:
        """Whether batches are duplicated after augmentation."""
        if self.duplicate is not None:
            return self.duplicate
        return self.kind in ("cosub", "kd+cosub")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 128
    seed: int = 0
    augment: str = "none"
    eval_batch_size: int = 1000

    def __post_init__(self):
        AugmentPolicy.parse(self.augment)
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")


@dataclass(eq=False)
class TrainState:
    model: Model
    optimizer: AdamW
    rng: np.random.Generator
    teacher: Model | None = None
    peer: Model | None = None
    peer_optimizer: AdamW | None = None
    epoch: int = 0
    step: int = 0
    history: list = field(default_factory=list)

    def storage(self) -> dict[str, float]:
        """Weight and optimizer storage relative to a single model."""
        n = self.model.num_parameters()
        weights = n + sum(m.num_parameters() for m in (self.teacher, self.peer) if m is not None)
        opt = sum(o.state_size() for o in (self.optimizer, self.peer_optimizer) if o is not None)
        return {"weights": weights / n, "optimizer": opt / self.optimizer.state_size()}


def freeze(model: Model) -> Model:
    for p in model.parameters():
        p.requires_grad = False
        p.grad = None
    return model


def init_state(model: Model, strategy: StrategyConfig, optim: OptimConfig,
               rng: np.random.Generator, teacher: Model | None = None,
               peer: Model | None = None) -> TrainState:
    state = TrainState(model, make_optimizer(model, optim), rng)
    if strategy.kind in ("kd", "kd+cosub"):
        if teacher is None:
            if not strategy.teacher_checkpoint:
                raise ValueError(f"strategy {strategy.kind!r} requires a teacher checkpoint")
            teacher = load_checkpoint(strategy.teacher_checkpoint)
        check_teacher(model, teacher)
        state.teacher = freeze(teacher)
    elif strategy.kind == "mean-teacher":
        state.teacher = freeze(model.clone() if teacher is None else teacher)
    elif strategy.kind == "cotrain":
        if peer is None:
            peer = build_model({**model.arch, "seed": model.arch["seed"] + 1})
        state.peer = peer
        state.peer_optimizer = make_optimizer(peer, optim)
    return state


def check_teacher(student: Model, teacher: Model) -> None:
    a, b = student.arch, teacher.arch
    if a["kind"] != b["kind"]:
        raise ValueError(f"teacher architecture {b['kind']!r} does not match student {a['kind']!r}")
    if teacher.num_classes != student.num_classes:
        raise ValueError(f"teacher predicts {teacher.num_classes} classes, student {student.num_classes}")
    for k in ("input_dim", "image_size", "patch_size", "channels"):
        if a.get(k) != b.get(k):
            raise ValueError(f"teacher {k}={b.get(k)} does not match student {k}={a.get(k)}")


def ema_update(teacher: Model, student: Model, momentum: float) -> None:
    """teacher <- m * teacher + (1 - m) * student, parameter by parameter."""
    for (_, t), (_, s) in zip(teacher.named_parameters(), student.named_parameters()):
        t.data = (momentum * t.data + (1.0 - momentum) * s.data).astype(t.dtype)


# ---------------------------------------------------------------------------
# per-batch steps
# ---------------------------------------------------------------------------
def draw_pattern(batch: Batch, depth: int, sd: SDConfig, rng: np.random.Generator) -> DropPattern:
    """Independent drop patterns for the two copies of a duplicated batch."""
    if batch.duplicated:
        half = len(batch) // 2
        first = sample_pattern(half, depth, sd, rng)
        second = sample_pattern(half, depth, sd, rng)
        return interleave(first, second)
    return sample_pattern(len(batch), depth, sd, rng)


def _unique_labels(batch: Batch) -> np.ndarray:
    return batch.y[0::2] if batch.duplicated else batch.y


def _teacher_logits(teacher: Model, x):
    return forward(teacher, x)


def _check_finite(loss) -> None:
    value = float(loss.data)
    if not math.isfinite(value):
        raise FloatingPointError(f"non-finite loss {value}")


def _apply(state: TrainState, bundle: LossBundle, tape: Tape, lr: float) -> dict:
    _check_finite(bundle.total)
    tape.backward(bundle.total)
    state.optimizer.step(lr)
    if state.peer_optimizer is not None:
        state.peer_optimizer.step(lr)
    state.step += 1
    return bundle.values()


def _zero(state: TrainState) -> None:
    state.optimizer.zero_grad()
    if state.peer_optimizer is not None:
        state.peer_optimizer.zero_grad()


def step_supervised(state: TrainState, batch: Batch, sd: SDConfig, strategy: StrategyConfig,
                    lr: float, pattern: DropPattern | None = None) -> dict:
    """Label loss only.  On a duplicated batch the two copies' losses are averaged."""
    c = strategy.cosub
    pattern = draw_pattern(batch, state.model.depth, sd, state.rng) if pattern is None else pattern
    _zero(state)
    with Tape() as tape:
        y = forward(state.model, batch.x, pattern, sd.impl)
        if batch.duplicated:
            loss = paired_label_loss(y[0::2], y[1::2], _unique_labels(batch), c.label_loss, c.label_smoothing)
        else:
            loss = label_loss(y, batch.y, c.label_loss, c.label_smoothing)
    return _apply(state, LossBundle(loss, loss), tape, lr)


def step_cosub(state: TrainState, batch: Batch, sd: SDConfig, strategy: StrategyConfig,
               lr: float, pattern: DropPattern | None = None) -> dict:
    """Both copies run through the shared weights in one pass; each teaches the other."""
    if not batch.duplicated:
        raise ValueError("cosub needs a duplicated batch")
    pattern = draw_pattern(batch, state.model.depth, sd, state.rng) if pattern is None else pattern
    if np.all(pattern.effective_rates == 0.0):
        log.warning("effective drop rate is 0: both submodels are identical, cosub term has zero gradient")
    _zero(state)
    with Tape() as tape:
        y = forward(state.model, batch.x, pattern, sd.impl)
        y1, y2 = y[0::2], y[1::2]
        bundle = total_loss(y1, y2, _unique_labels(batch), strategy.cosub)
        if strategy.kind == "kd+cosub":
            c = strategy.cosub
            t = _teacher_logits(state.teacher, batch.x[0::2])
            teacher_part = (soft_target_loss(y1, t, c.loss_kind) + soft_target_loss(y2, t, c.loss_kind)) * 0.5
            distill = (bundle.cosub_part + teacher_part) * ((1.0 - c.lam) * 0.5)
            bundle = LossBundle(bundle.label_part * c.lam + distill, bundle.label_part,
                                bundle.cosub_part, teacher_part)
    return _apply(state, bundle, tape, lr)


def step_kd(state: TrainState, batch: Batch, sd: SDConfig, strategy: StrategyConfig,
            lr: float, pattern: DropPattern | None = None) -> dict:
    """Student against label and the frozen teacher's stop-gradient output."""
    c = strategy.cosub
    pattern = draw_pattern(batch, state.model.depth, sd, state.rng) if pattern is None else pattern
    _zero(state)
    with Tape() as tape:
        y = forward(state.model, batch.x, pattern, sd.impl)
        t = _teacher_logits(state.teacher, batch.x)
        label = label_loss(y, batch.y, c.label_loss, c.label_smoothing)
        distill = soft_target_loss(y, t, c.loss_kind)
        total = label * c.lam + distill * (1.0 - c.lam)
    return _apply(state, LossBundle(total, label, None, distill), tape, lr)


def step_mean_teacher(state: TrainState, batch: Batch, sd: SDConfig, strategy: StrategyConfig,
                      lr: float, pattern: DropPattern | None = None) -> dict:
    out = step_kd(state, batch, sd, strategy, lr, pattern)
    ema_update(state.teacher, state.model, strategy.ema_momentum)
    return out


def step_cotrain(state: TrainState, batch: Batch, sd: SDConfig, strategy: StrategyConfig,
                 lr: float, pattern: tuple[DropPattern, DropPattern] | None = None) -> dict:
    """Two distinct models, each mixing its label loss with the other's targets."""
    c = strategy.cosub
    if pattern is None:
        pattern = (draw_pattern(batch, state.model.depth, sd, state.rng),
                   draw_pattern(batch, state.peer.depth, sd, state.rng))
    _zero(state)
    with Tape() as tape:
        ya = forward(state.model, batch.x, pattern[0], sd.impl)
        yb = forward(state.peer, batch.x, pattern[1], sd.impl)
        la = label_loss(ya, batch.y, c.label_loss, c.label_smoothing)
        lb = label_loss(yb, batch.y, c.label_loss, c.label_smoothing)
        da = soft_target_loss(ya, yb, c.loss_kind)
        db = soft_target_loss(yb, ya, c.loss_kind)
        loss_a = la * c.lam + da * (1.0 - c.lam)
        loss_b = lb * c.lam + db * (1.0 - c.lam)
        # each model's gradient comes from its own loss only; the sum is for backward
        total = loss_a + loss_b
    _check_finite(total)
    tape.backward(total)
    state.optimizer.step(lr)
    state.peer_optimizer.step(lr)
    state.step += 1
    return {"loss": 0.5 * (float(loss_a.data) + float(loss_b.data)),
            "label_loss": 0.5 * (float(la.data) + float(lb.data)),
            "cosub_loss": 0.5 * (float(da.data) + float(db.data)),
            "teacher_loss": None}


STEP_FUNCTIONS = {
    "supervised": step_supervised,
    "cosub": step_cosub,
    "kd+cosub": step_cosub,
    "kd": step_kd,
    "mean-teacher": step_mean_teacher,
    "cotrain": step_cotrain,
}


# ---------------------------------------------------------------------------
# epoch loop
# ---------------------------------------------------------------------------
@dataclass
class MetricsRecord:
    epoch: int
    split: str
    loss: float
    label_loss: float
    cosub_loss: float | None
    teacher_loss: float | None
    accuracy: float
    seconds: float = 0.0

    def to_json(self, with_time: bool = False) -> str:
        d = asdict(self)
        if not with_time:
            d.pop("seconds")
        return json.dumps(d, sort_keys=True)


@dataclass
class TrainResult:
    records: list[MetricsRecord]
    state: TrainState

    @property
    def model(self) -> Model:
        return self.state.model


def predict(model: Model, x: np.ndarray, batch_size: int = 1000) -> np.ndarray:
    out = []
    for start in range(0, len(x), batch_size):
        out.append(forward(model, x[start:start + batch_size]).data)
    return np.concatenate(out)


def evaluate(model: Model, dataset: Dataset, batch_size: int = 1000) -> float:
    """Top-1 accuracy of the full model: all blocks, no drop, no scaling."""
    logits = predict(model, dataset.samples, batch_size)
    return float(np.mean(np.argmax(logits, axis=-1) == dataset.labels))


def _mean(values) -> float | None:
    values = [v for v in values if v is not None]
    return math.fsum(values) / len(values) if values else None


def train_loop(arch: dict, train: Dataset, test: Dataset, strategy: StrategyConfig,
               sd: SDConfig, optim: OptimConfig, config: TrainConfig,
               out_dir=None, teacher: Model | None = None, peer: Model | None = None) -> TrainResult:
    """Train for ``config.epochs`` epochs; one metrics record per epoch.

    With ``out_dir``, writes ``metrics.jsonl`` (deterministic fields),
    ``timings.jsonl`` (wall-clock) and ``model.ckpt``.
    """
    rng = np.random.default_rng(config.seed)
    model = build_model({**arch, "seed": config.seed})
    duplicate = strategy.duplicates
    rows = config.batch_size * (2 if duplicate else 1)
    optim = replace(optim, batch_size=rows)
    state = init_state(model, strategy, optim, rng, teacher, peer)
    step_fn = STEP_FUNCTIONS[strategy.kind]
    if strategy.kind in ("cosub", "kd+cosub") and not duplicate:
        raise ValueError(f"strategy {strategy.kind!r} needs duplicated batches")

    steps_per_epoch = len(train) // config.batch_size
    total_steps = config.epochs * steps_per_epoch
    warmup = optim.warmup_epochs * steps_per_epoch
    base_lr = optim.lr
    policy = AugmentPolicy.parse(config.augment)

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics_f = open(out / "metrics.jsonl", "w")
        timings_f = open(out / "timings.jsonl", "w")
    try:
        for epoch in range(1, config.epochs + 1):
            t0 = time.perf_counter()
            last_good = state.model.state_dict()
            values = []
            for batch in make_cosub_batches(train, config.batch_size, duplicate, rng, policy):
                lr = lr_at(state.step, total_steps, warmup, base_lr, optim.schedule, optim.min_lr)
                try:
                    v = step_fn(state, batch, sd, strategy, lr)
                except FloatingPointError as err:
                    if out is not None:
                        state.model.load_state_dict(last_good)
                        save_checkpoint(state.model, out / "last_good.ckpt")
                    raise TrainingDiverged(
                        f"epoch {epoch}, step {state.step}: {err}", last_good) from err
                values.append(v)
            acc = evaluate(state.model, test, config.eval_batch_size)
            state.epoch = epoch
            rec = MetricsRecord(
                epoch, test.split,
                _mean(v["loss"] for v in values), _mean(v["label_loss"] for v in values),
                _mean(v["cosub_loss"] for v in values), _mean(v["teacher_loss"] for v in values),
                acc, time.perf_counter() - t0,
            )
            state.history.append(rec)
            log.info("epoch %d loss %.4f acc %.4f (%.1fs)", epoch, rec.loss or 0.0, acc, rec.seconds)
            if out is not None:
                metrics_f.write(rec.to_json() + "\n")
                timings_f.write(json.dumps({"epoch": epoch, "seconds": rec.seconds}) + "\n")
        if out is not None:
            save_checkpoint(state.model, out / "model.ckpt")
    finally:
        if out is not None:
            metrics_f.close()
            timings_f.close()
    return TrainResult(state.history, state)
