"""AdamW, learning-rate schedules and the batch-size / layer-decay LR rules.

Layer decay indexing: with ``L`` blocks numbered ``0..L-1``, block ``l`` gets
multiplier ``LD ** (L - 1 - l)``.  The final block and the head get 1, the
stem shares block 0's multiplier ``LD ** (L - 1)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


# drop-path rate per model size and regime, plus fine-tuning layer decay
TAU_TABLE = {
    "ViT-S": {"in1k": 0.05, "in21k": 0.05},
    "ViT-M": {"in1k": 0.1, "in21k": 0.05},
    "ViT-B": {"in1k": 0.2, "in21k": 0.1},
    "ViT-L": {"in1k": 0.45, "in21k": 0.3},
    "ViT-H": {"in1k": 0.6, "in21k": 0.5},
}
LAYER_DECAY_TABLE = {"ViT-S": 0.7, "ViT-M": 0.75, "ViT-B": 0.75, "ViT-L": 0.8, "ViT-H": 0.85}
EXTRA_REGULARIZATION = 0.05
C_LD = 2.0


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass(frozen=True)
class OptimConfig:
    base_lr: float | None = None
    batch_size: int = 2048
    weight_decay: float = 0.02
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    layer_decay: float | None = None
    c_ld: float = 1.0
    schedule: str = "cosine"
    warmup_epochs: int = 5
    min_lr: float = 0.0

    def __post_init__(self):
        if self.layer_decay is not None and not 0.0 < self.layer_decay <= 1.0:
            raise ValueError(f"layer_decay must lie in (0, 1], got {self.layer_decay}")
        if self.schedule not in ("constant", "cosine"):
            raise ValueError(f"schedule must be 'constant' or 'cosine', got {self.schedule!r}")

    @property
    def lr(self) -> float:
        base = train_lr(self.batch_size) if self.base_lr is None else self.base_lr
        return base * self.c_ld


def train_lr(batch_size: int) -> float:
    """Square-root batch-size scaling around 1e-3 at batch 2048."""
    if batch_size < 1:
        raise ValueError("batch size must be >= 1")
    return 1e-3 * math.sqrt(batch_size / 2048)


def finetune_lr(batch_size: int, use_layer_decay: bool = False) -> float:
    if batch_size < 1:
        raise ValueError("batch size must be >= 1")
    return 1e-4 * math.sqrt(batch_size / 2048) * (C_LD if use_layer_decay else 1.0)


def layer_decay_factors(num_blocks: int, decay: float) -> list[float]:
    """Multipliers for blocks ``0..L-1`` followed by the head (length ``L + 1``)."""
    if num_blocks < 1:
        raise ValueError("need at least one block")
    return [decay ** (num_blocks - 1 - l) for l in range(num_blocks)] + [1.0]


def tau_for_model(model_name: str, pretrain_regime: str = "in1k",
                  more_regularization: bool = False) -> float:
    if model_name not in TAU_TABLE:
        raise KeyError(f"unknown model {model_name!r}; expected one of {sorted(TAU_TABLE)}")
    if pretrain_regime not in ("in1k", "in21k"):
        raise ValueError(f"regime must be 'in1k' or 'in21k', got {pretrain_regime!r}")
    tau = TAU_TABLE[model_name][pretrain_regime]
    return round(tau + EXTRA_REGULARIZATION, 10) if more_regularization else tau


def lr_at(step: int, total_steps: int, warmup_steps: int, base_lr: float,
          schedule: str = "cosine", min_lr: float = 0.0) -> float:
    """Linear warmup to ``base_lr``, then constant or cosine decay to ``min_lr``."""
    if warmup_steps and step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    if schedule == "constant":
        return base_lr
    span = max(1, total_steps - warmup_steps)
    progress = min(1.0, (step - warmup_steps) / span)
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + math.cos(math.pi * progress))


class AdamW:
    """Adam with decoupled weight decay and per-parameter LR multipliers.

    Update for each parameter, with ``lr_p = lr * multiplier``::

        p <- p - lr_p * wd * p - lr_p * m_hat / (sqrt(v_hat) + eps)

    Weight decay applies to tensors with ``ndim >= 2`` unless ``decay_all``.
    """

    def __init__(self, named_params, config: OptimConfig = OptimConfig(),
                 lr_multipliers: dict[str, float] | None = None, decay_all: bool = False):
        self.named = list(named_params)
        self.config = config
        self.multipliers = lr_multipliers or {}
        self.decay_all = decay_all
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.named}
        self.v = {n: np.zeros_like(p.data) for n, p in self.named}

    def zero_grad(self) -> None:
        for _, p in self.named:
            p.grad = None

    def state_size(self) -> int:
        return sum(a.size for a in self.m.values()) + sum(a.size for a in self.v.values())

    def step(self, lr: float) -> None:
        for name, p in self.named:
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                bad = np.argwhere(~np.isfinite(p.grad))[0]
                raise NonFiniteGradientError(
                    f"non-finite gradient in {name} at index {tuple(int(i) for i in bad)}")
        c = self.config
        self.t += 1
        bc1 = 1.0 - c.beta1 ** self.t
        bc2 = 1.0 - c.beta2 ** self.t
        for name, p in self.named:
            g = p.grad
            lr_p = lr * self.multipliers.get(name, 1.0)
            if c.weight_decay and (self.decay_all or p.ndim >= 2):
                p.data *= p.data.dtype.type(1.0 - lr_p * c.weight_decay)
            if g is None:
                continue
            m, v = self.m[name], self.v[name]
            # in-place with one scratch buffer per tensor; this runs every step
            tmp = np.multiply(g, 1.0 - c.beta1, dtype=m.dtype)
            m *= c.beta1
            m += tmp
            np.multiply(g, g, out=tmp)
            tmp *= 1.0 - c.beta2
            v *= c.beta2
            v += tmp
            np.multiply(v, 1.0 / bc2, out=tmp)
            np.sqrt(tmp, out=tmp)
            tmp += c.eps
            np.divide(m, tmp, out=tmp)
            tmp *= lr_p / bc1
            p.data -= tmp

def layer_multipliers(model, decay: float | None, pair_blocks: bool = False) -> dict[str, float]:
    """Map parameter names of ``model`` to layer-decay LR multipliers.

    With ``pair_blocks`` an attention/FFN pair counts as one block, as in a
    transformer where depth is counted in transformer blocks.
    """
    if decay is None:
        return {}
    L = model.depth // 2 if pair_blocks else model.depth
    factors = layer_decay_factors(L, decay)
    out = {}
    for name, _ in model.named_parameters():
        layer = model.param_layer(name)
        if layer == model.depth:
            out[name] = factors[-1]
        elif layer < 0:
            out[name] = factors[0]
        else:
            out[name] = factors[layer // 2 if pair_blocks else layer]
    return out


def make_optimizer(model, config: OptimConfig) -> AdamW:
    pair = model.arch.get("kind") == "tiny_vit"
    return AdamW(model.named_parameters(), config, layer_multipliers(model, config.layer_decay, pair))
