"""Stochastic depth: drop-pattern sampling, the masking and permute-select
kernels, and drop-rate quantization.

The efficient kernel keeps a fixed number of rows per layer,
``B_keep = round(B * (1 - tau))``, chosen as the first ``B_keep`` entries of a
uniform random permutation.  The residual branch is evaluated on those rows
only and scatter-added back with scale ``1 / (1 - tau_eff)``, where
``tau_eff = 1 - B_keep / B`` is the rate actually realized.

Rounding follows Python/numpy ``round`` (half to even).  Permutations come
from ``numpy.random.Generator.permutation`` (a Fisher-Yates shuffle driven by
the caller's PCG64 stream), so patterns are reproducible across platforms.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .autograd import Tensor, add, index_add, mul, take_rows

MODES = ("uniform", "progressive")
IMPLS = ("naive", "efficient")


@dataclass(frozen=True)
class SDConfig:
    tau: float = 0.0
    mode: str = "uniform"
    impl: str = "efficient"

    def __post_init__(self):
        if not 0.0 <= self.tau < 1.0:
            raise ValueError(f"tau must lie in [0, 1), got {self.tau}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.impl not in IMPLS:
            raise ValueError(f"impl must be one of {IMPLS}, got {self.impl!r}")


@dataclass
class DropPattern:
    """Per-layer kept rows of a batch: the identity of each sample's submodel.

    ``scales[l]`` multiplies the residual of layer ``l`` on kept rows.
    """

    batch_size: int
    kept: list[np.ndarray]
    rates: np.ndarray
    scales: np.ndarray

    def __post_init__(self):
        for l, idx in enumerate(self.kept):
            if idx.size and (idx.min() < 0 or idx.max() >= self.batch_size):
                raise IndexError(f"layer {l}: kept index out of range for batch {self.batch_size}")
            if np.unique(idx).size != idx.size:
                raise ValueError(f"layer {l}: duplicate kept indices")

    @property
    def num_layers(self) -> int:
        return len(self.kept)

    @property
    def keep_counts(self) -> np.ndarray:
        return np.array([len(k) for k in self.kept])

    @property
    def effective_rates(self) -> np.ndarray:
        return 1.0 - self.keep_counts / self.batch_size

    def masks(self) -> np.ndarray:
        """Boolean gate matrix of shape (L, B)."""
        m = np.zeros((self.num_layers, self.batch_size), dtype=bool)
        for l, idx in enumerate(self.kept):
            m[l, idx] = True
        return m

    @classmethod
    def from_masks(cls, masks: np.ndarray, scales) -> "DropPattern":
        masks = np.asarray(masks, dtype=bool)
        L, B = masks.shape
        kept = [np.flatnonzero(masks[l]) for l in range(L)]
        scales = np.broadcast_to(np.asarray(scales, dtype=np.float64), (L,)).copy()
        rates = 1.0 - masks.mean(axis=1)
        return cls(B, kept, rates, scales)

    @classmethod
    def all_kept(cls, batch_size: int, num_layers: int, tau: float = 0.0) -> "DropPattern":
        idx = np.arange(batch_size)
        return cls(batch_size, [idx.copy() for _ in range(num_layers)],
                   np.zeros(num_layers), np.full(num_layers, 1.0 / (1.0 - tau)))


def keep_count(batch_size: int, tau: float) -> int:
    return max(0, int(round(batch_size * (1.0 - tau))))


def effective_rate(batch_size: int, tau: float) -> float:
    """Drop rate realized when exactly ``round(B * (1 - tau))`` rows are kept."""
    if batch_size < 1:
        raise ValueError("batch size must be >= 1")
    return 1.0 - keep_count(batch_size, tau) / batch_size


def _scale_for(tau_eff: float) -> float:
    return 0.0 if tau_eff >= 1.0 else 1.0 / (1.0 - tau_eff)


def layer_rates(num_layers: int, config: SDConfig) -> np.ndarray:
    if config.mode == "uniform":
        return np.full(num_layers, config.tau)
    return config.tau * (np.arange(num_layers) + 1) / num_layers


def sample_pattern(batch_size: int, num_layers: int, config: SDConfig,
                   rng: np.random.Generator) -> DropPattern:
    """Permute-select: for every layer keep the first B_keep rows of a fresh permutation."""
    if batch_size < 1:
        raise ValueError("batch size must be >= 1")
    rates = layer_rates(num_layers, config)
    kept, scales = [], np.empty(num_layers)
    for l, tau_l in enumerate(rates):
        n_keep = keep_count(batch_size, tau_l)
        kept.append(rng.permutation(batch_size)[:n_keep])
        scales[l] = _scale_for(1.0 - n_keep / batch_size)
    return DropPattern(batch_size, kept, rates, scales)


def bernoulli_pattern(batch_size: int, num_layers: int, tau: float,
                      rng: np.random.Generator) -> DropPattern:
    """Classic per-sample Bernoulli(1 - tau) gates with scale 1/(1 - tau)."""
    masks = rng.random((num_layers, batch_size)) >= tau
    pattern = DropPattern.from_masks(masks, _scale_for(tau))
    pattern.rates = np.full(num_layers, tau)
    return pattern


def interleave(first: DropPattern, second: DropPattern) -> DropPattern:
    """Combine patterns of two batch copies into one over rows 0,2,4.. / 1,3,5.."""
    if first.batch_size != second.batch_size or first.num_layers != second.num_layers:
        raise ValueError("patterns to interleave must share batch size and depth")
    kept, scales = [], np.empty(first.num_layers)
    for l in range(first.num_layers):
        kept.append(np.concatenate([2 * first.kept[l], 2 * second.kept[l] + 1]))
        if first.scales[l] != second.scales[l]:
            raise ValueError(f"layer {l}: copies use different residual scales")
        scales[l] = first.scales[l]
    return DropPattern(2 * first.batch_size, kept, first.rates.copy(), scales)


# ---------------------------------------------------------------------------
# compute accounting
# ---------------------------------------------------------------------------
@dataclass
class ComputeCounter:
    """Counts residual-branch evaluations: rows processed and forward FLOPs."""

    rows: list[int] = field(default_factory=list)
    flops: int = 0

    def add(self, block, rows: int, tokens: int = 1) -> None:
        self.rows.append(rows)
        per_row = getattr(block, "flops_per_row", None)
        if per_row is not None:
            self.flops += rows * per_row(tokens)

    def reset(self) -> None:
        self.rows.clear()
        self.flops = 0


# ---------------------------------------------------------------------------
# kernels
# ---------------------------------------------------------------------------
Block = Callable[[Tensor], Tensor]


def _row_shape(x: Tensor) -> tuple[int, ...]:
    return (x.shape[0],) + (1,) * (x.ndim - 1)


def apply_naive(x: Tensor, block: Block, kept_mask, scale=1.0,
                counter: ComputeCounter | None = None) -> Tensor:
    """``x + mask * scale * block(x)``: the residual is computed for every row.

    ``scale`` may be a scalar or a per-row array.
    """
    mask = np.asarray(kept_mask, dtype=bool)
    if mask.shape != (x.shape[0],):
        raise ValueError(f"mask length {mask.shape} does not match batch {x.shape[0]}")
    gate = (mask * np.asarray(scale, dtype=np.float64)).astype(x.dtype).reshape(_row_shape(x))
    if counter is not None:
        counter.add(block, x.shape[0], _tokens(x))
    return add(x, mul(block(x), Tensor(gate, dtype=x.dtype)))


def apply_efficient(x: Tensor, block: Block, kept_indices, tau_effective: float,
                    counter: ComputeCounter | None = None) -> Tensor:
    """Evaluate ``block`` on the kept rows only and scatter-add the scaled result."""
    return _select_apply(x, block, kept_indices, _scale_for(tau_effective), counter)


def _select_apply(x: Tensor, block: Block, kept_indices, scale: float,
                  counter: ComputeCounter | None) -> Tensor:
    idx = np.asarray(kept_indices, dtype=np.intp)
    B = x.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= B):
        raise IndexError(f"kept index out of range for batch of {B}")
    if idx.size == 0:
        return x
    if counter is not None:
        counter.add(block, idx.size, _tokens(x))
    if idx.size == B and np.unique(idx).size == B:
        # nothing dropped: blocks act row-wise, so skip the gather and scatter
        r = block(x)
        return add(x, r if scale == 1.0 else mul(r, Tensor(np.asarray(scale, dtype=x.dtype))))
    return index_add(x, idx, block(take_rows(x, idx)), scale)


def _tokens(x: Tensor) -> int:
    return int(np.prod(x.shape[1:-1])) if x.ndim > 2 else 1


def apply_layer(x: Tensor, block: Block, pattern: DropPattern, layer: int, impl: str,
                counter: ComputeCounter | None = None) -> Tensor:
    if pattern.batch_size != x.shape[0]:
        raise ValueError(f"pattern batch {pattern.batch_size} != input batch {x.shape[0]}")
    scale = pattern.scales[layer]
    if impl == "efficient":
        return _select_apply(x, block, pattern.kept[layer], scale, counter)
    if impl == "naive":
        mask = np.zeros(pattern.batch_size, dtype=bool)
        mask[pattern.kept[layer]] = True
        return apply_naive(x, block, mask, scale, counter)
    raise ValueError(f"unknown stochastic depth implementation {impl!r}")


# ---------------------------------------------------------------------------
# quantization
# ---------------------------------------------------------------------------
def _floor_rate(batch_size: int, tau: float) -> float:
    # dropped rows floored to an integer: floor(tau * B) / B
    return math.floor(tau * batch_size + 1e-9) / batch_size


def quantization_table(batch_size: int, variant: str = "round") -> list[tuple[float, float]]:
    """Requested drop rate on the 0.00..0.99 grid versus the realized rate.

    ``variant="round"`` is the kernel's rule; ``"floor"`` floors the number of
    dropped rows instead.
    """
    if batch_size < 1:
        raise ValueError("batch size must be >= 1")
    rule = {"round": effective_rate, "floor": _floor_rate}.get(variant)
    if rule is None:
        raise ValueError(f"unknown quantization variant {variant!r}")
    grid = [i / 100 for i in range(100)]
    return [(t, rule(batch_size, t)) for t in grid]


def quantization_csv(batch_size: int, variant: str = "round") -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["requested_tau", "effective_tau", "B"])
    for t, te in quantization_table(batch_size, variant):
        w.writerow([f"{t:.2f}", repr(te), batch_size])
    return buf.getvalue()
