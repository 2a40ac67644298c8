"""Submodel-population tools: trimmed submodels, single-block ablation,
binomial submodel counts and the brute-force averaging check for linear blocks.
"""

from __future__ import annotations

import csv
import io
import itertools
import math
from dataclasses import dataclass

import numpy as np

from .autograd import Tensor
from .blocks import Model
from .dataio import Dataset
from .sdepth import apply_naive


@dataclass(frozen=True)
class SubmodelSpec:
    kept_layers: tuple[int, ...]

    def __post_init__(self):
        k = tuple(self.kept_layers)
        if list(k) != sorted(set(k)):
            raise ValueError(f"kept layers must be unique and ascending: {k}")
        object.__setattr__(self, "kept_layers", k)


class SubmodelView:
    """Forward view of ``model`` applying only ``spec.kept_layers``.

    Weights are shared with the parent model.  By default kept residuals are
    unscaled; ``tau`` rescales them by ``1 / (1 - tau)`` instead.
    """

    def __init__(self, model: Model, spec: SubmodelSpec, tau: float | None = None):
        if spec.kept_layers and spec.kept_layers[-1] >= model.depth:
            raise ValueError(f"layer {spec.kept_layers[-1]} out of range for depth {model.depth}")
        self.model = model
        self.spec = spec
        self.scale = 1.0 if tau is None else 1.0 / (1.0 - tau)

    def __call__(self, x) -> Tensor:
        m = self.model
        h = m.embed(x)
        for l in self.spec.kept_layers:
            r = m.blocks[l](h)
            h = h + (r if self.scale == 1.0 else r * self.scale)
        return m.readout(h)

    def accuracy(self, dataset: Dataset, batch_size: int = 1000) -> float:
        hits = 0
        for start in range(0, len(dataset), batch_size):
            logits = self(dataset.samples[start:start + batch_size]).data
            hits += int(np.sum(np.argmax(logits, -1) == dataset.labels[start:start + batch_size]))
        return hits / len(dataset)


def extract_submodel(model: Model, spec: SubmodelSpec | tuple | list, tau: float | None = None) -> SubmodelView:
    if not isinstance(spec, SubmodelSpec):
        spec = SubmodelSpec(tuple(spec))
    return SubmodelView(model, spec, tau)


def sample_submodels(depth: int, tau: float, num_draws: int, rng: np.random.Generator) -> list[SubmodelSpec]:
    """Each layer kept independently with probability ``1 - tau``."""
    keep = rng.random((num_draws, depth)) >= tau
    return [SubmodelSpec(tuple(int(i) for i in np.flatnonzero(row))) for row in keep]


def population_curve(model: Model, tau: float, num_draws: int, eval_set: Dataset,
                     rng: np.random.Generator, scaled: bool = False) -> list[tuple[int, float, int]]:
    """(layers kept, mean accuracy, draws) per non-empty layer-count bucket."""
    if num_draws < 1:
        raise ValueError("num_draws must be >= 1")
    buckets: dict[int, list[float]] = {}
    for spec in sample_submodels(model.depth, tau, num_draws, rng):
        acc = extract_submodel(model, spec, tau if scaled else None).accuracy(eval_set)
        buckets.setdefault(len(spec.kept_layers), []).append(acc)
    return [(k, math.fsum(v) / len(v), len(v)) for k, v in sorted(buckets.items())]


def mean_submodel_accuracy(model: Model, tau: float, num_draws: int, eval_set: Dataset,
                           rng: np.random.Generator) -> float:
    curve = population_curve(model, tau, num_draws, eval_set, rng)
    return math.fsum(acc * n for _, acc, n in curve) / num_draws


def ablate_single_block(model: Model, eval_set: Dataset, paired: bool = True) -> list[float]:
    """Accuracy with one block removed, for every block.

    ``paired`` removes an (attention, FFN) pair per evaluation, giving L/2
    results; otherwise each residual is removed alone (L results).
    """
    L = model.depth
    if paired and L % 2:
        raise ValueError(f"paired ablation needs an even number of residuals, got {L}")
    groups = [(2 * b, 2 * b + 1) for b in range(L // 2)] if paired else [(l,) for l in range(L)]
    out = []
    for group in groups:
        kept = tuple(l for l in range(L) if l not in group)
        out.append(extract_submodel(model, kept).accuracy(eval_set))
    return out


def count_submodels(num_layers: int, k: int) -> int:
    """Number of submodels keeping exactly ``k`` of ``num_layers`` residuals."""
    if not 0 <= k <= num_layers:
        raise ValueError(f"need 0 <= k <= L, got k={k}, L={num_layers}")
    return math.comb(num_layers, k)


def _linear_blocks(depth: int, width: int, rng: np.random.Generator, nonlinear: bool):
    mats = [rng.normal(0.0, 1.0 / math.sqrt(width), (width, width)) for _ in range(depth)]
    if nonlinear:
        return [lambda h, w=w: Tensor(np.tanh(h.data @ w)) for w in mats]
    return [lambda h, w=w: h @ Tensor(w) for w in mats]


def linear_average_check(depth: int, width: int, tau: float, seed: int = 0, batch: int = 4,
                         nonlinear: bool = False, max_depth: int = 10) -> float:
    """Max |E_s[gated output] - full unscaled output| by enumerating all 2^L gates.

    Gate ``s_l`` is kept with probability ``1 - tau`` and kept residuals are
    scaled by ``1 / (1 - tau)``, as during training.  Exact (up to rounding)
    for linear blocks; ``nonlinear=True`` swaps in ``tanh(x W)`` blocks, for
    which the identity does not hold.
    """
    if depth > max_depth:
        raise ValueError(f"enumerating 2^{depth} patterns exceeds the limit of 2^{max_depth}")
    if not 0.0 <= tau < 1.0:
        raise ValueError(f"tau must lie in [0, 1), got {tau}")
    rng = np.random.default_rng(seed)
    blocks = _linear_blocks(depth, width, rng, nonlinear)
    x = Tensor(rng.standard_normal((batch, width)), dtype=np.float64)

    full = x
    for block in blocks:
        full = full + block(full)

    scale = 1.0 / (1.0 - tau)
    expected = np.zeros_like(x.data)
    for gates in itertools.product((0, 1), repeat=depth):
        kept = sum(gates)
        weight = (1.0 - tau) ** kept * tau ** (depth - kept)
        if weight == 0.0:
            continue
        h = x
        for gate, block in zip(gates, blocks):
            h = apply_naive(h, block, np.full(batch, bool(gate)), scale)
        expected += weight * h.data
    return float(np.max(np.abs(expected - full.data)))


# ---------------------------------------------------------------------------
# CSV emitters
# ---------------------------------------------------------------------------
def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def count_csv(num_layers: int) -> str:
    """Columns: layers_kept, num_submodels."""
    return _csv(["layers_kept", "num_submodels"],
                [(k, count_submodels(num_layers, k)) for k in range(num_layers + 1)])


def population_csv(curve) -> str:
    """Columns: layers_kept, mean_accuracy, draws."""
    return _csv(["layers_kept", "mean_accuracy", "draws"], [(k, repr(a), n) for k, a, n in curve])


def ablation_csv(accuracies, paired: bool = True) -> str:
    """Columns: removed_block, accuracy."""
    return _csv(["removed_block" if paired else "removed_residual", "accuracy"],
                [(i, repr(a)) for i, a in enumerate(accuracies)])
