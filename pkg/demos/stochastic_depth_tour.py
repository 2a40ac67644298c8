"""Stochastic depth walkthrough: quantized rates, exact equivalence, and speed.

Run with ``python3 demos/stochastic_depth_tour.py``.
"""

import numpy as np

from cosub import analysis
from cosub.autograd import Tape
from cosub.blocks import build_residual_mlp, forward
from cosub.cli import run_bench
from cosub.sdepth import SDConfig, quantization_table, sample_pattern


def show_quantization(batch_size: int = 8) -> None:
    # Dropping whole rows means the realised rate moves in steps of 1/B.
    levels = sorted({eff for _, eff in quantization_table(batch_size)})
    print(f"B={batch_size}: {len(levels)} distinct effective rates: {levels}")


def show_equivalence(seed: int = 0) -> None:
    # Same pattern, two implementations: masking all rows versus gathering kept rows.
    model = build_residual_mlp(32, 6, 5, 16, seed, dtype="float64")
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((24, 16))
    pattern = sample_pattern(24, 6, SDConfig(0.4), rng)
    grads = {}
    for impl in ("naive", "efficient"):
        for p in model.parameters():
            p.grad = None
        with Tape() as tape:
            loss = forward(model, x, pattern, impl).mean()
        tape.backward(loss)
        grads[impl] = {name: p.grad.copy() for name, p in model.named_parameters()}
    worst = max(np.abs(grads["naive"][k] - grads["efficient"][k]).max() for k in grads["naive"])
    print(f"naive vs efficient, float64: max gradient difference {worst:.2e}")


def show_linear_average() -> None:
    # With linear blocks the deployed model is the exact mean over all 2^L gate patterns.
    lin = analysis.linear_average_check(8, 16, 0.3, seed=0)
    non = analysis.linear_average_check(8, 16, 0.3, seed=0, nonlinear=True)
    print(f"2^8 pattern average vs full model: linear {lin:.1e}, tanh {non:.1e}")


def show_bench() -> None:
    report = run_bench(width=256, depth=12, batch=128, tau=0.5, repeats=10)
    print(f"tau=0.5: block FLOP ratio {report['flop_ratio']:.3f}, "
          f"time ratio efficient/naive {report['time_ratio']:.3f}")


if __name__ == "__main__":
    show_quantization()
    show_equivalence()
    show_linear_average()
    show_bench()
