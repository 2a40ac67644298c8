"""Train a baseline and a co-trained residual MLP, then compare their submodels.

Both runs share data, architecture, stochastic depth and seed; only the
strategy differs.  Random submodels are drawn by keeping each block with
probability ``1 - tau`` and evaluated without rescaling.

Run with ``python3 demos/submodel_population.py [config]``.
"""

import sys
from pathlib import Path

import numpy as np

from cosub import analysis, config as cfgmod
from cosub.strategies import evaluate, train_loop

HERE = Path(__file__).resolve().parent


def train(config, strategy: str):
    config = cfgmod.apply_overrides(config, [f"strategy.kind={strategy}"])
    train_set, test_set = config.datasets()
    arch = config.arch(int(np.prod(train_set.samples.shape[1:])), train_set.num_classes)
    result = train_loop(arch, train_set, test_set, config.strategy_config(), config.sd_config(),
                        config.optim_config(), config.train_config())
    return result.model, test_set


def main(path: Path) -> None:
    config = cfgmod.load(path)
    tau = config.sd.tau
    print(f"{path.name}: tau={tau}, 50 random submodels per model")
    for strategy in ("supervised", "cosub"):
        model, test_set = train(config, strategy)
        curve = analysis.population_curve(model, tau, 50, test_set, np.random.default_rng(0))
        mean = sum(acc * n for _, acc, n in curve) / 50
        print(f"\n{strategy}: full model {evaluate(model, test_set):.3f}, submodel mean {mean:.3f}")
        print(analysis.population_csv(curve), end="")


if __name__ == "__main__":
    main(Path(sys.argv[1]) if len(sys.argv) > 1 else HERE / "cosub_toy.cfg")
