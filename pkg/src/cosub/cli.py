"""Command-line entry point: ``cosub {train,eval,analyze,quantization,bench}``.

Exit codes: 0 success, 1 runtime failure (e.g. diverged training), 2 invalid
configuration or arguments.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import statistics
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import analysis, config as cfgmod
from .autograd import Tape
from .blocks import CheckpointError, build_residual_mlp, forward, load_checkpoint
from .config import ConfigError, ExperimentConfig
from .sdepth import ComputeCounter, SDConfig, quantization_csv, sample_pattern
from .strategies import TrainingDiverged, evaluate, train_loop

log = logging.getLogger("cosub")


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------
def parse_seeds(text: str) -> list[int]:
    """``"3"``, ``"0,2,5"`` or the inclusive range ``"0..4"``."""
    text = text.strip()
    if ".." in text:
        lo, hi = text.split("..", 1)
        lo, hi = int(lo), int(hi)
        if hi < lo:
            raise ValueError(f"empty seed range {text!r}")
        return list(range(lo, hi + 1))
    return [int(s) for s in text.split(",") if s.strip()]


def run_training(config: ExperimentConfig, out_dir: Path) -> dict:
    """One run: resolved config, dataset spec, metrics, timings and checkpoint in ``out_dir``."""
    train, test = config.datasets()
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.cfg").write_text(cfgmod.dumps(config))
    if config.data.source == "synthetic":
        (out_dir / "data.json").write_text(json.dumps(config.synthetic_spec().to_dict(), sort_keys=True) + "\n")
    arch = config.arch(int(np.prod(train.samples.shape[1:])), train.num_classes)
    result = train_loop(arch, train, test, config.strategy_config(), config.sd_config(),
                        config.optim_config(), config.train_config(), out_dir)
    final = result.records[-1] if result.records else None
    return {"seed": config.train.seed, "dir": str(out_dir),
            "accuracy": None if final is None else final.accuracy,
            "loss": None if final is None else final.loss}


def _train_one(args) -> dict:
    text, seed, out_dir = args
    config = cfgmod.loads(text, [f"train.seed={seed}", f"output.dir={out_dir}"])
    return run_training(config, Path(out_dir))


def cmd_train(config_path, overrides=(), seeds: str | None = None, jobs: int = 1) -> int:
    config = cfgmod.load(config_path, overrides) if config_path else cfgmod.loads("", overrides)
    config.validate()
    root = Path(config.output.dir)
    if seeds is None:
        summary = run_training(config, root)
        print(json.dumps(summary, sort_keys=True))
        return 0
    seed_list = parse_seeds(seeds)
    text = cfgmod.dumps(config)
    tasks = [(text, s, str(root / f"seed_{s}")) for s in seed_list]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_train_one, tasks))
    else:
        results = [_train_one(t) for t in tasks]
    # pool.map preserves task order, so the summary order is fixed
    root.mkdir(parents=True, exist_ok=True)
    with open(root / "summary.jsonl", "w") as f:
        for r in results:
            f.write(json.dumps(r, sort_keys=True) + "\n")
    accs = [r["accuracy"] for r in results if r["accuracy"] is not None]
    print(json.dumps({"seeds": seed_list, "mean_accuracy": math.fsum(accs) / len(accs) if accs else None},
                     sort_keys=True))
    return 0


# ---------------------------------------------------------------------------
# eval / analyze
# ---------------------------------------------------------------------------
def _eval_set(config_path, overrides):
    config = cfgmod.load(config_path, overrides) if config_path else cfgmod.loads("", overrides)
    config.validate()
    return config.datasets()[1]


def cmd_eval(checkpoint, config_path=None, overrides=()) -> int:
    model = load_checkpoint(checkpoint)
    test = _eval_set(config_path, overrides)
    print(json.dumps({"checkpoint": str(checkpoint), "accuracy": evaluate(model, test)}, sort_keys=True))
    return 0


def cmd_analyze(mode: str, checkpoint=None, config_path=None, overrides=(), tau: float = 0.1,
                draws: int = 50, seed: int = 0, layers: int = 8, width: int = 16,
                paired: bool = False, expect_arch: str | None = None, out=None,
                scaled: bool = False) -> int:
    if mode == "count":
        text = analysis.count_csv(layers)
    elif mode == "linear-check":
        lin = analysis.linear_average_check(layers, width, tau, seed)
        non = analysis.linear_average_check(layers, width, tau, seed, nonlinear=True)
        text = ("blocks,tau,deviation\n"
                f"linear,{tau!r},{lin!r}\n"
                f"tanh,{tau!r},{non!r}\n")
    elif mode in ("population", "ablate-one"):
        if checkpoint is None:
            raise ConfigError("checkpoint", f"mode {mode} needs --checkpoint")
        if isinstance(expect_arch, str):
            expect_arch = json.loads(expect_arch) if expect_arch.lstrip().startswith("{") else {"kind": expect_arch}
        model = load_checkpoint(checkpoint, expect_arch)
        test = _eval_set(config_path, overrides)
        if mode == "population":
            curve = analysis.population_curve(model, tau, draws, test, np.random.default_rng(seed),
                                               scaled)
            text = analysis.population_csv(curve)
        else:
            text = analysis.ablation_csv(analysis.ablate_single_block(model, test, paired), paired)
    else:
        raise ConfigError("mode", f"unknown analysis mode {mode!r}")
    _emit(text, out)
    return 0


def _emit(text: str, out) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_quantization(batch_size: int, variant: str = "round", out=None) -> int:
    if batch_size < 1:
        raise ConfigError("batch_size", "must be >= 1")
    _emit(quantization_csv(batch_size, variant), out)
    return 0


# ---------------------------------------------------------------------------
# bench
# ---------------------------------------------------------------------------
def _time_step(model, x, pattern, impl) -> float:
    t0 = time.perf_counter()
    with Tape() as tape:
        y = forward(model, x, pattern, impl)
        loss = y.mean()
    tape.backward(loss)
    return time.perf_counter() - t0


def run_bench(width: int = 256, depth: int = 12, batch: int = 128, tau: float = 0.5,
              repeats: int = 30, seed: int = 0) -> dict:
    """Median forward+backward time and block FLOPs, naive versus efficient SD.

    Both implementations see the same drop patterns; timings interleave the
    two so slow drifts in machine load hit both equally.
    """
    model = build_residual_mlp(width, depth, 10, width, seed)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((batch, width)).astype(np.float32)
    sd = SDConfig(tau)
    patterns = [sample_pattern(batch, depth, sd, rng) for _ in range(repeats)]

    flops = {}
    for impl in ("naive", "efficient"):
        counter = ComputeCounter()
        forward(model, x, patterns[0], impl, counter)
        flops[impl] = counter.flops
    counter = ComputeCounter()
    forward(model, x, None, counter=counter)
    flops["none"] = counter.flops

    for impl in ("naive", "efficient"):
        _time_step(model, x, patterns[0], impl)  # warm-up
    times = {"naive": [], "efficient": [], "none": []}
    for p in patterns:
        for impl in ("naive", "efficient"):
            times[impl].append(_time_step(model, x, p, impl))
        times["none"].append(_time_step(model, x, None, "efficient"))
    med = {k: statistics.median(v) for k, v in times.items()}
    return {
        "width": width, "depth": depth, "batch": batch, "tau": tau, "repeats": repeats,
        "block_flops": flops,
        "flop_ratio": flops["efficient"] / flops["naive"],
        "median_seconds": med,
        "time_ratio": med["efficient"] / med["naive"],
        "overhead_vs_no_sd": med["efficient"] / med["none"] - 1.0,
    }


def cmd_bench(width=256, depth=12, batch=128, tau=0.5, repeats=30, out=None) -> int:
    report = run_bench(width, depth, batch, tau, repeats)
    _emit(json.dumps(report, indent=2, sort_keys=True) + "\n", out)
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cosub", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)

    def add_config(sp):
        sp.add_argument("--config", help="flat section.key = value config file")
        sp.add_argument("--set", dest="overrides", action="append", default=[], metavar="K=V",
                        help="override one config key; repeatable")

    t = sub.add_parser("train", help="train one or several seeds")
    add_config(t)
    t.add_argument("--seeds", help="seed list: 3, 0,2,5 or 0..4 (runs go to output.dir/seed_N)")
    t.add_argument("--jobs", type=int, default=1, help="worker processes for --seeds")

    e = sub.add_parser("eval", help="accuracy of a checkpoint on the config's test split")
    e.add_argument("--checkpoint", required=True)
    add_config(e)

    a = sub.add_parser("analyze", help="submodel population, ablation, counts, linear check")
    a.add_argument("--mode", required=True, choices=["population", "ablate-one", "count", "linear-check"])
    a.add_argument("--checkpoint")
    a.add_argument("--arch", dest="expect_arch", help="expected architecture: a kind name or a JSON dict of descriptor entries")
    add_config(a)
    a.add_argument("--tau", type=float, default=0.1)
    a.add_argument("--draws", type=int, default=50)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--layers", type=int, default=8)
    a.add_argument("--width", type=int, default=16)
    a.add_argument("--paired", action="store_true", help="ablate attention/FFN pairs together")
    a.add_argument("--scaled", action="store_true",
                   help="population: rescale kept residuals by 1/(1-tau) instead of leaving them unscaled")
    a.add_argument("--out", help="write CSV here instead of stdout")

    q = sub.add_parser("quantization", help="requested versus effective drop rate")
    q.add_argument("--batch-size", type=int, required=True)
    q.add_argument("--variant", choices=["round", "floor"], default="round")
    q.add_argument("--out")

    b = sub.add_parser("bench", help="naive versus efficient stochastic depth timing")
    b.add_argument("--width", type=int, default=256)
    b.add_argument("--depth", type=int, default=12)
    b.add_argument("--batch", type=int, default=128)
    b.add_argument("--tau", type=float, default=0.5)
    b.add_argument("--repeats", type=int, default=30)
    b.add_argument("--out")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "train":
            return cmd_train(args.config, args.overrides, args.seeds, args.jobs)
        if args.command == "eval":
            return cmd_eval(args.checkpoint, args.config, args.overrides)
        if args.command == "analyze":
            return cmd_analyze(args.mode, args.checkpoint, args.config, args.overrides, args.tau,
                               args.draws, args.seed, args.layers, args.width, args.paired,
                               args.expect_arch, args.out, args.scaled)
        if args.command == "quantization":
            return cmd_quantization(args.batch_size, args.variant, args.out)
        if args.command == "bench":
            return cmd_bench(args.width, args.depth, args.batch, args.tau, args.repeats, args.out)
    except (ConfigError, CheckpointError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except ValueError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except TrainingDiverged as err:
        print(f"error: training diverged: {err}", file=sys.stderr)
        return 1
    return 2


if __name__ == "__main__":
    sys.exit(main())
