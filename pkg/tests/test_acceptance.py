"""Acceptance suite: one check per criterion, each reporting a PASS/FAIL line.

Run under pytest (the lines are repeated in the terminal summary) or directly
with ``python3 tests/test_acceptance.py [numbers...]``.
"""

from __future__ import annotations

import contextlib
import functools
import io
import math
import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent))

from helpers import (GOLDEN_IMAGES, GOLDEN_LABELS, GOLDEN_PIXELS, contract,  # noqa: E402
                     cosub_gradient_report, esd_case, primitive_cases)

from cosub import config as cfgmod  # noqa: E402
from cosub.analysis import count_submodels, linear_average_check, mean_submodel_accuracy  # noqa: E402
from cosub.autograd import grad_check  # noqa: E402
from cosub.blocks import build_residual_mlp, build_tiny_vit, load_checkpoint, save_checkpoint  # noqa: E402
from cosub.cli import cmd_quantization, run_bench, run_training  # noqa: E402
from cosub.dataio import load_idx, read_idx_images, read_idx_labels, write_idx  # noqa: E402
from cosub.losses import CosubConfig  # noqa: E402
from cosub.optim import finetune_lr, layer_decay_factors, tau_for_model, train_lr  # noqa: E402
from cosub.sdepth import SDConfig, interleave, sample_pattern  # noqa: E402
from cosub.strategies import StrategyConfig, ema_update, train_loop  # noqa: E402

DEMOS = Path(__file__).resolve().parent.parent / "demos"
TOY_CFG = DEMOS / "cosub_toy.cfg"
DESK_CFG = DEMOS / "desk_mlp.cfg"

RESULTS: dict[int, str] = {}


def report(number: int, title: str, passed: bool, detail: str) -> bool:
    line = f"criterion {number:2d} [{'PASS' if passed else 'FAIL'}] {title}: {detail}"
    RESULTS[number] = line
    print(line, flush=True)
    return passed


def _toy(overrides=()):
    config = cfgmod.load(TOY_CFG, overrides).validate()
    train, test = config.datasets()
    arch = config.arch(train.samples.shape[1], train.num_classes)
    return config, arch, train, test


# ---------------------------------------------------------------------------
# 1. gradient correctness
# ---------------------------------------------------------------------------
def check_1() -> bool:
    t0 = time.perf_counter()
    worst_prim, worst_name, trials = 0.0, "", 0
    for seed in range(4):
        for name, (fn, params) in primitive_cases(seed).items():
            r = grad_check(lambda: contract(fn()), params)
            trials += 1
            if not r.passed or r.max_rel_error > worst_prim:
                worst_prim, worst_name = (math.inf if not r.passed else r.max_rel_error), name

    model = build_tiny_vit(4, 2, 4, 1, 2, 3, seed=0, dtype="float64")
    noise = np.random.default_rng(1)
    for p in model.parameters():
        p.data = p.data + noise.standard_normal(p.shape) * 0.3
    rng = np.random.default_rng(0)
    xd = np.repeat(rng.standard_normal((4, 16)), 2, axis=0)
    pattern = interleave(sample_pattern(4, model.depth, SDConfig(0.5), rng),
                         sample_pattern(4, model.depth, SDConfig(0.5), rng))
    worst_vit, worst_match = 0.0, 0.0
    for kind in ("bce-soft", "bce-hard", "ce-hard"):
        r, mismatch = cosub_gradient_report(model, xd, pattern, np.array([0, 2, 1, 2]),
                                            CosubConfig(0.5, loss_kind=kind))
        worst_vit = max(worst_vit, r.max_rel_error if r.passed else math.inf)
        worst_match = max(worst_match, mismatch)
    elapsed = time.perf_counter() - t0
    ok = worst_prim < 1e-4 and worst_vit < 1e-4 and worst_match < 1e-10 and elapsed < 60
    return report(1, "gradient correctness", ok,
                  f"{trials} primitive checks, worst {worst_prim:.2e} ({worst_name}); tiny-ViT cosub "
                  f"loss worst {worst_vit:.2e} (backprop vs surrogate {worst_match:.1e}); {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 2. ESD oracle equivalence
# ---------------------------------------------------------------------------
def check_2() -> bool:
    t0 = time.perf_counter()
    cases = [esd_case(seed) for seed in range(200)]
    worst = max(cases, key=lambda c: c["error"])
    taus = sorted({c["tau"] for c in cases})
    elapsed = time.perf_counter() - t0
    ok = worst["error"] < 1e-6 and elapsed < 60
    return report(2, "ESD oracle equivalence", ok,
                  f"200 cases (tau in {taus[0]}..{taus[-1]}), worst relative error "
                  f"{worst['error']:.2e} at B={worst['B']} width={worst['width']}; {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 3. quantization table
# ---------------------------------------------------------------------------
def check_3() -> bool:
    buf = io.StringIO()
    with contextlib.redirect_stdout(buf):
        code = cmd_quantization(8)
    rows = buf.getvalue().splitlines()[1:]
    levels = sorted({float(r.split(",")[1]) for r in rows})
    ok = code == 0 and levels == [k / 8 for k in range(9)]
    return report(3, "quantization table", ok, f"B=8 effective rates {levels}")


# ---------------------------------------------------------------------------
# 4. linear averaging
# ---------------------------------------------------------------------------
def check_4() -> bool:
    t0 = time.perf_counter()
    lin = {tau: linear_average_check(8, 8, tau) for tau in (0.25, 0.5, 0.75)}
    non = linear_average_check(8, 8, 0.5, nonlinear=True)
    elapsed = time.perf_counter() - t0
    ok = max(lin.values()) < 1e-8 and non > 1e-4 and elapsed < 60
    return report(4, "linear averaging", ok,
                  "linear deviations " + ", ".join(f"tau={t}: {d:.1e}" for t, d in lin.items())
                  + f"; tanh deviation {non:.2e}; {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 5. lambda = 1 degeneracy
# ---------------------------------------------------------------------------
def check_5() -> bool:
    config, arch, train, test = _toy()
    args = (train, test)
    rest = (config.sd_config(), config.optim_config(), config.train_config())
    cos = train_loop(arch, *args, StrategyConfig("cosub", CosubConfig(lam=1.0)), *rest)
    sup = train_loop(arch, *args, StrategyConfig("supervised", duplicate=True), *rest)
    metrics_equal = all((a.epoch, a.loss, a.label_loss, a.accuracy) == (b.epoch, b.loss, b.label_loss, b.accuracy)
                        for a, b in zip(cos.records, sup.records)) and len(cos.records) == 5
    weights_equal = all(p.data.tobytes() == q.data.tobytes()
                        for (_, p), (_, q) in zip(cos.model.named_parameters(), sup.model.named_parameters()))
    ok = metrics_equal and weights_equal
    return report(5, "lambda degeneracy", ok,
                  f"5 epochs, metrics bitwise equal: {metrics_equal}, final weights bitwise equal: "
                  f"{weights_equal}, final accuracy {cos.records[-1].accuracy}")


# ---------------------------------------------------------------------------
# 6 and 7. desk-scale lambda sweep and submodel population
# ---------------------------------------------------------------------------
LAMBDAS = (1.0, 0.5, 0.1)
SEEDS = range(5)


@functools.cache
def lambda_sweep() -> dict:
    """Trained models, final accuracies and CPU seconds for every (lambda, seed)."""
    base = cfgmod.load(DESK_CFG).validate()
    train, test = base.datasets()
    out = {"test": test, "models": {}, "acc": {}, "cpu": {}}
    for lam in LAMBDAS:
        t0 = time.process_time()
        for seed in SEEDS:
            config = cfgmod.load(DESK_CFG, [f"strategy.lam={lam}", f"train.seed={seed}"]).validate()
            arch = config.arch(train.samples.shape[1], train.num_classes)
            res = train_loop(arch, train, test, config.strategy_config(), config.sd_config(),
                             config.optim_config(), config.train_config())
            out["models"][lam, seed] = res.model
            out["acc"][lam, seed] = res.records[-1].accuracy
        out["cpu"][lam] = time.process_time() - t0
    return out


def check_6() -> bool:
    sweep = lambda_sweep()
    mean = {lam: float(np.mean([sweep["acc"][lam, s] for s in SEEDS])) for lam in LAMBDAS}
    slowest = max(sweep["cpu"].values())
    ok = mean[0.5] >= mean[1.0] and mean[0.1] < mean[0.5] and slowest < 600
    per_seed = "; ".join(f"lam={lam}: " + " ".join(f"{sweep['acc'][lam, s]:.4f}" for s in SEEDS)
                         for lam in LAMBDAS)
    return report(6, "desk-scale cosub benefit", ok,
                  "mean accuracy " + ", ".join(f"lam={lam}: {mean[lam]:.4f}" for lam in LAMBDAS)
                  + f" (per seed {per_seed}); slowest config {slowest:.0f}s CPU")


def check_7() -> bool:
    sweep = lambda_sweep()
    t0 = time.process_time()
    tau = cfgmod.load(DESK_CFG).sd.tau
    wins, pairs = 0, []
    for s in SEEDS:
        # identical draws for both models
        cos = mean_submodel_accuracy(sweep["models"][0.5, s], tau, 50, sweep["test"], np.random.default_rng(s))
        base = mean_submodel_accuracy(sweep["models"][1.0, s], tau, 50, sweep["test"], np.random.default_rng(s))
        wins += cos > base
        pairs.append(f"{cos:.4f} vs {base:.4f}")
    elapsed = time.process_time() - t0
    ok = wins >= 4 and elapsed < 120
    return report(7, "submodel population", ok,
                  f"cosub beats baseline in {wins}/5 seeds (50 draws each: {', '.join(pairs)}); "
                  f"{elapsed:.0f}s CPU")


# ---------------------------------------------------------------------------
# 8. ESD performance
# ---------------------------------------------------------------------------
def check_8() -> bool:
    t0 = time.perf_counter()
    half = run_bench(width=256, depth=12, batch=128, tau=0.5, repeats=30)
    zero = run_bench(width=256, depth=12, batch=128, tau=0.0, repeats=30)
    elapsed = time.perf_counter() - t0
    ok = (half["flop_ratio"] == 0.5 and half["time_ratio"] <= 0.75
          and zero["time_ratio"] <= 1.10 and elapsed < 120)
    return report(8, "ESD performance", ok,
                  f"tau=0.5 FLOP ratio {half['flop_ratio']}, wall-clock ratio {half['time_ratio']:.3f}; "
                  f"tau=0 ratio {zero['time_ratio']:.3f} (vs no SD {1 + zero['overhead_vs_no_sd']:.3f}); "
                  f"{elapsed:.0f}s")


# ---------------------------------------------------------------------------
# 9. strategy suite
# ---------------------------------------------------------------------------
EXPECTED_STORAGE = {"supervised": (1, 1), "kd": (2, 1), "mean-teacher": (2, 1), "cotrain": (2, 2),
                    "cosub": (1, 1)}


def _ema_closed_form() -> float:
    worst = 0.0
    for m in (0.0, 1.0, 0.9):
        teacher = build_residual_mlp(8, 2, 3, 4, seed=0, dtype="float64")
        student = build_residual_mlp(8, 2, 3, 4, seed=1, dtype="float64")
        t0, s0 = teacher.state_dict(), student.state_dict()
        for _ in range(7):
            ema_update(teacher, student, m)
        for k, v in teacher.state_dict().items():
            # constant student: t_k = s + m^k (t_0 - s)
            want = s0[k] + m ** 7 * (t0[k] - s0[k])
            worst = max(worst, float(np.max(np.abs(v - want))))
    return worst


def check_9() -> bool:
    t0 = time.perf_counter()
    config, arch, train, test = _toy()
    rest = (config.sd_config(), config.optim_config(), config.train_config())
    failures, storage_ok, finals = [], True, {}
    teacher = None
    for kind in ("supervised", "kd", "mean-teacher", "cotrain", "cosub"):
        try:
            res = train_loop(arch, train, test, StrategyConfig(kind), *rest,
                             teacher=teacher.clone() if kind == "kd" else None)
        except Exception as err:  # a crash is a failed criterion, reported with its cause
            failures.append(f"{kind}: {err!r}")
            continue
        if kind == "supervised":
            teacher = res.model
        got = res.state.storage()
        storage_ok &= (got["weights"], got["optimizer"]) == EXPECTED_STORAGE[kind]
        finals[kind] = res.records[-1].accuracy
    ema = _ema_closed_form()
    elapsed = time.perf_counter() - t0
    ok = not failures and len(finals) == 5 and storage_ok and ema < 1e-6 and elapsed < 300
    return report(9, "strategy suite", ok,
                  "final accuracy " + ", ".join(f"{k} {v:.3f}" for k, v in finals.items())
                  + f"; storage contract {'holds' if storage_ok else 'violated'}; EMA max error {ema:.1e}"
                  + (f"; errors {failures}" if failures else "") + f"; {elapsed:.0f}s")


# ---------------------------------------------------------------------------
# 10. LR rules and tau table
# ---------------------------------------------------------------------------
# batch sizes chosen so the square root is a power of two or sqrt(2)
LR_GRID = {32: 0.125, 128: 0.25, 512: 0.5, 2048: 1.0, 4096: math.sqrt(2.0), 8192: 2.0}
TAU_TABLE = {"ViT-S": (0.05, 0.05), "ViT-M": (0.1, 0.05), "ViT-B": (0.2, 0.1), "ViT-L": (0.45, 0.3),
             "ViT-H": (0.6, 0.5)}


def check_10() -> bool:
    lr_ok = all(train_lr(bs) == 1e-3 * r and finetune_lr(bs) == 1e-4 * r
                and finetune_lr(bs, True) == 2e-4 * r for bs, r in LR_GRID.items())
    ld = layer_decay_factors(12, 0.75)
    ld_ok = (ld == [0.75 ** (11 - l) for l in range(12)] + [1.0] and ld[10] == 0.75
             and layer_decay_factors(12, 1.0) == [1.0] * 13)
    tau_ok = all(tau_for_model(n, "in1k") == a and tau_for_model(n, "in21k") == b
                 for n, (a, b) in TAU_TABLE.items())
    ok = lr_ok and ld_ok and tau_ok
    return report(10, "LR rules", ok,
                  f"train/finetune LR on {sorted(LR_GRID)}: {lr_ok}; layer decay L=12: {ld_ok}; "
                  f"tau table (5 models x 2 regimes): {tau_ok}")


# ---------------------------------------------------------------------------
# 11. combinatorics
# ---------------------------------------------------------------------------
def check_11() -> bool:
    sums_ok = all(sum(count_submodels(L, k) for k in range(L + 1)) == 2 ** L for L in range(1, 65))
    counts = [count_submodels(64, k) for k in range(65)]
    peak = counts.index(max(counts))
    ok = sums_ok and peak == 32 and counts.count(max(counts)) == 1
    return report(11, "combinatorics", ok,
                  f"sum over k equals 2^L for L=1..64: {sums_ok}; L=64 peak at k={peak} ({max(counts)})")


# ---------------------------------------------------------------------------
# 12. determinism and formats
# ---------------------------------------------------------------------------
def check_12(tmp: Path) -> bool:
    runs = []
    for name in ("a", "b"):
        config = cfgmod.load(TOY_CFG, ["train.epochs=2", f"output.dir={tmp / name}"]).validate()
        run_training(config, tmp / name)
        runs.append({f: (tmp / name / f).read_bytes() for f in ("metrics.jsonl", "model.ckpt", "data.json")})
    repeat_ok = runs[0] == runs[1]

    (tmp / "img.idx").write_bytes(GOLDEN_IMAGES)
    (tmp / "lab.idx").write_bytes(GOLDEN_LABELS)
    ds = load_idx(tmp / "img.idx", tmp / "lab.idx", num_classes=10)
    write_idx(tmp / "img2.idx", tmp / "lab2.idx", read_idx_images(tmp / "img.idx"), read_idx_labels(tmp / "lab.idx"))
    idx_ok = (np.array_equal(ds.samples, GOLDEN_PIXELS.astype(np.float32) / 255.0)
              and ds.labels.tolist() == [7, 3]
              and (tmp / "img2.idx").read_bytes() == GOLDEN_IMAGES
              and (tmp / "lab2.idx").read_bytes() == GOLDEN_LABELS)

    model = build_tiny_vit(8, 4, 8, 2, 2, 3, seed=3)
    save_checkpoint(model, tmp / "m.ckpt")
    loaded = load_checkpoint(tmp / "m.ckpt", model.arch)
    save_checkpoint(loaded, tmp / "m2.ckpt")
    ckpt_ok = (all(p.data.tobytes() == q.data.tobytes()
                   for (_, p), (_, q) in zip(model.named_parameters(), loaded.named_parameters()))
               and (tmp / "m.ckpt").read_bytes() == (tmp / "m2.ckpt").read_bytes())
    ok = repeat_ok and idx_ok and ckpt_ok
    return report(12, "determinism and formats", ok,
                  f"repeated runs byte-identical: {repeat_ok}; IDX golden round trip: {idx_ok}; "
                  f"checkpoint round trip: {ckpt_ok}")


# ---------------------------------------------------------------------------
# pytest entry points
# ---------------------------------------------------------------------------
def test_criterion_01_gradient_correctness():
    assert check_1(), RESULTS[1]


def test_criterion_02_esd_equivalence():
    assert check_2(), RESULTS[2]


def test_criterion_03_quantization_table():
    assert check_3(), RESULTS[3]


def test_criterion_04_linear_averaging():
    assert check_4(), RESULTS[4]


def test_criterion_05_lambda_degeneracy():
    assert check_5(), RESULTS[5]


@pytest.mark.slow
def test_criterion_06_desk_scale_cosub_benefit():
    assert check_6(), RESULTS[6]


@pytest.mark.slow
def test_criterion_07_submodel_population():
    assert check_7(), RESULTS[7]


def test_criterion_08_esd_performance():
    assert check_8(), RESULTS[8]


def test_criterion_09_strategy_suite():
    assert check_9(), RESULTS[9]


def test_criterion_10_lr_rules():
    assert check_10(), RESULTS[10]


def test_criterion_11_combinatorics():
    assert check_11(), RESULTS[11]


def test_criterion_12_determinism_and_formats(tmp_path):
    assert check_12(tmp_path), RESULTS[12]


def main(argv=None) -> int:
    import tempfile

    numbers = [int(a) for a in (argv if argv is not None else sys.argv[1:])] or list(range(1, 13))
    passed = 0
    for n in numbers:
        if n == 12:
            with tempfile.TemporaryDirectory() as tmp:
                passed += check_12(Path(tmp))
        else:
            passed += globals()[f"check_{n}"]()
    print(f"{passed}/{len(numbers)} criteria passed")
    return 0 if passed == len(numbers) else 1


if __name__ == "__main__":
    sys.exit(main())
