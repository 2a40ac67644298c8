"""Shared oracles for unit and acceptance tests."""

import numpy as np

from cosub import autograd as ag
from cosub.autograd import Tape, Tensor, grad_check
from cosub.blocks import build_residual_mlp, forward
from cosub.losses import paired_label_loss, soft_target_loss, total_loss
from cosub.sdepth import DropPattern, apply_efficient, apply_naive, keep_count


# two 3x3 images and their labels, byte for byte
GOLDEN_IMAGES = bytes([0x00, 0x00, 0x08, 0x03, 0, 0, 0, 2, 0, 0, 0, 3, 0, 0, 0, 3,
                       0, 51, 102, 153, 204, 255, 1, 2, 3,
                       255, 254, 253, 128, 64, 32, 16, 8, 0])
GOLDEN_LABELS = bytes([0x00, 0x00, 0x08, 0x01, 0, 0, 0, 2, 7, 3])
GOLDEN_PIXELS = np.array([[[0, 51, 102], [153, 204, 255], [1, 2, 3]],
                          [[255, 254, 253], [128, 64, 32], [16, 8, 0]]], np.uint8)


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """Norm-wise relative error ``||a - b|| / ||b||`` (absolute when ``b`` is zero)."""
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    denom = float(np.linalg.norm(b))
    diff = float(np.linalg.norm(a - b))
    return diff if denom == 0.0 else diff / denom


def esd_case(seed: int) -> dict:
    """One randomized efficient-vs-naive comparison with a pinned kept set.

    Returns the worst scaled error over the output and every gradient.
    """
    rng = np.random.default_rng(seed)
    B = int(rng.integers(1, 33))
    width = int(rng.integers(1, 65))
    tau = float(rng.integers(1, 10)) / 10
    depth = int(rng.integers(1, 4))
    model = build_residual_mlp(width, depth, num_classes=3, input_dim=width, seed=seed)
    x = rng.standard_normal((B, width)).astype(np.float32)
    n_keep = keep_count(B, tau)
    kept = [np.sort(rng.permutation(B)[:n_keep]) for _ in range(depth)]
    scale = 0.0 if n_keep == 0 else B / n_keep
    pattern = DropPattern(B, kept, np.full(depth, tau), np.full(depth, scale))

    results = {}
    for impl in ("naive", "efficient"):
        for p in model.parameters():
            p.grad = None
        xt = Tensor(x, requires_grad=True)
        with Tape() as tape:
            h = model.embed(xt)
            for l, block in enumerate(model.blocks):
                if impl == "naive":
                    mask = np.zeros(B, bool)
                    mask[kept[l]] = True
                    h = apply_naive(h, block, mask, scale)
                else:
                    tau_eff = 1.0 - n_keep / B
                    h = apply_efficient(h, block, kept[l], tau_eff)
            y = model.readout(h)
            loss = (y * y).sum()
        tape.backward(loss)
        grads = {name: (np.zeros(p.shape) if p.grad is None else p.grad.copy())
                 for name, p in model.named_parameters()}
        grads["input"] = xt.grad.copy()
        results[impl] = (y.data.copy(), grads)

    worst = relative_error(results["efficient"][0], results["naive"][0])
    for name, g in results["naive"][1].items():
        worst = max(worst, relative_error(results["efficient"][1][name], g))
    return {"B": B, "width": width, "tau": tau, "depth": depth, "error": worst}


def cosub_gradient_report(model, xd, pattern, labels, config):
    """Check backprop through ``total_loss`` against finite differences.

    ``sg`` has zero derivative by definition, so the finite-difference side holds the
    teacher branch at its current value; otherwise it would measure the full
    gradient rather than the semi-gradient that cosub optimizes. Returns the
    grad-check report of the pinned surrogate and the worst mismatch between its
    backprop gradient and that of the real loss.
    """
    y0 = forward(model, xd, pattern).data
    t1, t2 = Tensor(y0[0::2], dtype=np.float64), Tensor(y0[1::2], dtype=np.float64)

    def surrogate():
        y = forward(model, xd, pattern)
        y1, y2 = y[0::2], y[1::2]
        label_part = paired_label_loss(y1, y2, labels, config.label_loss, config.label_smoothing)
        cosub_part = (soft_target_loss(y1, t2, config.loss_kind)
                      + soft_target_loss(y2, t1, config.loss_kind)) * 0.5
        return label_part * config.lam + cosub_part * (1.0 - config.lam)

    def real():
        y = forward(model, xd, pattern)
        return total_loss(y[0::2], y[1::2], labels, config).total

    def backprop(f):
        for p in model.parameters():
            p.grad = None
        with Tape() as tape:
            loss = f()
        tape.backward(loss)
        return [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in model.parameters()]

    mismatch = max(relative_error(a, b) for a, b in zip(backprop(real), backprop(surrogate)))
    return grad_check(surrogate, model.parameters()), mismatch


def _p(rng, *shape, positive=False):
    a = rng.standard_normal(shape)
    if positive:
        a = np.abs(a) + 0.5
    return Tensor(a, requires_grad=True, dtype=np.float64)


def contract(out: Tensor, seed: int = 99) -> Tensor:
    """Random projection to a scalar so every output coordinate matters."""
    w = np.random.default_rng(seed).standard_normal(out.shape)
    return (out * Tensor(w, dtype=np.float64)).sum()


def primitive_cases(seed: int = 0) -> dict:
    """Name -> (graph builder, params) for every differentiable primitive."""
    rng = np.random.default_rng(seed)
    a, b = _p(rng, 3, 4), _p(rng, 3, 4)
    row = _p(rng, 4)
    m1, m2 = _p(rng, 2, 3, 4), _p(rng, 4, 5)
    x, w, bias = _p(rng, 5, 4), _p(rng, 4, 3), _p(rng, 3)
    pos = _p(rng, 3, 4, positive=True)
    g, be = _p(rng, 4), _p(rng, 4)
    idx = np.array([2, 0, 4])
    base, src = _p(rng, 5, 3), _p(rng, 3, 3)
    c1, c2 = _p(rng, 2, 3), _p(rng, 1, 3)
    return {
        "add_broadcast": (lambda: ag.add(a, row), [a, row]),
        "sub": (lambda: ag.sub(a, b), [a, b]),
        "mul_broadcast": (lambda: ag.mul(a, row), [a, row]),
        "div": (lambda: ag.div(a, pos), [a, pos]),
        "matmul_batched": (lambda: ag.matmul(m1, m2), [m1, m2]),
        "linear": (lambda: ag.linear(x, w, bias), [x, w, bias]),
        "relu": (lambda: ag.relu(a), [a]),
        "gelu": (lambda: ag.gelu(a), [a]),
        "sigmoid": (lambda: ag.sigmoid(a), [a]),
        "tanh": (lambda: ag.tanh(a), [a]),
        "exp": (lambda: ag.exp(a), [a]),
        "log": (lambda: ag.log(pos), [pos]),
        "softplus": (lambda: ag.softplus(a), [a]),
        "softmax": (lambda: ag.softmax(a), [a]),
        "log_softmax": (lambda: ag.log_softmax(a), [a]),
        "layernorm": (lambda: ag.layernorm(a, g, be), [a, g, be]),
        "sum_axis": (lambda: ag.sum_(m1, axis=1), [m1]),
        "mean_keepdims": (lambda: ag.mean(m1, axis=-1, keepdims=True), [m1]),
        "broadcast_to": (lambda: ag.broadcast_to(row, (3, 4)), [row]),
        "reshape": (lambda: ag.reshape(m1, (6, 4)), [m1]),
        "transpose": (lambda: ag.transpose(m1, (2, 0, 1)), [m1]),
        "getitem_slice": (lambda: a[1:, ::2], [a]),
        "getitem_fancy_repeat": (lambda: a[np.array([0, 0, 2])], [a]),
        "concat": (lambda: ag.concat([c1, c2], axis=0), [c1, c2]),
        "take_rows": (lambda: ag.take_rows(base, idx), [base]),
        "index_add": (lambda: ag.index_add(base, idx, src, 1.7), [base, src]),
    }
