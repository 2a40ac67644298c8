"""Residual networks with an ordered list of droppable residual blocks.

Two architectures are provided:

* ``build_residual_mlp``: a linear stem into one token of ``width`` features,
  ``L`` FFN blocks ``x + W2 gelu(W1 x + b1) + b2`` and a
  layernorm + linear head.  With ``H`` the FFN hidden width, ``D`` the input
  dimension and ``C`` the class count, the parameter count is::

      (D*W + W) + L * (W*H + H + H*W + W) + (2*W + W*C + C)

* ``build_tiny_vit``: patch embedding, class token, learned positions and
  ``depth_blocks`` transformer blocks, each contributing two droppable
  residuals (attention, then FFN), so ``L = 2 * depth_blocks``.

Checkpoints are a self-describing container::

    b"CSUBCKPT" | u32 version | u32 header length | JSON header | float32 LE data

The header holds the architecture descriptor and the ordered tensor manifest
(name, shape); arrays follow in manifest order.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .sdepth import ComputeCounter, DropPattern, apply_layer

CHECKPOINT_MAGIC = b"CSUBCKPT"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, dtype=np.float32) -> np.ndarray:
    """Normal(0, std) truncated to +-2 std by resampling."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).astype(dtype)


def _param(data, name: str) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


class ResidualBlock:
    """One droppable residual branch ``r_l``; calling it returns ``r_l(x)`` only."""

    kind = ""

    def __init__(self, index: int, params: dict[str, Tensor]):
        self.index = index
        self.params = params

    def __call__(self, x: Tensor) -> Tensor:
        return self.residual(x)

    def residual(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def flops_per_row(self, tokens: int = 1) -> int:
        raise NotImplementedError


class FFNBlock(ResidualBlock):
    kind = "ffn"

    def residual(self, x: Tensor) -> Tensor:
        p = self.params
        h = ag.layernorm(x, p["norm.g"], p["norm.b"]) if "norm.g" in p else x
        h = ag.gelu(ag.linear(h, p["fc1.w"], p["fc1.b"]))
        return ag.linear(h, p["fc2.w"], p["fc2.b"])

    def flops_per_row(self, tokens: int = 1) -> int:
        w, h = self.params["fc1.w"].shape
        return tokens * 4 * w * h


class AttentionBlock(ResidualBlock):
    kind = "attention"

    def __init__(self, index: int, params: dict[str, Tensor], heads: int):
        super().__init__(index, params)
        self.heads = heads

    def residual(self, x: Tensor) -> Tensor:
        p = self.params
        B, T, W = x.shape
        H = self.heads
        D = W // H
        h = ag.layernorm(x, p["norm.g"], p["norm.b"])
        qkv = ag.linear(h, p["qkv.w"], p["qkv.b"])
        qkv = qkv.reshape(B, T, 3, H, D).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = ag.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(D))
        attn = ag.softmax(scores, axis=-1)
        out = ag.matmul(attn, v).transpose(0, 2, 1, 3).reshape(B, T, W)
        return ag.linear(out, p["proj.w"], p["proj.b"])

    def flops_per_row(self, tokens: int = 1) -> int:
        W = self.params["qkv.w"].shape[0]
        return 2 * tokens * (3 * W * W + W * W) + 4 * tokens * tokens * W


@dataclass(eq=False)
class Model:
    """Parameters and structure of a residual classifier.

    ``arch`` is the constructor descriptor; it travels with checkpoints.
    """

    arch: dict
    stem: dict[str, Tensor]
    blocks: list[ResidualBlock]
    head: dict[str, Tensor]
    num_classes: int
    extra: dict = field(default_factory=dict)

    @property
    def depth(self) -> int:
        return len(self.blocks)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = [(f"stem.{k}", v) for k, v in self.stem.items()]
        for b in self.blocks:
            out += [(f"blocks.{b.index}.{k}", v) for k, v in b.params.items()]
        out += [(f"head.{k}", v) for k, v in self.head.items()]
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def param_layer(self, name: str) -> int:
        """Depth index used for layer-wise LR: -1 stem, block index, or L for the head."""
        if name.startswith("stem."):
            return -1
        if name.startswith("blocks."):
            return int(name.split(".")[1])
        return self.depth

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        if set(state) != set(params):
            missing = sorted(set(params) - set(state))
            unexpected = sorted(set(state) - set(params))
            raise CheckpointError(f"state mismatch: missing={missing} unexpected={unexpected}")
        for k, p in params.items():
            if state[k].shape != p.shape:
                raise CheckpointError(f"{k}: shape {state[k].shape} != {p.shape}")
            p.data = np.array(state[k], dtype=p.dtype)

    def clone(self) -> "Model":
        twin = build_model(self.arch)
        twin.load_state_dict(self.state_dict())
        return twin

    # -- forward -------------------------------------------------------------
    def embed(self, x) -> Tensor:
        return self.extra["stem_fn"](self, x)

    def readout(self, h: Tensor) -> Tensor:
        p = self.head
        cls = h[:, 0]
        return ag.linear(ag.layernorm(cls, p["norm.g"], p["norm.b"]), p["fc.w"], p["fc.b"])

    def __call__(self, x, pattern: DropPattern | None = None, sd_impl: str = "efficient",
                 counter: ComputeCounter | None = None) -> Tensor:
        return forward(self, x, pattern, sd_impl, counter)


def forward(model: Model, x, pattern: DropPattern | None = None, sd_impl: str = "efficient",
            counter: ComputeCounter | None = None) -> Tensor:
    """Logits of shape (B, num_classes).

    Without a pattern every block is applied unscaled (the deployed model).
    With one, block ``l`` is gated per sample and kept rows are scaled by
    ``pattern.scales[l]``.
    """
    if pattern is not None and pattern.num_layers != model.depth:
        raise ValueError(f"pattern has {pattern.num_layers} layers, model has {model.depth}")
    h = model.embed(x)
    for l, block in enumerate(model.blocks):
        if pattern is None:
            if counter is not None:
                counter.add(block, h.shape[0], h.shape[1])
            h = h + block(h)
        else:
            h = apply_layer(h, block, pattern, l, sd_impl, counter)
    return model.readout(h)


def _check_dims(**dims) -> None:
    for k, v in dims.items():
        if int(v) < 1:
            raise ValueError(f"{k} must be >= 1, got {v}")


def _head(rng, width: int, num_classes: int, dtype) -> dict[str, Tensor]:
    return {
        "norm.g": _param(np.ones(width, dtype), "head.norm.g"),
        "norm.b": _param(np.zeros(width, dtype), "head.norm.b"),
        "fc.w": _param(trunc_normal(rng, (width, num_classes), dtype=dtype), "head.fc.w"),
        "fc.b": _param(np.zeros(num_classes, dtype), "head.fc.b"),
    }


def _ffn_params(rng, width: int, hidden: int, dtype, pre_norm: bool = True) -> dict[str, Tensor]:
    norm = {
        "norm.g": _param(np.ones(width, dtype), "norm.g"),
        "norm.b": _param(np.zeros(width, dtype), "norm.b"),
    } if pre_norm else {}
    return norm | {
        "fc1.w": _param(trunc_normal(rng, (width, hidden), dtype=dtype), "fc1.w"),
        "fc1.b": _param(np.zeros(hidden, dtype), "fc1.b"),
        "fc2.w": _param(trunc_normal(rng, (hidden, width), dtype=dtype), "fc2.w"),
        "fc2.b": _param(np.zeros(width, dtype), "fc2.b"),
    }


def _mlp_stem(model: Model, x) -> Tensor:
    x = x if isinstance(x, Tensor) else Tensor(x, dtype=model.stem["w"].dtype)
    h = ag.linear(x, model.stem["w"], model.stem["b"])
    return h.reshape(x.shape[0], 1, h.shape[-1])


def build_residual_mlp(width: int, depth: int, num_classes: int, input_dim: int, seed: int = 0,
                       hidden: int | None = None, dtype: str = "float32") -> Model:
    """Residual MLP classifier; ``hidden`` defaults to ``width``."""
    hidden = width if hidden is None else hidden
    _check_dims(width=width, depth=depth, num_classes=num_classes, input_dim=input_dim, hidden=hidden)
    dt = np.dtype(dtype)
    rng = np.random.default_rng(seed)
    stem = {
        "w": _param(trunc_normal(rng, (input_dim, width), dtype=dt), "stem.w"),
        "b": _param(np.zeros(width, dt), "stem.b"),
    }
    blocks = [FFNBlock(l, _ffn_params(rng, width, hidden, dt, pre_norm=False)) for l in range(depth)]
    arch = dict(kind="residual_mlp", width=width, depth=depth, num_classes=num_classes,
                input_dim=input_dim, seed=seed, hidden=hidden, dtype=dt.name)
    return Model(arch, stem, blocks, _head(rng, width, num_classes, dt), num_classes,
                 extra={"stem_fn": _mlp_stem})


def residual_mlp_param_count(width: int, depth: int, num_classes: int, input_dim: int,
                             hidden: int | None = None) -> int:
    H = width if hidden is None else hidden
    W = width
    return (input_dim * W + W) + depth * (W * H + H + H * W + W) + (2 * W + W * num_classes + num_classes)


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """(B, C, S, S) or (B, S, S) images to (B, num_patches, C*patch*patch)."""
    if images.ndim == 3:
        images = images[:, None]
    B, C, S, S2 = images.shape
    n = S // patch
    x = images.reshape(B, C, n, patch, n, patch).transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(B, n * n, C * patch * patch)


def _vit_stem(model: Model, x) -> Tensor:
    a = model.arch
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    data = data.reshape(data.shape[0], a["channels"], a["image_size"], a["image_size"])
    patches = Tensor(patchify(data, a["patch_size"]), dtype=model.stem["patch.w"].dtype)
    B = patches.shape[0]
    tok = ag.linear(patches, model.stem["patch.w"], model.stem["patch.b"])
    cls = ag.broadcast_to(model.stem["cls"], (B, 1, a["width"]))
    return ag.concat([cls, tok], axis=1) + model.stem["pos"]


def build_tiny_vit(image_size: int, patch_size: int, width: int, depth_blocks: int, heads: int,
                   num_classes: int, seed: int = 0, channels: int = 1, mlp_ratio: int = 2,
                   dtype: str = "float32") -> Model:
    """Small ViT; each transformer block yields an attention and an FFN residual."""
    _check_dims(image_size=image_size, patch_size=patch_size, width=width,
                depth_blocks=depth_blocks, heads=heads, num_classes=num_classes, channels=channels)
    if image_size % patch_size:
        raise ValueError(f"image size {image_size} is not divisible by patch size {patch_size}")
    if width % heads:
        raise ValueError(f"width {width} is not divisible by {heads} heads")
    dt = np.dtype(dtype)
    rng = np.random.default_rng(seed)
    n_tokens = (image_size // patch_size) ** 2 + 1
    patch_dim = channels * patch_size * patch_size
    stem = {
        "patch.w": _param(trunc_normal(rng, (patch_dim, width), dtype=dt), "stem.patch.w"),
        "patch.b": _param(np.zeros(width, dt), "stem.patch.b"),
        "cls": _param(trunc_normal(rng, (1, 1, width), dtype=dt), "stem.cls"),
        "pos": _param(trunc_normal(rng, (1, n_tokens, width), dtype=dt), "stem.pos"),
    }
    blocks: list[ResidualBlock] = []
    for b in range(depth_blocks):
        attn = {
            "norm.g": _param(np.ones(width, dt), "norm.g"),
            "norm.b": _param(np.zeros(width, dt), "norm.b"),
            "qkv.w": _param(trunc_normal(rng, (width, 3 * width), dtype=dt), "qkv.w"),
            "qkv.b": _param(np.zeros(3 * width, dt), "qkv.b"),
            "proj.w": _param(trunc_normal(rng, (width, width), dtype=dt), "proj.w"),
            "proj.b": _param(np.zeros(width, dt), "proj.b"),
        }
        blocks.append(AttentionBlock(2 * b, attn, heads))
        blocks.append(FFNBlock(2 * b + 1, _ffn_params(rng, width, mlp_ratio * width, dt)))
    arch = dict(kind="tiny_vit", image_size=image_size, patch_size=patch_size, width=width,
                depth_blocks=depth_blocks, heads=heads, num_classes=num_classes, seed=seed,
                channels=channels, mlp_ratio=mlp_ratio, dtype=dt.name)
    return Model(arch, stem, blocks, _head(rng, width, num_classes, dt), num_classes,
                 extra={"stem_fn": _vit_stem})


def num_tokens(model: Model) -> int:
    a = model.arch
    if a["kind"] == "tiny_vit":
        return (a["image_size"] // a["patch_size"]) ** 2 + 1
    return 1


def build_model(arch: dict) -> Model:
    arch = dict(arch)
    kind = arch.pop("kind")
    if kind == "residual_mlp":
        return build_residual_mlp(**arch)
    if kind == "tiny_vit":
        return build_tiny_vit(**arch)
    raise ValueError(f"unknown architecture kind {kind!r}")


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------
def checkpoint_bytes(model: Model, arch: dict | None = None) -> bytes:
    named = model.named_parameters()
    header = {
        "arch": model.arch if arch is None else arch,
        "tensors": [{"name": n, "shape": list(p.shape)} for n, p in named],
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(hbytes)), hbytes]
    parts += [np.ascontiguousarray(p.data, dtype="<f4").tobytes() for _, p in named]
    return b"".join(parts)


def save_checkpoint(model: Model, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(model))


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Parse a checkpoint into (architecture descriptor, named float32 arrays)."""
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad checkpoint magic {raw[:8]!r}")
    version, hlen = struct.unpack_from("<II", raw, 8)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[16:16 + hlen])
    offset = 16 + hlen
    state = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape, dtype=np.int64))
        if offset + 4 * n > len(raw):
            raise CheckpointError(f"{path}: truncated data for {entry['name']}")
        state[entry["name"]] = np.frombuffer(raw, dtype="<f4", count=n, offset=offset).reshape(shape).copy()
        offset += 4 * n
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")
    return header["arch"], state


def load_checkpoint(path, expect_arch: dict | None = None) -> Model:
    """Rebuild a model from ``path``.

    ``expect_arch`` lists descriptor entries the checkpoint must match; keys it
    omits (e.g. the init seed) are not checked.
    """
    arch, state = read_checkpoint(path)
    if expect_arch is not None:
        diff = {k: (arch.get(k), v) for k, v in expect_arch.items() if arch.get(k) != v}
        if diff:
            detail = ", ".join(f"{k}={got!r} (expected {want!r})" for k, (got, want) in sorted(diff.items()))
            raise CheckpointError(f"{path}: architecture mismatch: {detail}")
    model = build_model(arch)
    model.load_state_dict(state)
    return model
