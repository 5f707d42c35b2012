"""Toy pre-norm Vision Transformer with a frozen backbone.

Every linear map ``x @ W0`` for a tuned role becomes
``x @ W0 + apply_delta(x)`` in the layers and blocks selected by a
:class:`TuningMask`. Only the classification head (and factor tensors,
when present) are trainable.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tape
from .errors import ConfigError, ShapeError
from .factors import ALL_ROLES, Role
from .tensor import Rng, Tensor, randn

INIT_STD = 0.02
BLOCKS = ("mhsa", "ffn")


@dataclass(frozen=True)
class ViTConfig:
    d: int = 16
    L: int = 2
    heads: int = 2
    n_patches: int = 16
    patch_size: int = 4
    n_classes: int = 4
    channels: int = 1

    def __post_init__(self):
        for name in ("d", "L", "heads", "n_patches", "patch_size", "n_classes", "channels"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.d % self.heads:
            raise ConfigError(f"d={self.d} is not divisible by heads={self.heads}")

    @property
    def d_f(self) -> int:
        return 4 * self.d

    @property
    def d_head(self) -> int:
        return self.d // self.heads

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels


@dataclass(frozen=True)
class TuningMask:
    """Layers and blocks that receive deltas. Empty means nowhere."""

    layers: frozenset = frozenset()
    blocks: frozenset = frozenset()

    def __post_init__(self):
        object.__setattr__(self, "layers", frozenset(int(x) for x in self.layers))
        object.__setattr__(self, "blocks", frozenset(str(b).lower() for b in self.blocks))
        bad = self.blocks - set(BLOCKS)
        if bad:
            raise ConfigError(f"unknown blocks {sorted(bad)}; expected a subset of {BLOCKS}")

    @classmethod
    def full(cls, L: int) -> "TuningMask":
        return cls(frozenset(range(L)), frozenset(BLOCKS))

    @classmethod
    def empty(cls) -> "TuningMask":
        return cls()

    def applies(self, layer: int, role: Role) -> bool:
        return layer in self.layers and Role(role).block in self.blocks

    def is_empty(self) -> bool:
        return not self.layers or not self.blocks

    def describe(self) -> str:
        layers = ";".join(str(x) for x in sorted(self.layers))
        blocks = ";".join(b for b in BLOCKS if b in self.blocks)
        return f"layers={layers}|blocks={blocks}"


_ROLE_WEIGHT = {Role.Q: "wq", Role.K: "wk", Role.V: "wv", Role.O: "wo", Role.FFN1: "w1", Role.FFN2: "w2"}
HEAD_NAMES = ("head.w", "head.b")


@dataclass
class ViTModel:
    cfg: ViTConfig
    params: dict[str, Tensor] = field(default_factory=dict)

    def backbone_names(self) -> list[str]:
        return [k for k in self.params if k not in HEAD_NAMES]

    def is_frozen(self, name: str) -> bool:
        return name not in HEAD_NAMES

    def copy(self) -> "ViTModel":
        return ViTModel(self.cfg, {k: v.copy() for k, v in self.params.items()})

    def n_params(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def backbone_hash(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.backbone_names()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name]).tobytes())
        return h.hexdigest()


def build_vit(cfg: ViTConfig, rng: Rng) -> ViTModel:
    """Gaussian (std 0.02) weights, unit LayerNorm gains, zero biases."""
    d = cfg.d
    p: dict[str, Tensor] = {
        "patch_embed": randn([cfg.patch_dim, d], INIT_STD, rng),
        "pos": randn([cfg.n_patches + 1, d], INIT_STD, rng),
        "cls": randn([1, d], INIT_STD, rng),
    }
    for layer in range(cfg.L):
        pre = f"layers.{layer}."
        p[pre + "ln1.g"] = np.ones(d)
        p[pre + "ln1.b"] = np.zeros(d)
        for w in ("wq", "wk", "wv", "wo"):
            p[pre + w] = randn([d, d], INIT_STD, rng)
        p[pre + "ln2.g"] = np.ones(d)
        p[pre + "ln2.b"] = np.zeros(d)
        p[pre + "w1"] = randn([d, cfg.d_f], INIT_STD, rng)
        p[pre + "w2"] = randn([cfg.d_f, d], INIT_STD, rng)
    p["head.w"] = randn([d, cfg.n_classes], INIT_STD, rng)
    p["head.b"] = np.zeros(cfg.n_classes)
    return ViTModel(cfg, p)


def patchify(image: Tensor, patch_size: int) -> Tensor:
    """``(H, W, C)`` image to ``(n, p*p*C)`` rows, top-left to bottom-right."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[:, :, None]
    H, W, C = image.shape
    p = int(patch_size)
    if p < 1 or H % p or W % p:
        raise ShapeError(f"image {H}x{W} not divisible into {p}x{p} patches")
    g = image.reshape(H // p, p, W // p, p, C).transpose(0, 2, 1, 3, 4)
    return np.ascontiguousarray(g.reshape((H // p) * (W // p), p * p * C))


def patchify_batch(images: Tensor, patch_size: int) -> Tensor:
    return np.stack([patchify(img, patch_size) for img in images])


def trainable_params(model: ViTModel, factors=None, mask: TuningMask | None = None) -> list[str]:
    """Names of trainable leaves: the head, plus factor tensors if present."""
    names = list(HEAD_NAMES)
    if factors is not None:
        names += [f"factors.{k}" for k in factors.tensors()]
    return names


def _check_factors(model: ViTModel, factors):
    if factors is None:
        return
    if factors.d != model.cfg.d:
        raise ConfigError(f"factors built for d={factors.d}, model has d={model.cfg.d}")
    L = getattr(factors, "L", None)
    if factors.kind == "fact_tt" and L != model.cfg.L:
        raise ConfigError(f"FacT-TT factors cover L={L}, model has L={model.cfg.L}")


def forward_on_tape(model: ViTModel, batch: Tensor, factors=None, mask: TuningMask | None = None,
                    tape: Tape | None = None, trainable: bool = True,
                    params: dict[str, Tensor] | None = None,
                    leaves: dict[str, int] | None = None) -> tuple[int, dict[str, int], Tape]:
    """Record the forward pass. Returns ``(logits_id, leaf_ids, tape)``.

    ``params`` optionally overrides trainable tensors by name
    (``head.w``, ``factors.u`` ...) without touching ``model``/``factors``.
    ``leaves`` maps names to leaves already on ``tape`` that should be used
    instead of fresh ones (handy for gradient checks).
    """
    cfg = model.cfg
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 3 or batch.shape[1:] != (cfg.n_patches, cfg.patch_dim):
        raise ShapeError(
            f"batch shape {batch.shape} != (B, {cfg.n_patches}, {cfg.patch_dim})"
        )
    _check_factors(model, factors)
    tape = tape or Tape()
    params = params or {}
    leaves = leaves or {}
    if mask is None:
        mask = TuningMask.full(cfg.L)
    B, T, d, H, dh = batch.shape[0], cfg.n_patches + 1, cfg.d, cfg.heads, cfg.d_head
    ids: dict[str, int] = {}

    for name, val in model.params.items():
        if name in leaves:
            ids[name] = leaves[name]
            continue
        train = trainable and not model.is_frozen(name)
        ids[name] = tape.leaf(params.get(name, val), trainable=train, name=name)
    bound = None
    if factors is not None and not mask.is_empty():
        fids = {}
        for k, v in factors.tensors().items():
            key = f"factors.{k}"
            if key in leaves:
                fids[k] = ids[key] = leaves[key]
            else:
                fids[k] = ids[key] = tape.leaf(params.get(key, v), trainable=trainable, name=key)
        bound = factors.bind(tape, fids)

    def lin(x, layer, role):
        y = tape.matmul(x, ids[f"layers.{layer}.{_ROLE_WEIGHT[role]}"])
        if bound is not None and mask.applies(layer, role) and factors.covers(role, layer):
            y = tape.add(y, bound.apply(x, role, layer))
        return y

    def heads_split(x):
        x = tape.permute(tape.reshape(x, (B, T, H, dh)), (0, 2, 1, 3))
        return tape.reshape(x, (B * H, T, dh))

    tok = tape.matmul(tape.constant(batch), ids["patch_embed"])
    cls = tape.add(tape.constant(np.zeros((B, 1, d))), ids["cls"])
    x = tape.add(tape.concat_rows(cls, tok), ids["pos"])
    for layer in range(cfg.L):
        pre = f"layers.{layer}."
        h = tape.layer_norm_rows(x, ids[pre + "ln1.g"], ids[pre + "ln1.b"])
        q = heads_split(lin(h, layer, Role.Q))
        k = heads_split(lin(h, layer, Role.K))
        v = heads_split(lin(h, layer, Role.V))
        scores = tape.scale(tape.matmul(q, tape.transpose(k)), 1.0 / math.sqrt(dh))
        att = tape.matmul(tape.softmax_rows(scores), v)
        att = tape.reshape(tape.permute(tape.reshape(att, (B, H, T, dh)), (0, 2, 1, 3)), (B, T, d))
        x = tape.add(x, lin(att, layer, Role.O))
        h2 = tape.layer_norm_rows(x, ids[pre + "ln2.g"], ids[pre + "ln2.b"])
        f = lin(tape.gelu(lin(h2, layer, Role.FFN1)), layer, Role.FFN2)
        x = tape.add(x, f)
    cls_out = tape.reshape(tape.slice_rows(x, 0, 1), (B, d))
    logits = tape.add(tape.matmul(cls_out, ids["head.w"]), ids["head.b"])
    return logits, ids, tape


def forward(model: ViTModel, batch: Tensor, factors=None, mask: TuningMask | None = None,
            chunk: int = 256) -> Tensor:
    """Logits ``(B, n_classes)``; rows are independent of batch composition."""
    batch = np.asarray(batch, dtype=np.float64)
    outs = []
    for start in range(0, batch.shape[0], chunk):
        logits, _, tape = forward_on_tape(model, batch[start:start + chunk], factors, mask,
                                          trainable=False)
        outs.append(tape.value(logits))
    if not outs:
        return np.zeros((0, model.cfg.n_classes))
    return np.concatenate(outs, axis=0)


def predict(model, batch, factors=None, mask=None) -> np.ndarray:
    return np.argmax(forward(model, batch, factors, mask), axis=1)


__all__ = [
    "ALL_ROLES", "BLOCKS", "ViTConfig", "ViTModel", "TuningMask", "build_vit", "patchify",
    "patchify_batch", "forward", "forward_on_tape", "predict", "trainable_params",
]
