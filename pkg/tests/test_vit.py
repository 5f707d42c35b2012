import math

import numpy as np
import pytest

from efft.errors import ConfigError, ShapeError
from efft.factors import Role, delta_for, init_factors
from efft.tensor import Rng, randn
from efft.vit import (TuningMask, ViTConfig, build_vit, forward, forward_on_tape, patchify,
                      patchify_batch, trainable_params)

KINDS = ("efft1", "efft2", "lora", "fact_tt")


def _ln(x, g, b):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + 1e-5) * g + b


def _gelu(x):
    return 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x ** 3)))


def reference_forward(model, patches, deltas=None):
    """Plain numpy pre-norm ViT, one sample and one head at a time."""
    cfg, p = model.cfg, model.params
    deltas = deltas or {}

    def w(layer, role, name):
        base = p[f"layers.{layer}.{name}"]
        return base + deltas.get((role, layer), 0.0)

    out = []
    for img in patches:
        x = np.vstack([p["cls"], img @ p["patch_embed"]]) + p["pos"]
        for l in range(cfg.L):
            h = _ln(x, p[f"layers.{l}.ln1.g"], p[f"layers.{l}.ln1.b"])
            q, k, v = h @ w(l, "q", "wq"), h @ w(l, "k", "wk"), h @ w(l, "v", "wv")
            heads = []
            for hh in range(cfg.heads):
                sl = slice(hh * cfg.d_head, (hh + 1) * cfg.d_head)
                s = q[:, sl] @ k[:, sl].T / math.sqrt(cfg.d_head)
                a = np.exp(s - s.max(1, keepdims=True))
                a /= a.sum(1, keepdims=True)
                heads.append(a @ v[:, sl])
            x = x + np.hstack(heads) @ w(l, "o", "wo")
            h2 = _ln(x, p[f"layers.{l}.ln2.g"], p[f"layers.{l}.ln2.b"])
            x = x + _gelu(h2 @ w(l, "ffn1", "w1")) @ w(l, "ffn2", "w2")
        out.append(x[0] @ p["head.w"] + p["head.b"])
    return np.array(out)


def _small(seed=0, **kw):
    cfg = ViTConfig(**{"d": 8, "L": 2, "heads": 2, "n_patches": 4, "patch_size": 2,
                       "n_classes": 3, **kw})
    model = build_vit(cfg, Rng(seed))
    # Larger weights than the default init so the check is not dominated by tiny values.
    for i, k in enumerate(sorted(model.params)):
        if not k.endswith((".g", ".b")):
            model.params[k] = randn(list(model.params[k].shape), 0.5, Rng(1000 * seed + i))
    return model


def test_config_validation():
    with pytest.raises(ConfigError):
        ViTConfig(d=10, heads=3)
    cfg = ViTConfig(d=16, heads=4, patch_size=4, channels=3)
    assert cfg.d_f == 64 and cfg.d_head == 4 and cfg.patch_dim == 48


def test_build_shapes_and_determinism():
    cfg = ViTConfig(d=8, L=3, heads=2, n_patches=4, patch_size=2, n_classes=5)
    m = build_vit(cfg, Rng(1))
    assert m.params["pos"].shape == (5, 8) and m.params["cls"].shape == (1, 8)
    assert m.params["layers.2.w1"].shape == (8, 32) and m.params["layers.2.w2"].shape == (32, 8)
    assert m.params["head.w"].shape == (8, 5)
    assert not m.params["head.b"].any() and np.all(m.params["layers.0.ln1.g"] == 1)
    assert m.backbone_hash() == build_vit(cfg, Rng(1)).backbone_hash()
    assert m.backbone_hash() != build_vit(cfg, Rng(2)).backbone_hash()


def test_patchify_order():
    img = np.arange(16, dtype=float).reshape(4, 4)
    p = patchify(img, 2)
    assert p.shape == (4, 4)
    assert p[0].tolist() == [0, 1, 4, 5]
    assert p[1].tolist() == [2, 3, 6, 7]
    assert p[3].tolist() == [10, 11, 14, 15]
    with pytest.raises(ShapeError):
        patchify(np.zeros((5, 4)), 2)


def test_forward_matches_reference_without_delta():
    m = _small()
    x = randn([3, 4, 4], 1.0, Rng(5))
    assert np.max(np.abs(forward(m, x) - reference_forward(m, x))) < 1e-10


@pytest.mark.parametrize("kind", KINDS)
def test_forward_matches_reference_with_delta(kind):
    m = _small()
    rng = Rng(8)
    f = init_factors(kind, 8, 2, 2, 3, 2.0, rng=rng)
    f = f.with_tensors({k: randn(list(v.shape), 0.3, rng) for k, v in f.tensors().items()})
    mask = TuningMask(frozenset({1}), frozenset({"mhsa", "ffn"}))
    deltas = {}
    for role in Role:
        if f.covers(role, 1):
            deltas[(role.value, 1)] = delta_for(f, role, 1)
    x = randn([2, 4, 4], 1.0, Rng(9))
    assert np.max(np.abs(forward(m, x, f, mask) - reference_forward(m, x, deltas))) < 1e-10


def test_mask_blocks_restrict_deltas():
    m = _small()
    rng = Rng(3)
    f = init_factors("efft1", 8, 2, 2, 2, 1.0, rng=rng)
    f = f.with_tensors({k: randn(list(v.shape), 0.3, rng) for k, v in f.tensors().items()})
    x = randn([2, 4, 4], 1.0, Rng(4))
    mask = TuningMask(frozenset({0, 1}), frozenset({"ffn"}))
    deltas = {(r.value, l): delta_for(f, r, l) for r in (Role.FFN1, Role.FFN2) for l in (0, 1)}
    assert np.max(np.abs(forward(m, x, f, mask) - reference_forward(m, x, deltas))) < 1e-10


@pytest.mark.parametrize("kind", KINDS)
def test_zero_init_bit_identical(kind):
    cfg = ViTConfig(d=8, L=2, heads=2, n_patches=4, patch_size=2, n_classes=3)
    m = build_vit(cfg, Rng(0))
    x = randn([3, 4, 4], 1.0, Rng(1))
    f = init_factors(kind, 8, 2, 2, 2, 100.0, rng=Rng(2))
    assert np.array_equal(forward(m, x, f), forward(m, x))


def test_empty_mask_equals_no_factors():
    m = _small()
    rng = Rng(3)
    f = init_factors("efft1", 8, 2, 2, 2, 1.0, rng=rng)
    f = f.with_tensors({k: randn(list(v.shape), 0.3, rng) for k, v in f.tensors().items()})
    x = randn([2, 4, 4], 1.0, Rng(4))
    assert np.array_equal(forward(m, x, f, TuningMask.empty()), forward(m, x))


def test_rows_independent_of_batch():
    m = _small()
    x = randn([5, 4, 4], 1.0, Rng(6))
    full = forward(m, x)
    assert np.array_equal(full[2:3], forward(m, x[2:3]))
    assert np.array_equal(full, forward(m, x, chunk=2))


def test_trainable_params_and_frozen_leaves():
    m = _small()
    f = init_factors("efft1", 8, 2, 2, 2, 1.0, rng=Rng(0))
    names = trainable_params(m, f)
    assert names[:2] == ["head.w", "head.b"]
    assert "factors.sigma" in names and not any(n.startswith("layers") for n in names)
    _, ids, tape = forward_on_tape(m, randn([1, 4, 4], 1.0, Rng(0)), f)
    trainable = {n for n, i in ids.items() if tape.nodes[i].trainable}
    assert trainable == set(names)


def test_batch_shape_and_factor_checks():
    m = _small()
    with pytest.raises(ShapeError):
        forward(m, np.zeros((1, 5, 4)))
    with pytest.raises(ConfigError):
        forward(m, np.zeros((1, 4, 4)), init_factors("efft1", 16, 2, 2, rng=Rng(0)))
    with pytest.raises(ConfigError):
        forward(m, np.zeros((1, 4, 4)), init_factors("fact_tt", 8, 3, 2, rng=Rng(0)))


def test_tuning_mask_describe_and_validation():
    assert TuningMask.full(2).describe() == "layers=0;1|blocks=mhsa;ffn"
    assert TuningMask.empty().is_empty()
    assert TuningMask(frozenset({1}), frozenset({"mhsa"})).applies(1, Role.K)
    assert not TuningMask(frozenset({1}), frozenset({"mhsa"})).applies(1, Role.FFN1)
    with pytest.raises(ConfigError):
        TuningMask(frozenset({0}), frozenset({"mlp"}))


def test_patchify_batch_shape():
    imgs = np.zeros((3, 8, 8, 1))
    assert patchify_batch(imgs, 4).shape == (3, 4, 16)
