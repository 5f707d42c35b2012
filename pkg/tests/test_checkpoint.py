import json
import struct

import numpy as np
import pytest

from efft.checkpoint import MAGIC, decode, encode, load_checkpoint, save_checkpoint
from efft.data import SyntheticSpec, gen_synthetic
from efft.errors import FormatError
from efft.factors import init_factors
from efft.tensor import Rng, randn
from efft.train import TrainHyper, train
from efft.vit import TuningMask, ViTConfig, build_vit

CFG = ViTConfig(d=8, L=2, heads=2, n_patches=4, patch_size=4, n_classes=2)


def _random_factors(kind, seed):
    rng = Rng(seed)
    f = init_factors(kind, 8, 2, 2, 3, 1.0 + seed, rng=rng)
    return f.with_tensors({k: randn(list(v.shape), 1.0, rng) for k, v in f.tensors().items()})


def _assert_same(a, b):
    assert a.model.cfg == b.model.cfg
    assert set(a.model.params) == set(b.model.params)
    for k in a.model.params:
        assert np.array_equal(a.model.params[k], b.model.params[k])


@pytest.mark.parametrize("kind", ["efft1", "efft2", "lora", "fact_tt"])
def test_round_trip_bit_exact(tmp_path, kind):
    model = build_vit(CFG, Rng(1))
    f = _random_factors(kind, 3)
    mask = TuningMask(frozenset({1}), frozenset({"ffn"}))
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model, f, None, mask, seed=9)
    ck = load_checkpoint(path)
    assert ck.model.backbone_hash() == model.backbone_hash()
    assert ck.factors.kind == kind and ck.factors.s == f.s
    for k, v in f.tensors().items():
        assert np.array_equal(ck.factors.tensors()[k], v)
    assert ck.mask == mask and ck.seed == 9
    assert ck.header["r1"] == 2 and ck.header["r2"] == (2 if kind == "lora" else 3)


def test_round_trip_many_random_factor_sets():
    model = build_vit(CFG, Rng(0))
    for seed in range(100):
        kind = ("efft1", "efft2", "lora", "fact_tt")[seed % 4]
        f = _random_factors(kind, seed)
        ck = decode(encode(model, f))
        for k, v in f.tensors().items():
            assert np.array_equal(ck.factors.tensors()[k], v)


def test_encoding_is_deterministic():
    model = build_vit(CFG, Rng(0))
    f = _random_factors("efft1", 1)
    assert encode(model, f) == encode(model.copy(), f)


def test_linear_probe_checkpoint():
    model = build_vit(CFG, Rng(0))
    ck = decode(encode(model, None))
    assert ck.factors is None and ck.header["kind"] == "linear"


def test_layout_prefix():
    data = encode(build_vit(CFG, Rng(0)), None)
    magic, version, hlen = struct.unpack_from("<8sIQ", data, 0)
    assert magic == MAGIC == b"EFFTCKPT" and version == 1
    header = json.loads(data[20:20 + hlen])
    n = sum(int(np.prod(t["shape"])) for t in header["tensors"])
    assert len(data) == 20 + hlen + 8 * n


def test_corrupt_magic_version_truncation():
    data = encode(build_vit(CFG, Rng(0)), _random_factors("efft1", 0))
    bad = bytearray(data)
    bad[0] ^= 0xFF
    with pytest.raises(FormatError, match="magic"):
        decode(bytes(bad))
    bad = bytearray(data)
    bad[8] = 2
    with pytest.raises(FormatError, match="version"):
        decode(bytes(bad))
    with pytest.raises(FormatError, match="truncated"):
        decode(data[:-1])
    with pytest.raises(FormatError, match="truncated"):
        decode(data[:10])
    with pytest.raises(FormatError, match="trailing"):
        decode(data + b"\0" * 8)


def test_header_inconsistency_rejected():
    data = encode(build_vit(CFG, Rng(0)), _random_factors("efft1", 0))
    hlen = struct.unpack_from("<Q", data, 12)[0]
    header = json.loads(data[20:20 + hlen])
    body = data[20 + hlen:]

    def rebuild(h):
        blob = json.dumps(h, sort_keys=True, separators=(",", ":")).encode()
        return struct.pack("<8sIQ", MAGIC, 1, len(blob)) + blob + body

    h = dict(header, kind="efft2")
    with pytest.raises(FormatError):
        decode(rebuild(h))
    h = json.loads(json.dumps(header))
    h["tensors"][0]["shape"] = [h["tensors"][0]["shape"][0] + 1] + h["tensors"][0]["shape"][1:]
    with pytest.raises(FormatError):
        decode(rebuild(h))
    with pytest.raises(FormatError, match="malformed"):
        decode(struct.pack("<8sIQ", MAGIC, 1, 3) + b"{x}")


def test_load_then_zero_steps_keeps_report(tmp_path):
    model = build_vit(CFG, Rng(0))
    ds = gen_synthetic(SyntheticSpec(2, 4, 8, 0.1))
    res = train(model, _random_factors("efft1", 2), None, ds, TrainHyper(lr=1e-2, max_steps=3, batch_size=4))
    path = tmp_path / "r.ckpt"
    save_checkpoint(path, res.model, res.factors, res.report, TuningMask.full(2), seed=0)
    ck = load_checkpoint(path)
    assert ck.report.numerics() == res.report.numerics()
    again = train(ck.model, ck.factors, ck.mask, ds, TrainHyper(max_steps=0)).report
    assert again.train_acc == res.report.train_acc


def test_missing_file(tmp_path):
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "absent.ckpt")
