"""EFFTCKPT container: a small, fully documented little-endian binary format.

Layout::

    offset 0   8 bytes   magic  b"EFFTCKPT"
    offset 8   u32       version (1)
    offset 12  u64       header length H in bytes
    offset 20  H bytes   UTF-8 JSON header, keys sorted
    then               raw float64 (little-endian, C order) buffers, one per
                       entry of header["tensors"], in that order

The header carries the parameterization (kind, d, L, r1, r2, s, seed, mask),
the model config, the factor hyperparameters, a ``tensors`` manifest of
``{"name", "shape"}`` records and the run report numerics (wall-clock time is
deliberately left out so identical runs produce identical files).
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from .errors import FormatError
from .factors import (Efft1Factors, Efft2Factors, FactTtFactors, LoraAdapter, LoraFactors)
from .train import RunReport
from .vit import TuningMask, ViTConfig, ViTModel

MAGIC = b"EFFTCKPT"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


@dataclass
class Checkpoint:
    model: ViTModel
    factors: object
    mask: TuningMask | None
    report: RunReport | None
    seed: int
    header: dict


def _factor_meta(factors) -> dict:
    if factors is None:
        return {"kind": "linear", "r1": 0, "r2": 0, "s": 0.0}
    meta = dict(factors.hyper())
    meta["s"] = float(meta["s"])
    if "s2" in meta:
        meta["s2"] = float(meta["s2"])
    return meta


def _mask_meta(mask: TuningMask | None):
    if mask is None:
        return None
    return {"layers": sorted(mask.layers), "blocks": sorted(mask.blocks), "text": mask.describe()}


def encode(model: ViTModel, factors=None, report: RunReport | None = None,
           mask: TuningMask | None = None, seed: int = 0) -> bytes:
    tensors = [(f"model.{k}", v) for k, v in sorted(model.params.items())]
    if factors is not None:
        tensors += [(f"factors.{k}", v) for k, v in sorted(factors.tensors().items())]
    fmeta = _factor_meta(factors)
    header = {
        "format": "EFFTCKPT",
        "kind": fmeta["kind"],
        "d": model.cfg.d,
        "L": model.cfg.L,
        "r1": int(fmeta["r1"]),
        "r2": int(fmeta["r2"]),
        "s": fmeta["s"],
        "seed": int(seed),
        "mask": _mask_meta(mask),
        "model_config": asdict(model.cfg),
        "factors": fmeta,
        "tensors": [{"name": n, "shape": list(np.shape(v))} for n, v in tensors],
        "report": None if report is None else report.numerics(),
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [_PREFIX.pack(MAGIC, VERSION, len(blob)), blob]
    for _, v in tensors:
        parts.append(np.ascontiguousarray(v, dtype="<f8").tobytes())
    return b"".join(parts)


def save_checkpoint(path, model: ViTModel, factors=None, report: RunReport | None = None,
                    mask: TuningMask | None = None, seed: int = 0) -> None:
    data = encode(model, factors, report, mask, seed)
    with open(path, "wb") as fh:
        fh.write(data)


def _rebuild_factors(meta: dict, arrays: dict):
    kind = meta["kind"]
    if kind == "linear":
        if arrays:
            raise FormatError("linear-probe checkpoint carries factor tensors")
        return None
    try:
        if kind == "efft1":
            return Efft1Factors(arrays["sigma"], arrays["u"], arrays["v"], meta["s"])
        if kind == "efft2":
            return Efft2Factors(arrays["sigma1"], arrays["u1"], arrays["v1"],
                                arrays["sigma2"], arrays["u2"], arrays["v2"], meta["s"], meta["s2"])
        if kind == "fact_tt":
            return FactTtFactors(arrays["sigma"], arrays["u"], arrays["v"], meta["s"])
        if kind == "lora":
            keys = sorted({n.rsplit(".", 1)[0] for n in arrays})
            adapters = {k: LoraAdapter(arrays[f"{k}.down"], arrays[f"{k}.up"], meta["s"]) for k in keys}
            return LoraFactors(adapters, meta["s"], meta["d"])
    except KeyError as exc:
        raise FormatError(f"checkpoint missing factor tensor {exc}") from None
    except ValueError as exc:
        raise FormatError(f"checkpoint factor tensors inconsistent: {exc}") from None
    raise FormatError(f"unknown parameterization kind {kind!r}")


def decode(data: bytes) -> Checkpoint:
    if len(data) < _PREFIX.size:
        raise FormatError("checkpoint truncated before header")
    magic, version, hlen = _PREFIX.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version} (expected {VERSION})")
    start = _PREFIX.size
    if len(data) < start + hlen:
        raise FormatError("checkpoint truncated inside header")
    try:
        header = json.loads(data[start:start + hlen].decode("utf-8"))
        manifest = header["tensors"]
        cfg = ViTConfig(**header["model_config"])
        fmeta = header["factors"]
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"malformed checkpoint header: {exc}") from None
    if fmeta.get("kind") != header.get("kind") or cfg.d != header.get("d") or cfg.L != header.get("L"):
        raise FormatError("checkpoint header fields disagree with each other")

    offset = start + hlen
    params, farrays = {}, {}
    for entry in manifest:
        shape = tuple(int(x) for x in entry["shape"])
        if any(x < 0 for x in shape):
            raise FormatError(f"negative dimension in {entry['name']}")
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        if offset + nbytes > len(data):
            raise FormatError(f"checkpoint truncated in tensor {entry['name']}")
        arr = np.frombuffer(data, dtype="<f8", count=nbytes // 8, offset=offset).reshape(shape)
        arr = arr.astype(np.float64)
        offset += nbytes
        name = entry["name"]
        if name.startswith("model."):
            params[name[len("model."):]] = arr
        elif name.startswith("factors."):
            farrays[name[len("factors."):]] = arr
        else:
            raise FormatError(f"unexpected tensor name {name!r}")
    if offset != len(data):
        raise FormatError(f"{len(data) - offset} trailing bytes after declared tensors")

    model = ViTModel(cfg, params)
    _check_model(model)
    factors = _rebuild_factors(fmeta, farrays)
    if factors is not None and (factors.r1, factors.r2) != (header["r1"], header["r2"]):
        raise FormatError("factor ranks disagree with header")
    mask = None
    if header.get("mask") is not None:
        mask = TuningMask(frozenset(header["mask"]["layers"]), frozenset(header["mask"]["blocks"]))
    report = None if header.get("report") is None else RunReport.from_numerics(header["report"])
    return Checkpoint(model, factors, mask, report, int(header.get("seed", 0)), header)


def _check_model(model: ViTModel) -> None:
    from .tensor import Rng
    from .vit import build_vit
    ref = build_vit(model.cfg, Rng(0))
    for name, v in ref.params.items():
        if name not in model.params:
            raise FormatError(f"checkpoint missing model tensor {name}")
        if model.params[name].shape != v.shape:
            raise FormatError(f"model tensor {name} has shape {model.params[name].shape}, expected {v.shape}")
    extra = set(model.params) - set(ref.params)
    if extra:
        raise FormatError(f"unexpected model tensors {sorted(extra)}")


def load_checkpoint(path) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except FileNotFoundError:
        raise FormatError(f"checkpoint not found: {path}") from None
    return decode(data)
