"""Factorized weight-delta parameterizations.

Four parameterizations are provided:

* :class:`Efft1Factors`: one core ``(3, r1, r2)`` with ``U (4d, r1)`` and
  ``V (d, r2)``. Slot 0 is ``[W_q; W_k; W_v; W_o]`` stacked vertically,
  slot 1 is ``W_ffn1`` transposed, slot 2 is ``W_ffn2``; every slot is
  ``4d x d``.
* :class:`Efft2Factors`: a ``(4, r1, r2)`` core over ``d x d`` attention
  slots and a ``(2, r1, r2)`` core over the two ``4d x d`` FFN slots.
* :class:`FactTtFactors`: per-layer core ``(12L, r1, r2)`` over ``d x d``
  slots with shared ``U, V`` (FFN1 as four column blocks, FFN2 as four row
  blocks).
* :class:`LoraFactors`: an independent ``W_down @ W_up`` per tuned matrix.

Every slot is ``s * U @ core[i] @ V.T``. The EFFT deltas carry no layer
index and are shared by all tuned layers. All backbone weights are stored
``d_in x d_out`` and applied as ``x @ W``.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

import numpy as np

from ._kernels import active as _k
from .autodiff import Tape
from .errors import ContractError, ShapeError
from .tensor import Rng, Tensor, randn


class Role(str, enum.Enum):
    Q = "q"
    K = "k"
    V = "v"
    O = "o"
    FFN1 = "ffn1"
    FFN2 = "ffn2"

    @property
    def block(self) -> str:
        return "ffn" if self in (Role.FFN1, Role.FFN2) else "mhsa"


MHSA_ROLES = (Role.Q, Role.K, Role.V, Role.O)
FFN_ROLES = (Role.FFN1, Role.FFN2)
ALL_ROLES = MHSA_ROLES + FFN_ROLES
_MHSA_INDEX = {r: i for i, r in enumerate(MHSA_ROLES)}


def role_shape(role: Role, d: int) -> tuple[int, int]:
    """Storage shape ``(d_in, d_out)`` of a backbone weight."""
    role = _as_role(role)
    if role is Role.FFN1:
        return d, 4 * d
    if role is Role.FFN2:
        return 4 * d, d
    return d, d


def _as_role(role) -> Role:
    try:
        return Role(role)
    except ValueError:
        raise ContractError(f"unknown weight role {role!r}") from None


def _positive(**dims):
    for name, val in dims.items():
        if int(val) < 1:
            raise ShapeError(f"{name} must be >= 1, got {val}")


def _check_scale(s):
    if not s > 0:
        raise ShapeError(f"scale must be positive, got {s}")


def tt_slots(core: Tensor, u: Tensor, v: Tensor, s: float) -> Tensor:
    """``out[i] = s * U @ core[i] @ V.T`` with the kernel's fixed summation order."""
    return _k.tt_materialize(
        np.ascontiguousarray(core), np.ascontiguousarray(u), np.ascontiguousarray(v), float(s)
    )


class _Bound:
    """Factor leaves placed on a tape, with derived nodes cached per tape."""

    def __init__(self, factors, tape: Tape, ids: dict[str, int]):
        self.f, self.tape, self.ids = factors, tape, ids
        self._cache: dict = {}

    def node(self, key, build):
        if key not in self._cache:
            self._cache[key] = build()
        return self._cache[key]

    def core_slot(self, name: str, i: int) -> int:
        def build():
            t, cid = self.tape, self.ids[name]
            n, r1, r2 = t.value(cid).shape
            flat = self.node((name, "flat"), lambda: t.reshape(cid, (n * r1, r2)))
            return t.slice_rows(flat, i * r1, (i + 1) * r1)
        return self.node((name, i), build)

    def core_slot_t(self, name: str, i: int) -> int:
        return self.node((name, i, "T"), lambda: self.tape.transpose(self.core_slot(name, i)))

    def tr(self, name: str) -> int:
        return self.node((name, "T"), lambda: self.tape.transpose(self.ids[name]))

    def rows(self, name: str, start: int, stop: int) -> int:
        return self.node((name, start, stop), lambda: self.tape.slice_rows(self.ids[name], start, stop))

    def chain(self, x: int, first: int, core: int, last_t: int, s: float) -> int:
        """``s * ((x @ first) @ core) @ last_t``."""
        t = self.tape
        return t.scale(t.matmul(t.matmul(t.matmul(x, first), core), last_t), s)

    def apply(self, x: int, role: Role, layer: int = 0) -> int:
        return self.f._apply_bound(self, x, _as_role(role), layer)


class Factors:
    """Shared behaviour; subclasses define tensors, slots and the low-rank path."""

    kind = ""
    shared_across_layers = True

    def tensors(self) -> dict[str, Tensor]:
        raise NotImplementedError

    def with_tensors(self, arrays: dict[str, Tensor]):
        return replace(self, **{k: np.array(v, dtype=np.float64) for k, v in arrays.items()})

    def covers(self, role, layer: int) -> bool:
        _as_role(role)
        return True

    def bind(self, tape: Tape, ids: dict[str, int]) -> _Bound:
        return _Bound(self, tape, ids)

    def count(self) -> int:
        return int(sum(t.size for t in self.tensors().values()))


@dataclass
class Efft1Factors(Factors):
    sigma: Tensor
    u: Tensor
    v: Tensor
    s: float = 1.0
    kind = "efft1"

    def __post_init__(self):
        r1, r2 = self.sigma.shape[1:]
        d = self.v.shape[0]
        if self.sigma.shape != (3, r1, r2) or self.u.shape != (4 * d, r1) or self.v.shape != (d, r2):
            raise ShapeError(
                f"EFFT1 shapes sigma{self.sigma.shape} u{self.u.shape} v{self.v.shape} inconsistent"
            )

    @property
    def d(self):
        return self.v.shape[0]

    @property
    def r1(self):
        return self.sigma.shape[1]

    @property
    def r2(self):
        return self.sigma.shape[2]

    def tensors(self):
        return {"sigma": self.sigma, "u": self.u, "v": self.v}

    def hyper(self):
        return {"kind": self.kind, "d": self.d, "r1": self.r1, "r2": self.r2, "s": self.s}

    def materialize(self) -> Tensor:
        return tt_slots(self.sigma, self.u, self.v, self.s)

    def delta(self, role: Role, layer: int = 0) -> Tensor:
        d = self.d
        if role in _MHSA_INDEX:
            i = _MHSA_INDEX[role]
            return tt_slots(self.sigma[:1], self.u[i * d:(i + 1) * d], self.v, self.s)[0]
        slot = 1 if role is Role.FFN1 else 2
        out = tt_slots(self.sigma[slot:slot + 1], self.u, self.v, self.s)[0]
        return np.ascontiguousarray(out.T) if role is Role.FFN1 else out

    def _apply_bound(self, b: _Bound, x, role, layer):
        d = self.d
        if role in _MHSA_INDEX:
            i = _MHSA_INDEX[role]
            return b.chain(x, b.rows("u", i * d, (i + 1) * d), b.core_slot("sigma", 0), b.tr("v"), self.s)
        if role is Role.FFN1:
            return b.chain(x, b.ids["v"], b.core_slot_t("sigma", 1), b.tr("u"), self.s)
        return b.chain(x, b.ids["u"], b.core_slot("sigma", 2), b.tr("v"), self.s)


@dataclass
class Efft2Factors(Factors):
    sigma1: Tensor
    u1: Tensor
    v1: Tensor
    sigma2: Tensor
    u2: Tensor
    v2: Tensor
    s1: float = 1.0
    s2: float = 1.0
    kind = "efft2"

    def __post_init__(self):
        d = self.v1.shape[0]
        r1, r2 = self.sigma1.shape[1:]
        ok = (
            self.sigma1.shape == (4, r1, r2) and self.u1.shape == (d, r1) and self.v1.shape == (d, r2)
            and self.sigma2.shape == (2, r1, r2) and self.u2.shape == (4 * d, r1)
            and self.v2.shape == (d, r2)
        )
        if not ok:
            raise ShapeError("EFFT2 factor shapes inconsistent")

    @property
    def d(self):
        return self.v1.shape[0]

    @property
    def r1(self):
        return self.sigma1.shape[1]

    @property
    def r2(self):
        return self.sigma1.shape[2]

    @property
    def s(self):
        return self.s1

    def tensors(self):
        return {
            "sigma1": self.sigma1, "u1": self.u1, "v1": self.v1,
            "sigma2": self.sigma2, "u2": self.u2, "v2": self.v2,
        }

    def hyper(self):
        return {"kind": self.kind, "d": self.d, "r1": self.r1, "r2": self.r2,
                "s": self.s1, "s2": self.s2}

    def materialize(self) -> tuple[Tensor, Tensor]:
        return (tt_slots(self.sigma1, self.u1, self.v1, self.s1),
                tt_slots(self.sigma2, self.u2, self.v2, self.s2))

    def delta(self, role: Role, layer: int = 0) -> Tensor:
        if role in _MHSA_INDEX:
            i = _MHSA_INDEX[role]
            return tt_slots(self.sigma1[i:i + 1], self.u1, self.v1, self.s1)[0]
        slot = 0 if role is Role.FFN1 else 1
        out = tt_slots(self.sigma2[slot:slot + 1], self.u2, self.v2, self.s2)[0]
        return np.ascontiguousarray(out.T) if role is Role.FFN1 else out

    def _apply_bound(self, b: _Bound, x, role, layer):
        if role in _MHSA_INDEX:
            return b.chain(x, b.ids["u1"], b.core_slot("sigma1", _MHSA_INDEX[role]), b.tr("v1"), self.s1)
        if role is Role.FFN1:
            return b.chain(x, b.ids["v2"], b.core_slot_t("sigma2", 0), b.tr("u2"), self.s2)
        return b.chain(x, b.ids["u2"], b.core_slot("sigma2", 1), b.tr("v2"), self.s2)


@dataclass
class FactTtFactors(Factors):
    sigma: Tensor
    u: Tensor
    v: Tensor
    s: float = 1.0
    kind = "fact_tt"
    shared_across_layers = False

    def __post_init__(self):
        n, r1, r2 = self.sigma.shape
        d = self.u.shape[0]
        if n % 12 or self.u.shape != (d, r1) or self.v.shape != (d, r2):
            raise ShapeError("FacT-TT factor shapes inconsistent")

    @property
    def d(self):
        return self.u.shape[0]

    @property
    def L(self):
        return self.sigma.shape[0] // 12

    @property
    def r1(self):
        return self.sigma.shape[1]

    @property
    def r2(self):
        return self.sigma.shape[2]

    def tensors(self):
        return {"sigma": self.sigma, "u": self.u, "v": self.v}

    def hyper(self):
        return {"kind": self.kind, "d": self.d, "L": self.L, "r1": self.r1, "r2": self.r2, "s": self.s}

    def covers(self, role, layer):
        _as_role(role)
        return 0 <= layer < self.L

    def _slots(self, role: Role, layer: int) -> list[int]:
        if not 0 <= layer < self.L:
            raise ContractError(f"layer {layer} outside FacT-TT range [0, {self.L})")
        base = 12 * layer
        if role in _MHSA_INDEX:
            return [base + _MHSA_INDEX[role]]
        first = base + (4 if role is Role.FFN1 else 8)
        return list(range(first, first + 4))

    def materialize(self) -> Tensor:
        return tt_slots(self.sigma, self.u, self.v, self.s)

    def delta(self, role: Role, layer: int = 0) -> Tensor:
        idx = self._slots(role, layer)
        blocks = tt_slots(self.sigma[idx[0]:idx[-1] + 1], self.u, self.v, self.s)
        if role is Role.FFN1:
            return np.ascontiguousarray(np.concatenate(list(blocks), axis=1))
        if role is Role.FFN2:
            return np.ascontiguousarray(np.concatenate(list(blocks), axis=0))
        return blocks[0]

    def _apply_bound(self, b: _Bound, x, role, layer):
        t, d = b.tape, self.d
        idx = self._slots(role, layer)
        if role in _MHSA_INDEX:
            return b.chain(x, b.ids["u"], b.core_slot("sigma", idx[0]), b.tr("v"), self.s)
        if role is Role.FFN1:
            xu = t.matmul(x, b.ids["u"])
            out = None
            for i in idx:
                blk = t.transpose(t.matmul(t.matmul(xu, b.core_slot("sigma", i)), b.tr("v")))
                out = blk if out is None else t.concat_rows(out, blk)
            return t.scale(t.transpose(out), self.s)
        xt = t.transpose(x)
        acc = None
        for c, i in enumerate(idx):
            xc = t.transpose(t.slice_rows(xt, c * d, (c + 1) * d))
            part = t.matmul(t.matmul(xc, b.ids["u"]), b.core_slot("sigma", i))
            acc = part if acc is None else t.add(acc, part)
        return t.scale(t.matmul(acc, b.tr("v")), self.s)


def _lora_key(role: Role, layer: int) -> str:
    return f"{role.value}.{layer}"


@dataclass
class LoraAdapter:
    """Single-matrix adapter ``s * w_down @ w_up``."""

    w_down: Tensor
    w_up: Tensor
    s: float = 1.0

    def delta(self) -> Tensor:
        from .tensor import matmul
        return self.s * matmul(self.w_down, self.w_up)


@dataclass
class LoraFactors(Factors):
    """Independent adapters keyed by ``"<role>.<layer>"``."""

    adapters: dict[str, LoraAdapter] = field(default_factory=dict)
    s: float = 1.0
    d: int = 0
    kind = "lora"
    shared_across_layers = False

    @property
    def r1(self):
        return next(iter(self.adapters.values())).w_down.shape[1] if self.adapters else 0

    @property
    def r2(self):
        return self.r1

    def tensors(self):
        out = {}
        for key, ad in self.adapters.items():
            out[f"{key}.down"] = ad.w_down
            out[f"{key}.up"] = ad.w_up
        return out

    def with_tensors(self, arrays):
        adapters = {
            key: LoraAdapter(np.array(arrays[f"{key}.down"], dtype=np.float64),
                             np.array(arrays[f"{key}.up"], dtype=np.float64), self.s)
            for key in self.adapters
        }
        return replace(self, adapters=adapters)

    def hyper(self):
        keys = list(self.adapters)
        layers = sorted({int(k.split(".")[1]) for k in keys})
        roles = [r.value for r in ALL_ROLES if any(k.startswith(r.value + ".") for k in keys)]
        return {"kind": self.kind, "d": self.d, "r1": self.r1, "r2": self.r2, "s": self.s,
                "roles": roles, "layers": layers}

    def covers(self, role, layer):
        return _lora_key(_as_role(role), layer) in self.adapters

    def materialize(self) -> dict[str, Tensor]:
        return {key: ad.delta() for key, ad in self.adapters.items()}

    def delta(self, role: Role, layer: int = 0) -> Tensor:
        key = _lora_key(_as_role(role), layer)
        if key not in self.adapters:
            raise ContractError(f"LoRA has no adapter for {key}")
        return self.adapters[key].delta()

    def _apply_bound(self, b: _Bound, x, role, layer):
        key = _lora_key(role, layer)
        if key not in self.adapters:
            raise ContractError(f"LoRA has no adapter for {key}")
        t = b.tape
        return t.scale(t.matmul(t.matmul(x, b.ids[f"{key}.down"]), b.ids[f"{key}.up"]), self.s)


# -- initialization -------------------------------------------------------------

def init_efft1(d: int, r1: int, r2: int | None = None, s: float = 1.0, *,
               sigma_std: float = 0.02, rng: Rng) -> Efft1Factors:
    """Core and ``U`` Gaussian, ``V`` zero, so the delta starts at exactly zero."""
    r2 = r1 if r2 is None else r2
    _positive(d=d, r1=r1, r2=r2)
    _check_scale(s)
    sigma = randn([3, r1, r2], sigma_std, rng)
    u = randn([4 * d, r1], sigma_std, rng)
    return Efft1Factors(sigma, u, np.zeros((d, r2)), float(s))


def init_efft2(d: int, r1: int, r2: int | None = None, s1: float = 1.0, s2: float | None = None, *,
               sigma_std: float = 0.02, rng: Rng) -> Efft2Factors:
    r2 = r1 if r2 is None else r2
    s2 = s1 if s2 is None else s2
    _positive(d=d, r1=r1, r2=r2)
    _check_scale(s1)
    _check_scale(s2)
    sigma1 = randn([4, r1, r2], sigma_std, rng)
    u1 = randn([d, r1], sigma_std, rng)
    sigma2 = randn([2, r1, r2], sigma_std, rng)
    u2 = randn([4 * d, r1], sigma_std, rng)
    return Efft2Factors(sigma1, u1, np.zeros((d, r2)), sigma2, u2, np.zeros((d, r2)),
                        float(s1), float(s2))


def init_fact_tt(d: int, L: int, r1: int, r2: int | None = None, s: float = 1.0, *,
                 sigma_std: float = 0.02, rng: Rng) -> FactTtFactors:
    r2 = r1 if r2 is None else r2
    _positive(d=d, L=L, r1=r1, r2=r2)
    _check_scale(s)
    sigma = randn([12 * L, r1, r2], sigma_std, rng)
    u = randn([d, r1], sigma_std, rng)
    return FactTtFactors(sigma, u, np.zeros((d, r2)), float(s))


def init_lora(d_in: int, d_out: int, r: int = 8, s: float = 1.0, *,
              sigma_std: float = 0.02, rng: Rng) -> LoraAdapter:
    """``w_down`` Gaussian, ``w_up`` zero."""
    _positive(d_in=d_in, d_out=d_out, r=r)
    _check_scale(s)
    return LoraAdapter(randn([d_in, r], sigma_std, rng), np.zeros((r, d_out)), float(s))


def init_lora_model(d: int, L: int, r: int = 8, s: float = 1.0, *,
                    roles=(Role.Q, Role.V), layers=None,
                    sigma_std: float = 0.02, rng: Rng) -> LoraFactors:
    """Adapters on ``roles`` of every layer in ``layers`` (default all ``L``)."""
    _positive(d=d, L=L, r=r)
    layers = range(L) if layers is None else layers
    adapters = {}
    for layer in layers:
        for role in roles:
            role = _as_role(role)
            d_in, d_out = role_shape(role, d)
            adapters[_lora_key(role, layer)] = init_lora(d_in, d_out, r, s, sigma_std=sigma_std, rng=rng)
    return LoraFactors(adapters, float(s), d)


RANK_PRESETS = {
    "equal": lambda r: (r, r),
    "r2_4x": lambda r: (r, 4 * r),
}


def init_factors(kind: str, d: int, L: int, r1: int, r2: int | None = None, s: float = 1.0, *,
                 rng: Rng, sigma_std: float = 0.02, s2: float | None = None):
    """Dispatch on ``kind`` in ``{"efft1", "efft2", "lora", "fact_tt"}``."""
    if kind == "efft1":
        return init_efft1(d, r1, r2, s, sigma_std=sigma_std, rng=rng)
    if kind == "efft2":
        return init_efft2(d, r1, r2, s, s2, sigma_std=sigma_std, rng=rng)
    if kind == "fact_tt":
        return init_fact_tt(d, L, r1, r2, s, sigma_std=sigma_std, rng=rng)
    if kind == "lora":
        return init_lora_model(d, L, r1, s, sigma_std=sigma_std, rng=rng)
    raise ContractError(f"unknown parameterization {kind!r}")


# -- module-level API -----------------------------------------------------------

def materialize(f):
    return f.materialize()


def delta_for(f, role, layer: int = 0) -> Tensor:
    """Dense delta for ``role`` in ``(d_in, d_out)`` storage orientation."""
    return f.delta(_as_role(role), layer)


def apply_delta(x: Tensor, f, role, layer: int = 0) -> Tensor:
    """``x @ delta`` through the low-rank path, without a dense delta."""
    role = _as_role(role)
    x = np.ascontiguousarray(x, dtype=np.float64)
    d_in, _ = role_shape(role, f.d)
    if x.shape[-1] != d_in:
        raise ShapeError(f"input has {x.shape[-1]} columns, role {role.value} expects {d_in}")
    tape = Tape()
    ids = {k: tape.leaf(v, name=k) for k, v in f.tensors().items()}
    out = f.bind(tape, ids).apply(tape.leaf(x), role, layer)
    return tape.value(out)


def count_params(f, include_head: bool = False, n_classes: int = 0) -> int:
    """Exact number of trainable scalars; optionally add a ``d x C`` head plus bias."""
    n = f.count()
    if include_head:
        n += f.d * n_classes + n_classes
    return n


def efft1_param_formula(d: int, r1: int, r2: int) -> int:
    return 4 * d * r1 + d * r2 + 3 * r1 * r2


def efft2_param_formula(d: int, r1: int, r2: int) -> int:
    return d * r1 + d * r2 + 4 * d * r1 + d * r2 + 4 * r1 * r2 + 2 * r1 * r2


def fact_tt_param_formula(d: int, L: int, r1: int, r2: int) -> int:
    return 12 * L * r1 * r2 + d * r1 + d * r2


def param_count_for(kind: str, d: int, L: int, r1: int, r2: int, lora_roles: int = 2) -> int:
    """Closed-form count without allocating factors."""
    if kind == "efft1":
        return efft1_param_formula(d, r1, r2)
    if kind == "efft2":
        return efft2_param_formula(d, r1, r2)
    if kind == "fact_tt":
        return fact_tt_param_formula(d, L, r1, r2)
    if kind == "lora":
        return L * lora_roles * (d * r1 + r1 * d)
    raise ContractError(f"unknown parameterization {kind!r}")
