"""Tape-based reverse-mode differentiation.

Forward values are computed eagerly when a primitive is recorded; each
node keeps a closure mapping its output gradient to input gradients.
Nodes that do not depend on a trainable leaf are never differentiated,
so frozen backbone weights cost nothing in the backward pass.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .errors import ContractError, NumericError, ShapeError
from .tensor import Rng, Tensor, matmul as _mm

GELU_C = math.sqrt(2.0 / math.pi)
GELU_A = 0.044715
LN_EPS = 1e-5


@dataclass
class Node:
    id: int
    op: str
    inputs: tuple[int, ...]
    value: Tensor
    backward: Callable[[Tensor], tuple] | None = None
    trainable: bool = False
    requires_grad: bool = False
    name: str | None = None


def _swap(x: Tensor) -> Tensor:
    return np.ascontiguousarray(np.swapaxes(x, -1, -2))


def _reduce_to(g: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Sum a broadcast gradient back down to ``shape``."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


@dataclass
class Tape:
    nodes: list[Node] = field(default_factory=list)
    names: dict[str, int] = field(default_factory=dict)

    # -- bookkeeping -------------------------------------------------------
    def leaf(self, value, trainable: bool = False, name: str | None = None) -> int:
        value = np.ascontiguousarray(value, dtype=np.float64)
        nid = len(self.nodes)
        self.nodes.append(Node(nid, "leaf", (), value, None, trainable, trainable, name))
        if name is not None:
            self.names[name] = nid
        return nid

    def constant(self, value) -> int:
        return self.leaf(value, trainable=False)

    def value(self, nid: int) -> Tensor:
        return self.nodes[nid].value

    @property
    def param_ids(self) -> list[int]:
        return [n.id for n in self.nodes if n.trainable]

    def _push(self, op, inputs, value, backward) -> int:
        nid = len(self.nodes)
        req = any(self.nodes[i].requires_grad for i in inputs)
        self.nodes.append(Node(nid, op, tuple(inputs), value, backward, False, req))
        return nid

    def _shape(self, nid):
        return self.nodes[nid].value.shape

    # -- primitives ----------------------------------------------------------
    def add(self, a: int, b: int) -> int:
        """``a + b``; ``b`` may broadcast over leading or unit axes of ``a``."""
        va, vb = self.value(a), self.value(b)
        try:
            out = va + vb
        except ValueError as exc:
            raise ShapeError(f"add: {va.shape} vs {vb.shape}") from exc
        if out.shape != va.shape:
            raise ShapeError(f"add: result {out.shape} must keep the left shape {va.shape}")
        sb = vb.shape
        return self._push("add", (a, b), out, lambda g: (g, _reduce_to(g, sb)))

    def mul(self, a: int, b: int) -> int:
        va, vb = self.value(a), self.value(b)
        if va.shape != vb.shape:
            raise ShapeError(f"mul: {va.shape} vs {vb.shape}")
        return self._push("mul", (a, b), va * vb, lambda g: (g * vb, g * va))

    def scale(self, a: int, c: float) -> int:
        c = float(c)
        return self._push("scale", (a,), c * self.value(a), lambda g: (c * g,))

    def matmul(self, a: int, b: int) -> int:
        va, vb = self.value(a), self.value(b)
        out = _mm(va, vb)
        na, nb = self.nodes[a], self.nodes[b]

        def back(g):
            ga = gb = None
            if vb.ndim == 2:
                if na.requires_grad:
                    ga = _mm(g, _swap(vb))
                if nb.requires_grad:
                    gb = _mm(_swap(va.reshape(-1, va.shape[-1])), g.reshape(-1, g.shape[-1]))
            else:
                if na.requires_grad:
                    ga = _mm(g, _swap(vb))
                if nb.requires_grad:
                    gb = _mm(_swap(va), g)
            return ga, gb

        return self._push("matmul", (a, b), out, back)

    def transpose(self, a: int) -> int:
        """Swap the last two axes."""
        return self._push("transpose", (a,), _swap(self.value(a)), lambda g: (_swap(g),))

    def reshape(self, a: int, shape) -> int:
        old = self._shape(a)
        try:
            out = self.value(a).reshape(shape)
        except ValueError as exc:
            raise ShapeError(f"reshape {old} -> {shape}") from exc
        return self._push("reshape", (a,), out, lambda g: (g.reshape(old),))

    def permute(self, a: int, axes) -> int:
        axes = tuple(axes)
        inv = tuple(np.argsort(axes))
        out = np.ascontiguousarray(np.transpose(self.value(a), axes))
        return self._push("permute", (a,), out, lambda g: (np.ascontiguousarray(np.transpose(g, inv)),))

    def concat_rows(self, a: int, b: int) -> int:
        """Concatenate along the row axis (second to last)."""
        va, vb = self.value(a), self.value(b)
        if va.ndim != vb.ndim or va.shape[:-2] != vb.shape[:-2] or va.shape[-1] != vb.shape[-1]:
            raise ShapeError(f"concat_rows: {va.shape} vs {vb.shape}")
        k = va.shape[-2]
        out = np.concatenate([va, vb], axis=-2)
        return self._push("concat_rows", (a, b), out, lambda g: (g[..., :k, :], g[..., k:, :]))

    def slice_rows(self, a: int, start: int, stop: int) -> int:
        va = self.value(a)
        if not 0 <= start < stop <= va.shape[-2]:
            raise ShapeError(f"slice_rows [{start}:{stop}) outside {va.shape}")
        shape = va.shape

        def back(g):
            full = np.zeros(shape)
            full[..., start:stop, :] = g
            return (full,)

        return self._push("slice_rows", (a,), np.ascontiguousarray(va[..., start:stop, :]), back)

    def softmax_rows(self, a: int) -> int:
        va = self.value(a)
        e = np.exp(va - va.max(axis=-1, keepdims=True))
        y = e / e.sum(axis=-1, keepdims=True)
        return self._push(
            "softmax_rows", (a,), y,
            lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),),
        )

    def gelu(self, a: int) -> int:
        x = self.value(a)
        th = np.tanh(GELU_C * (x + GELU_A * x ** 3))
        y = 0.5 * x * (1.0 + th)

        def back(g):
            dudx = GELU_C * (1.0 + 3.0 * GELU_A * x * x)
            return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dudx),)

        return self._push("gelu", (a,), y, back)

    def layer_norm_rows(self, a: int, gain: int, bias: int) -> int:
        x = self.value(a)
        gv, bv = self.value(gain), self.value(bias)
        if gv.shape != (x.shape[-1],) or bv.shape != (x.shape[-1],):
            raise ShapeError(f"layer_norm_rows: gain/bias must have shape ({x.shape[-1]},)")
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
        xhat = xc * inv
        y = xhat * gv + bv

        def back(g):
            dxh = g * gv
            dx = inv * (dxh - dxh.mean(axis=-1, keepdims=True)
                        - xhat * (dxh * xhat).mean(axis=-1, keepdims=True))
            lead = tuple(range(x.ndim - 1))
            return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

        return self._push("layer_norm_rows", (a, gain, bias), y, back)

    def mean(self, a: int) -> int:
        va = self.value(a)
        n, shape = va.size, va.shape
        return self._push("mean", (a,), np.array(va.mean()), lambda g: (np.full(shape, float(g) / n),))

    def cross_entropy_logits(self, logits: int, labels) -> int:
        """Mean negative log-likelihood of integer ``labels`` under row softmax."""
        z = self.value(logits)
        labels = np.asarray(labels, dtype=np.int64)
        if z.ndim != 2 or labels.shape != (z.shape[0],):
            raise ShapeError(f"cross_entropy_logits: logits {z.shape}, labels {labels.shape}")
        if not np.all(np.isfinite(z)):
            raise NumericError("cross_entropy_logits: non-finite logits")
        if labels.size and (labels.min() < 0 or labels.max() >= z.shape[1]):
            raise ShapeError("cross_entropy_logits: label out of range")
        zs = z - z.max(axis=1, keepdims=True)
        lse = np.log(np.exp(zs).sum(axis=1))
        rows = np.arange(z.shape[0])
        loss = np.array((lse - zs[rows, labels]).mean())
        p = np.exp(zs - lse[:, None])

        def back(g):
            d = p.copy()
            d[rows, labels] -= 1.0
            return (d * (float(g) / z.shape[0]),)

        return self._push("cross_entropy_logits", (logits,), loss, back)


def backward(tape: Tape, loss: int) -> dict[int, Tensor]:
    """Gradients of the scalar ``loss`` for every trainable leaf on ``tape``."""
    root = tape.nodes[loss]
    if root.value.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {root.value.shape}")
    grads: dict[int, Tensor] = {loss: np.ones_like(root.value)}
    for node in reversed(tape.nodes[: loss + 1]):
        g = grads.pop(node.id, None) if not node.trainable else grads.get(node.id)
        if g is None or node.backward is None:
            continue
        parts = node.backward(g)
        for i, part in zip(node.inputs, parts):
            if part is None or not tape.nodes[i].requires_grad:
                continue
            prev = grads.get(i)
            grads[i] = part if prev is None else prev + part
    return {
        n.id: grads.get(n.id, np.zeros_like(n.value)).reshape(n.value.shape)
        for n in tape.nodes if n.trainable
    }


def finite_difference_check(
    build_loss: Callable[[Tape, Mapping[str, int]], int],
    params: Mapping[str, Tensor],
    eps: float = 1e-5,
    n_coords: int = 50,
    rng: Rng | None = None,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``build_loss(tape, ids)`` records the loss on ``tape`` given leaf ids for
    each named parameter and returns the loss node. Up to ``n_coords``
    coordinates per tensor are probed (all of them for small tensors); the
    relative error denominator is ``max(|analytic|, |numeric|, 1e-8)``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    rng = rng or Rng(0)
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}

    tape = Tape()
    ids = {k: tape.leaf(v, trainable=True, name=k) for k, v in params.items()}
    grads = backward(tape, build_loss(tape, ids))

    def evaluate(vals):
        t = Tape()
        lid = {k: t.leaf(v, name=k) for k, v in vals.items()}
        return float(t.value(build_loss(t, lid)))

    worst = 0.0
    for name, val in params.items():
        flat_idx = np.arange(val.size)
        if val.size > n_coords:
            flat_idx = np.sort(rng.permutation(val.size)[:n_coords])
        analytic = grads[ids[name]].reshape(-1)
        for idx in flat_idx:
            probe = dict(params)
            plus, minus = val.copy().reshape(-1), val.copy().reshape(-1)
            plus[idx] += eps
            minus[idx] -= eps
            probe[name] = plus.reshape(val.shape)
            fp = evaluate(probe)
            probe[name] = minus.reshape(val.shape)
            fm = evaluate(probe)
            num = (fp - fm) / (2.0 * eps)
            ana = float(analytic[idx])
            err = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
            worst = max(worst, err)
    return worst
