"""AdamW fine-tuning, hyperparameter sweeps and block/layer ablations."""
from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .autodiff import backward
from .data import Dataset, split
from .errors import ConfigError, NumericError
from .factors import count_params, init_factors
from .tensor import Rng
from .vit import BLOCKS, TuningMask, ViTModel, forward, forward_on_tape, patchify_batch, trainable_params

log = logging.getLogger(__name__)

DIVERGENCE_LOSS = 1e6
CSV_FIELDS = ["method", "d", "L", "r1", "r2", "s", "mask", "seed", "params",
              "train_acc", "val_acc", "steps", "wall_ms"]


@dataclass(frozen=True)
class TrainHyper:
    lr: float = 1e-3
    batch_size: int = 64
    epochs: int = 100
    max_steps: int | None = None
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError("lr must be > 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.max_steps is not None and self.max_steps < 0:
            raise ConfigError("max_steps must be >= 0")
        b1, b2 = self.betas
        if not (0 <= b1 < 1 and 0 <= b2 < 1):
            raise ConfigError("betas must lie in [0, 1)")
        if self.eps <= 0 or self.weight_decay < 0:
            raise ConfigError("eps must be > 0 and weight_decay >= 0")


# -- AdamW -----------------------------------------------------------------------

@dataclass
class AdamState:
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def decays(name: str) -> bool:
    """Biases are exempt from weight decay."""
    return not (name.endswith(".b") or name.endswith("bias"))


def adamw_step(params: dict, grads: dict, state: AdamState, hyper: TrainHyper) -> tuple[dict, AdamState]:
    """One decoupled-weight-decay Adam update; returns new params and state."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}")
    b1, b2 = hyper.betas
    t = state.t + 1
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    new_p, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise ConfigError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        m = b1 * state.m.get(name, 0.0) + (1.0 - b1) * g
        v = b2 * state.v.get(name, 0.0) + (1.0 - b2) * (g * g)
        upd = p
        if hyper.weight_decay and decays(name):
            upd = p - hyper.lr * hyper.weight_decay * p
        upd = upd - hyper.lr * (m / c1) / (np.sqrt(v / c2) + hyper.eps)
        new_p[name], new_m[name], new_v[name] = upd, m, v
    return new_p, AdamState(t, new_m, new_v)


# -- training ----------------------------------------------------------------------

@dataclass
class RunReport:
    method: str
    d: int
    L: int
    r1: int
    r2: int
    s: float
    mask: str
    seed: int
    params: int
    epoch_loss: list = field(default_factory=list)
    epoch_acc: list = field(default_factory=list)
    train_acc: float = float("nan")
    val_acc: float = float("nan")
    steps: int = 0
    diverged: bool = False
    abort_reason: str = ""
    wall_ms: float = 0.0

    def csv_row(self) -> dict:
        def acc(x):
            return "" if x is None or math.isnan(x) else f"{x:.6f}"
        return {
            "method": self.method, "d": self.d, "L": self.L, "r1": self.r1, "r2": self.r2,
            "s": repr(float(self.s)), "mask": self.mask, "seed": self.seed, "params": self.params,
            "train_acc": acc(self.train_acc), "val_acc": acc(self.val_acc), "steps": self.steps,
            "wall_ms": f"{self.wall_ms:.0f}",
        }

    def numerics(self) -> dict:
        """Everything except wall-clock time, JSON-friendly."""
        out = {k: getattr(self, k) for k in (
            "method", "d", "L", "r1", "r2", "s", "mask", "seed", "params", "epoch_loss",
            "epoch_acc", "train_acc", "val_acc", "steps", "diverged", "abort_reason")}
        for k in ("train_acc", "val_acc"):
            if out[k] is not None and math.isnan(out[k]):
                out[k] = None
        return out

    @classmethod
    def from_numerics(cls, data: dict) -> "RunReport":
        data = dict(data)
        for k in ("train_acc", "val_acc"):
            if data.get(k) is None:
                data[k] = float("nan")
        return cls(**data)


@dataclass
class TrainResult:
    report: RunReport
    model: ViTModel
    factors: object


def accuracy(model, ds_or_patches, labels=None, factors=None, mask=None) -> float:
    if isinstance(ds_or_patches, Dataset):
        patches = patchify_batch(ds_or_patches.images, model.cfg.patch_size)
        labels = ds_or_patches.labels
    else:
        patches = ds_or_patches
    if len(labels) == 0:
        return float("nan")
    pred = np.argmax(forward(model, patches, factors, mask), axis=1)
    return float(np.mean(pred == labels))


def _describe(factors):
    if factors is None:
        return "linear", 0, 0, 0.0
    return factors.kind, int(factors.r1), int(factors.r2), float(factors.s)


def _unflatten(model, factors, values):
    m = model.copy()
    for name in ("head.w", "head.b"):
        m.params[name] = values[name]
    f = None
    if factors is not None:
        f = factors.with_tensors({k[len("factors."):]: v for k, v in values.items() if k.startswith("factors.")})
    return m, f


def train(model: ViTModel, factors, mask: TuningMask | None, dataset: Dataset, hyper: TrainHyper,
          val: Dataset | None = None) -> TrainResult:
    """Fine-tune the head and factor tensors with AdamW on cross-entropy.

    Minibatch order comes from ``Rng(hyper.seed)``; the backbone is never
    modified. Training stops after ``epochs`` or ``max_steps`` updates,
    whichever is first, or when the loss exceeds ``1e6``/goes non-finite.
    """
    if len(dataset) == 0:
        raise ConfigError("training set is empty")
    cfg = model.cfg
    if dataset.n_classes > cfg.n_classes:
        raise ConfigError(f"dataset has {dataset.n_classes} classes, head has {cfg.n_classes}")
    if mask is None:
        mask = TuningMask.full(cfg.L)
    t0 = time.perf_counter()
    patches = patchify_batch(dataset.images, cfg.patch_size)
    labels = dataset.labels
    kind, r1, r2, s = _describe(factors)
    report = RunReport(kind, cfg.d, cfg.L, r1, r2, s, mask.describe(), hyper.seed,
                       count_params(factors) if factors is not None else 0)

    names = trainable_params(model, factors, mask)
    values = {n: model.params[n].copy() for n in names if n in model.params}
    if factors is not None and not mask.is_empty():
        values.update({f"factors.{k}": v.copy() for k, v in factors.tensors().items()})
    state = AdamState()
    rng = Rng(hyper.seed).spawn(1)
    N, bs = len(dataset), hyper.batch_size
    budget = hyper.max_steps

    for epoch in range(hyper.epochs):
        if budget is not None and report.steps >= budget:
            break
        perm = rng.permutation(N)
        tot_loss = tot_correct = seen = 0.0
        for start in range(0, N, bs):
            if budget is not None and report.steps >= budget:
                break
            idx = perm[start:start + bs]
            try:
                logits, ids, tape = forward_on_tape(model, patches[idx], factors, mask, params=values)
                loss = tape.cross_entropy_logits(logits, labels[idx])
                lval = float(tape.value(loss))
                if not math.isfinite(lval) or lval > DIVERGENCE_LOSS:
                    raise NumericError(f"loss {lval:.3g} at step {report.steps}")
                g = backward(tape, loss)
                grads = {n: g[ids[n]] for n in values}
                values, state = adamw_step(values, grads, state, hyper)
            except NumericError as exc:
                report.diverged, report.abort_reason = True, str(exc)
                log.warning("training aborted: %s", exc)
                break
            report.steps += 1
            pred = np.argmax(tape.value(logits), axis=1)
            tot_loss += lval * len(idx)
            tot_correct += float(np.sum(pred == labels[idx]))
            seen += len(idx)
        if seen:
            report.epoch_loss.append(tot_loss / seen)
            report.epoch_acc.append(tot_correct / seen)
        if report.diverged:
            break

    trained_model, trained_factors = _unflatten(model, factors, values)
    if not report.diverged:
        report.train_acc = accuracy(trained_model, patches, labels, trained_factors, mask)
        if val is not None and len(val):
            report.val_acc = accuracy(trained_model, val, factors=trained_factors, mask=mask)
    report.wall_ms = (time.perf_counter() - t0) * 1000.0
    return TrainResult(report, trained_model, trained_factors)


# -- sweeps ------------------------------------------------------------------------

DEFAULT_SCALES = (0.1, 1.0, 10.0, 100.0)
DEFAULT_RANKS = (8, 16, 32)


@dataclass
class SweepResult:
    best: RunReport | None
    grid: list[RunReport]


def _cell_seed(seed: int, index: int) -> int:
    return int(Rng(seed).spawn(1000 + index).next_u64(1)[0] & np.uint64(0x7FFFFFFF))


def _selection_key(rep: RunReport):
    return (-rep.val_acc, rep.params, rep.s)


def select_best(grid: Sequence[RunReport]) -> RunReport | None:
    """Highest validation accuracy; ties go to fewer parameters, then smaller scale."""
    ok = [r for r in grid if not r.diverged and not math.isnan(r.val_acc)]
    return min(ok, key=_selection_key) if ok else None


def sweep(model: ViTModel, dataset: Dataset, method: str, scales: Iterable[float] = DEFAULT_SCALES,
          ranks: Iterable[int] = DEFAULT_RANKS, hyper: TrainHyper = TrainHyper(), *,
          val_fraction: float = 0.2, mask: TuningMask | None = None, rank_preset: str = "equal",
          sigma_std: float = 0.02) -> SweepResult:
    """Train one cell per ``(s, r)`` and pick the best by validation accuracy."""
    from .factors import RANK_PRESETS

    scales, ranks = list(scales), list(ranks)
    if not scales or not ranks:
        raise ConfigError("sweep grids must be non-empty")
    tr, va = split(dataset, val_fraction, Rng(hyper.seed).spawn(2))
    grid = []
    for index, (r, s) in enumerate((r, s) for r in ranks for s in scales):
        cseed = _cell_seed(hyper.seed, index)
        r1, r2 = RANK_PRESETS[rank_preset](r)
        f = init_factors(method, model.cfg.d, model.cfg.L, r1, r2, s,
                         rng=Rng(cseed), sigma_std=sigma_std)
        res = train(model, f, mask, tr, replace(hyper, seed=cseed), val=va)
        log.info("cell r=%d s=%g val_acc=%.4f", r, s, res.report.val_acc)
        grid.append(res.report)
    return SweepResult(select_best(grid), grid)


def fine_scales(center: float, points_per_decade: int = 4, decades: float = 1.0) -> list[float]:
    """Log-spaced scales within ``decades`` of ``center``, for finer searches."""
    n = int(round(points_per_decade * decades))
    return [float(center * 10.0 ** (k / points_per_decade)) for k in range(-n, n + 1)]


# -- ablation ----------------------------------------------------------------------

BLOCK_CHOICES = {"mhsa": ("mhsa",), "ffn": ("ffn",), "both": BLOCKS}
VIT_B_LAYER_GROUPS = {"0-2": (0, 1, 2), "2-4": (2, 3, 4), "5-8": (5, 6, 7, 8), "9-11": (9, 10, 11)}


@dataclass
class AblationRow:
    layers: str
    blocks: str
    report: RunReport
    delta_pct: float


def ablation_run(model: ViTModel, dataset: Dataset, method: str, layer_sets: dict | Sequence,
                 block_masks: Sequence[str] = ("mhsa", "ffn", "both"), *, r: int = 8, s: float = 10.0,
                 hyper: TrainHyper = TrainHyper(), val_fraction: float = 0.2,
                 sigma_std: float = 0.02) -> list[AblationRow]:
    """Accuracy change (percentage points) of each layer/block mask vs. all-layers-both.

    Every cell starts from the same head, the same factor initialization and
    the same minibatch order. The first row is the baseline itself.
    """
    L = model.cfg.L
    if not isinstance(layer_sets, dict):
        layer_sets = {"-".join(map(str, ls)) if ls else "none": tuple(ls) for ls in layer_sets}
    for name, ls in layer_sets.items():
        if any(not 0 <= x < L for x in ls):
            raise ConfigError(f"layer set {name!r} outside [0, {L})")
    for b in block_masks:
        if b not in BLOCK_CHOICES:
            raise ConfigError(f"unknown block choice {b!r}")
    tr, va = split(dataset, val_fraction, Rng(hyper.seed).spawn(2))
    fseed = _cell_seed(hyper.seed, 0)
    factors = init_factors(method, model.cfg.d, L, r, r, s, rng=Rng(fseed), sigma_std=sigma_std)

    def run(mask):
        return train(model, factors, mask, tr, hyper, val=va).report

    base = run(TuningMask.full(L))
    rows = [AblationRow("all", "both", base, 0.0)]
    cells = [("all", tuple(range(L)))] + list(layer_sets.items())
    for lname, ls in cells:
        for b in block_masks:
            if lname == "all" and b == "both":
                continue
            rep = run(TuningMask(frozenset(ls), frozenset(BLOCK_CHOICES[b])))
            rows.append(AblationRow(lname, b, rep, 100.0 * (rep.val_acc - base.val_acc)))
    return rows


# -- CSV ---------------------------------------------------------------------------

def reports_to_csv(reports: Sequence[RunReport], extra: Sequence[dict] | None = None) -> str:
    buf = io.StringIO()
    fields = list(CSV_FIELDS)
    if extra:
        fields += [k for k in extra[0] if k not in fields]
    w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    w.writeheader()
    for i, rep in enumerate(reports):
        row = rep.csv_row()
        if extra:
            row.update(extra[i])
        w.writerow(row)
    return buf.getvalue()


def ablation_to_csv(rows: Sequence[AblationRow]) -> str:
    extra = [{"layers": r.layers, "blocks": r.blocks, "delta_pct": f"{r.delta_pct:+.2f}"} for r in rows]
    return reports_to_csv([r.report for r in rows], extra)
