"""Subspace similarity between factor matrices and benchmark score averaging."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import ContractError
from .tensor import Rng, Tensor, frobenius_norm_sq, matmul, randn, svd

GROUP_SIZES = {"natural": 7, "specialized": 4, "structured": 8}


def top_left_vectors(a: Tensor, i: int) -> Tensor:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ContractError(f"expected a matrix, got shape {a.shape}")
    k = min(a.shape)
    if not 1 <= i <= k:
        raise ContractError(f"requested {i} singular vectors, matrix {a.shape} has {k}")
    return svd(a).u[:, :i]


def _overlap(ua: Tensor, ub: Tensor) -> float:
    return frobenius_norm_sq(matmul(ua.T, ub))


def subspace_similarity(a: Tensor, b: Tensor, i: int, j: int) -> float:
    """``||Ua_i^T Ub_j||_F^2 / min(i, j)`` over top left singular vectors, in [0, 1]."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[0] != b.shape[0]:
        raise ContractError(f"matrices must share their row count: {a.shape} vs {b.shape}")
    ua, ub = top_left_vectors(a, i), top_left_vectors(b, j)
    return float(min(max(_overlap(ua, ub) / min(i, j), 0.0), 1.0))


def random_baseline(shape_a, shape_b, i: int, j: int, n_pairs: int, rng: Rng) -> float:
    """Mean similarity of ``n_pairs`` independent standard Gaussian pairs."""
    if n_pairs <= 0:
        return 0.0
    vals = [
        subspace_similarity(randn(shape_a, 1.0, rng), randn(shape_b, 1.0, rng), i, j)
        for _ in range(n_pairs)
    ]
    return float(np.mean(vals))


def adjusted_similarity(a: Tensor, b: Tensor, i: int, j: int, baseline_seeds: int = 10,
                        rng: Rng | None = None) -> float:
    """Raw similarity minus the Gaussian-pair baseline, clamped at 0.

    ``baseline_seeds=0`` returns the raw value.
    """
    raw = subspace_similarity(a, b, i, j)
    if baseline_seeds <= 0:
        return raw
    base = random_baseline(np.shape(a), np.shape(b), i, j, baseline_seeds, rng or Rng(0))
    return max(raw - base, 0.0)


@dataclass
class SimilarityGrid:
    values: Tensor  # (i_max, j_max); entry [i-1, j-1]
    meta: dict = field(default_factory=dict)

    def to_csv_rows(self):
        rows = []
        for i in range(self.values.shape[0]):
            for j in range(self.values.shape[1]):
                rows.append({"i": i + 1, "j": j + 1, "similarity": f"{self.values[i, j]:.6f}"})
        return rows


def similarity_grid(a: Tensor, b: Tensor, i_max: int, j_max: int, *, adjust: bool = False,
                    baseline_seeds: int = 10, rng: Rng | None = None, **meta) -> SimilarityGrid:
    """All ``(i, j)`` similarities up to ``(i_max, j_max)`` from one SVD per matrix."""
    ua, ub = top_left_vectors(a, i_max), top_left_vectors(b, j_max)
    prod = matmul(ua.T, ub)
    sq = prod * prod
    cum = np.cumsum(np.cumsum(sq, axis=0), axis=1)
    mins = np.minimum.outer(np.arange(1, i_max + 1), np.arange(1, j_max + 1))
    vals = np.clip(cum / mins, 0.0, 1.0)
    info = dict(meta, adjusted=bool(adjust))
    if adjust and baseline_seeds > 0:
        rng = rng or Rng(0)
        base = np.zeros_like(vals)
        for _ in range(baseline_seeds):
            base += similarity_grid(randn(np.shape(a), 1.0, rng), randn(np.shape(b), 1.0, rng),
                                    i_max, j_max).values
        base /= baseline_seeds
        vals = np.maximum(vals - base, 0.0)
        info.update(baseline_seeds=baseline_seeds, adjustment="mean-subtract, clamp at 0")
    return SimilarityGrid(vals, info)


def aggregate_scores(per_task: Sequence[float] | Mapping[str, Sequence[float]]) -> tuple[float, float]:
    """Return ``(mean of all tasks, mean of the three group means)``.

    Accepts 19 values ordered Natural (7), Specialized (4), Structured (8),
    or a mapping with those three group names.
    """
    if isinstance(per_task, Mapping):
        groups = []
        for name, size in GROUP_SIZES.items():
            vals = list(per_task.get(name, ()))
            if len(vals) != size:
                raise ContractError(f"group {name!r} needs {size} scores, got {len(vals)}")
            groups.append(np.asarray(vals, dtype=np.float64))
    else:
        vals = np.asarray(list(per_task), dtype=np.float64)
        if vals.shape != (19,):
            raise ContractError(f"expected 19 per-task scores (7/4/8), got {vals.size}")
        groups = [vals[:7], vals[7:11], vals[11:]]
    allv = np.concatenate(groups)
    return float(allv.mean()), float(np.mean([g.mean() for g in groups]))
