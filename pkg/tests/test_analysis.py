import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from efft.analysis import (adjusted_similarity, aggregate_scores, random_baseline,
                           similarity_grid, subspace_similarity, top_left_vectors)
from efft.errors import ContractError
from efft.tensor import Rng, randn


def _orthogonal_pair(d, k, rng):
    q = np.linalg.qr(randn([d, 2 * k], 1.0, rng))[0]
    a = q[:, :k] @ randn([k, k], 1.0, rng)
    b = q[:, k:] @ randn([k, k], 1.0, rng)
    return a, b


def test_self_similarity_is_one(rng):
    a = randn([12, 6], 1.0, rng)
    for k in range(1, 7):
        assert abs(subspace_similarity(a, a, k, k) - 1.0) < 1e-10


def test_orthogonal_subspaces_zero(rng):
    a, b = _orthogonal_pair(10, 3, rng)
    assert subspace_similarity(a, b, 3, 3) < 1e-10


def test_known_partial_overlap():
    # span(e1, e2) vs span(e1, e3): one shared direction of two.
    a = np.zeros((4, 2))
    a[0, 0], a[1, 1] = 2.0, 1.0
    b = np.zeros((4, 2))
    b[0, 0], b[2, 1] = 3.0, 1.0
    assert abs(subspace_similarity(a, b, 2, 2) - 0.5) < 1e-12
    assert abs(subspace_similarity(a, b, 1, 1) - 1.0) < 1e-12


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 5), st.integers(1, 5))
def test_bounds_and_symmetry(seed, i, j):
    rng = Rng(seed)
    a, b = randn([8, 5], 1.0, rng), randn([8, 6], 1.0, rng)
    v = subspace_similarity(a, b, i, j)
    assert 0.0 <= v <= 1.0
    k = min(i, j)
    assert abs(subspace_similarity(a, b, k, k) - subspace_similarity(b, a, k, k)) < 1e-10


def test_monotone_containment(rng):
    a, b = randn([10, 6], 1.0, rng), randn([10, 6], 1.0, rng)
    ub = top_left_vectors(b, 3)
    prev = -1.0
    for i in range(1, 7):
        val = float(np.sum((top_left_vectors(a, i).T @ ub) ** 2))
        assert val >= prev - 1e-12
        prev = val


def test_gaussian_baseline_matches_j_over_d():
    # Monte-Carlo oracle: expected similarity of random 64x64 pairs at i=j=8 is j/d.
    vals = [subspace_similarity(randn([64, 64], 1.0, Rng(2 * s)), randn([64, 64], 1.0, Rng(2 * s + 1)),
                                8, 8) for s in range(100)]
    assert abs(np.mean(vals) - 8 / 64) < 0.2 * 8 / 64


def test_adjusted_similarity_behaviour(rng):
    a = randn([16, 16], 1.0, rng)
    base = random_baseline((16, 16), (16, 16), 4, 4, 10, Rng(0))
    adj = adjusted_similarity(a, a, 4, 4, rng=Rng(0))
    assert adj > 0 and abs(adj - (1.0 - base)) < 1e-12
    b = randn([16, 16], 1.0, rng)
    assert adjusted_similarity(a, b, 4, 4, baseline_seeds=0) == subspace_similarity(a, b, 4, 4)


def test_adjusted_gaussian_pairs_near_zero():
    vals = [adjusted_similarity(randn([32, 32], 1.0, Rng(s)), randn([32, 32], 1.0, Rng(100 + s)),
                                4, 4, rng=Rng(1000 + s)) for s in range(20)]
    assert abs(np.mean(vals)) < 0.1


def test_contract_errors(rng):
    a = randn([6, 3], 1.0, rng)
    with pytest.raises(ContractError):
        subspace_similarity(a, a, 4, 1)
    with pytest.raises(ContractError):
        subspace_similarity(a, randn([5, 3], 1.0, rng), 1, 1)
    with pytest.raises(ContractError):
        subspace_similarity(a, a, 0, 1)


def test_grid_matches_pointwise(rng):
    a, b = randn([8, 5], 1.0, rng), randn([8, 4], 1.0, rng)
    g = similarity_grid(a, b, 5, 4, matrices="a,b")
    for i in range(1, 6):
        for j in range(1, 5):
            assert abs(g.values[i - 1, j - 1] - subspace_similarity(a, b, i, j)) < 1e-12
    assert g.meta["matrices"] == "a,b" and g.meta["adjusted"] is False
    rows = g.to_csv_rows()
    assert len(rows) == 20 and rows[0]["i"] == 1 and rows[0]["j"] == 1
    adj = similarity_grid(a, b, 5, 4, adjust=True, rng=Rng(0))
    assert np.all(adj.values >= 0) and np.all(adj.values <= g.values + 1e-12)
    assert "baseline_seeds" in adj.meta


def test_aggregate_constant_and_counts():
    assert aggregate_scores([50.0] * 19) == (50.0, 50.0)
    with pytest.raises(ContractError):
        aggregate_scores([1.0] * 18)
    with pytest.raises(ContractError):
        aggregate_scores({"natural": [1] * 7, "specialized": [1] * 3, "structured": [1] * 8})


def test_aggregate_group_weighting():
    scores = [70.0] * 7 + [80.0] * 4 + [90.0] * 8
    overall, group = aggregate_scores(scores)
    assert abs(overall - (70 * 7 + 80 * 4 + 90 * 8) / 19) < 1e-12
    assert abs(group - 80.0) < 1e-12
    assert aggregate_scores({"natural": scores[:7], "specialized": scores[7:11],
                             "structured": scores[11:]}) == (overall, group)
