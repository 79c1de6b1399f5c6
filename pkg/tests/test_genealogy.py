import itertools
from collections import Counter

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from spinecoal.forest import simulate_tree
from spinecoal.genealogy import (ColouredPartition, InsufficientPopulation, coloured_partition_probability,
                                 coloured_partitions, partition_count, partition_process, set_partitions,
                                 split_records, uniform_sample, uniform_sample_indices, unif_replay,
                                 unif_scan)
from spinecoal.model import sym2


def birth_death_split_time_cdf(x, T, b=0.5, n_max=20_000):
    """Exact P(tau_1 / T <= x) for two uniform individuals of a critical birth-death tree
    (birth = death = b) conditioned on N_T >= 2.

    The reconstructed tree is a coalescent point process: node depths are iid with
    P(H > s) = 1 / (1 + b s) given H < T, N_T is geometric, and the two sampled
    positions are g apart with probability 2 (n - g) / (n (n - 1)).
    """
    q = b * T / (1 + b * T)
    n = np.arange(2, n_max)
    pn = q ** (n - 2) * (1 - q)
    x = np.atleast_1d(x)
    s = T * (1 - x)
    F = (b * s / (1 + b * s)) / q
    out = []
    for f in F:
        # sum_{g=1}^{n-1} 2 (n - g) f^g / (n (n - 1)), summed in closed form
        if f >= 1.0:
            eg = np.ones_like(n, dtype=float)
        else:
            eg = 2 * f * ((n - 1) - n * f + f ** n) / ((1 - f) ** 2 * n * (n - 1))
        out.append(1.0 - float(pn @ eg))
    return np.array(out)


def _tree_with_population(model, T, n):
    for r in range(10_000):
        tree = simulate_tree(model, T, seed=7, replicate=r)
        if tree.population_at().sum() == n:
            return tree
    raise AssertionError("no tree of the requested size")


def test_exact_oracle_is_a_distribution():
    cdf = birth_death_split_time_cdf(np.array([0.0, 0.5, 1.0]), 50.0)
    assert cdf[0] == pytest.approx(0.0, abs=1e-12)
    assert cdf[2] == pytest.approx(1.0, abs=1e-9)
    assert 0 < cdf[1] < 1


def test_uniform_sample_frequencies(sym2_model):
    tree = _tree_with_population(sym2_model, 3.0, 3)
    rng = np.random.default_rng(0)
    n = 30_000
    singles = Counter(tuple(uniform_sample(tree, 1, rng)) for _ in range(n))
    assert len(singles) == 3
    assert stats.chisquare(list(singles.values())).pvalue > 1e-3
    pairs = Counter(tuple(uniform_sample_indices(tree, 2, rng)) for _ in range(n))
    assert len(pairs) == 6
    assert stats.chisquare(list(pairs.values())).pvalue > 1e-3


def test_insufficient_population(sym2_model):
    tree = _tree_with_population(sym2_model, 3.0, 1)
    with pytest.raises(InsufficientPopulation):
        uniform_sample(tree, 2, np.random.default_rng(0))


@given(st.integers(0, 5000))
def test_partition_process_endpoints_and_refinement(replicate):
    tree = simulate_tree(sym2(), 8.0, seed=3, replicate=replicate)
    alive = tree.alive_indices()
    if alive.size < 3:
        return
    sample = [int(v) for v in alive[:3]]
    assert partition_process(tree, sample, 0.0) == [(1, 2, 3)]
    assert partition_process(tree, sample, 8.0) == [(1,), (2,), (3,)]
    times = np.linspace(0, 8, 17)
    parts = [partition_process(tree, sample, t) for t in times]
    for coarse, fine in zip(parts, parts[1:]):
        assert all(any(set(b) <= set(c) for c in coarse) for b in fine)
    events, M = split_records(tree, sample)
    assert M == len(events) and 1 <= M <= 2
    for e in events:
        before = partition_process(tree, sample, np.nextafter(e.time, 0))
        after = partition_process(tree, sample, e.time)
        assert len(after) == len(before) + e.partition.n_blocks - 1


def test_split_records_rejects_dead_or_repeated(sym2_model):
    tree = _tree_with_population(sym2_model, 3.0, 3)
    alive = [int(v) for v in tree.alive_indices()]
    with pytest.raises(ValueError):
        split_records(tree, [alive[0], alive[0]])
    if tree.size > 3:
        dead = int(np.nonzero(np.isfinite(tree.death))[0][0])
        with pytest.raises(ValueError):
            split_records(tree, [dead, alive[0]])


@pytest.mark.parametrize("k", [2, 3, 4])
def test_compiled_scan_matches_replayed_records(mix2_model, k):
    batch = unif_scan(mix2_model, k, 12.0, seed=5, count=100_000, limit=200)
    assert batch.accepted == 200
    for r in range(batch.accepted):
        tree, leaves = unif_replay(mix2_model, k, 12.0, 5, int(batch.ids[r]))
        assert tree.population_at().sum() == batch.N[r]
        events, M = split_records(tree, [int(v) for v in leaves])
        assert M == batch.M[r]
        got = batch.events(r)
        for a, b in zip(events, got):
            assert a.time == b.time
            assert a.type_before == b.type_before
            assert a.offspring == b.offspring
            assert a.partition == b.partition


def test_scan_counts(sym2_model):
    batch = unif_scan(sym2_model, 2, 5.0, seed=1, count=20_000)
    N = batch.N
    assert np.all(N >= 2)
    assert batch.scanned == 20_000 and batch.truncated == 0
    assert batch.survived >= batch.accepted


@pytest.mark.parametrize("which", ["GEO1", "SYM2"])
def test_first_split_time_matches_exact_finite_horizon_law(geo1_model, sym2_model, which):
    # both models have a total population that is a critical birth-death process with rate 1/2
    model = geo1_model if which == "GEO1" else sym2_model
    T = 50.0
    batch = unif_scan(model, 2, T, seed=21, count=10 ** 7, limit=20_000)
    x = batch.split_time[:, 0] / T
    grid = np.linspace(0, 1, 2001)
    table = birth_death_split_time_cdf(grid, T)
    res = stats.kstest(x, lambda v: np.interp(v, grid, table))
    assert res.pvalue > 1e-3


def _history(parts):
    return tuple(frozenset(frozenset(b) for bs in p.blocks for b in bs) for p in parts)


def test_ranked_histories_uniform_at_finite_horizon(sym2_model):
    # iid node depths in the reconstructed tree make every labelled ranked history equally likely
    k = 4
    batch = unif_scan(sym2_model, k, 20.0, seed=8, count=10 ** 7, limit=9_000)
    assert np.all(batch.M == k - 1)
    counts = Counter(_history(batch.partitions(r)) for r in range(batch.accepted))
    assert len(counts) == 18
    assert stats.chisquare(list(counts.values())).pvalue > 1e-3


def test_partition_probabilities_sum_to_one():
    for ell, xi in (((2, 1), (0.3, 0.7)), ((3, 0), (0.5, 0.5)), ((1, 2), (0.6, 0.4))):
        for k in (1, 2, 3, 4):
            total = sum(coloured_partition_probability(p, ell, xi) for p in coloured_partitions(k, 2))
            assert total == pytest.approx(1.0, abs=1e-12)


def test_partition_count_matches_enumeration():
    for k in (2, 3, 4, 5):
        counts = Counter(tuple(tuple(sorted(s)) for s in p.sizes) for p in coloured_partitions(k, 2))
        for sizes, c in counts.items():
            assert partition_count(sizes) == c


def test_set_partitions_are_bell_numbers():
    assert [sum(1 for _ in set_partitions(range(n))) for n in range(7)] == [1, 1, 2, 5, 15, 52, 203]


def test_partition_string_roundtrip():
    for p in itertools.islice(coloured_partitions(4, 2), 200):
        assert ColouredPartition.from_string(2, p.to_string()) == p


def test_partition_validation():
    with pytest.raises(ValueError):
        ColouredPartition.from_blocks(2, [[(1, 2)], [(2,)]])
    with pytest.raises(ValueError):
        ColouredPartition.from_blocks(2, [[()], []])
