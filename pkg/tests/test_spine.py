import dataclasses
import math
from collections import Counter

import numpy as np
import pytest
from scipy import stats

from spinecoal import genfun
from spinecoal.genealogy import partition_count
from spinecoal.model import spectral
from spinecoal.spine import (MomentTable, SpineSampler, allocate_spines, exact_moments, first_split_law,
                             first_split_law_forward, g_statistic, importance_weight, no_mark_dynamics,
                             offspine_limit_rate, offspine_rates, pk_weights, size_families,
                             spine_split_rate)


def _log_moment_derivative(model, theta, k, u):
    vals, ders = genfun.moment_jets(model, [u], theta, k)
    return ders[0] / vals[0]


def test_allocation_uniform_over_children_and_marks():
    rng = np.random.default_rng(1)
    n = 20_000
    slots = Counter(allocate_spines((2, 0), [(2,), ()], [1, 2], rng)[1][0] for _ in range(n))
    assert set(slots) == {(1,), (2,)}
    assert stats.chisquare(list(slots.values())).pvalue > 1e-3
    parts = Counter(allocate_spines((2, 1), [(2,), (1,)], [1, 2, 3], rng)[0] for _ in range(n))
    assert len(parts) == 3 == partition_count([(2,), (1,)])
    assert stats.chisquare(list(parts.values())).pvalue > 1e-3
    parts = Counter(allocate_spines((3, 0), [(2, 1), ()], [1, 2, 3], rng)[0] for _ in range(n))
    assert len(parts) == partition_count([(2, 1)])
    assert stats.chisquare(list(parts.values())).pvalue > 1e-3


def test_allocation_rejects_inconsistent_sizes():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        allocate_spines((1, 1), [(1, 1), ()], [1, 2], rng)
    with pytest.raises(ValueError):
        allocate_spines((1, 1), [(1,), ()], [1, 2], rng)


def test_size_families_of_binary_split():
    assert sorted(size_families(2, (1, 1))) == sorted([((2,), ()), ((), (2,)), ((1,), (1,))])
    assert sorted(size_families(3, (2, 0))) == sorted([((3,), ()), ((2, 1), ())])


def test_g_statistic(sym2_model):
    sampler = SpineSampler(sym2_model, 2, (0.5, 0.5), 6.0)
    for rep in range(20):
        rec, tree = sampler.simulate(seed=2, replicate=rep)
        g = g_statistic(rec, tree, sampler.xi, 2)
        # every SYM2 step contributes (l . xi) / xi_child = 2
        depth = sum(len(tree.label(v)) for v in rec.final_marks.values())
        assert g == pytest.approx(2.0 ** depth)
        assert g == pytest.approx(math.exp(rec.log_g_kernel))
        assert g_statistic(rec, tree, sampler.xi, 0) == 1.0
        merged = dataclasses.replace(rec, final_marks={1: rec.final_marks[1], 2: rec.final_marks[1]})
        assert g_statistic(merged, tree, sampler.xi, 2) == 0.0


def test_batch_matches_single_replicates(mix2_model):
    sampler = SpineSampler(mix2_model, 3, (0.2, 0.4), 8.0, root_type=1)
    batch = sampler.batch(10, seed=4)
    logw = batch.log_weights()
    for r in range(10):
        rec, tree = sampler.simulate(seed=4, replicate=r)
        np.testing.assert_array_equal(rec.Z_T, batch.Z[r])
        assert rec.M == batch.M[r]
        assert importance_weight(rec, sampler) == pytest.approx(math.exp(logw[r]), rel=1e-12)
        assert batch.partitions(r) == [e.partition for e in rec.splits]
        assert len(rec.final_marks) == 3 and len(set(rec.final_marks.values())) == 3


def test_moment_table_interpolation(mix2_model):
    theta = (0.3, 0.1)
    table = MomentTable(mix2_model, 30.0, theta, 3)
    assert table.interp_error <= 1e-6
    exact = exact_moments(mix2_model, theta, 3)
    for u in np.random.default_rng(0).uniform(0, 30.0, 25):
        np.testing.assert_allclose(table.log_moments(u), np.log(exact(u)), atol=1e-6)


@pytest.mark.parametrize("h", [1, 2, 3])
def test_total_rate_net_and_hazard_forms(mix2_model, h):
    theta = (0.4, 0.2)
    T = 7.0
    sampler = SpineSampler(mix2_model, 3, theta, T)
    for t in (0.5, 3.0, 6.5):
        dlog = _log_moment_derivative(mix2_model, theta, 3, T - t)
        for i in range(2):
            total = sampler.event_rates(t, i, h).sum()
            assert total == pytest.approx(mix2_model.alpha[i] + dlog[h, i], rel=1e-6)


def test_event_rates_match_explicit_formula(mix2_model):
    theta = (0.4, 0.2)
    T, t, i, h = 7.0, 2.0, 0, 2
    sampler = SpineSampler(mix2_model, 2, theta, T)
    exact = exact_moments(mix2_model, theta, 2)
    explicit = 0.0
    for ell in np.asarray(mix2_model.outcomes[i]):
        for fam in size_families(h, ell):
            count = partition_count([s for s in fam if s])
            explicit += count * spine_split_rate(mix2_model, exact, i, fam, ell, t, T)
    assert sampler.event_rates(t, i, h).sum() == pytest.approx(explicit, rel=1e-6)


def test_no_mark_dynamics(mix2_model):
    trivial = exact_moments(mix2_model, (0.0, 0.0), 1)
    for i in range(2):
        rate, probs = no_mark_dynamics(mix2_model, trivial, i, 1.0, 5.0)
        assert rate == pytest.approx(mix2_model.alpha[i])
        np.testing.assert_allclose(probs, mix2_model.probs[i])
    theta = (0.7, 0.3)
    tilted = exact_moments(mix2_model, theta, 1)
    dlog = _log_moment_derivative(mix2_model, theta, 1, 4.0)
    for i in range(2):
        rate, probs = no_mark_dynamics(mix2_model, tilted, i, 1.0, 5.0)
        assert rate == pytest.approx(mix2_model.alpha[i] + dlog[0, i], rel=1e-8)
        assert probs.sum() == pytest.approx(1.0)


def test_unmarked_tilt_by_reweighting(mix2_model):
    # the unmarked dynamics are the original law reweighted by exp(-theta . Z): compare the
    # offspring law at the root's first branching against a weighted forward simulation
    from spinecoal.forest import simulate_tree

    theta = np.array([0.7, 0.3])
    T = 3.0
    weights = Counter()
    total = 0.0
    for rep in range(30_000):
        tree = simulate_tree(mix2_model, T, seed=12, replicate=rep)
        w = math.exp(-theta @ tree.population_at())
        total += w
        if np.isfinite(tree.death[0]) and tree.death[0] < 0.5:
            weights[tuple(tree.offspring_vector(0))] += w
    _, probs = no_mark_dynamics(mix2_model, exact_moments(mix2_model, theta, 1), 0, 0.25, T)
    observed = np.array([weights[tuple(ell)] for ell in np.asarray(mix2_model.outcomes[0])])
    # first branching in [0, 0.5): the tilted law barely moves over such a short window
    np.testing.assert_allclose(observed / observed.sum(), probs, atol=0.03)


@pytest.mark.parametrize("k", [2, 3])
def test_first_split_law_two_routes(mix2_model, k):
    theta = (0.3, 0.6)
    T = 10.0
    sampler = SpineSampler(mix2_model, k, theta, T, root_type=1)
    times = np.linspace(0.1, 9.9, 15)
    keys_a, a = first_split_law(mix2_model, k, theta, T, 1, times)
    keys_b, b = first_split_law_forward(sampler, times)
    assert keys_a == keys_b
    np.testing.assert_allclose(a, b, rtol=1e-5, atol=1e-10)


def _integrate_law(model, k, theta, T, root, edges, nodes=8):
    x, w = np.polynomial.legendre.leggauss(nodes)
    keys, out = None, []
    for lo, hi in zip(edges[:-1], edges[1:]):
        t = 0.5 * (hi - lo) * x + 0.5 * (hi + lo)
        keys, dens = first_split_law(model, k, theta, T, root, t)
        out.append(0.5 * (hi - lo) * (w @ dens))
    return keys, np.array(out)


def test_first_split_law_is_a_probability(mix2_model):
    edges = np.linspace(1e-9, 12.0 - 1e-9, 41)
    _, mass = _integrate_law(mix2_model, 2, (0.2, 0.2), 12.0, 0, edges, nodes=16)
    assert mass.sum() == pytest.approx(1.0, abs=1e-6)


def test_sampler_first_split_chi_square(mix2_model):
    k, theta, T, root = 2, (0.5, 0.5), 6.0, 0
    sampler = SpineSampler(mix2_model, k, theta, T, root)
    batch = sampler.batch(30_000, seed=9)
    assert np.all(batch.ok) and np.all(batch.M >= 1)
    edges = np.linspace(0, T, 9)
    edges[0], edges[-1] = 1e-12, T - 1e-12
    keys, mass = _integrate_law(mix2_model, k, theta, T, root, edges)
    index = {key: c for c, key in enumerate(keys)}
    observed = np.zeros_like(mass)
    outcomes = [np.asarray(o) for o in mix2_model.outcomes]
    for r in range(batch.M.size):
        i = int(batch.split_type[r, 0])
        ell = tuple(batch.split_offspring[r, 0])
        n = next(j for j, o in enumerate(outcomes[i]) if tuple(o) == ell)
        fam = tuple(tuple(sorted(s, reverse=True)) for s in batch.partitions(r)[0].sizes)
        b = min(np.searchsorted(edges, batch.split_time[r, 0]) - 1, edges.size - 2)
        observed[b, index[(i, n, fam)]] += 1
    expected = mass.ravel() * batch.M.size
    keep = expected > 5
    obs, exp = observed.ravel()[keep], expected[keep]
    stat = ((obs - exp) ** 2 / exp).sum()
    assert stats.chi2.sf(stat, keep.sum() - 1) > 1e-3


def test_markov_property_of_unsplit_lineage(sym2_model):
    # SYM2 with equal discounts is type symmetric, so after surviving unsplit to time t the
    # marked lineage restarts as a fresh marked process over the remaining horizon T - t
    theta, T, t = (0.5, 0.5), 10.0, 4.0
    full = SpineSampler(sym2_model, 2, theta, T).batch(20_000, seed=1).split_time[:, 0]
    rest = SpineSampler(sym2_model, 2, theta, T - t).batch(20_000, seed=2).split_time[:, 0]
    late = full[full > t] - t
    assert late.size > 2000
    assert stats.ks_2samp(late, rest).pvalue > 1e-3


def test_importance_weights_recover_survival(mix2_model):
    # E_Q[weight] = P(N_T >= k) whatever the discount
    T, root = 5.0, 1
    surv = 1 - genfun.extinction_prob(mix2_model, T)[root]
    one = genfun.jacobian(mix2_model, T, np.zeros(2))[root].sum()
    for k, theta, target in ((1, (0.0, 0.0), surv), (2, (0.3, 0.3), surv - one)):
        w = np.exp(SpineSampler(mix2_model, k, theta, T, root).batch(40_000, seed=6).log_weights())
        assert abs(w.mean() - target) < 4 * w.std() / np.sqrt(w.size)


@pytest.mark.parametrize("k", [1, 2])
def test_unbiased_spine_measure_small_horizon(mix2_model, k):
    theta = np.array([0.2, 0.1])
    T = 2.0
    vals = pk_weights(mix2_model, spectral(mix2_model).xi, theta, T, k, 200_000, seed=3)
    exact = genfun.factorial_moment_discounted(mix2_model, T, theta, k)[0]
    assert abs(vals.mean() - exact) < 4 * vals.std() / np.sqrt(vals.size)


def test_offspine_rates_approach_limit(mix2_model):
    xi = spectral(mix2_model).xi
    theta = np.array([1.0, 1.0])
    devs = []
    for T in (25.0, 100.0):
        table = MomentTable(mix2_model, T, 2 * theta / (spectral(mix2_model).zeta * T), 2)
        rates = offspine_rates(mix2_model, table, 0, 2, 0.0, T)
        limit = offspine_limit_rate(mix2_model, xi, 0)
        devs.append(max(abs(rates[key] - limit[key]) for key in limit))
    assert devs[1] < devs[0]
