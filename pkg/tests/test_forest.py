import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from spinecoal.forest import PopulationCapError, final_populations, simulate_tree
from spinecoal.model import OffspringModel, spectral, sym2

from conftest import binomial_z


def test_zero_horizon_is_single_root(mix2_model):
    tree = simulate_tree(mix2_model, 0.0, root_type=1)
    assert tree.size == 1
    assert tree.alive_at() == [()]
    np.testing.assert_array_equal(tree.population_at(), [0, 1])


def test_childless_model_extinction_probability():
    m = OffspringModel(1, np.array([1.0]), (np.array([[0]]),), (np.array([1.0]),))
    T, n = 0.7, 40_000
    Z = final_populations(m, T, n, seed=3)
    assert abs(binomial_z(int((Z[:, 0] == 0).sum()), n, 1 - np.exp(-T))) < 4


def test_mean_population_is_one_at_criticality(sym2_model):
    Z = final_populations(sym2_model, 5.0, 40_000, seed=1)
    N = Z.sum(axis=1)
    assert abs(N.mean() - 1) < 4 * N.std() / np.sqrt(N.size)


def test_survival_rate_scaling(mix2_model):
    spec = spectral(mix2_model)
    T, n = 60.0, 40_000
    for r in range(2):
        Z = final_populations(mix2_model, T, n, root_type=r, seed=2)
        surv = (Z.sum(axis=1) > 0).mean()
        # finite-T survival sits a few percent below the 2 xi / (zeta T) asymptote
        assert T * surv == pytest.approx(2 * spec.xi[r] / spec.zeta, rel=0.1)


@given(st.integers(0, 10_000), st.floats(0.5, 8.0))
def test_tree_invariants(replicate, T):
    m = sym2()
    tree = simulate_tree(m, T, seed=11, replicate=replicate)
    assert tree.parent[0] == -1
    for v in range(1, tree.size):
        p = tree.parent[v]
        assert tree.first_child[p] <= v < tree.first_child[p] + tree.n_children[p]
        assert tree.birth[v] == tree.death[p]
        assert tree.birth[v] < tree.death[v]
    internal = np.isfinite(tree.death)
    assert np.all(tree.death[internal] <= T)
    alive = tree.alive_indices()
    assert np.all(~internal[alive])
    assert np.all(tree.n_children[~internal] == 0)
    for v in range(tree.size):
        assert tree.index_of(tree.label(v)) == v


@given(st.integers(0, 10_000), st.floats(0.0, 1.0))
def test_alive_set_consistent_with_population(replicate, frac):
    tree = simulate_tree(sym2(), 6.0, seed=4, replicate=replicate)
    t = 6.0 * frac
    labels = tree.alive_at(t)
    assert labels == sorted(labels)
    assert len(labels) == tree.population_at(t).sum()
    types = [tree.ntype[tree.index_of(lab)] for lab in labels]
    np.testing.assert_array_equal(np.bincount(types, minlength=2), tree.population_at(t))


def test_time_outside_horizon_rejected(sym2_model):
    tree = simulate_tree(sym2_model, 2.0)
    with pytest.raises(ValueError):
        tree.alive_at(2.5)


def test_reproducible_and_consistent_with_scan(mix2_model):
    a = simulate_tree(mix2_model, 10.0, seed=9, replicate=17)
    b = simulate_tree(mix2_model, 10.0, seed=9, replicate=17)
    np.testing.assert_array_equal(a.birth, b.birth)
    np.testing.assert_array_equal(a.ntype, b.ntype)
    Z = final_populations(mix2_model, 10.0, 1, seed=9, start=17)
    np.testing.assert_array_equal(Z[0], a.population_at())


def test_csv_rows(sym2_model):
    tree = next(t for t in (simulate_tree(sym2_model, 3.0, replicate=r) for r in range(100))
                if t.size > 3)
    rows = tree.to_csv_rows()
    assert len(rows) == tree.size
    assert rows[0][0] == "root" and rows[0][1] == 1 and rows[0][2] == 0.0
    for label, typ, birth, death, off in rows:
        assert typ in (1, 2)
        if death == "":
            assert off == ""
        else:
            assert off in ("0;0", "1;1")


def test_population_cap(sym2_model):
    with pytest.raises(PopulationCapError):
        for r in range(1000):
            simulate_tree(sym2_model, 50.0, replicate=r, cap=5)


def test_invalid_arguments(sym2_model):
    with pytest.raises(ValueError):
        simulate_tree(sym2_model, -1.0)
    with pytest.raises(ValueError):
        simulate_tree(sym2_model, 1.0, root_type=2)
