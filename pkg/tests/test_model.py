import json

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from spinecoal.model import (ModelError, OffspringModel, geo1, is_irreducible, load_model,
                             mean_matrix, spectral, sym2, w_weight, zeta)

from conftest import MODELS


def _doc(d, alpha, tables):
    return {"d": d, "alpha": alpha,
            "offspring": [{"outcomes": [{"ell": l, "p": p} for l, p in t]} for t in tables]}


def test_sym2_document_loads():
    m = load_model(json.dumps(_doc(2, [1, 1], [[([0, 0], .5), ([1, 1], .5)]] * 2)))
    assert m.d == 2
    np.testing.assert_array_equal(mean_matrix(m), [[.5, .5], [.5, .5]])


def test_reference_files_match_builders():
    for name, build in (("SYM2", sym2), ("GEO1", geo1)):
        doc = json.loads((MODELS / f"{name}.json").read_text())
        assert doc == build().to_document()


@pytest.mark.parametrize("doc, message", [
    (_doc(1, [1], [[([0], .5), ([2], .4)]]), "do not sum to 1"),
    (_doc(1, [1], [[([0], -.1), ([2], 1.1)]]), "negative probability"),
    (_doc(1, [1], [[]]), "empty"),
    (_doc(1, [0], [[([0], .5), ([2], .5)]]), "alpha"),
    (_doc(1, [1], [[([1], 1.0)]]), "simple"),
    (_doc(2, [1, 1], [[([0], 1.0)], [([0, 0], 1.0)]]), "length"),
])
def test_invalid_documents(doc, message):
    with pytest.raises(ModelError, match=message):
        load_model(json.dumps(doc))


def test_parse_failure():
    with pytest.raises(ModelError):
        load_model("{not json")


def test_unknown_keys_rejected():
    doc = _doc(1, [1], [[([0], .5), ([2], .5)]])
    doc["extra"] = 1
    with pytest.raises(ModelError):
        load_model(json.dumps(doc))


def test_mean_matrices():
    np.testing.assert_array_equal(mean_matrix(geo1()), [[1.0]])
    dead = load_model(json.dumps(_doc(2, [1, 1], [[([0, 0], .5), ([2, 0], .5)],
                                                  [([0, 0], .5), ([0, 2], .5)]])))
    assert not is_irreducible(mean_matrix(dead))


def test_irreducibility_examples():
    assert is_irreducible(np.array([[.5, .5], [.5, .5]]))
    assert not is_irreducible(np.array([[1, 0], [1, 1]]))
    assert is_irreducible(np.array([[0, 1], [1, 0]]))


def test_spectral_sym2_and_geo1():
    s = spectral(sym2())
    assert abs(s.rho) < 1e-10
    np.testing.assert_allclose(s.xi, [.5, .5], atol=1e-12)
    np.testing.assert_allclose(s.eta, [1, 1], atol=1e-12)
    assert s.zeta == pytest.approx(0.5, abs=1e-14)
    np.testing.assert_allclose(s.zeta_i, [.25, .25], atol=1e-14)
    g = spectral(geo1())
    assert abs(g.rho) < 1e-10 and g.zeta == pytest.approx(1.0, abs=1e-14)
    np.testing.assert_allclose([g.xi[0], g.eta[0]], [1, 1], atol=1e-12)


def test_alpha_scaling_keeps_criticality():
    s = spectral(sym2(alpha=(2.0, 2.0)))
    assert abs(s.rho) < 1e-10


def test_w_weight_examples():
    xi = np.array([.5, .5])
    assert w_weight([0, 0], xi) == 0
    assert w_weight([1, 1], xi) == pytest.approx(0.5)
    assert w_weight([2], [1.0]) == pytest.approx(2.0)


def test_noncritical_model_flagged():
    m = load_model(json.dumps(_doc(1, [1], [[([0], .4), ([2], .6)]])))
    with pytest.warns(UserWarning):
        s = spectral(m)
    assert not s.critical
    with pytest.raises(ModelError):
        s.require_critical()


@st.composite
def random_models(draw):
    d = draw(st.integers(1, 3))
    alpha = [draw(st.floats(0.2, 3.0)) for _ in range(d)]
    tables = []
    for i in range(d):
        n = draw(st.integers(2, 4))
        ells = draw(st.lists(st.lists(st.integers(0, 2), min_size=d, max_size=d), min_size=n,
                             max_size=n, unique_by=tuple))
        w = np.array([draw(st.floats(0.05, 1.0)) for _ in range(n)])
        tables.append((np.array(ells), w / w.sum()))
    tables[0] = (np.vstack([tables[0][0], np.full(d, 1), np.zeros(d, int), np.full(d, 2)]),
                 np.r_[tables[0][1] * .7, .1, .1, .1])
    outs = []
    for ells, p in tables:
        uniq = {}
        for l, q in zip(map(tuple, ells), p):
            uniq[l] = uniq.get(l, 0.0) + q
        outs.append((np.array(list(uniq)), np.array(list(uniq.values()))))
    probs = tuple(p / p.sum() for _, p in outs)
    m = OffspringModel(d, np.array(alpha), tuple(o for o, _ in outs), probs)
    assume(is_irreducible(mean_matrix(m)))
    return m


@given(random_models())
def test_eigen_relations_and_zeta_consistency(m):
    import warnings

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        s = spectral(m)
    assert np.max(np.abs(s.C @ s.xi - s.rho * s.xi)) < 1e-10
    assert np.max(np.abs(s.eta @ s.C - s.rho * s.eta)) < 1e-10
    assert abs(s.xi.sum() - 1) < 1e-12 and abs(s.eta @ s.xi - 1) < 1e-12
    z, zi = zeta(m, s.xi, s.eta)
    assert abs(z - zi.sum()) < 1e-12 * max(1, z)


@given(random_models(), st.randoms())
def test_spectral_relabel_invariance(m, rnd):
    import warnings

    perm = list(range(m.d))
    rnd.shuffle(perm)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        a, b = spectral(m), spectral(m.relabel(perm))
    np.testing.assert_allclose(b.xi, a.xi[perm], atol=1e-9)
    np.testing.assert_allclose(b.eta, a.eta[perm], atol=1e-9)
    assert b.zeta == pytest.approx(a.zeta, rel=1e-9, abs=1e-12)
