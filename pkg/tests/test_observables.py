import itertools
import json
from math import comb

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from koopman_pi.observables import (
    Dictionary,
    MaxPerVariable,
    MultiIndex,
    TotalDegree,
    enumerate_dictionary,
    eval_dictionary,
    eval_monomial_split,
)


def brute_force(n, m, rule):
    top = rule.p_max if isinstance(rule, MaxPerVariable) else rule.p_sum
    out = set()
    for p in itertools.product(range(top + 1), repeat=n):
        if not rule.admits(p):
            continue
        for q in [(0,) * m] + [tuple(int(l == k) for l in range(m)) for k in range(m)]:
            if sum(p) + sum(q) > 0:
                out.add((p, q))
    return out


def test_scalar_max_per_variable_dictionary():
    d = enumerate_dictionary(1, 1, MaxPerVariable(1))
    assert d.N == 3
    assert [(i.p, i.q) for i in d.indices] == [((1,), (0,)), ((0,), (1,)), ((1,), (1,))]
    assert d.labels() == ["x1", "u1", "x1*u1"]


@pytest.mark.parametrize(
    "n, m, rule, N",
    [
        (2, 1, MaxPerVariable(5), 71),
        (4, 1, MaxPerVariable(3), 511),
        (6, 2, TotalDegree(3), 251),
        (9, 4, TotalDegree(3), 1099),
    ],
)
def test_configured_dictionary_sizes(n, m, rule, N):
    d = enumerate_dictionary(n, m, rule)
    assert d.N == N == rule.count(n, m)


def test_total_degree_count_formula_by_hand():
    assert TotalDegree(3).count(6, 2) == comb(9, 3) * 3 - 1 == 251


@settings(max_examples=60, deadline=None)
@given(
    n=st.integers(1, 4),
    m=st.integers(0, 2),
    deg=st.integers(1, 4),
    total=st.booleans(),
)
def test_count_formula_matches_brute_force(n, m, deg, total):
    rule = TotalDegree(deg) if total else MaxPerVariable(deg)
    d = enumerate_dictionary(n, m, rule)
    got = {(i.p, i.q) for i in d.indices}
    assert got == brute_force(n, m, rule)
    assert d.N == len(got) == rule.count(n, m)


@pytest.mark.parametrize("rule", [MaxPerVariable(0), TotalDegree(0)])
def test_zero_degree_rejected(rule):
    with pytest.raises(ValueError):
        enumerate_dictionary(2, 1, rule)


def test_multi_index_invariants():
    with pytest.raises(ValueError):
        MultiIndex((0, 0), (0,))
    with pytest.raises(ValueError):
        MultiIndex((1,), (1, 1))
    with pytest.raises(ValueError):
        MultiIndex((-1,), (0,))


def test_enumeration_is_deterministic_and_graded():
    a = enumerate_dictionary(3, 2, TotalDegree(3))
    b = enumerate_dictionary(3, 2, TotalDegree(3))
    assert a.indices == b.indices
    degrees = [i.degree for i in a.indices]
    assert degrees == sorted(degrees)
    assert len(set(a.indices)) == a.N


def test_coordinate_slots_are_total():
    d = enumerate_dictionary(3, 1, MaxPerVariable(2))
    for j, slot in enumerate(d.coordinate_slots):
        idx = d.indices[slot]
        assert idx.p == tuple(int(k == j) for k in range(3)) and sum(idx.q) == 0


def test_eval_examples():
    d = enumerate_dictionary(1, 1, MaxPerVariable(1))
    np.testing.assert_array_equal(eval_dictionary(d, [2.0], [3.0]), [2.0, 3.0, 6.0])

    d2 = enumerate_dictionary(2, 1, MaxPerVariable(2))
    phi = eval_dictionary(d2, [0.5, -1.0], [2.0])
    k = d2.indices.index(MultiIndex((2, 1), (1,)))
    assert phi[k] == -0.5


@settings(max_examples=25, deadline=None)
@given(n=st.integers(1, 3), m=st.integers(0, 2), deg=st.integers(1, 3))
def test_origin_maps_to_zero(n, m, deg):
    d = enumerate_dictionary(n, m, TotalDegree(deg))
    np.testing.assert_array_equal(eval_dictionary(d, np.zeros(n), np.zeros(m)), np.zeros(d.N))


@settings(max_examples=40, deadline=None)
@given(
    x=st.lists(st.floats(-2, 2), min_size=2, max_size=2),
    y=st.lists(st.floats(-2, 2), min_size=2, max_size=2),
    u=st.floats(-2, 2),
    v=st.floats(-2, 2),
)
def test_monomials_are_multiplicative(x, y, u, v):
    d = enumerate_dictionary(2, 1, MaxPerVariable(3))
    a = eval_dictionary(d, x, [u])
    b = eval_dictionary(d, y, [v])
    c = eval_dictionary(d, np.multiply(x, y), [u * v])
    np.testing.assert_allclose(a * b, c, rtol=1e-12, atol=1e-12)


def test_eval_matches_direct_products_in_batch():
    d = enumerate_dictionary(3, 2, TotalDegree(3))
    rng = np.random.default_rng(0)
    x = rng.uniform(-1, 1, (7, 3))
    u = rng.uniform(-1, 1, (7, 2))
    phi = eval_dictionary(d, x, u)
    assert phi.shape == (7, d.N)
    for k, idx in enumerate(d.indices):
        ref = np.prod(x ** np.array(idx.p), axis=1) * np.prod(u ** np.array(idx.q), axis=1)
        np.testing.assert_allclose(phi[:, k], ref, rtol=1e-13, atol=1e-15)


def test_eval_dimension_mismatch():
    d = enumerate_dictionary(2, 1, MaxPerVariable(1))
    with pytest.raises(ValueError):
        eval_dictionary(d, [1.0, 2.0, 3.0], [1.0])
    with pytest.raises(ValueError):
        eval_dictionary(d, [1.0, 2.0], [1.0, 2.0])


def test_monomial_split_examples():
    d = enumerate_dictionary(1, 1, MaxPerVariable(1))
    drift, inputs = eval_monomial_split(d)
    assert [d.labels()[i] for i in drift] == ["x1"]
    assert [d.labels()[i] for i in inputs[0]] == ["u1", "x1*u1"]

    d0 = enumerate_dictionary(2, 0, MaxPerVariable(2))
    drift, inputs = eval_monomial_split(d0)
    assert inputs == [] and len(drift) == d0.N

    # the state-degree bound does not limit the x*u cross terms
    d2 = enumerate_dictionary(2, 2, TotalDegree(1))
    assert d2.N == 8
    drift, inputs = eval_monomial_split(d2)
    assert [d2.labels()[i] for i in drift] == ["x1", "x2"]
    assert [[d2.labels()[i] for i in b] for b in inputs] == [
        ["u1", "x1*u1", "x2*u1"],
        ["u2", "x1*u2", "x2*u2"],
    ]


@settings(max_examples=30, deadline=None)
@given(n=st.integers(1, 3), m=st.integers(0, 3), deg=st.integers(1, 3))
def test_split_is_a_partition(n, m, deg):
    d = enumerate_dictionary(n, m, MaxPerVariable(deg))
    drift, inputs = eval_monomial_split(d)
    allidx = np.concatenate([np.asarray(drift)] + [np.asarray(b) for b in inputs])
    assert sorted(allidx.tolist()) == list(range(d.N))


def test_json_roundtrip():
    d = enumerate_dictionary(2, 1, MaxPerVariable(2))
    text = d.to_json()
    records = json.loads(text)
    assert records[0] == {"p": [1, 0], "q": [0]}
    back = Dictionary.from_json(text)
    assert back.indices == d.indices and back.n == 2 and back.m == 1
