import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mimex.autodiff import ContractError
from mimex.pll import CategoricalSequenceModel, exact_pll, pll_estimate, pseudo_log_likelihood


def brute_force_pll(joint, seq):
    """Conditionals by summing the joint over every sequence that agrees off position t."""
    V, n = joint.shape[0], joint.ndim
    total = 0.0
    for t in range(n):
        denom = 0.0
        for other in itertools.product(range(V), repeat=n):
            if all(other[i] == seq[i] for i in range(n) if i != t):
                denom += joint[other]
        total += math.log(joint[tuple(seq)] / denom)
    return total / n


TOY = CategoricalSequenceModel.random(4, 3, np.random.default_rng(0))
CHAIN = CategoricalSequenceModel.potts_chain(4, 3, 0.5)


def chain_conditional(seq, t, V=3, J=0.5):
    """Closed form: only the neighbours of position t matter."""
    def weight(v):
        return math.exp(J * sum(v == seq[u] for u in (t - 1, t + 1) if 0 <= u < len(seq)))
    return weight(seq[t]) / sum(weight(v) for v in range(V))


@pytest.mark.parametrize("seq", [(0, 1, 2, 0), (2, 2, 2, 2), (1, 0, 0, 2)])
def test_exact_matches_enumeration(seq):
    assert exact_pll(TOY, seq) == pytest.approx(brute_force_pll(TOY.joint, seq), abs=1e-12)


def test_chain_toy_matches_closed_form():
    for seq in itertools.product(range(3), repeat=4):
        closed = np.mean([math.log(chain_conditional(seq, t)) for t in range(4)])
        assert exact_pll(CHAIN, seq) == pytest.approx(closed, abs=1e-12)
        assert exact_pll(CHAIN, seq) == pytest.approx(brute_force_pll(CHAIN.joint, seq), abs=1e-12)


@pytest.mark.parametrize("seq", [(0, 1, 2, 0), (1, 1, 0, 2)])
def test_estimator_converges(seq):
    est = pll_estimate(CHAIN, seq, 10_000, np.random.default_rng(1))
    assert abs(est - brute_force_pll(CHAIN.joint, seq)) < 0.01


def test_stratified_is_exact_on_full_sweeps():
    seq = (2, 0, 1, 1)
    est = pll_estimate(TOY, seq, 8, np.random.default_rng(2), stratified=True)
    assert est == pytest.approx(exact_pll(TOY, seq), abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 50), st.integers(0, 2))
def test_single_position(K, x):
    model = CategoricalSequenceModel(np.array([0.2, 0.3, 0.5]))
    assert pll_estimate(model, [x], K, np.random.default_rng(K)) == pytest.approx(math.log([0.2, 0.3, 0.5][x]))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(2, 4), st.integers(1, 20), st.integers(0, 1000))
def test_uniform_model(n, V, K, seed):
    model = CategoricalSequenceModel.uniform(n, V)
    seq = np.random.default_rng(seed).integers(V, size=n)
    assert pll_estimate(model, seq, K, np.random.default_rng(seed)) == pytest.approx(-math.log(V))


def test_dataset_pll_and_contracts():
    data = [(0, 1, 2, 0), (2, 2, 2, 2)]
    assert pseudo_log_likelihood(TOY, data) == pytest.approx(4 * np.mean([brute_force_pll(TOY.joint, x) for x in data]))
    with pytest.raises(ContractError):
        pll_estimate(TOY, (0, 1, 2, 0), 0, np.random.default_rng(0))
    with pytest.raises(ContractError):
        CategoricalSequenceModel(np.array([0.5, 0.6]))
