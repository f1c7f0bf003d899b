"""Pseudo log-likelihood of discrete sequences and its masked estimator.

The exact quantity averages ``log p(x_t | X without t)`` over every position;
the stochastic estimator samples positions uniformly, which is what a
single random mask per step computes.  A small categorical model with an
explicit joint table is provided so both can be compared by enumeration.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .autodiff import ContractError


class CategoricalSequenceModel:
    """Joint distribution over length-``n`` sequences of ``V`` symbols.

    ``joint`` has shape ``(V,) * n`` and sums to one; conditionals are
    obtained by renormalising a slice of it.
    """

    def __init__(self, joint: np.ndarray):
        joint = np.asarray(joint, dtype=np.float64)
        if (joint < 0).any() or not np.isclose(joint.sum(), 1.0):
            raise ContractError("joint table must be a probability distribution")
        self.joint = joint
        self.length = joint.ndim
        self.vocab = joint.shape[0]

    @classmethod
    def random(cls, length: int, vocab: int, rng: np.random.Generator, concentration: float = 1.0):
        table = rng.dirichlet(np.full(vocab**length, concentration)).reshape((vocab,) * length)
        return cls(table)

    @classmethod
    def potts_chain(cls, length: int, vocab: int, coupling: float):
        """Nearest-neighbour chain: weight exp(coupling * number of equal adjacent pairs)."""
        grids = np.indices((vocab,) * length)
        agree = sum((grids[t] == grids[t + 1]).astype(np.float64) for t in range(length - 1))
        table = np.exp(coupling * agree)
        return cls(table / table.sum())

    @classmethod
    def uniform(cls, length: int, vocab: int):
        return cls(np.full((vocab,) * length, 1.0 / vocab**length))

    def conditional(self, sequence: Sequence[int], t: int) -> np.ndarray:
        """Distribution of position ``t`` given every other position."""
        index = list(sequence)
        index[t] = slice(None)
        column = self.joint[tuple(index)]
        return column / column.sum()

    def log_conditional(self, sequence: Sequence[int], t: int) -> float:
        return float(np.log(self.conditional(sequence, t)[sequence[t]]))


def exact_pll(model: CategoricalSequenceModel, sequence: Sequence[int]) -> float:
    """(1/|X|) sum_t log p(x_t | X without t), by full enumeration."""
    n = len(sequence)
    return sum(model.log_conditional(sequence, t) for t in range(n)) / n


def pseudo_log_likelihood(model: CategoricalSequenceModel, dataset: Sequence[Sequence[int]]) -> float:
    """Dataset PLL: mean over sequences of the per-sequence sum of log conditionals."""
    return sum(exact_pll(model, x) * len(x) for x in dataset) / len(dataset)


def pll_estimate(model: CategoricalSequenceModel, sequence: Sequence[int], K: int,
                 rng: np.random.Generator, stratified: bool = False) -> float:
    """Average of ``K`` log conditionals at sampled positions.

    Positions are drawn uniformly with replacement.  With ``stratified``
    they are consecutive random permutations of all positions, which makes
    the estimate exact whenever ``K`` is a multiple of the sequence length.
    """
    if K < 1:
        raise ContractError(f"K must be >= 1, got {K}")
    n = len(sequence)
    if stratified:
        sweeps = -(-K // n)
        positions = np.concatenate([rng.permutation(n) for _ in range(sweeps)])[:K]
    else:
        positions = rng.integers(0, n, size=K)
    logs = np.array([model.log_conditional(sequence, t) for t in range(n)])
    return float(logs[positions].mean())
