"""Finite-difference cases: one builder per differentiable primitive.

Each builder takes an rng and returns ``(loss_fn, params)`` on float64
tensors.  Outputs are reduced to a scalar through a fixed random weighting
so every output element contributes a distinct gradient.
"""

from __future__ import annotations

import numpy as np

from mimex import autodiff as ad
from mimex.transformer import Block, MaskedSequenceAutoencoder, TransformerConfig, attention_block

F64 = np.float64


def leaf(rng, *shape, low=None):
    data = rng.standard_normal(shape)
    if low is not None:
        data = np.where(np.abs(data) < low, np.sign(data + 1e-12) * low, data)
    return ad.parameter(data.astype(F64))


def _unary(op, low=None, positive=False):
    def build(rng):
        x = leaf(rng, 3, 4, low=low)
        if positive:
            x.data = np.abs(x.data) + 0.5
        w = rng.standard_normal((3, 4))
        return (lambda: ad.tsum(ad.mul(op(x), w))), [x]
    return build


def _matmul_2d(rng):
    a, b = leaf(rng, 3, 4), leaf(rng, 4, 2)
    w = rng.standard_normal((3, 2))
    return (lambda: ad.tsum(ad.mul(ad.matmul(a, b), w))), [a, b]


def _matmul_batched(rng):
    a, b = leaf(rng, 2, 3, 4), leaf(rng, 2, 4, 2)
    w = rng.standard_normal((2, 3, 2))
    return (lambda: ad.tsum(ad.mul(ad.matmul(a, b), w))), [a, b]


def _matmul_weight(rng):
    a, b = leaf(rng, 2, 3, 4), leaf(rng, 4, 5)
    w = rng.standard_normal((2, 3, 5))
    return (lambda: ad.tsum(ad.mul(ad.matmul(a, b), w))), [a, b]


def _add(rng):
    a, b, bias = leaf(rng, 3, 4), leaf(rng, 3, 4), leaf(rng, 4)
    w = rng.standard_normal((3, 4))
    return (lambda: ad.tsum(ad.mul(ad.add(ad.add(a, b), bias), w))), [a, b, bias]


def _sub_mul(rng):
    a, b = leaf(rng, 3, 4), leaf(rng, 3, 4)
    w = rng.standard_normal((3, 4))
    return (lambda: ad.tsum(ad.mul(ad.mul(ad.sub(a, b), a), w))), [a, b]


def _scale(rng):
    a = leaf(rng, 5)
    c = float(rng.standard_normal())
    w = rng.standard_normal(5)
    return (lambda: ad.tsum(ad.mul(ad.scale(a, c), w))), [a]


def _minimum(rng):
    a, b = leaf(rng, 3, 4), leaf(rng, 3, 4)
    gap = a.data - b.data
    b.data = np.where(np.abs(gap) < 0.1, b.data - 0.2, b.data)
    w = rng.standard_normal((3, 4))
    return (lambda: ad.tsum(ad.mul(ad.minimum(a, b), w))), [a, b]


def _clip(rng):
    x = leaf(rng, 3, 4)
    x.data = np.where(np.abs(np.abs(x.data) - 0.8) < 0.05, x.data * 1.2, x.data)
    w = rng.standard_normal((3, 4))
    return (lambda: ad.tsum(ad.mul(ad.clip(x, -0.8, 0.8), w))), [x]


def _reductions(rng):
    x = leaf(rng, 2, 3, 4)
    w = rng.standard_normal((2, 4))
    return (lambda: ad.add(ad.tsum(ad.mul(ad.tsum(x, axis=1), w)), ad.square(ad.mean(x)))), [x]


def _shapes(rng):
    x, y = leaf(rng, 2, 3, 4), leaf(rng, 2, 3, 2)
    w = rng.standard_normal((3, 2, 6))
    def fn():
        cat = ad.concat([x, y], axis=-1)
        return ad.tsum(ad.mul(ad.transpose(ad.reshape(cat, (2, 3, 6)), (1, 0, 2)), w))
    return fn, [x, y]


def _gather_scatter(rng):
    x = leaf(rng, 2, 5, 3)
    idx = np.stack([np.sort(rng.choice(5, 3, replace=False)) for _ in range(2)])
    w = rng.standard_normal((2, 5, 3))
    return (lambda: ad.tsum(ad.mul(ad.scatter_rows(ad.gather_rows(x, idx), idx, 5), w))), [x]


def _pick(rng):
    x = leaf(rng, 4, 5)
    idx = rng.integers(0, 5, size=4)
    w = rng.standard_normal(4)
    return (lambda: ad.tsum(ad.mul(ad.pick(x, idx), w))), [x]


def _softmax(rng):
    x = leaf(rng, 3, 5)
    w = rng.standard_normal((3, 5))
    return (lambda: ad.tsum(ad.mul(ad.softmax(x, axis=-1), w))), [x]


def _log_softmax(rng):
    x = leaf(rng, 3, 5)
    w = rng.standard_normal((3, 5))
    return (lambda: ad.tsum(ad.mul(ad.log_softmax(x), w))), [x]


def _layer_norm(rng):
    x, g, b = leaf(rng, 2, 3, 6), leaf(rng, 6), leaf(rng, 6)
    w = rng.standard_normal((2, 3, 6))
    return (lambda: ad.tsum(ad.mul(ad.layer_norm(x, g, b, 1e-5), w))), [x, g, b]


def _masked_mse_rows(rng):
    pred = leaf(rng, 4, 3)
    target = leaf(rng, 4, 3)
    mask = rng.random(4) < 0.5
    mask[rng.integers(4)] = True
    return (lambda: ad.masked_mse(pred, target, mask)), [pred, target]


def _masked_mse_cells(rng):
    pred = leaf(rng, 2, 4, 3)
    target = rng.standard_normal((2, 4, 3))
    mask = rng.random((2, 4, 3)) < 0.5
    mask[0, 0, 0] = True
    return (lambda: ad.masked_mse(pred, target, mask)), [pred]


def _attention_block(rng):
    blk = Block(rng, 4, 2, 2.0, "blk", dtype=F64)
    for p in blk.parameters():
        p.data = p.data + 0.1 * rng.standard_normal(p.shape)
    x = leaf(rng, 2, 3, 4)
    w = rng.standard_normal((2, 3, 4))
    return (lambda: ad.tsum(ad.mul(attention_block(x, blk), w))), [x] + blk.parameters()


PIPELINE_CONFIG = dict(input_dim=3, max_len=4, encoder_dim=4, encoder_blocks=1, encoder_heads=2,
                       decoder_dim=4, decoder_blocks=1, decoder_heads=2, mlp_ratio=1.0)


def _pipeline(rng):
    """encode kept rows, decode with mask tokens, masked MSE on masked rows."""
    model = MaskedSequenceAutoencoder(TransformerConfig(**PIPELINE_CONFIG), rng, dtype=F64)
    for p in model.parameters():
        p.data = p.data + 0.1 * rng.standard_normal(p.shape)
    windows = rng.standard_normal((2, 4, 3))
    mask = np.zeros((2, 4), dtype=bool)
    for b in range(2):
        mask[b, rng.choice(4, 2, replace=False)] = True
    return (lambda: model.masked_loss(windows, mask)), model.parameters()


GRAD_CASES = {
    "matmul": _matmul_2d,
    "matmul_batched": _matmul_batched,
    "matmul_weight": _matmul_weight,
    "add": _add,
    "sub_mul": _sub_mul,
    "scale": _scale,
    "tanh": _unary(ad.tanh),
    "relu": _unary(ad.relu, low=0.05),
    "exp": _unary(ad.exp),
    "log": _unary(ad.log, positive=True),
    "square": _unary(ad.square),
    "gelu": _unary(ad.gelu),
    "minimum": _minimum,
    "clip": _clip,
    "reductions": _reductions,
    "reshape_transpose_concat": _shapes,
    "gather_scatter": _gather_scatter,
    "pick": _pick,
    "softmax": _softmax,
    "log_softmax": _log_softmax,
    "layer_norm": _layer_norm,
    "masked_mse_rows": _masked_mse_rows,
    "masked_mse_cells": _masked_mse_cells,
    "attention_block": _attention_block,
    "pipeline": _pipeline,
}


def worst_error(case: str, seed: int) -> float:
    fn, params = GRAD_CASES[case](np.random.default_rng(seed))
    return ad.gradcheck(fn, params, h=1e-4)
