import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from mimex import autodiff as ad
from mimex.autodiff import ContractError, DimensionError, Tensor

from gradcases import GRAD_CASES, worst_error


def t64(x, grad=False):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=grad)


@pytest.mark.parametrize("case", sorted(GRAD_CASES))
def test_gradients_match_finite_differences(case):
    seeds = range(3) if case in ("pipeline", "attention_block") else range(10)
    assert max(worst_error(case, s) for s in seeds) < 1e-4


def test_matmul_identity_and_hand_product():
    m = t64([[1, 2], [3, 4]])
    np.testing.assert_array_equal(ad.matmul(t64(np.eye(2)), m).data, m.data)
    np.testing.assert_array_equal(ad.matmul(t64([[1, 2]]), t64([[3], [4]])).data, [[11]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        ad.matmul(t64(np.ones((2, 3))), t64(np.ones((2, 3))))


def test_matmul_backward_formula():
    rng = np.random.default_rng(0)
    a, b = t64(rng.standard_normal((3, 4)), True), t64(rng.standard_normal((4, 2)), True)
    g = rng.standard_normal((3, 2))
    ad.tsum(ad.mul(ad.matmul(a, b), g)).backward()
    np.testing.assert_allclose(a.grad, g @ b.data.T)
    np.testing.assert_allclose(b.grad, a.data.T @ g)


def test_softmax_examples():
    np.testing.assert_allclose(ad.softmax(t64([0.0, 0.0])).data, [0.5, 0.5])
    out = ad.softmax(t64([1000.0, 0.0])).data
    assert np.isfinite(out).all()
    np.testing.assert_allclose(out, [1.0, 0.0], atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)),
              elements=st.floats(-1e6, 1e6, allow_nan=False)))
def test_softmax_rows_sum_to_one(x):
    out = ad.softmax(t64(x), axis=-1).data
    assert (out >= 0).all()
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-9)


def test_layer_norm_examples():
    one, zero = t64(np.ones(2)), t64(np.zeros(2))
    np.testing.assert_allclose(ad.layer_norm(t64([1.0, 3.0]), one, zero, eps=1e-12).data, [-1.0, 1.0])
    bias = t64([0.5, -0.5])
    np.testing.assert_allclose(ad.layer_norm(t64([4.0, 4.0]), one, bias).data, [0.5, -0.5])


def test_gelu_examples():
    assert ad.gelu(t64([0.0])).data[0] == 0.0
    assert abs(ad.gelu(t64([10.0])).data[0] - 10.0) < 1e-4


def test_masked_mse_examples():
    pred = t64([[1, 1], [0, 0]])
    target = np.array([[0, 0], [9, 9]], dtype=np.float64)
    mask = np.array([True, False])
    assert ad.masked_mse(pred, target, mask).data == 1.0
    assert ad.masked_mse(pred, pred.data, mask).data == 0.0
    with pytest.raises(ContractError):
        ad.masked_mse(pred, target, np.array([False, False]))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_masked_mse_ignores_unmasked_rows(seed):
    rng = np.random.default_rng(seed)
    pred = t64(rng.standard_normal((5, 3)))
    target = rng.standard_normal((5, 3))
    mask = rng.random(5) < 0.5
    mask[0] = True
    before = ad.masked_mse(pred, target, mask).data
    target[~mask] = rng.standard_normal(target[~mask].shape) * 1e3
    assert ad.masked_mse(pred, target, mask).data.tobytes() == before.tobytes()


def test_backward_sum_and_accumulation():
    x = t64([1.0, 2.0, 3.0], grad=True)
    ad.tsum(x).backward()
    np.testing.assert_array_equal(x.grad, [1, 1, 1])
    rng = np.random.default_rng(1)
    a, b = t64(rng.standard_normal((3, 3)), True), t64(rng.standard_normal((3, 3)), True)
    loss = ad.tsum(ad.matmul(ad.matmul(a, b), a))
    loss.backward()
    first = a.grad.copy()
    loss.backward()
    np.testing.assert_array_equal(a.grad, 2 * first)


def test_backward_rejects_non_scalar():
    with pytest.raises(ContractError):
        t64([1.0, 2.0], grad=True).backward()


def test_no_grad_records_nothing():
    x = t64([1.0], grad=True)
    with ad.no_grad():
        y = ad.scale(x, 2.0)
    assert y.is_leaf and not y.requires_grad


def test_only_bias_broadcast_is_allowed():
    with pytest.raises(DimensionError):
        ad.add(t64(np.ones((2, 3))), t64(np.ones((2, 1))))


def test_forward_is_deterministic():
    def run():
        rng = np.random.default_rng(7)
        x = t64(rng.standard_normal((4, 5)))
        w = t64(rng.standard_normal((5, 5)))
        return ad.gelu(ad.softmax(ad.matmul(x, w))).data.tobytes()
    assert run() == run()


# ------------------------------------------------------------------ Adam


def test_adam_zero_grad_leaves_params():
    p = np.array([1.0, -2.0])
    st_ = ad.AdamState.like(p, learning_rate=0.1)
    np.testing.assert_array_equal(ad.adam_step(p, np.zeros(2), st_), p)
    assert st_.step_count == 1


def test_adam_first_step_closed_form():
    p, g = np.array([0.5, -0.3, 2.0]), np.array([0.2, -4.0, 1e-3])
    st_ = ad.AdamState.like(p, learning_rate=1e-2)
    new = ad.adam_step(p, g, st_)
    m_hat = (1 - 0.9) * g / (1 - 0.9)
    v_hat = (1 - 0.999) * g * g / (1 - 0.999)
    np.testing.assert_allclose(new, p - 1e-2 * m_hat / (np.sqrt(v_hat) + 1e-8))


def test_adam_reduces_convex_quadratic():
    x = ad.parameter(np.array([3.0]))
    opt = ad.Adam([x], lr=0.1)
    losses = []
    for _ in range(3):
        opt.zero_grad()
        loss = ad.tsum(ad.square(x))
        losses.append(float(loss.data))
        loss.backward()
        opt.step()
    assert losses[0] > losses[1] > losses[2]
    assert opt.states[0].step_count == 3


def test_adam_shape_mismatch():
    with pytest.raises(DimensionError):
        ad.adam_step(np.zeros(2), np.zeros(3), ad.AdamState.like(np.zeros(2)))


def test_clip_grad_norm():
    p = ad.parameter(np.array([3.0, 4.0]))
    p.grad = p.data.copy()
    assert ad.clip_grad_norm([p], 1.0) == pytest.approx(5.0)
    np.testing.assert_allclose(np.linalg.norm(p.grad), 1.0)


def test_glorot_bounds():
    w = ad.glorot_uniform(np.random.default_rng(0), 30, 20)
    assert np.abs(w).max() <= np.sqrt(6 / 50)
