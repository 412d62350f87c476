import json
import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

import gradcheck
import oracles
from spikegan import tensor as T
from spikegan.tensor import GradientError, NonFiniteError, ShapeError, Tensor

GOLDEN = json.loads((Path(__file__).with_name("golden") / "oracle_values.json").read_text())


@pytest.fixture
def f64():
    with T.precision(np.float64):
        yield


def t(x, grad=False):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=grad, dtype=np.float64)


# ---------------------------------------------------------------- gradcheck

@pytest.mark.parametrize("name", sorted(gradcheck.CASES))
def test_gradcheck(name):
    errors = [gradcheck.run_case(name, i) for i in range(gradcheck.SHAPES_PER_OP)]
    assert max(errors) < gradcheck.RTOL, errors


def test_gradcheck_detects_a_wrong_backward():
    broken = T.custom_grad(np.sin, lambda x: np.cos(x) * 1.01, "bad_sin")
    assert gradcheck.check(broken, [np.linspace(-1, 1, 7)]) > gradcheck.RTOL


# ---------------------------------------------------------------- matmul

def test_matmul_identity():
    m = t([[1, 2], [3, 4]])
    np.testing.assert_array_equal(T.matmul(t(np.eye(2)), m).data, m.data)


def test_matmul_example():
    y = T.matmul(t([[1, 2], [3, 4]]), t([[5], [6]]))
    np.testing.assert_array_equal(y.data, [[17], [39]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(t(np.ones((2, 3))), t(np.ones((2, 3))))


def test_matmul_matches_golden(f64):
    case = GOLDEN["matmul"][0]
    rng = np.random.default_rng(case["seed"])
    a, b = (rng.standard_normal(s) for s in case["shapes"])
    np.testing.assert_allclose(T.matmul(t(a), t(b)).data, case["y"], rtol=0, atol=1e-12)


def test_matmul_backward_formula(f64):
    rng = np.random.default_rng(0)
    a, b, g = rng.standard_normal((3, 4)), rng.standard_normal((4, 2)), rng.standard_normal((3, 2))
    ta, tb = t(a, True), t(b, True)
    T.backward(T.sum(T.matmul(ta, tb) * t(g)))
    np.testing.assert_allclose(ta.grad, g @ b.T)
    np.testing.assert_allclose(tb.grad, a.T @ g)


# ---------------------------------------------------------------- conv2d

def test_conv2d_identity_kernel():
    x = t(np.random.default_rng(0).standard_normal((2, 1, 4, 5)))
    np.testing.assert_array_equal(T.conv2d(x, t(np.ones((1, 1, 1, 1)))).data, x.data)


def test_conv2d_example():
    y = T.conv2d(t([[[[1, 2], [3, 4]]]]), t([[[[1, 0], [0, 1]]]]))
    np.testing.assert_array_equal(y.data, [[[[5]]]])


def test_conv2d_uses_cross_correlation():
    # a flipped kernel would give 2 * 1 + 1 * 2 = 4 instead of 1 * 1 + 2 * 2 = 5
    y = T.conv2d(t([[[[1, 2]]]]), t([[[[1, 2]]]]))
    assert y.item() == 5


@pytest.mark.parametrize("case", GOLDEN["conv2d"], ids=lambda c: f"seed{c['seed']}")
def test_conv2d_matches_golden(case, f64):
    rng = np.random.default_rng(case["seed"])
    x, k = rng.standard_normal(case["x"]), rng.standard_normal(case["k"])
    y = T.conv2d(t(x), t(k), stride=case["stride"], padding=case["padding"])
    np.testing.assert_allclose(y.data, case["y"], rtol=0, atol=1e-12)


@pytest.mark.parametrize("seed", range(20))
def test_conv2d_matches_loop_oracle(seed):
    rng = np.random.default_rng([7, seed])
    xs, ks, s, p = gradcheck.conv_config(rng)
    x, k = rng.standard_normal(xs), rng.standard_normal(ks)
    with T.precision(np.float64):
        y = T.conv2d(t(x), t(k), stride=s, padding=p).data
    np.testing.assert_allclose(y, oracles.conv2d_loop(x, k, s, p), rtol=0, atol=1e-6)


def test_conv2d_bias_is_added_per_filter():
    x = t(np.zeros((1, 2, 3, 3)))
    y = T.conv2d(x, t(np.ones((3, 2, 3, 3))), t([1.0, -2.0, 0.5]), padding=1)
    np.testing.assert_array_equal(y.data[0, :, 1, 1], [1.0, -2.0, 0.5])


@pytest.mark.parametrize("kwargs, match", [
    (dict(x=(1, 1, 2, 2), k=(1, 1, 3, 3), p=0), "non-positive"),
    (dict(x=(1, 2, 4, 4), k=(1, 3, 3, 3), p=0), "incompatible"),
])
def test_conv2d_shape_errors(kwargs, match):
    with pytest.raises(ShapeError, match=match):
        T.conv2d(t(np.ones(kwargs["x"])), t(np.ones(kwargs["k"])), padding=kwargs["p"])


# ---------------------------------------------------------------- conv_transpose2d

def test_conv_transpose2d_scatter_example():
    y = T.conv_transpose2d(t([[[[1]]]]), t([[[[1, 2], [3, 4]]]]))
    np.testing.assert_array_equal(y.data, [[[[1, 2], [3, 4]]]])


def test_conv_transpose2d_stride2_single_pixel():
    k = [[[[1, 2], [3, 4]]]]
    y = T.conv_transpose2d(t([[[[1]]]]), t(k), stride=2)
    np.testing.assert_array_equal(y.data, k)


def test_conv_transpose2d_output_extent():
    y = T.conv_transpose2d(t(np.ones((1, 2, 7, 7))), t(np.ones((2, 3, 4, 4))), stride=2, padding=1)
    assert y.shape == (1, 3, 14, 14)


@pytest.mark.parametrize("case", GOLDEN["conv_transpose2d"], ids=lambda c: f"seed{c['seed']}")
def test_conv_transpose2d_matches_golden(case, f64):
    rng = np.random.default_rng(case["seed"])
    x, k = rng.standard_normal(case["x"]), rng.standard_normal(case["k"])
    y = T.conv_transpose2d(t(x), t(k), stride=case["stride"], padding=case["padding"])
    np.testing.assert_allclose(y.data, case["y"], rtol=0, atol=1e-12)


@pytest.mark.parametrize("seed", range(20))
def test_conv_transpose2d_matches_loop_oracle(seed):
    rng = np.random.default_rng([8, seed])
    xs, ks, s, p = gradcheck.convt_config(rng)
    x, k = rng.standard_normal(xs), rng.standard_normal(ks)
    with T.precision(np.float64):
        y = T.conv_transpose2d(t(x), t(k), stride=s, padding=p).data
    np.testing.assert_allclose(y, oracles.conv_transpose2d_loop(x, k, s, p), rtol=0, atol=1e-6)


@pytest.mark.parametrize("seed", range(20))
def test_conv_transpose2d_is_conv2d_input_gradient(seed):
    rng = np.random.default_rng([9, seed])
    xs, ks, s, p = gradcheck.adjoint_config(rng)
    x, k = rng.standard_normal(xs), rng.standard_normal(ks)
    with T.precision(np.float64):
        tx = t(x, True)
        y = T.conv2d(tx, t(k), stride=s, padding=p)
        cot = rng.standard_normal(y.shape)
        T.backward(T.sum(y * t(cot)))
        # conv_transpose2d's kernel layout (C_in, C_out) is conv2d's (F, C)
        adj = T.conv_transpose2d(t(cot), t(k), stride=s, padding=p).data
    assert adj.shape == tx.grad.shape
    np.testing.assert_allclose(adj, tx.grad, rtol=0, atol=1e-6)


def test_conv_transpose2d_shape_error():
    with pytest.raises(ShapeError, match="non-positive"):
        T.conv_transpose2d(t(np.ones((1, 1, 1, 1))), t(np.ones((1, 1, 1, 1))), padding=1)


# ---------------------------------------------------------------- avgpool2d

def test_avgpool_constant():
    y = T.avgpool2d(t(np.full((1, 2, 4, 4), 3.5)), 2)
    np.testing.assert_array_equal(y.data, np.full((1, 2, 2, 2), 3.5))


def test_avgpool_example():
    assert T.avgpool2d(t([[[[1, 2], [3, 4]]]]), 2).item() == 2.5


def test_avgpool_backward_spreads_uniformly():
    x = t(np.arange(4.0).reshape(1, 1, 2, 2), True)
    T.backward(T.sum(T.avgpool2d(x, 2)))
    np.testing.assert_array_equal(x.grad, np.full((1, 1, 2, 2), 0.25))


@pytest.mark.parametrize("case", GOLDEN["avgpool2d"], ids=lambda c: f"seed{c['seed']}")
def test_avgpool_matches_golden(case, f64):
    (x,) = [np.random.default_rng(case["seed"]).standard_normal(case["x"])]
    y = T.avgpool2d(t(x), case["window"], case["stride"])
    np.testing.assert_allclose(y.data, case["y"], rtol=0, atol=1e-12)


def test_avgpool_rejects_untiled_extent():
    with pytest.raises(ShapeError):
        T.avgpool2d(t(np.ones((1, 1, 5, 4))), 2)


# ---------------------------------------------------------------- softmax

def test_softmax_equal_logits():
    np.testing.assert_allclose(T.softmax(t([0.0, 0.0])).data, [0.5, 0.5])


def test_softmax_closed_form():
    np.testing.assert_allclose(T.softmax(t([math.log(1), math.log(3)])).data, [0.25, 0.75], atol=1e-15)


def test_softmax_large_logits_do_not_overflow():
    y = T.softmax(Tensor([1000.0, 1000.0]))
    assert np.all(np.isfinite(y.data))
    np.testing.assert_array_equal(y.data, [0.5, 0.5])


finite = st.floats(-50, 50, allow_nan=False)


@settings(max_examples=60, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=3, max_side=5), elements=finite),
       st.floats(-100, 100))
def test_softmax_sums_to_one_and_is_shift_invariant(x, c):
    with T.precision(np.float64):
        for axis in range(x.ndim):
            y = T.softmax(t(x), axis).data
            np.testing.assert_allclose(y.sum(axis=axis), 1.0, atol=1e-6)
            assert np.all(y >= 0)
            np.testing.assert_allclose(T.softmax(t(x + c), axis).data, y, atol=1e-6)


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=2, max_side=6), elements=finite))
def test_log_softmax_is_log_of_softmax(x):
    with T.precision(np.float64):
        np.testing.assert_allclose(np.exp(T.log_softmax(t(x)).data), T.softmax(t(x)).data, atol=1e-12)


# ---------------------------------------------------------------- elementwise suite

def test_add_zero_is_identity():
    x = t([[1.5, -2.0]])
    np.testing.assert_array_equal(T.add(x, 0).data, x.data)
    np.testing.assert_array_equal(T.add(x, t(np.zeros((1, 2)))).data, x.data)


def test_tanh_at_zero():
    x = t([0.0], True)
    y = T.tanh(x)
    T.backward(T.sum(y))
    assert y.data[0] == 0 and x.grad[0] == 1


def test_mean_example():
    assert T.mean(t([[1, 2], [3, 4]])).item() == 2.5


def test_sum_over_axis():
    np.testing.assert_array_equal(T.sum(t([[1, 2], [3, 4]]), axis=0).data, [4, 6])


def test_concat_along_axis():
    y = T.concat([t([[1, 2]]), t([[3, 4], [5, 6]])], axis=0)
    np.testing.assert_array_equal(y.data, [[1, 2], [3, 4], [5, 6]])


def test_sub_mul_scalar_mul():
    a, b = t([3.0, 4.0]), t([1.0, 2.0])
    np.testing.assert_array_equal(T.sub(a, b).data, [2, 2])
    np.testing.assert_array_equal(T.mul(a, b).data, [3, 8])
    np.testing.assert_array_equal(T.scalar_mul(a, 0.5).data, [1.5, 2])


def test_clamp_subgradient_boundary_counts_as_inside():
    x = t([-2.0, -1.0, 0.0, 1.0, 2.0], True)
    y = T.clamp(x, -1.0, 1.0)
    T.backward(T.sum(y))
    np.testing.assert_array_equal(y.data, [-1, -1, 0, 1, 1])
    np.testing.assert_array_equal(x.grad, [0, 1, 1, 1, 0])


def test_leaky_relu_slope():
    np.testing.assert_allclose(T.leaky_relu(t([-1.0, 2.0]), 0.2).data, [-0.2, 2.0])


def test_log_sigmoid_is_stable_for_large_inputs():
    y = T.log_sigmoid(t([-800.0, 800.0])).data
    np.testing.assert_allclose(y, [-800.0, 0.0])


@pytest.mark.parametrize("op", [T.add, T.sub, T.mul])
def test_no_broadcasting_between_tensors(op):
    with pytest.raises(ShapeError, match="shape mismatch"):
        op(t(np.ones((2, 3))), t(np.ones((1, 3))))


def test_scalar_broadcasting_is_allowed():
    np.testing.assert_array_equal((2.0 * t([1.0, 2.0]) - 1).data, [1.0, 3.0])


def test_expand_rejects_incompatible_shape():
    with pytest.raises(ShapeError):
        T.expand(t(np.ones((2, 3))), (2, 4))


def test_reshape_error():
    with pytest.raises(ShapeError, match="cannot reshape"):
        T.reshape(t(np.ones(6)), (4, 2))


def test_zero_dim_tensors_keep_their_shape():
    assert Tensor(np.float64(3.0)).shape == ()
    assert Tensor(2.0).shape == ()
    assert T.take(t([1.0, 2.0]), 1).shape == ()


def test_take_scatter_adds_repeated_indices():
    x = t([1.0, 2.0, 3.0], True)
    T.backward(T.sum(T.take(x, np.array([0, 0, 2]))))
    np.testing.assert_array_equal(x.grad, [2, 0, 1])


# ---------------------------------------------------------------- custom_grad

def test_custom_grad_rect_window_at_zero():
    def window(x):
        return (np.abs(x) <= 0.5).astype(x.dtype)

    step = T.custom_grad(lambda x: (x >= 0).astype(x.dtype), window)
    x = t([0.0, 0.7], True)
    y = step(x)
    T.backward(T.sum(y * t([3.0, 3.0])))
    np.testing.assert_array_equal(y.data, [1, 1])
    np.testing.assert_array_equal(x.grad, [3.0, 0.0])


def test_custom_grad_identity_passes_gradcheck():
    ident = T.custom_grad(lambda x: x, np.ones_like)
    assert gradcheck.check(ident, [np.random.default_rng(0).standard_normal((3, 4))]) < gradcheck.RTOL


def test_custom_grad_blocked_path_gives_zero_upstream_gradient():
    block = T.custom_grad(lambda x: x, np.zeros_like)
    w = t([1.0, 2.0], True)
    T.backward(T.sum(block(w * 3.0)))
    np.testing.assert_array_equal(w.grad, [0.0, 0.0])


def test_custom_op_records_backward():
    x = t([1.0, 2.0], True)
    y = T.custom_op(x.data * 10, (x,), lambda g: (g * 10,), "times10")
    T.backward(T.sum(y))
    np.testing.assert_array_equal(x.grad, [10, 10])


# ---------------------------------------------------------------- backward

def test_backward_of_sum_is_ones():
    x = t(np.zeros((2, 3)), True)
    T.backward(T.sum(x))
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_backward_of_square_sum():
    x = t([1.0, 2.0], True)
    T.backward(T.sum(x * x))
    np.testing.assert_array_equal(x.grad, [2, 4])


def test_gradients_accumulate_across_uses():
    x = t([1.0, 5.0], True)
    T.backward(T.sum(x) + T.sum(x))
    np.testing.assert_array_equal(x.grad, [2, 2])


def test_gradients_accumulate_across_backward_calls_until_zeroed():
    x = t([1.0], True)
    T.backward(T.sum(x * 3.0))
    T.backward(T.sum(x * 3.0))
    assert x.grad[0] == 6
    x.zero_grad()
    assert x.grad is None


def test_backward_on_non_scalar_is_an_error():
    with pytest.raises(GradientError, match="single-element"):
        T.backward(t([1.0, 2.0], True) * 2.0)


def test_backward_without_grad_inputs_is_an_error():
    with pytest.raises(GradientError):
        T.backward(T.sum(t([1.0, 2.0])))


def test_each_op_runs_backward_once_on_diamond_graph():
    calls = []

    def record(g):
        calls.append(1)
        return (g,)

    x = t([1.0], True)
    shared = T.custom_op(x.data.copy(), (x,), record, "shared")
    T.backward(T.sum(shared * 2.0 + shared * 3.0))
    assert len(calls) == 1 and x.grad[0] == 5


def test_no_grad_records_nothing():
    x = t([1.0], True)
    with T.no_grad():
        y = x * 2.0
        assert not T.is_grad_enabled()
    assert T.is_grad_enabled()
    assert not y.requires_grad and y.is_leaf


def test_detach_cuts_the_graph():
    x = t([2.0], True)
    y = T.detach(x * 3.0) * x
    T.backward(T.sum(y))
    assert x.grad[0] == 6


def test_precision_context():
    assert T.get_default_dtype() is np.float32
    with T.precision(np.float64):
        assert Tensor([1.0]).dtype == np.float64
    assert Tensor([1.0]).dtype == np.float32
    with pytest.raises(ValueError):
        with T.precision(np.int32):
            pass


def test_detect_anomaly_raises_on_nan():
    with T.detect_anomaly(), np.errstate(invalid="ignore"):
        with pytest.raises(NonFiniteError, match="log"):
            T.log(t([-1.0]))
    with np.errstate(invalid="ignore"):
        assert np.isnan(T.log(t([-1.0])).data[0])


def test_item_requires_single_element():
    with pytest.raises(GradientError):
        t([1.0, 2.0]).item()


def _forward_backward(seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal((2, 3, 6, 6)), requires_grad=True)
    k = Tensor(rng.standard_normal((4, 3, 3, 3)), requires_grad=True)
    y = T.avgpool2d(T.tanh(T.conv2d(x, k, padding=1)), 2)
    loss = T.sum(T.softmax(T.flatten(y), axis=1) * Tensor(rng.standard_normal((2, 36))))
    T.backward(loss)
    return loss.data.tobytes(), x.grad.tobytes(), k.grad.tobytes()


def test_tape_determinism_is_bit_exact():
    assert _forward_backward(3) == _forward_backward(3)
