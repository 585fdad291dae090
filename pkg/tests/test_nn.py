import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mixtable.errors import ConfigError, GraphError, ShapeError
from mixtable.nn import (
    Adam,
    ParameterStore,
    Tensor,
    TransformerConfig,
    TransformerEncoder,
    backward,
    check_gradients,
    cosine_lr,
    ops,
    scaled_dot_attention,
)
from mixtable.nn.layers import MLP, MultiHeadSelfAttention

rng = np.random.default_rng(1234)
A = rng.standard_normal((3, 4))
B = rng.standard_normal((4, 5))
C = rng.standard_normal((2, 3, 4))
W34 = rng.standard_normal((3, 4))
W2232 = rng.standard_normal((2, 2, 3, 2))
W234 = rng.standard_normal((2, 3, 4))


def _weighted(t, w):
    return ops.sum_(ops.mul(t, Tensor(w)))


# one entry per differentiable op; each returns (fn, inputs)
OP_CASES = {
    "add_broadcast": (lambda d: ops.sum_(ops.square(ops.add(d["c"], d["b"]))), {"c": C, "b": rng.standard_normal((1, 4))}),
    "sub": (lambda d: ops.sum_(ops.square(ops.sub(d["a"], d["b"]))), {"a": A, "b": rng.standard_normal(4)}),
    "mul": (lambda d: ops.sum_(ops.mul(d["a"], d["b"])), {"a": A, "b": rng.standard_normal((3, 1))}),
    "square": (lambda d: ops.sum_(ops.square(d["a"])), {"a": A}),
    "exp": (lambda d: ops.sum_(ops.exp(d["a"])), {"a": A}),
    "log": (lambda d: ops.sum_(ops.log(d["a"])), {"a": np.abs(A) + 0.5}),
    "sqrt": (lambda d: ops.sum_(ops.sqrt(d["a"])), {"a": np.abs(A) + 0.5}),
    "gelu": (lambda d: _weighted(ops.gelu(d["a"]), W34), {"a": A}),
    "sum_axis": (lambda d: ops.sum_(ops.square(ops.sum_(d["c"], axis=1))), {"c": C}),
    "mean": (lambda d: ops.sum_(ops.square(ops.mean(d["c"], axis=2))), {"c": C}),
    "reshape_transpose": (
        lambda d: _weighted(ops.transpose(ops.reshape(d["c"], (2, 3, 2, 2)), (0, 2, 1, 3)), W2232),
        {"c": C},
    ),
    "getitem": (lambda d: ops.sum_(ops.square(ops.getitem(d["a"], (np.arange(3), np.array([1, 1, 3]))))), {"a": A}),
    "take": (lambda d: ops.sum_(ops.square(ops.take(d["c"], [2, 0, 0], axis=1))), {"c": C}),
    "concat": (lambda d: ops.sum_(ops.square(ops.concat([d["a"], d["b"]], axis=1))), {"a": A, "b": rng.standard_normal((3, 2))}),
    "stack": (lambda d: _weighted(ops.stack([d["a"], d["b"]], axis=0), W234), {"a": A, "b": W34}),
    "matmul": (lambda d: ops.sum_(ops.square(ops.matmul(d["a"], d["b"]))), {"a": A, "b": B}),
    "batched_matmul": (lambda d: ops.sum_(ops.square(ops.matmul(d["c"], d["b"]))), {"c": C, "b": B}),
    "linear": (lambda d: ops.sum_(ops.square(ops.linear(d["c"], d["w"], d["b"]))), {"c": C, "w": B, "b": rng.standard_normal(5)}),
    "softmax": (lambda d: _weighted(ops.softmax(d["a"]), W34), {"a": A}),
    "log_softmax": (lambda d: _weighted(ops.log_softmax(d["a"]), W34), {"a": A}),
    "layer_norm": (lambda d: _weighted(ops.layer_norm(d["a"], d["g"], d["b"]), W34), {"a": A, "g": rng.standard_normal(4), "b": rng.standard_normal(4)}),
    "l2_normalize": (lambda d: _weighted(ops.l2_normalize(d["a"]), W34), {"a": A}),
    "attention": (
        lambda d: ops.sum_(ops.square(scaled_dot_attention(d["q"], d["k"], d["v"]))),
        {"q": C, "k": rng.standard_normal((2, 3, 4)), "v": rng.standard_normal((2, 3, 4))},
    ),
}


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_op_gradient_matches_central_differences(name):
    fn, inputs = OP_CASES[name]
    errors = check_gradients(fn, inputs, eps=1e-3)
    assert max(errors.values()) < 1e-4, errors


def test_softmax_of_equal_logits_is_uniform():
    np.testing.assert_allclose(ops.softmax(Tensor(np.array([3.0, 3.0]))).data, [0.5, 0.5])


def test_layer_norm_of_constant_is_zero():
    np.testing.assert_allclose(ops.layer_norm(Tensor(np.full(6, 2.5))).data, np.zeros(6), atol=1e-12)


def test_attention_with_identical_keys_averages_values():
    q = Tensor(rng.standard_normal((1, 4, 3)))
    k = Tensor(np.tile(rng.standard_normal(3), (1, 4, 1)))
    v = rng.standard_normal((1, 4, 3))
    out = scaled_dot_attention(q, k, Tensor(v)).data
    np.testing.assert_allclose(out, np.broadcast_to(v.mean(axis=1, keepdims=True), out.shape), atol=1e-12)


def test_shape_mismatch_reports_both_shapes():
    with pytest.raises(ShapeError, match=r"\(3, 4\).*\(5, 2\)"):
        ops.matmul(Tensor(A), Tensor(np.zeros((5, 2))))


def test_linear_grad_is_input():
    x = rng.standard_normal(5)
    w = Tensor(rng.standard_normal(5), requires_grad=True)
    backward(ops.sum_(ops.mul(w, Tensor(x))))
    np.testing.assert_allclose(w.grad, x)


def test_squared_norm_grad_is_twice_w():
    w = Tensor(rng.standard_normal(7), requires_grad=True)
    backward(ops.sum_(ops.square(w)))
    np.testing.assert_allclose(w.grad, 2 * w.data)


def test_unreachable_parameters_get_zero_grad():
    store = ParameterStore(np.float64)
    a = store.add("a", np.ones(3))
    store.add("b", np.ones(2))
    backward(ops.sum_(ops.square(a)))
    grads = store.grads()
    np.testing.assert_array_equal(grads["b"], np.zeros(2))
    np.testing.assert_array_equal(grads["a"], 2 * np.ones(3))


def test_backward_without_forward_graph_raises():
    with pytest.raises(GraphError):
        backward(Tensor(np.array(1.0)))


def test_backward_requires_scalar():
    w = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeError):
        backward(ops.square(w))


def test_parameter_store_rejects_duplicates_and_keeps_order():
    store = ParameterStore()
    for name in ["z", "a", "m"]:
        store.add(name, np.zeros(1))
    assert store.names() == ["z", "a", "m"]
    with pytest.raises(ConfigError):
        store.add("a", np.zeros(1))


def test_initialization_is_deterministic():
    def build(seed):
        store = ParameterStore()
        MLP(store, "g", 4, 8, 2, np.random.default_rng(seed))
        return store.state_dict()

    s1, s2 = build(3), build(3)
    for k in s1:
        assert s1[k].tobytes() == s2[k].tobytes()
    # truncated at two standard deviations of 0.02
    assert max(np.abs(v).max() for k, v in s1.items() if k.endswith("weight")) <= 0.04 + 1e-7


def test_transformer_config_rejects_positional_encoding():
    with pytest.raises(ConfigError):
        TransformerConfig(2, 16, 4, 4.0, "sinusoidal")
    with pytest.raises(ConfigError):
        TransformerConfig(2, 10, 4)


@pytest.mark.parametrize("seed", range(5))
def test_encoder_is_permutation_equivariant(seed):
    r = np.random.default_rng(seed)
    store = ParameterStore()
    enc = TransformerEncoder(store, "enc", TransformerConfig(2, 16, 4), r)
    x = r.standard_normal((3, 6, 16)).astype(np.float32)
    perm = r.permutation(6)
    out = enc(store, Tensor(x)).data
    out_perm = enc(store, Tensor(x[:, perm])).data
    np.testing.assert_allclose(out_perm, out[:, perm], atol=1e-5)


def test_attention_block_gradient_f64():
    r = np.random.default_rng(0)
    store = ParameterStore(np.float64)
    attn = MultiHeadSelfAttention(store, "a", 8, 2, r)
    x = r.standard_normal((2, 3, 8))
    names = store.names()
    target = r.standard_normal((2, 3, 8))

    def fn(d):
        view = {n: d[n] for n in names}
        return ops.sum_(ops.mul(attn(view, d["x"]), Tensor(target)))

    arrays = {n: store[n].data * 20 for n in names}  # unit-scale weights keep differences well conditioned
    arrays["x"] = x
    errors = check_gradients(fn, arrays, eps=1e-3)
    assert max(errors.values()) < 1e-4, errors


def test_cosine_lr_endpoints_and_midpoint():
    assert cosine_lr(0, 100, 5e-5) == 5e-5
    assert cosine_lr(100, 100, 5e-5) == 0.0
    assert math.isclose(cosine_lr(50, 100, 5e-5), 2.5e-5, rel_tol=1e-12)


@given(st.integers(1, 500), st.floats(1e-6, 1.0))
def test_cosine_lr_is_monotone(total, lr0):
    values = [cosine_lr(s, total, lr0) for s in range(total + 1)]
    assert all(a >= b for a, b in zip(values, values[1:]))


def test_adam_zero_gradient_leaves_parameters():
    store = ParameterStore(np.float64)
    store.add("w", np.arange(4.0))
    opt = Adam()
    for _ in range(3):
        opt.step(store, {"w": np.zeros(4)}, 1e-2)
    np.testing.assert_array_equal(store["w"].data, np.arange(4.0))


@settings(max_examples=30, deadline=None)
@given(st.floats(-100, 100).filter(lambda g: abs(g) > 1e-3), st.floats(1e-5, 1e-1))
def test_adam_constant_gradient_step_is_bounded_by_lr(g, lr):
    store = ParameterStore(np.float64)
    store.add("w", np.zeros(1))
    opt = Adam()
    prev = 0.0
    for _ in range(50):
        opt.step(store, {"w": np.array([g])}, lr)
        cur = float(store["w"].data[0])
        assert abs(cur - prev) <= lr * (1 + 1e-6)
        assert np.sign(prev - cur) == np.sign(g)
        prev = cur


def test_adam_rejects_negative_lr():
    store = ParameterStore()
    store.add("w", np.zeros(1))
    with pytest.raises(ConfigError):
        Adam().step(store, {"w": np.zeros(1)}, -1.0)
