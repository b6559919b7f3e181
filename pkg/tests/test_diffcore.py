import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from neurosid.diffcore import (GradientError, NumericDomainError, NumericError, ParameterStore,
                               ShapeError, Tensor, adamw_step, backward, checkpoint_dict,
                               clip_grad_norm, concat, load_checkpoint, matmul, no_grad,
                               parameter, save_checkpoint, stack)

from oracles import adamw_reference, finite_difference, relative_error


def test_matmul_identity():
    out = matmul(Tensor(np.eye(2)), Tensor([[3.0], [4.0]]))
    np.testing.assert_array_equal(out.data, [[3.0], [4.0]])


def test_max_with_scalar():
    np.testing.assert_array_equal(Tensor([-1.0, 0.0, 2.0]).maximum(0.0).data, [0, 0, 2])


def test_mean_of_square():
    assert Tensor([0.1, 0.1]).square().mean().item() == pytest.approx(0.01, abs=1e-15)


def test_shape_mismatch_is_structural_error():
    with pytest.raises(ShapeError):
        Tensor(np.ones(3)) + Tensor(np.ones(4))
    with pytest.raises(ShapeError):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_domain_errors():
    with pytest.raises(NumericDomainError):
        Tensor([-1.0]).log()
    with pytest.raises(NumericDomainError):
        Tensor([-1.0]).sqrt()
    with pytest.raises(NumericDomainError):
        Tensor([1.0]) / Tensor([0.0])


def test_grad_of_sum_of_squares():
    x = parameter([1.0, 2.0])
    backward(x.square().sum())
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])


def test_non_scalar_backward_rejected():
    with pytest.raises(GradientError):
        backward(parameter([1.0, 2.0]) * 2.0)


def test_constant_output_gives_zero_gradients():
    store = ParameterStore()
    store.add("w", parameter(np.ones((2, 2))))
    grads = backward(Tensor(3.0), store)
    np.testing.assert_array_equal(grads["w"], np.zeros((2, 2)))


def test_non_participating_parameter_gets_zero():
    store = ParameterStore()
    a = store.add("a", parameter([1.0, 2.0]))
    store.add("b", parameter([5.0]))
    grads = backward(a.sum(), store)
    np.testing.assert_array_equal(grads["b"], [0.0])
    np.testing.assert_array_equal(grads["a"], [1.0, 1.0])


def test_two_layer_mlp_matches_finite_differences():
    rng = np.random.default_rng(3)
    W1, b1 = parameter(rng.normal(size=(5, 3))), parameter(rng.normal(size=5))
    W2 = parameter(rng.normal(size=(2, 5)))
    x = Tensor(rng.normal(size=(7, 3)))

    def f():
        h = (x @ W1.T + b1).tanh()
        return (h @ W2.T).mean()

    backward(f())
    num = finite_difference(lambda: f().data, [W1.data, b1.data, W2.data])
    assert relative_error([W1.grad, b1.grad, W2.grad], num) < 1e-4


_UNARY = {
    "exp": lambda t: t.exp(),
    "log": lambda t: (t.square() + 1.0).log(),
    "sqrt": lambda t: (t.square() + 0.5).sqrt(),
    "sigmoid": lambda t: t.sigmoid(),
    "tanh": lambda t: t.tanh(),
    "erf": lambda t: t.erf(),
    "square": lambda t: t.square(),
    "abs": lambda t: (t + 10.0).abs(),
    "softmax": lambda t: t.softmax(axis=-1),
    "scale": lambda t: t.scale(-1.7),
    "neg": lambda t: -t,
}


@pytest.mark.parametrize("name", sorted(_UNARY))
def test_unary_ops_match_finite_differences(name):
    rng = np.random.default_rng(0)
    x = parameter(rng.normal(size=(3, 4)))
    w = Tensor(rng.normal(size=(3, 4)))

    def f():
        return (_UNARY[name](x) * w).sum()

    backward(f())
    num = finite_difference(lambda: f().data, [x.data])
    assert relative_error([x.grad], num) < 1e-6


def test_structural_ops_match_finite_differences():
    rng = np.random.default_rng(1)
    a = parameter(rng.normal(size=(2, 3)))
    b = parameter(rng.normal(size=(2, 2)))
    w = Tensor(rng.normal(size=(3, 5)))

    def f():
        c = concat([a, b], axis=-1)                  # (2, 5)
        s = stack([c, c * 2.0], axis=0)              # (2, 2, 5)
        r = s.reshape(4, 5)[[0, 2, 3]]               # fancy index
        z = r.T[1:4] - w.T[1:4].T.T                  # slicing and transposes
        return (z / (b.square().sum() + 1.0)).sum(axis=0).mean() + z.clip(-0.5, 0.5).sum()

    backward(f())
    num = finite_difference(lambda: f().data, [a.data, b.data])
    assert relative_error([a.grad, b.grad], num) < 1e-6


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (3,), elements=st.floats(-3, 3)),
       st.floats(-2, 2), st.floats(-2, 2))
def test_backward_is_linear(xv, a, b):
    x = parameter(xv)

    def l1():
        return (x * x * x).sum()

    def l2():
        return (x.tanh() * 3.0).sum()

    backward(l1())
    g1 = x.grad.copy()
    backward(l2())
    g2 = x.grad.copy()
    backward(l1().scale(a) + l2().scale(b))
    np.testing.assert_allclose(x.grad, a * g1 + b * g2, atol=1e-10)


def test_no_grad_records_nothing():
    x = parameter([1.0])
    with no_grad():
        y = x * 2.0
    assert not y.requires_grad


def test_adamw_first_step():
    store = ParameterStore()
    p = store.add("t", parameter([1.0]))
    adamw_step(store, {"t": np.array([1.0])}, lr=2e-3)
    assert p.data[0] == pytest.approx(0.998, abs=1e-9)


def test_adamw_zero_grad_no_decay_is_identity():
    store = ParameterStore()
    p = store.add("t", parameter([1.0, -3.0]))
    adamw_step(store, {"t": np.zeros(2)})
    np.testing.assert_array_equal(p.data, [1.0, -3.0])


def test_adamw_decoupled_decay():
    store = ParameterStore()
    p = store.add("t", parameter([1.0]))
    adamw_step(store, {"t": np.zeros(1)}, lr=2e-3, weight_decay=0.1)
    assert p.data[0] == pytest.approx(0.9998, abs=1e-15)


def test_adamw_lr_zero_is_identity():
    store = ParameterStore()
    p = store.add("t", parameter([0.3, 0.7]))
    adamw_step(store, {"t": np.array([5.0, -2.0])}, lr=0.0, weight_decay=0.5)
    np.testing.assert_array_equal(p.data, [0.3, 0.7])


def test_adamw_matches_reference_over_steps():
    store = ParameterStore()
    p = store.add("t", parameter([0.5, -1.0]))
    g = np.array([0.3, -0.7])
    for _ in range(5):
        adamw_step(store, {"t": g}, lr=1e-2, weight_decay=0.05)
    ref = adamw_reference([0.5, -1.0], g, 1e-2, 0.9, 0.999, 1e-8, 0.05, 5)
    np.testing.assert_allclose(p.data, ref, rtol=1e-13)


def test_adamw_rejects_nan_gradient():
    store = ParameterStore()
    p = store.add("t", parameter([1.0]))
    with pytest.raises(NumericError):
        adamw_step(store, {"t": np.array([np.nan])})
    assert p.data[0] == 1.0 and store.t == 0


def test_moments_match_parameter_shapes():
    store = ParameterStore()
    store.add("w", parameter(np.ones((2, 3))))
    assert store.m["w"].shape == store.v["w"].shape == (2, 3)


def test_clip_grad_norm():
    grads = {"a": np.array([30.0, 40.0]), "b": np.array([0.0])}
    clipped, norm = clip_grad_norm(grads, 10.0)
    assert norm == 50.0
    assert np.linalg.norm(clipped["a"]) == pytest.approx(10.0)


def test_checkpoint_roundtrip(tmp_path):
    store = ParameterStore()
    store.add("z", parameter(np.arange(6.0).reshape(2, 3)))
    store.add("a", parameter([1.5]))
    path = tmp_path / "w.json"
    save_checkpoint(store, path)
    raw = json.loads(path.read_text())
    assert list(raw) == ["a", "z"] and raw["z"]["shape"] == [2, 3]
    store.params["z"].data[:] = 0
    load_checkpoint(store, path)
    np.testing.assert_array_equal(store.params["z"].data, np.arange(6.0).reshape(2, 3))
    assert checkpoint_dict(store) == raw
