import itertools

import numpy as np
import pytest

from neurosid.blocks import (ACTIVATIONS, BLOCK_KINDS, BlockConfig, activate, build_block,
                             block_forward, interp_operator, rnn_forward, softexp)
from neurosid.diffcore import ShapeError, Tensor, backward, parameter
from neurosid.linmaps import MAP_KINDS

from oracles import elman_unroll, finite_difference, gelu_tanh, relative_error


def _act(kind, x, p=None):
    return activate(kind, None if p is None else Tensor(p), Tensor(x)).data


def test_relu_values():
    np.testing.assert_array_equal(_act("relu", [-1.0, 2.0]), [0.0, 2.0])


def test_gelu_limits():
    assert _act("gelu", 0.0) == 0.0
    assert _act("gelu", 30.0) == pytest.approx(30.0, abs=1e-12)
    assert _act("gelu", -30.0) == pytest.approx(0.0, abs=1e-12)


def test_gelu_matches_tanh_formula():
    x = np.linspace(-4, 4, 41)
    np.testing.assert_allclose(_act("gelu", x), gelu_tanh(x), atol=1e-14)


def test_parametric_activations_are_identity_at_zero():
    assert _act("blu", 3.7, 0.0) == 3.7
    assert _act("softexp", -1.5, 0.0) == -1.5
    x = np.linspace(-5, 5, 11)
    np.testing.assert_array_equal(_act("blu", x, 0.0), x)
    np.testing.assert_array_equal(_act("softexp", x, 0.0), x)


def test_blu_formula_and_clamp():
    x = np.array([-2.0, 0.5, 3.0])
    want = 0.4 * (np.sqrt(x ** 2 + 1) - 1) + x
    np.testing.assert_allclose(_act("blu", x, 0.4), want, atol=1e-14)
    np.testing.assert_allclose(_act("blu", x, 5.0), _act("blu", x, 1.0))


def test_softexp_branches():
    x = np.array([-1.0, 0.3, 2.0])
    np.testing.assert_allclose(_act("softexp", x, 0.5), (np.exp(0.5 * x) - 1) / 0.5 + 0.5)
    np.testing.assert_allclose(_act("softexp", x, -0.5), -np.log(1 + 0.5 * (x - 0.5)) / -0.5)


def test_softexp_is_continuous_in_alpha():
    x = np.linspace(-2, 2, 9)
    for eps in (1e-7, -1e-7):
        np.testing.assert_allclose(_act("softexp", x, eps), x, atol=1e-5)


def test_softexp_domain_is_clamped_not_error():
    y = _act("softexp", [-100.0], -1.0)
    assert np.isfinite(y).all()
    assert np.isfinite(_act("softexp", [1e3], 2.0)).all()


def test_softexp_inverse_pair():
    x = np.array([0.2, 1.0, 3.0])
    a = Tensor(0.7)
    back = softexp(softexp(Tensor(x), -a), a).data
    np.testing.assert_allclose(back, x, atol=1e-12)


def test_interp_addition_endpoint():
    assert interp_operator(Tensor(2.0), Tensor(3.0), Tensor(0.0)).item() == 5.0
    out = interp_operator(Tensor([1.0, 2.0]), Tensor([3.0, 4.0]), Tensor(0.0))
    np.testing.assert_array_equal(out.data, [4.0, 6.0])


def test_interp_multiplication_endpoint():
    # exp(ln 2 + ln 3)
    want = np.exp(np.log(2.0) + np.log(3.0))
    assert interp_operator(Tensor(2.0), Tensor(3.0), Tensor(1.0)).item() == pytest.approx(
        want, abs=1e-9)


@pytest.mark.parametrize("alpha", [-0.8, -0.2, 0.0, 0.3, 1.0])
def test_interp_is_symmetric(alpha):
    rng = np.random.default_rng(0)
    a, b = rng.uniform(0.1, 2.0, 5), rng.uniform(0.1, 2.0, 5)
    al = Tensor(alpha)
    np.testing.assert_array_equal(interp_operator(Tensor(a), Tensor(b), al).data,
                                  interp_operator(Tensor(b), Tensor(a), al).data)


@pytest.mark.parametrize("kind", ["blu", "softexp"])
@pytest.mark.parametrize("p0", [-0.6, 0.4])
def test_parametric_activation_gradients(kind, p0):
    rng = np.random.default_rng(1)
    x = parameter(rng.normal(size=6))
    p = parameter(p0)
    w = Tensor(rng.normal(size=6))

    def f():
        return (activate(kind, p, x) * w).sum()

    backward(f())
    num = finite_difference(lambda: f().data, [x.data, p.data])
    assert relative_error([x.grad, p.grad], num) < 1e-6


def test_interp_gradient():
    a, b, al = parameter([0.5, 1.5]), parameter([2.0, 0.7]), parameter(0.4)

    def f():
        return interp_operator(a, b, al).sum()

    backward(f())
    num = finite_difference(lambda: f().data, [a.data, b.data, al.data])
    assert relative_error([a.grad, b.grad, al.grad], num) < 1e-6


def _set_identity(block):
    W = block.maps["out"].params["W"]
    W.data = np.eye(*W.shape)


def test_lm_block_identity():
    b = build_block(BlockConfig("lm", 3, 3, map_kind="linear"), 0)
    _set_identity(b)
    x = np.array([0.5, -1.0, 2.0])
    np.testing.assert_array_equal(block_forward(b, x).data, x)


def test_lm_block_has_no_bias_or_activation():
    b = build_block(BlockConfig("lm", 3, 2, layers=4, activation="softexp"), 0)
    assert not b.biases and not b.activations


def test_zero_mlp_gives_zero():
    b = build_block(BlockConfig("mlp", 3, 2, hidden_nodes=5, layers=1, map_kind="linear"), 0)
    for _, p in b.named_parameters():
        p.data = np.zeros_like(p.data)
    np.testing.assert_array_equal(block_forward(b, np.ones(3)).data, np.zeros(2))


@pytest.mark.parametrize("in_dim", [3, 5, 8])
def test_rmlp_decomposes_into_skip_and_branch(in_dim):
    rng = np.random.default_rng(in_dim)
    cfg = BlockConfig("rmlp", in_dim, 2, hidden_nodes=5, layers=3, activation="gelu")
    r = build_block(cfg, rng)
    for _, p in r.named_parameters():
        p.data = rng.normal(size=p.shape)
    x = rng.normal(size=in_dim)
    W = {k: m.materialize().data for k, m in r.maps.items()}
    b = {k: v.data for k, v in r.biases.items()}
    h = x
    for i in range(3):
        branch = gelu_tanh(W[f"hidden{i}"] @ h + b[f"hidden{i}"])
        skip = np.zeros(5)
        n = min(5, len(h))
        skip[:n] = h[:n]
        h = branch + skip
    want = W["out"] @ h + b["out"]
    np.testing.assert_allclose(block_forward(r, x).data, want, atol=1e-12)


def test_rmlp_minus_skip_equals_mlp_branch():
    rng = np.random.default_rng(4)
    cfg = BlockConfig("rmlp", 4, 4, hidden_nodes=4, layers=1, activation="relu")
    r = build_block(cfg, rng)
    m = build_block(cfg.__class__(**{**cfg.to_dict(), "kind": "mlp"}), rng)
    for (_, pr), (_, pm) in zip(r.named_parameters(), m.named_parameters()):
        pm.data = pr.data = rng.normal(size=pr.shape)
    # read-out is affine, so removing W_out @ x leaves the plain MLP output
    x = rng.normal(size=4)
    Wout = r.maps["out"].materialize().data
    resid = block_forward(r, x).data - Wout @ x
    np.testing.assert_allclose(resid, block_forward(m, x).data, atol=1e-12)


def test_rnn_length_one_zero_weights():
    b = build_block(BlockConfig("rnn", 2, 3, hidden_nodes=4, layers=2, map_kind="linear"), 0)
    for _, p in b.named_parameters():
        p.data = np.zeros_like(p.data)
    np.testing.assert_array_equal(rnn_forward(b, [np.ones(2)]).data, np.zeros(4))


def test_rnn_zero_recurrence_depends_only_on_last_input():
    rng = np.random.default_rng(2)
    b = build_block(BlockConfig("rnn", 2, 3, hidden_nodes=4, layers=1, map_kind="linear",
                                activation="gelu"), rng)
    b.maps["hh0"].params["W"].data[:] = 0
    seq = [rng.normal(size=2) for _ in range(5)]
    perm = [seq[3], seq[0], seq[2], seq[1], seq[4]]
    np.testing.assert_array_equal(rnn_forward(b, seq).data, rnn_forward(b, perm).data)


@pytest.mark.parametrize("act", ["relu", "gelu"])
def test_rnn_matches_unrolling_oracle(act):
    rng = np.random.default_rng(3)
    b = build_block(BlockConfig("rnn", 3, 2, hidden_nodes=5, layers=2, map_kind="softsvd",
                                activation=act), rng)
    for name in ("cell0", "cell1"):
        b.biases[name].data = rng.normal(size=5)
    seq = [rng.normal(size=3) for _ in range(4)]
    W = {k: m.materialize().data for k, m in b.maps.items()}
    layers = [(W[f"ih{i}"], W[f"hh{i}"], b.biases[f"cell{i}"].data) for i in range(2)]
    fn = (lambda z: np.maximum(z, 0)) if act == "relu" else gelu_tanh
    np.testing.assert_allclose(rnn_forward(b, seq).data, elman_unroll(layers, seq, fn),
                               atol=1e-12)


def test_rnn_empty_sequence_rejected():
    b = build_block(BlockConfig("rnn", 2, 2), 0)
    with pytest.raises(ValueError):
        rnn_forward(b, [])


def test_block_rejects_wrong_input_dim():
    b = build_block(BlockConfig("mlp", 3, 2), 0)
    with pytest.raises(ShapeError):
        block_forward(b, np.ones(4))


@pytest.mark.parametrize("kind", MAP_KINDS)
def test_lm_block_homogeneity(kind):
    b = build_block(BlockConfig("lm", 4, 3, map_kind=kind, lambda_min=0.1, lambda_max=0.9), 5)
    x = np.random.default_rng(0).normal(size=(6, 4))
    for c in (-2.5, 0.3, 7.0):
        np.testing.assert_allclose(block_forward(b, c * x).data, c * block_forward(b, x).data,
                                   atol=1e-10)


def test_config_validation_and_roundtrip():
    with pytest.raises(ValueError):
        BlockConfig("mlp", 2, 2, layers=0)
    cfg = BlockConfig("rmlp", 2, 3, 8, 2, "pf", "blu", 0.1, 0.9)
    assert BlockConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.to_dict()["kind"] == "rmlp" and cfg.to_dict()["activation"] == "blu"


def test_parametric_activations_are_per_layer():
    b = build_block(BlockConfig("mlp", 2, 2, hidden_nodes=3, layers=3, activation="softexp"), 0)
    alphas = [p for n, p in b.named_parameters() if n.endswith("alpha")]
    assert len(alphas) == 3 and len({id(a) for a in alphas}) == 3
    assert all(a.data == 0.0 for a in alphas)


@pytest.mark.parametrize("kind,act", list(itertools.product(BLOCK_KINDS, ACTIVATIONS)))
def test_block_gradients_match_finite_differences(kind, act):
    rng = np.random.default_rng(11)
    b = build_block(BlockConfig(kind, 3, 2, hidden_nodes=4, layers=2, map_kind="linear",
                                activation=act), rng)
    params = [p for _, p in b.named_parameters()]
    for p in params:
        p.data = np.asarray(p.data + rng.normal(scale=0.3, size=p.shape))
    x = Tensor(rng.normal(size=(4, 3)))
    w = Tensor(rng.normal(size=(4, 2)))

    def f():
        return (block_forward(b, x) * w).sum()

    backward(f())
    num = finite_difference(lambda: f().data, [p.data for p in params], h=1e-6)
    grads = [p.grad if p.grad is not None else 0 * p.data for p in params]
    assert relative_error(grads, num) < 1e-5
