import numpy as np
import pytest
from scipy.signal import correlate

from rsdyn.convlstm import (ConvLSTMParams, ConvLSTMState, backward_sequence, cell_step,
                            forward_sequence)
from rsdyn.tensor_ops import ShapeError, grad_check


def zero_params(cin=1, hid=2, k=3, **biases):
    d = {n: np.zeros((hid, cin if n.startswith("W_x") else hid, k, k))
         for n in ConvLSTMParams.names() if n.startswith("W_")}
    for g in "ifog":
        d[f"b_{g}"] = np.full(hid, biases.get(g, 0.0))
    return ConvLSTMParams(**d)


def random_params(rng, cin=2, hid=2, scale=0.3):
    base = ConvLSTMParams.init(cin, hid, 3, rng).to_dict()
    return ConvLSTMParams(**{k: v + rng.normal(scale=scale, size=v.shape) for k, v in base.items()})


def reference_step(x, h, c, p):
    """Gate equations written out with scipy correlation, one channel pair at a time."""
    def conv(inp, W):
        return np.stack([sum(correlate(inp[ci], W[co, ci], mode="same") for ci in range(inp.shape[0]))
                         for co in range(W.shape[0])])
    sig = lambda z: 1.0 / (1.0 + np.exp(-z))
    b = lambda name: getattr(p, name)[:, None, None]
    i = sig(conv(x, p.W_xi) + conv(h, p.W_hi) + b("b_i"))
    f = sig(conv(x, p.W_xf) + conv(h, p.W_hf) + b("b_f"))
    o = sig(conv(x, p.W_xo) + conv(h, p.W_ho) + b("b_o"))
    g = np.tanh(conv(x, p.W_xg) + conv(h, p.W_hg) + b("b_g"))
    c2 = f * c + i * g
    return o * np.tanh(c2), c2


def test_zero_everything_gives_zero_state():
    s = cell_step(np.zeros((1, 4, 4)), ConvLSTMState.zeros((2, 4, 4)), zero_params())
    assert not s.h.any() and not s.c.any()


def test_saturated_forget_gate_keeps_cell():
    c0 = np.random.default_rng(0).uniform(-1, 1, size=(2, 4, 4))
    p = zero_params(f=20.0, i=-20.0)
    s = cell_step(np.zeros((1, 4, 4)), ConvLSTMState(np.zeros((2, 4, 4)), c0), p)
    np.testing.assert_allclose(s.c, c0, atol=1e-6)


def test_closed_output_gate_silences_hidden():
    c0 = np.full((2, 4, 4), 3.0)
    p = zero_params(o=-20.0, f=5.0)
    s = cell_step(np.ones((1, 4, 4)), ConvLSTMState(np.zeros((2, 4, 4)), c0), p)
    assert np.abs(s.h).max() < 1e-6


def test_cell_step_matches_reference_equations():
    rng = np.random.default_rng(1)
    p = random_params(rng)
    x = rng.normal(size=(2, 5, 6))
    h = rng.uniform(-1, 1, size=(2, 5, 6))
    c = rng.normal(size=(2, 5, 6))
    s = cell_step(x, ConvLSTMState(h, c), p)
    h_ref, c_ref = reference_step(x, h, c, p)
    np.testing.assert_allclose(s.h, h_ref, atol=1e-12)
    np.testing.assert_allclose(s.c, c_ref, atol=1e-12)


def test_cell_step_rejects_bad_state():
    with pytest.raises(ShapeError):
        cell_step(np.zeros((1, 4, 4)), ConvLSTMState.zeros((3, 4, 4)), zero_params())


def test_params_reject_mismatched_kernels():
    d = zero_params().to_dict()
    d["W_hf"] = np.zeros((2, 2, 5, 5))
    with pytest.raises(ShapeError):
        ConvLSTMParams(**d)


def test_init_forget_bias():
    p = ConvLSTMParams.init(3, 4, 3, np.random.default_rng(0))
    np.testing.assert_array_equal(p.b_f, np.ones(4))
    for g in "iog":
        assert not getattr(p, f"b_{g}").any()
    assert np.abs(p.W_xi).max() <= 1 / np.sqrt(27)
    assert np.abs(p.W_hi).max() <= 1 / np.sqrt(36)


def test_sequence_t1_equals_cell_step():
    rng = np.random.default_rng(2)
    p = random_params(rng)
    x = rng.normal(size=(2, 4, 4))
    out = forward_sequence([x], p, "last")
    np.testing.assert_array_equal(out, cell_step(x, ConvLSTMState.zeros((2, 4, 4)), p).h)


def test_sequence_matches_repeated_reference_steps():
    rng = np.random.default_rng(3)
    p = random_params(rng)
    xs = rng.normal(size=(2, 4, 4, 4))
    h = c = np.zeros((2, 4, 4))
    for t in range(4):
        h, c = reference_step(xs[..., t], h, c, p)
    np.testing.assert_allclose(forward_sequence(xs, p), h, atol=1e-12)


def test_zero_inputs_zero_biases_stay_zero():
    p = random_params(np.random.default_rng(4))
    for n in ("b_i", "b_f", "b_o", "b_g"):
        setattr(p, n, np.zeros(2))
    assert not forward_sequence(np.zeros((2, 4, 4, 5)), p, "all").any()


def test_last_equals_final_of_all():
    rng = np.random.default_rng(5)
    p = random_params(rng)
    xs = rng.normal(size=(2, 4, 4, 3))
    np.testing.assert_array_equal(forward_sequence(xs, p, "last"), forward_sequence(xs, p, "all")[..., -1])


def test_prefix_consistency():
    rng = np.random.default_rng(6)
    p = random_params(rng)
    xs = rng.normal(size=(2, 4, 4, 5))
    full = forward_sequence(xs, p, "all")
    np.testing.assert_array_equal(forward_sequence(xs[..., :3], p, "all"), full[..., :3])


def test_hidden_bounded():
    rng = np.random.default_rng(7)
    p = random_params(rng, scale=3.0)
    out = forward_sequence(rng.normal(scale=10, size=(2, 4, 4, 6)), p, "all")
    assert np.abs(out).max() < 1.0


def test_empty_sequence_rejected():
    with pytest.raises(ValueError):
        forward_sequence([], zero_params())


def test_zero_grad_gives_zero_gradients():
    rng = np.random.default_rng(8)
    p = random_params(rng)
    xs = rng.normal(size=(2, 4, 4, 3))
    gx, gp = backward_sequence(xs, p, np.zeros((2, 4, 4)), "last")
    assert not gx.any()
    assert all(not g.any() for g in gp.values())


def test_backward_rejects_wrong_grad_shape():
    p = random_params(np.random.default_rng(9))
    with pytest.raises(ShapeError):
        backward_sequence(np.zeros((2, 4, 4, 3)), p, np.zeros((2, 4, 4, 3)), "last")


@pytest.mark.parametrize("T", [1, 2, 3])
@pytest.mark.parametrize("mode", ["last", "all"])
def test_bptt_finite_difference(T, mode):
    rng = np.random.default_rng(10 + T)
    p = random_params(rng)
    d = p.to_dict()
    xs = rng.normal(size=(2, 4, 4, T))
    R = rng.normal(size=forward_sequence(xs, p, mode).shape)
    gx, gp = backward_sequence(xs, p, R, mode)
    assert grad_check(lambda z: float(np.sum(forward_sequence(z, p, mode) * R)), xs, gx).passed
    for name in p.names():
        def f(z, name=name):
            dd = dict(d)
            dd[name] = z
            return float(np.sum(forward_sequence(xs, ConvLSTMParams(**dd), mode) * R))
        rep = grad_check(f, d[name], gp[name])
        assert rep.passed, (name, rep)


def test_deterministic():
    rng = np.random.default_rng(11)
    p = random_params(rng)
    xs = rng.normal(size=(2, 4, 4, 3))
    assert np.array_equal(forward_sequence(xs, p, "all"), forward_sequence(xs.copy(), p, "all"))
