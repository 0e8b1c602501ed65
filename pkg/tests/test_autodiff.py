import numpy as np
import pytest
from hypothesis import given, strategies as st

from uotfrechet.autodiff import (
    MLP,
    Adam,
    MLPSpec,
    NonFiniteError,
    Tensor,
    backward,
    concat,
    load_checkpoint,
    save_checkpoint,
    seed_streams,
)

from _oracles import central_difference, max_rel_error


def _grad_check(fn, x, eps=1e-6):
    t = Tensor(x.copy(), requires_grad=True)
    (g,) = backward(fn(t), [t])
    num = central_difference(lambda v: fn(Tensor(v)).item(), x, eps)
    return max_rel_error(g, num)


@pytest.mark.parametrize(
    "fn",
    [
        lambda t: (t * t).sum(),
        lambda t: (t.exp() * 0.5).mean(),
        lambda t: (t * t + 1.0).log().sum(),
        lambda t: t.tanh().sum(),
        lambda t: t.sigmoid().sum(),
        lambda t: t.silu().sum(),
        lambda t: t.softplus().sum(),
        lambda t: (t / (t * t + 2.0)).sum(),
        lambda t: ((t * t + 1.0) ** 1.5).sum(),
        lambda t: (t @ t.T).sum(),
        lambda t: t[:, :2].sum(axis=1).mean(),
        lambda t: (t.sum(axis=0, keepdims=True) * t).sum(),
        lambda t: concat([t, t * 2.0], axis=1).sum(),
        lambda t: (3.0 - t).sum() + (1.0 / (t * t + 1.0)).sum(),
    ],
)
def test_elementwise_gradients(fn):
    x = np.random.default_rng(0).normal(size=(4, 3))
    assert _grad_check(fn, x) < 1e-6


def test_broadcast_gradient_reduces_to_parameter_shape():
    b = Tensor(np.ones(3), requires_grad=True)
    x = Tensor(np.arange(6.0).reshape(2, 3))
    (g,) = backward((x + b).sum(), [b])
    np.testing.assert_array_equal(g, [2.0, 2.0, 2.0])


def test_clamp_blocks_gradient_past_the_bound():
    t = Tensor(np.array([1.0, 5.0]), requires_grad=True)
    (g,) = backward(t.clamp_max(2.0).sum(), [t])
    np.testing.assert_array_equal(g, [1.0, 0.0])


def test_unreachable_parameter_gets_zero_gradient():
    a = Tensor(np.ones(2), requires_grad=True)
    b = Tensor(np.ones(2), requires_grad=True)
    ga, gb = backward((a * 2.0).sum(), [a, b])
    np.testing.assert_array_equal(gb, 0.0)
    np.testing.assert_array_equal(ga, 2.0)


def test_reused_node_accumulates():
    a = Tensor(np.array([3.0]), requires_grad=True)
    y = a * a
    (g,) = backward((y + y).sum(), [a])
    assert g[0] == pytest.approx(12.0)


def test_backward_requires_scalar():
    with pytest.raises(ValueError):
        Tensor(np.ones(3), requires_grad=True).backward()


@pytest.mark.parametrize("activation", ["relu", "tanh", "silu"])
def test_mlp_predict_matches_graph(activation):
    net = MLP(MLPSpec(3, (8, 5), 2, activation), rng=1)
    x = np.random.default_rng(2).normal(size=(7, 3))
    np.testing.assert_allclose(net(x).data, net.predict(x), atol=1e-14)


def test_mlp_rejects_bad_widths():
    with pytest.raises(ValueError):
        MLPSpec(2, (0,), 1)
    with pytest.raises(ValueError):
        MLPSpec(2, (4,), 1, "gelu")


def test_mlp_nonfinite_raises():
    net = MLP(MLPSpec(1, (4,), 1), rng=0)
    with pytest.raises(NonFiniteError):
        net(np.array([[np.inf]]))


def test_adam_first_step_is_lr_times_sign():
    p = Tensor(np.array([1.0, -1.0, 0.5]), requires_grad=True)
    opt = Adam([p], learning_rate=0.1)
    opt.step([np.array([2.0, -3.0, 0.0])])
    np.testing.assert_allclose(p.data, [0.9, -0.9, 0.5], atol=1e-7)


def test_adam_converges_on_quadratic():
    p = Tensor(np.array([5.0, -3.0]), requires_grad=True)
    opt = Adam([p], learning_rate=0.1)
    for _ in range(500):
        d = p - Tensor(np.array([1.0, 2.0]))
        opt.minimize((d * d).sum())
    np.testing.assert_allclose(p.data, [1.0, 2.0], atol=1e-3)


def test_adam_weight_decay_pulls_to_zero():
    p = Tensor(np.array([1.0]), requires_grad=True)
    opt = Adam([p], learning_rate=0.01, weight_decay=1.0)
    for _ in range(300):
        opt.step([np.zeros(1)])
    assert abs(p.data[0]) < 0.2


def test_adam_refuses_nonfinite_loss():
    p = Tensor(np.array([1.0]), requires_grad=True)
    with pytest.raises(NonFiniteError):
        Adam([p]).minimize((p * np.inf).sum())


def test_checkpoint_round_trip(tmp_path):
    nets = {"a": MLP(MLPSpec(2, (3,), 1), 0), "b": MLP(MLPSpec(1, (4, 4), 2, "tanh"), 1)}
    save_checkpoint(tmp_path / "m.ckpt", nets, {"note": 1})
    back, meta = load_checkpoint(tmp_path / "m.ckpt")
    assert meta == {"note": 1}
    for k in nets:
        np.testing.assert_array_equal(back[k].get_flat(), nets[k].get_flat())
        assert back[k].spec == nets[k].spec


def test_checkpoint_rejects_trailing_bytes_and_wrong_version(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, {"a": MLP(MLPSpec(1, (2,), 1), 0)})
    raw = path.read_bytes()
    path.write_bytes(raw + b"\0" * 8)
    with pytest.raises(ValueError):
        load_checkpoint(path)
    path.write_bytes(raw.replace(b"UOTFR-CKPT 1", b"UOTFR-CKPT 9", 1))
    with pytest.raises(ValueError):
        load_checkpoint(path)


def test_seed_streams_are_reproducible_and_distinct():
    a = [g.random() for g in seed_streams(5, 3)]
    b = [g.random() for g in seed_streams(5, 3)]
    assert a == b
    assert len(set(a)) == 3


@given(
    st.integers(1, 4),
    st.lists(st.integers(1, 6), min_size=1, max_size=2),
    st.integers(1, 3),
    st.sampled_from(["tanh", "silu"]),
    st.integers(0, 10_000),
)
def test_mlp_parameter_gradients_property(d_in, widths, d_out, act, seed):
    net = MLP(MLPSpec(d_in, tuple(widths), d_out, act), seed)
    x = np.random.default_rng(seed).normal(size=(5, d_in))
    flat = net.get_flat()

    def loss_of(v):
        net.set_flat(v)
        out = net(x)
        return (out * out).mean()

    grads = backward(loss_of(flat), net.params)
    g = np.concatenate([q.ravel() for q in grads])
    num = central_difference(lambda v: loss_of(v).item(), flat)
    net.set_flat(flat)
    assert max_rel_error(g, num, floor=1e-7) < 1e-4
