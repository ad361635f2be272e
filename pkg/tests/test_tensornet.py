import math
import tempfile
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from htr.errors import IllegalStateError, InvalidArgumentError, NonFiniteError
from htr.tensornet import Adam, DiagGaussianHead, Mlp, MlpSpec, Param, Tensor, load_checkpoint, sample_gaussian_tanh, save_checkpoint
from htr.tensornet import autodiff as ad
from htr.tensornet.distributions import sample_gaussian_tanh_np


def fd_grad(f, p: Param, eps=1e-5):
    g = np.zeros_like(p.data)
    it = np.nditer(p.data, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = p.data[i]
        p.data[i] = old + eps
        hi = f()
        p.data[i] = old - eps
        lo = f()
        p.data[i] = old
        g[i] = (hi - lo) / (2 * eps)
    return g


def max_rel_err(a, b):
    return float(np.max(np.abs(a - b) / np.maximum(1e-8, np.abs(a) + np.abs(b))))


def hand_forward(params, x, act):
    h = x
    for i in range(0, len(params), 2):
        h = h @ params[i].data + params[i + 1].data
        if i < len(params) - 2:
            h = act(h)
    return h


# -- forward -----------------------------------------------------------------


def test_zero_net_outputs_zero():
    net = Mlp(MlpSpec(3, 2, (4,)), np.random.default_rng(0))
    for p in net.params:
        p.data[...] = 0.0
    assert np.all(net.predict(np.ones(3)) == 0.0)


def test_identity_single_layer():
    net = Mlp(MlpSpec(3, 3, ()), np.random.default_rng(0))
    net.params[0].data[...] = np.eye(3)
    x = np.array([0.5, -1.0, 2.0])
    np.testing.assert_array_equal(net.predict(x), x)


@pytest.mark.parametrize("act", ["relu", "tanh"])
def test_forward_matches_hand_rolled(act):
    rng = np.random.default_rng(11)
    net = Mlp(MlpSpec(2, 1, (4,), act), rng)
    for p in net.params:
        p.data[...] = rng.standard_normal(p.shape)
    x = rng.standard_normal((5, 2))
    f = (lambda h: np.maximum(h, 0)) if act == "relu" else np.tanh
    ref = hand_forward(net.params, x, f)
    np.testing.assert_allclose(net.predict(x), ref, atol=1e-12)
    np.testing.assert_allclose(net(x).data, ref, atol=1e-12)


def test_forward_dimension_mismatch():
    net = Mlp(MlpSpec(3, 1, (4,)), np.random.default_rng(0))
    with pytest.raises(InvalidArgumentError):
        net.predict(np.ones(2))
    with pytest.raises(InvalidArgumentError):
        net(np.ones((1, 4)))


@given(st.integers(1, 9), st.integers(1, 9), st.lists(st.integers(1, 12), max_size=4))
def test_param_count_closed_form(i, o, hidden):
    spec = MlpSpec(i, o, tuple(hidden))
    net = Mlp(spec, np.random.default_rng(0))
    w = [i, *hidden, o]
    assert spec.param_count() == sum(w[k] * w[k + 1] + w[k + 1] for k in range(len(w) - 1))
    assert sum(p.data.size for p in net.params) == spec.param_count()


def test_mlp_spec_rejects_zero_width():
    with pytest.raises(InvalidArgumentError):
        MlpSpec(2, 1, (0,))


def test_init_bounds_and_zero_bias():
    net = Mlp(MlpSpec(16, 4, (8,)), np.random.default_rng(0))
    W0, b0, W1, b1 = net.params
    assert np.all(np.abs(W0.data) <= 1 / math.sqrt(16))
    assert np.all(np.abs(W1.data) <= 1 / math.sqrt(8))
    assert np.all(b0.data == 0) and np.all(b1.data == 0)


# -- backward ----------------------------------------------------------------


def test_sum_of_params_grad_is_one():
    p = Param("p", np.arange(6.0).reshape(2, 3))
    p.sum().backward()
    np.testing.assert_array_equal(p.grad, np.ones((2, 3)))


def test_disconnected_param_gets_zero():
    p = Param("p", np.ones(3))
    q = Param("q", np.ones(3))
    (p * 2.0).sum().backward()
    assert np.all(q.grad == 0)


def test_backward_without_recorded_ops():
    with pytest.raises(IllegalStateError):
        Tensor(np.ones(1)).backward()


def test_backward_needs_scalar():
    p = Param("p", np.ones(3))
    with pytest.raises(InvalidArgumentError):
        (p * 2.0).backward()


def test_linear_layer_square_norm_fd():
    rng = np.random.default_rng(0)
    net = Mlp(MlpSpec(3, 4, ()), rng)
    x = rng.standard_normal((6, 3))

    def loss():
        return float((net.predict(x) ** 2).sum())

    net.zero_grad()
    (net(x) ** 2).sum().backward()
    for p in net.params:
        assert max_rel_err(p.grad, fd_grad(loss, p)) < 1e-4


OPS = {
    "tanh": lambda t: ad.tanh(t),
    "relu": lambda t: ad.relu(t),
    "exp": lambda t: ad.exp(t),
    "log": lambda t: ad.log(ad.exp(t) + 1.0),
    "sqrt": lambda t: ad.sqrt(t * t + 1.0),
    "softplus": lambda t: ad.softplus(t),
    "recip": lambda t: ad.reciprocal(t * t + 0.5),
    "pow": lambda t: t**3,
    "div": lambda t: t / (t * t + 2.0),
    "rsub": lambda t: 1.0 - t,
    "clip": lambda t: ad.clip(t, -0.5, 0.5),
    "minimum": lambda t: ad.minimum(t, t * 0.5 + 0.1),
    "concat": lambda t: ad.concat([t, t * 2.0], axis=1),
    "getitem": lambda t: t[:, 1:],
    "fancy": lambda t: t[np.array([0, 0, 2])],
    "repeat": lambda t: ad.repeat_rows(t, 3),
    "take": lambda t: ad.take_rows(t, np.array([2, 0, 0, 1])),
    "mean": lambda t: t.mean(axis=0, keepdims=True),
    "reshape": lambda t: t.reshape(-1),
    "broadcast": lambda t: t + t.sum(axis=1, keepdims=True),
    "matmul": lambda t: t @ np.array([[1.0, -2.0], [0.5, 0.3], [0.1, 0.2]]),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_primitive_gradients_fd(name):
    rng = np.random.default_rng(5)
    p = Param("p", rng.standard_normal((3, 3)) * 0.9)
    w = rng.standard_normal(OPS[name](Tensor(p.data)).shape)

    def loss():
        return float((OPS[name](Tensor(p.data)).data * w).sum())

    (OPS[name](p) * w).sum().backward()
    assert max_rel_err(p.grad, fd_grad(loss, p)) < 1e-4


def test_shared_subexpression_accumulates():
    p = Param("p", np.array([1.5, -0.5]))
    y = p * p
    (y + y * 3.0).sum().backward()
    np.testing.assert_allclose(p.grad, 8.0 * p.data)


def test_ndarray_left_operand_dispatches_to_tensor():
    p = Param("p", np.ones(2))
    out = np.array([1.0, 2.0]) - p
    assert isinstance(out, Tensor)
    out.sum().backward()
    np.testing.assert_array_equal(p.grad, [-1.0, -1.0])


def test_matmul_shape_checks():
    with pytest.raises(InvalidArgumentError):
        ad.matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(InvalidArgumentError):
        ad.matmul(np.ones(3), np.ones((3, 1)))


# -- Adam ----------------------------------------------------------------------


def test_adam_zero_grad_leaves_params():
    p = Param("p", np.array([1.0, -2.0]))
    opt = Adam([p], lr=0.1)
    opt.step()
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


@pytest.mark.parametrize("g", [0.3, -7.0, 1e-3])
def test_adam_first_step_moves_by_lr(g):
    p = Param("p", np.array([1.0]))
    opt = Adam([p], lr=0.01)
    p.grad[...] = g
    opt.step()
    # m̂ = g, v̂ = g², so the step is lr * g / (|g| + eps)
    expected = 1.0 - 0.01 * g / (abs(g) + 1e-8)
    assert p.data[0] == pytest.approx(expected, rel=1e-12)


def test_adam_matches_reference_over_steps():
    rng = np.random.default_rng(2)
    grads = rng.standard_normal((10, 4))
    p = Param("p", np.zeros(4))
    opt = Adam([p], lr=1e-2)
    m = np.zeros(4)
    v = np.zeros(4)
    x = np.zeros(4)
    for t, g in enumerate(grads, 1):
        p.grad[...] = g
        opt.step()
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        x = x - 1e-2 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    np.testing.assert_allclose(p.data, x, rtol=1e-12, atol=1e-15)
    assert opt.t == 10


def test_adam_identical_inputs_identical_updates():
    a, b = Param("a", np.ones(3)), Param("b", np.ones(3))
    oa, ob = Adam([a]), Adam([b])
    for g in ([1.0, -2.0, 0.5], [0.1, 0.1, -3.0]):
        a.grad[...] = g
        b.grad[...] = g
        oa.step()
        ob.step()
    assert np.array_equal(a.data, b.data)


def test_adam_rejects_non_finite_grad():
    p = Param("p", np.ones(2))
    p.grad[0] = np.nan
    with pytest.raises(NonFiniteError):
        Adam([p]).step()


def test_optimisation_converges_on_quadratic():
    p = Param("p", np.array([3.0, -4.0]))
    opt = Adam([p], lr=0.05)
    for _ in range(2000):
        opt.zero_grad()
        ((p - np.array([1.0, 2.0])) ** 2).sum().backward()
        opt.step()
    np.testing.assert_allclose(p.data, [1.0, 2.0], atol=1e-3)


# -- tanh Gaussian ---------------------------------------------------------------


def test_gaussian_at_mode():
    log_std = np.array([-0.3, 0.4])
    head = DiagGaussianHead(Tensor(np.zeros(2)), Tensor(log_std))
    a, logp = sample_gaussian_tanh(head, noise=np.zeros(2))
    np.testing.assert_array_equal(a.data, [0.0, 0.0])
    expected = sum(-0.5 * math.log(2 * math.pi) - ls for ls in log_std) - 2 * math.log(1 + 1e-6)
    assert logp.item() == pytest.approx(expected, abs=1e-12)


def test_vanishing_std_is_deterministic():
    mean = np.array([0.3, -1.2])
    head = DiagGaussianHead.from_output(Tensor(np.concatenate([mean, [-50.0, -50.0]])))
    a, _ = sample_gaussian_tanh(head, rng=np.random.default_rng(0))
    np.testing.assert_allclose(a.data, np.tanh(mean), atol=1e-8)


def test_log_std_is_clamped_and_log_prob_finite():
    out = Tensor(np.array([[0.0, 0.0, 100.0, -100.0], [50.0, -50.0, 0.0, 0.0]]))
    head = DiagGaussianHead.from_output(out)
    np.testing.assert_array_equal(head.log_std.data[0], [2.0, -20.0])
    _, logp = sample_gaussian_tanh(head, rng=np.random.default_rng(0))
    assert np.all(np.isfinite(logp.data))


def test_pre_tanh_samples_have_requested_mean():
    rng = np.random.default_rng(4)
    n = 100_000
    mean, log_std = 0.4, -0.5
    head = DiagGaussianHead(Tensor(np.full((n, 1), mean)), Tensor(np.full((n, 1), log_std)))
    a, _ = sample_gaussian_tanh(head, rng=rng)
    pre = np.arctanh(np.clip(a.data, -1 + 1e-15, 1 - 1e-15))
    assert abs(pre.mean() - mean) < 3 * math.exp(log_std) / math.sqrt(n)


def test_numpy_sampler_agrees_with_tracked():
    rng = np.random.default_rng(9)
    mean, log_std, xi = rng.standard_normal((3, 4, 2))
    log_std = np.clip(log_std, -1.5, 1.5)
    a1, lp1 = sample_gaussian_tanh(DiagGaussianHead(Tensor(mean), Tensor(log_std)), noise=xi)
    a2, lp2 = sample_gaussian_tanh_np(mean, log_std, noise=xi)
    np.testing.assert_array_equal(a1.data, a2)
    np.testing.assert_allclose(lp1.data, lp2, rtol=1e-14)


def test_sampler_gradient_fd():
    rng = np.random.default_rng(1)
    p = Param("p", rng.standard_normal((3, 4)) * 0.5)
    xi = rng.standard_normal((3, 2))

    def f(t):
        a, lp = sample_gaussian_tanh(DiagGaussianHead.from_output(t), noise=xi)
        return (a * np.array([1.0, -2.0])).sum() + lp.sum()

    f(p).backward()
    num = fd_grad(lambda: float(f(Tensor(p.data)).data), p)
    assert max_rel_err(p.grad, num) < 1e-4


# -- checkpoints ---------------------------------------------------------------


@settings(max_examples=25, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 3), st.integers(1, 4)), min_size=1, max_size=5), st.integers(0, 1000))
def test_checkpoint_round_trip_bit_exact(shapes, seed):
    rng = np.random.default_rng(seed)
    tensors = {f"t{i}": rng.standard_normal((a, b)) * 10.0 ** rng.integers(-300, 300) for i, (a, b) in enumerate(shapes)}
    tensors["scalar"] = np.array(np.pi)
    with tempfile.TemporaryDirectory() as d:
        path = Path(d) / "x.ckpt"
        save_checkpoint(path, tensors)
        back = load_checkpoint(path)
    assert list(back) == list(tensors)
    for k in tensors:
        assert back[k].shape == tensors[k].shape
        assert back[k].tobytes() == np.asarray(tensors[k], order="C").tobytes()


def test_checkpoint_rejects_foreign_file(tmp_path):
    path = tmp_path / "bad"
    path.write_bytes(b"not a checkpoint")
    with pytest.raises(InvalidArgumentError):
        load_checkpoint(path)
