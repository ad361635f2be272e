import math

import numpy as np
import pytest

from htr.errors import InvalidArgumentError
from htr.sac import AgentNets, RlBatch, actor_loss, critic_loss, critic_target, soft_update
from htr.tensornet import Adam
from htr.tensornet.autodiff import Param

S, A, L = 2, 2, 3


def make_nets(width=8, seed=0, **kw):
    return AgentNets(S, A, L, (width, width), rng=np.random.default_rng(seed), last_layer_scale=None, **kw)


def make_batch(n=6, seed=1, z=None, done=False):
    rng = np.random.default_rng(seed)
    return RlBatch(
        states=rng.standard_normal((n, S)),
        actions=rng.uniform(-1, 1, (n, A)),
        rewards=rng.standard_normal(n),
        next_states=rng.standard_normal((n, S)),
        dones=np.full(n, done),
        z=rng.standard_normal(L) if z is None else z,
    )


def scalar_mlp(net, x):
    """Row-at-a-time forward pass with explicit loops (no tape, no batching)."""
    h = list(x)
    layers = net.layers
    for li, (W, b) in enumerate(layers):
        out = []
        for j in range(W.shape[1]):
            acc = b.data[j]
            for i in range(W.shape[0]):
                acc += h[i] * W.data[i, j]
            out.append(max(acc, 0.0) if li < len(layers) - 1 else acc)
        h = out
    return h


def scalar_squash(mean, log_std, xi):
    a, lp = [], 0.0
    for m, ls, e in zip(mean, log_std, xi):
        ls = min(max(ls, -20.0), 2.0)
        u = m + math.exp(ls) * e
        ai = math.tanh(u)
        lp += -0.5 * e * e - 0.5 * math.log(2 * math.pi) - ls - math.log(1 - ai * ai + 1e-6)
        a.append(ai)
    return a, lp


def test_targets_start_equal_to_critics():
    nets = make_nets()
    for c, t in ((nets.critic1, nets.target1), (nets.critic2, nets.target2)):
        for pc, pt in zip(c.params, t.params):
            assert np.array_equal(pc.data, pt.data)
            assert pc is not pt


@pytest.mark.parametrize("kw", [{"alpha": 0.0}, {"gamma": 1.0}, {"tau": 0.0}])
def test_hyperparameter_validation(kw):
    with pytest.raises(InvalidArgumentError):
        make_nets(**kw)


def test_critic_loss_gamma_zero_unit_reward_zero_q():
    nets = make_nets()
    nets.gamma = 0.0
    for net in (nets.critic1, nets.critic2):
        for p in net.params:
            p.data[...] = 0.0
    b = make_batch()
    b.rewards = np.ones(len(b))
    loss, _ = critic_loss(b, nets, np.random.default_rng(0))
    assert loss.item() == pytest.approx(1.0, abs=1e-15)


def test_done_masks_bootstrap():
    nets = make_nets()
    b = make_batch(done=True)
    y = critic_target(b, nets, np.random.default_rng(0))
    np.testing.assert_array_equal(y, b.rewards)


def test_critic_loss_matches_scalar_oracle():
    nets = make_nets(alpha=0.3)
    b = make_batch()
    xi = np.random.default_rng(7).standard_normal((len(b), A))
    loss, _ = critic_loss(b, nets, noise=xi)
    total = 0.0
    for i in range(len(b)):
        z = list(b.z)
        out = scalar_mlp(nets.actor, list(b.next_states[i]) + z)
        a2, lp = scalar_squash(out[:A], out[A:], xi[i])
        qin = list(b.next_states[i]) + a2 + z
        qn = min(scalar_mlp(nets.target1, qin)[0], scalar_mlp(nets.target2, qin)[0])
        y = b.rewards[i] + nets.gamma * (1 - b.dones[i]) * (qn - nets.alpha * lp)
        x = list(b.states[i]) + list(b.actions[i]) + z
        total += 0.5 * ((scalar_mlp(nets.critic1, x)[0] - y) ** 2 + (scalar_mlp(nets.critic2, x)[0] - y) ** 2)
    assert loss.item() == pytest.approx(total / len(b), abs=1e-10)


def test_actor_loss_matches_scalar_oracle():
    nets = make_nets(alpha=0.7)
    b = make_batch()
    xi = np.random.default_rng(3).standard_normal((len(b), A))
    loss, _ = actor_loss(b, nets, noise=xi)
    total = 0.0
    for i in range(len(b)):
        z = list(b.z)
        out = scalar_mlp(nets.actor, list(b.states[i]) + z)
        a, lp = scalar_squash(out[:A], out[A:], xi[i])
        x = list(b.states[i]) + a + z
        q = min(scalar_mlp(nets.critic1, x)[0], scalar_mlp(nets.critic2, x)[0])
        total += nets.alpha * lp - q
    assert loss.item() == pytest.approx(total / len(b), abs=1e-10)


def test_both_heads_share_target():
    nets = make_nets()
    b = make_batch()
    xi = np.random.default_rng(0).standard_normal((len(b), A))
    y1 = critic_target(b, nets, noise=xi)
    y2 = critic_target(b, nets, noise=xi)
    np.testing.assert_array_equal(y1, y2)


def test_empty_batch_rejected():
    nets = make_nets()
    b = make_batch(n=0)
    with pytest.raises(InvalidArgumentError):
        critic_loss(b, nets, np.random.default_rng(0))
    with pytest.raises(InvalidArgumentError):
        actor_loss(b, nets, np.random.default_rng(0))


def _all_params(nets):
    return [p for net in nets.networks.values() for p in net.params]


def test_detachment():
    nets = make_nets()
    b = make_batch()
    for p in _all_params(nets):
        p.zero_grad()
    actor_loss(b, nets, np.random.default_rng(0))[0].backward()
    assert any(np.any(p.grad != 0) for p in nets.actor.params)
    for net in (nets.critic1, nets.critic2, nets.target1, nets.target2):
        assert all(np.all(p.grad == 0) for p in net.params)

    for p in _all_params(nets):
        p.zero_grad()
    critic_loss(b, nets, np.random.default_rng(0))[0].backward()
    assert all(np.all(p.grad == 0) for p in nets.actor.params)
    assert all(np.all(p.grad == 0) for p in nets.target1.params)
    assert any(np.any(p.grad != 0) for p in nets.critic1.params)


def test_critic_loss_passes_gradient_to_z():
    nets = make_nets()
    z = Param("z", np.random.default_rng(0).standard_normal(L))
    b = make_batch(z=z)
    critic_loss(b, nets, np.random.default_rng(0))[0].backward()
    assert np.any(z.grad != 0)


def test_actor_loss_does_not_touch_z():
    nets = make_nets()
    z = Param("z", np.random.default_rng(0).standard_normal(L))
    b = make_batch(z=z)
    actor_loss(b, nets, np.random.default_rng(0))[0].backward()
    assert np.all(z.grad == 0)


def fd(f, p, eps=1e-5):
    g = np.zeros_like(p.data)
    for i in np.ndindex(p.shape):
        old = p.data[i]
        p.data[i] = old + eps
        hi = f()
        p.data[i] = old - eps
        lo = f()
        p.data[i] = old
        g[i] = (hi - lo) / (2 * eps)
    return g


def rel_err(a, b):
    return float(np.max(np.abs(a - b) / np.maximum(1e-8, np.abs(a) + np.abs(b))))


@pytest.mark.parametrize("which", ["critic", "actor"])
def test_loss_gradients_fd(which):
    nets = make_nets(width=6, alpha=0.4)
    b = make_batch(n=5)
    xi = np.random.default_rng(8).standard_normal((len(b), A))
    fn = critic_loss if which == "critic" else actor_loss
    trained = nets.critic1.params + nets.critic2.params if which == "critic" else nets.actor.params

    def value():
        return fn(b, nets, noise=xi)[0].item()

    for p in _all_params(nets):
        p.zero_grad()
    fn(b, nets, noise=xi)[0].backward()
    for p in trained:
        assert rel_err(p.grad, fd(value, p)) < 1e-4, p.name


def test_actor_alpha_zero_constant_critics_zero_grad():
    nets = make_nets(alpha=0.2)
    nets.alpha = 0.0
    for net in (nets.critic1, nets.critic2):
        for p in net.params[:-1]:
            p.data[...] = 0.0
        net.params[-1].data[...] = 1.5
    b = make_batch()
    loss, _ = actor_loss(b, nets, np.random.default_rng(0))
    assert loss.item() == pytest.approx(-1.5)
    loss.backward()
    assert all(np.allclose(p.grad, 0.0) for p in nets.actor.params)


def test_large_alpha_raises_entropy():
    nets = make_nets(alpha=0.2)
    nets.alpha = 5.0
    # start narrow: the squashed entropy peaks near log_std = -0.1
    nets.actor.params[-1].data[A:] = -2.0
    b = make_batch(n=32)
    opt = Adam(nets.actor.params, lr=1e-3)
    rng = np.random.default_rng(0)
    log_stds = []
    for _ in range(100):
        opt.zero_grad()
        loss, info = actor_loss(b, nets, rng)
        loss.backward()
        opt.step()
        log_stds.append(info["log_std"])
    assert log_stds[-1] > log_stds[0]
    # trend over blocks of 10 is increasing
    blocks = np.array(log_stds).reshape(10, 10).mean(axis=1)
    assert np.all(np.diff(blocks) > 0)


def test_soft_update_extremes():
    nets = make_nets()
    for p in nets.critic1.params + nets.critic2.params:
        p.data += 1.0
    before = [p.data.copy() for p in nets.target1.params]
    soft_update(nets, tau=0.0)
    for b0, p in zip(before, nets.target1.params):
        assert np.array_equal(b0, p.data)
    soft_update(nets, tau=1.0)
    for pc, pt in zip(nets.critic2.params, nets.target2.params):
        assert np.array_equal(pc.data, pt.data)


def test_soft_update_geometric_decay():
    nets = make_nets(tau=0.005)
    for p in nets.critic1.params:
        p.data += 1.0
    gaps = []
    for _ in range(50):
        gaps.append(sum(np.abs(pc.data - pt.data).sum() for pc, pt in zip(nets.critic1.params, nets.target1.params)))
        soft_update(nets)
    ratios = np.array(gaps[1:]) / np.array(gaps[:-1])
    np.testing.assert_allclose(ratios, 0.995, rtol=1e-9)


def test_bandit_critics_converge_to_reward():
    r = 0.7
    nets = AgentNets(1, 1, 1, (16, 16), rng=np.random.default_rng(0))
    nets.gamma = 0.0
    b = RlBatch(
        states=np.zeros((4, 1)), actions=np.zeros((4, 1)), rewards=np.full(4, r),
        next_states=np.zeros((4, 1)), dones=np.zeros(4, dtype=bool), z=np.zeros(1),
    )
    opt = Adam(nets.critic1.params + nets.critic2.params, lr=3e-3)
    rng = np.random.default_rng(0)
    for _ in range(2000):
        opt.zero_grad()
        critic_loss(b, nets, rng)[0].backward()
        opt.step()
    x = np.zeros((1, 3))
    assert abs(nets.critic1.predict(x)[0, 0] - r) < 1e-3
    assert abs(nets.critic2.predict(x)[0, 0] - r) < 1e-3


def test_segmented_loss_is_sum_of_per_task_means():
    nets = make_nets()
    parts = [make_batch(n=4, seed=s) for s in (1, 2, 3)]
    xi = np.random.default_rng(0).standard_normal((12, A))
    joint = RlBatch(
        states=np.concatenate([p.states for p in parts]),
        actions=np.concatenate([p.actions for p in parts]),
        rewards=np.concatenate([p.rewards for p in parts]),
        next_states=np.concatenate([p.next_states for p in parts]),
        dones=np.concatenate([p.dones for p in parts]),
        z=np.stack([p.z for p in parts]),
        segments=3,
    )
    for fn in (critic_loss, actor_loss):
        total = fn(joint, nets, noise=xi)[0].item()
        each = sum(fn(p, nets, noise=xi[4 * i : 4 * i + 4])[0].item() for i, p in enumerate(parts))
        assert total == pytest.approx(each, abs=1e-10)


def test_act_shapes_and_bounds():
    nets = make_nets()
    rng = np.random.default_rng(0)
    a = nets.act(np.zeros((5, S)), np.zeros((5, L)), rng)
    assert a.shape == (5, A)
    assert np.all(np.abs(a) < 1)
    d1 = nets.act(np.ones((1, S)), np.ones((1, L)), rng, deterministic=True)
    d2 = nets.act(np.ones((1, S)), np.ones((1, L)), rng, deterministic=True)
    assert np.array_equal(d1, d2)
