import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from elasticprune import dqn
from elasticprune.dqn import (
    DivergenceError,
    DqnConfig,
    QNetwork,
    ReplayBuffer,
    bellman_target,
    bellman_targets,
    forward,
    greedy_action,
    load_checkpoint,
    save_checkpoint,
    select_action,
    td_loss_and_grads,
    td_update,
    train,
)

from oracles import ChainEnv


def mse(net, S, A, Y):
    q = forward(net, S)
    return float(np.mean((q[np.arange(len(A)), A] - Y) ** 2))


def away_from_kinks(net, S, margin=1e-3):
    Z = np.asarray(S) @ net.W1 + net.b1
    return np.all(np.abs(Z) > margin)


def sample_case(rng, state_dim=6, n_actions=8, hidden=16, batch=4):
    while True:
        net = QNetwork.init(state_dim, n_actions, hidden, rng)
        S = rng.normal(size=(batch, state_dim))
        if away_from_kinks(net, S):
            A = rng.integers(0, n_actions, size=batch)
            Y = rng.normal(size=batch)
            return net, S, A, Y


def test_param_count_default_width():
    net = QNetwork.init(6, 64, DqnConfig().hidden, np.random.default_rng(0))
    assert net.n_params == 6 * 256 + 256 + 256 * 64 + 64 == 18_240


def test_bellman_target_values():
    tgt = QNetwork.zeros(2, 3, 4)
    tgt.b2[:] = [1.0, 3.0, 2.0]
    s2 = np.zeros(2)
    assert bellman_target(0.5, s2, False, tgt, 0.9, [True, True, True]) == pytest.approx(3.2)
    assert bellman_target(0.5, s2, False, tgt, 0.9, [True, False, True]) == pytest.approx(2.3)
    assert bellman_target(0.5, s2, True, tgt, 0.9, [False, False, False]) == 0.5
    with pytest.raises(ValueError):
        bellman_target(0.5, s2, False, tgt, 0.9, [False, False, False])
    Y = bellman_targets(np.array([0.5, 0.5]), np.zeros((2, 2)), np.array([False, True]),
                        np.array([[True, False, True], [False, False, False]]), tgt, 0.9)
    np.testing.assert_allclose(Y, [2.3, 0.5])


def test_gradients_match_finite_differences():
    rng = np.random.default_rng(0)
    h = 1e-6
    for _ in range(25):
        net, S, A, Y = sample_case(rng)
        loss, *grads = td_loss_and_grads(net, S, A, Y)
        assert loss == pytest.approx(mse(net, S, A, Y), rel=1e-12)
        for p, g in zip(net.params(), grads):
            fd = np.zeros_like(p)
            for idx in np.ndindex(p.shape):
                old = p[idx]
                p[idx] = old + h
                up = mse(net, S, A, Y)
                p[idx] = old - h
                down = mse(net, S, A, Y)
                p[idx] = old
                fd[idx] = (up - down) / (2 * h)
            denom = max(np.linalg.norm(fd), np.linalg.norm(g), 1e-12)
            assert np.linalg.norm(fd - g) / denom < 1e-5


def test_td_update_returns_new_net_and_reduces_loss():
    rng = np.random.default_rng(1)
    net = QNetwork.init(3, 2, 8, rng)
    tgt = net.copy()
    S = rng.normal(size=(16, 3))
    batch = (S, rng.integers(0, 2, 16), rng.normal(size=16), S, np.ones(16, bool), np.zeros((16, 2), bool))
    before = net.flat().copy()
    new = td_update(net, batch, tgt, 0.9, 0.05)
    np.testing.assert_array_equal(net.flat(), before)
    Y = batch[2]
    assert mse(new, S, batch[1], Y) < mse(net, S, batch[1], Y)


def test_divergence_is_reported():
    net = QNetwork.zeros(2, 2, 2)
    net.W1[:] = 1.0
    net.W2[0, 0] = np.inf
    S = np.ones((1, 2))
    with pytest.raises(DivergenceError, match="non-finite"), np.errstate(invalid="ignore"):
        td_update(net, (S, [0], [1.0], S, [True], [[False, False]]), net, 0.9, 0.1)


def test_replay_ring_overwrites_oldest():
    buf = ReplayBuffer(3, 1, 2)
    for k in range(5):
        buf.push([k], k % 2, float(k), [k + 1], False, [True, True])
    assert len(buf) == 3 and buf.pushed == 5
    assert sorted(buf.R.tolist()) == [2.0, 3.0, 4.0]
    assert [buf.R[i] for i in buf.latest(3)] == [2.0, 3.0, 4.0]
    S, A, R, S2, T, L2 = buf.sample(3, np.random.default_rng(0))
    assert set(R.tolist()) <= {2.0, 3.0, 4.0}
    np.testing.assert_array_equal(S2[:, 0], S[:, 0] + 1)
    with pytest.raises(ValueError):
        buf.sample(4, np.random.default_rng(0))
    with pytest.raises(ValueError):
        buf.push([0], 2, 0.0, [0], False, [True, True])


def test_epsilon_schedule():
    cfg = DqnConfig(eps_start=1.0, eps_end=0.1, eps_fraction=0.5, total_steps=1000)
    assert cfg.epsilon(0) == 1.0
    assert cfg.epsilon(250) == pytest.approx(0.55)
    assert cfg.epsilon(500) == pytest.approx(0.1)
    assert cfg.epsilon(10_000) == pytest.approx(0.1)


@settings(max_examples=100, deadline=None)
@given(
    bits=st.lists(st.booleans(), min_size=5, max_size=5).filter(any),
    eps=st.floats(0.0, 1.0),
    seed=st.integers(0, 10**6),
)
def test_actions_are_always_legal(bits, eps, seed):
    rng = np.random.default_rng(seed)
    net = QNetwork.init(3, 5, 4, rng)
    s = rng.normal(size=3)
    a = select_action(net, s, eps, np.array(bits), rng)
    assert bits[a]


def test_greedy_ties_lowest_index():
    net = QNetwork.zeros(2, 4, 3)
    assert greedy_action(net, np.zeros(2), [False, True, True, True]) == 1


def test_checkpoint_round_trip(tmp_path):
    net = QNetwork.init(6, 10, 7, np.random.default_rng(3))
    p = tmp_path / "q.bin"
    save_checkpoint(net, p, seed=42, config_hash="abc")
    back, meta = load_checkpoint(p)
    np.testing.assert_array_equal(back.flat(), net.flat())
    assert meta["seed"] == 42 and meta["config_hash"] == "abc"
    assert p.read_bytes()[:4] == b"EPQN"
    p.write_bytes(b"XXXX" + p.read_bytes()[4:])
    with pytest.raises(ValueError, match="not a policy checkpoint"):
        load_checkpoint(p)
    with pytest.raises(FileNotFoundError, match="train"):
        load_checkpoint(tmp_path / "missing.bin")


def chain_run(seed, steps, gamma=0.9, **kw):
    cfg = DqnConfig(gamma=gamma, total_steps=steps, episodes=10**6, max_steps=50, hidden=32,
                    batch_size=32, target_every=100, optimizer="adam", lr=1e-3, seed=seed, **kw)
    return train(lambda start: ChainEnv(start), lambda rng: int(rng.integers(3)), cfg)


def test_training_is_deterministic():
    a = chain_run(5, 600)
    b = chain_run(5, 600)
    np.testing.assert_array_equal(a.net.flat(), b.net.flat())
    assert [r.ret for r in a.curve] == [r.ret for r in b.curve]


def test_bandit_learns_immediate_rewards():
    # gamma = 0: Q(s, a) regresses onto the one-step reward
    res = chain_run(0, 8000, gamma=0.0)
    env = ChainEnv()
    for s in range(3):
        q = forward(res.net, env.features(s))
        for a in range(2):
            _, r, _ = ChainEnv.transition(s, a)
            assert q[a] == pytest.approx(r, abs=0.02)


def test_sgd_step_on_known_gradient():
    net = QNetwork.zeros(1, 1, 1)
    net.W1[:] = 1.0
    net.W2[:] = 1.0
    S = np.array([[2.0]])
    # Q = relu(2) = 2, target 0 -> loss 4, dL/dQ = 4, dL/dW2 = 4*2 = 8
    loss, gW1, gb1, gW2, gb2 = td_loss_and_grads(net, S, np.array([0]), np.array([0.0]))
    assert loss == 4.0
    assert gW2[0, 0] == 8.0 and gb2[0] == 4.0 and gW1[0, 0] == 8.0 and gb1[0] == 4.0
    dqn.SGD(0.1).apply(net, [gW1, gb1, gW2, gb2])
    assert net.W2[0, 0] == pytest.approx(0.2)


def test_uniform_exploration_over_legal():
    rng = np.random.default_rng(0)
    net = QNetwork.init(3, 6, 4, rng)
    legal = np.array([True, False, True, True, False, True])
    counts = np.zeros(6)
    s = np.zeros(3)
    for _ in range(100_000):
        counts[select_action(net, s, 1.0, legal, rng)] += 1
    assert counts[~legal].sum() == 0
    obs = counts[legal]
    expected = obs.sum() / obs.size
    chi2 = float(((obs - expected) ** 2 / expected).sum())
    assert chi2 < 16.27  # chi-square, 3 degrees of freedom, p = 0.001


def test_greedy_when_epsilon_zero():
    net = QNetwork.zeros(2, 4, 3)
    net.b2[:] = [0.1, 0.9, 0.5, 0.7]
    rng = np.random.default_rng(0)
    assert {select_action(net, np.zeros(2), 0.0, [True] * 4, rng) for _ in range(50)} == {1}
    assert select_action(net, np.zeros(2), 0.0, [True, False, True, True], rng) == 3


def test_zero_td_error_leaves_params_unchanged():
    rng = np.random.default_rng(2)
    net = QNetwork.init(3, 4, 8, rng)
    S = rng.normal(size=(5, 3))
    A = rng.integers(0, 4, 5)
    R = forward(net, S)[np.arange(5), A]
    new = td_update(net, (S, A, R, S, np.ones(5, bool), np.zeros((5, 4), bool)), net, 0.9, 0.1)
    np.testing.assert_array_equal(new.flat(), net.flat())


def test_target_is_stale_between_refreshes():
    rng = np.random.default_rng(3)
    net = QNetwork.init(3, 4, 8, rng)
    target = net.copy()
    s2 = rng.normal(size=3)
    y0 = bellman_target(0.2, s2, False, target, 0.9, [True] * 4)
    S = rng.normal(size=(8, 3))
    batch = (S, rng.integers(0, 4, 8), rng.normal(size=8), S, np.zeros(8, bool), np.ones((8, 4), bool))
    for _ in range(5):
        net = td_update(net, batch, target, 0.9, 0.1)
    assert bellman_target(0.2, s2, False, target, 0.9, [True] * 4) == y0
    assert not np.array_equal(net.flat(), target.flat())
