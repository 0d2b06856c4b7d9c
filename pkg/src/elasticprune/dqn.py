"""Deep Q-learning with a one-hidden-layer ReLU network and hand-written gradients.

The network maps a state vector to one Q-value per block. Exploration is
epsilon-greedy over the legal (still retained) blocks, transitions go into a
uniform replay ring, and each environment step performs one gradient step on
the mean squared TD error against a periodically refreshed target network.

Environments used with :func:`train` expose ``state_dim``, ``n_actions``,
``reset() -> state``, ``legal_mask() -> bool array`` and
``step(action) -> (next_state, reward, done, ...)``.
"""

from __future__ import annotations

import csv
import hashlib
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import kernels

CHECKPOINT_MAGIC = b"EPQN"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<4sIIIIQ64s")


class DivergenceError(FloatingPointError):
    pass


@dataclass
class QNetwork:
    W1: np.ndarray  # (state_dim, hidden)
    b1: np.ndarray
    W2: np.ndarray  # (hidden, n_actions)
    b2: np.ndarray

    @classmethod
    def init(cls, state_dim: int, n_actions: int, hidden: int, rng: np.random.Generator) -> "QNetwork":
        lim1 = 1.0 / np.sqrt(state_dim)
        lim2 = 1.0 / np.sqrt(hidden)
        return cls(
            rng.uniform(-lim1, lim1, size=(state_dim, hidden)),
            rng.uniform(-lim1, lim1, size=hidden),
            rng.uniform(-lim2, lim2, size=(hidden, n_actions)),
            rng.uniform(-lim2, lim2, size=n_actions),
        )

    @classmethod
    def zeros(cls, state_dim: int, n_actions: int, hidden: int) -> "QNetwork":
        return cls(
            np.zeros((state_dim, hidden)), np.zeros(hidden), np.zeros((hidden, n_actions)), np.zeros(n_actions)
        )

    @property
    def state_dim(self) -> int:
        return self.W1.shape[0]

    @property
    def hidden(self) -> int:
        return self.W1.shape[1]

    @property
    def n_actions(self) -> int:
        return self.W2.shape[1]

    @property
    def n_params(self) -> int:
        return self.W1.size + self.b1.size + self.W2.size + self.b2.size

    def params(self):
        return (self.W1, self.b1, self.W2, self.b2)

    def copy(self) -> "QNetwork":
        return QNetwork(*(p.copy() for p in self.params()))

    def flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params()])

    @classmethod
    def from_flat(cls, flat, state_dim: int, n_actions: int, hidden: int) -> "QNetwork":
        flat = np.asarray(flat, dtype=np.float64)
        shapes = [(state_dim, hidden), (hidden,), (hidden, n_actions), (n_actions,)]
        out, pos = [], 0
        for shape in shapes:
            n = int(np.prod(shape))
            out.append(flat[pos : pos + n].reshape(shape).copy())
            pos += n
        if pos != flat.size:
            raise ValueError(f"expected {pos} parameters, got {flat.size}")
        return cls(*out)


def forward(net: QNetwork, s) -> np.ndarray:
    S = np.asarray(s, dtype=np.float64)
    q = kernels.mlp_forward(net.W1, net.b1, net.W2, net.b2, np.ascontiguousarray(S.reshape(-1, net.state_dim)))
    return q[0] if S.ndim == 1 else q


def bellman_target(r, s_next, terminal, target: QNetwork, gamma: float, legal_mask) -> float:
    if terminal:
        return float(r)
    legal = np.asarray(legal_mask, dtype=bool)
    if not legal.any():
        raise ValueError("non-terminal next state has no legal actions")
    q = forward(target, s_next)
    return float(r) + gamma * float(np.max(q[legal]))


def bellman_targets(R, S2, T, L2, target: QNetwork, gamma: float) -> np.ndarray:
    """Vectorised :func:`bellman_target` over a minibatch."""
    live = ~T
    if np.any(live & ~L2.any(axis=1)):
        raise ValueError("non-terminal next state has no legal actions")
    Y = R.astype(np.float64).copy()
    if gamma != 0.0 and live.any():
        Q2 = kernels.mlp_forward(target.W1, target.b1, target.W2, target.b2, np.ascontiguousarray(S2[live]))
        Y[live] += gamma * kernels.masked_row_max(Q2, np.ascontiguousarray(L2[live]))
    return Y


def td_loss_and_grads(net: QNetwork, S, A, Y):
    return kernels.td_loss_grads(
        net.W1,
        net.b1,
        net.W2,
        net.b2,
        np.ascontiguousarray(S, dtype=np.float64),
        np.ascontiguousarray(A, dtype=np.int64),
        np.ascontiguousarray(Y, dtype=np.float64),
    )


def _check_finite(loss, grads):
    if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads):
        norms = [float(np.linalg.norm(g)) for g in grads]
        raise DivergenceError(f"non-finite TD update: loss={loss}, grad norms (W1, b1, W2, b2)={norms}")


class SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def apply(self, net: QNetwork, grads) -> None:
        for p, g in zip(net.params(), grads):
            p -= self.lr * g


class Adam:
    def __init__(self, lr: float, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.t = 0
        self.m = self.v = None

    def apply(self, net: QNetwork, grads) -> None:
        if self.m is None:
            self.m = [np.zeros_like(g) for g in grads]
            self.v = [np.zeros_like(g) for g in grads]
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, g, m, v in zip(net.params(), grads, self.m, self.v):
            kernels.adam_update(p, g, m, v, self.lr, self.b1, self.b2, c1, c2, self.eps)


def td_update(net: QNetwork, batch, target: QNetwork, gamma: float, lr: float) -> QNetwork:
    """One SGD step on the mean squared TD error; returns updated copy of ``net``."""
    S, A, R, S2, T, L2 = batch
    if len(A) == 0:
        raise ValueError("empty minibatch")
    Y = bellman_targets(np.asarray(R), np.asarray(S2), np.asarray(T, dtype=bool), np.asarray(L2, dtype=bool), target, gamma)
    loss, *grads = td_loss_and_grads(net, S, A, Y)
    _check_finite(loss, grads)
    new = net.copy()
    SGD(lr).apply(new, grads)
    return new


def select_action(net: QNetwork, s, epsilon: float, legal_mask, rng: np.random.Generator) -> int:
    legal = np.asarray(legal_mask, dtype=bool)
    if not legal.any():
        raise ValueError("no legal actions")
    if epsilon > 0.0 and rng.random() < epsilon:
        idx = np.flatnonzero(legal)
        return int(idx[rng.integers(idx.size)])
    return greedy_action(net, s, legal)


def greedy_action(net: QNetwork, s, legal_mask) -> int:
    q = forward(net, s)
    return int(kernels.masked_argmax(q, np.asarray(legal_mask, dtype=bool)))


class ReplayBuffer:
    """Fixed-capacity ring; oldest transitions are overwritten first."""

    def __init__(self, capacity: int, state_dim: int, n_actions: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.S = np.zeros((capacity, state_dim))
        self.A = np.zeros(capacity, dtype=np.int64)
        self.R = np.zeros(capacity)
        self.S2 = np.zeros((capacity, state_dim))
        self.T = np.zeros(capacity, dtype=bool)
        self.L2 = np.zeros((capacity, n_actions), dtype=bool)
        self.pos = 0
        self.size = 0
        self.pushed = 0

    def __len__(self):
        return self.size

    def push(self, s, a, r, s2, terminal, legal_next) -> None:
        if not 0 <= a < self.L2.shape[1]:
            raise ValueError(f"action {a} out of range")
        i = self.pos
        self.S[i], self.A[i], self.R[i], self.S2[i], self.T[i] = s, a, r, s2, terminal
        self.L2[i] = legal_next
        self.pos = (self.pos + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)
        self.pushed += 1

    def sample(self, n: int, rng: np.random.Generator):
        if self.size < n:
            raise ValueError(f"buffer holds {self.size} transitions, need {n}")
        idx = rng.integers(0, self.size, size=n)
        return self.S[idx], self.A[idx], self.R[idx], self.S2[idx], self.T[idx], self.L2[idx]

    def latest(self, n: int):
        """Indices of the ``n`` most recent transitions, oldest first."""
        n = min(n, self.size)
        return [(self.pos - n + k) % self.capacity for k in range(n)]


@dataclass(frozen=True)
class DqnConfig:
    gamma: float = 1.0
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_fraction: float = 0.5  # share of total_steps over which epsilon decays
    lr: float = 1e-3
    optimizer: str = "sgd"
    batch_size: int = 32
    episodes: int = 1000
    max_steps: int = 64
    total_steps: int | None = None  # stop after this many env steps; also sets epsilon horizon
    target_every: int = 500
    buffer_capacity: int = 20000
    hidden: int = 256
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must be in [0, 1]")
        for name in ("eps_start", "eps_end", "eps_fraction"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if min(self.batch_size, self.episodes, self.max_steps, self.target_every, self.hidden) < 1:
            raise ValueError("sizes and counts must be >= 1")

    @property
    def step_horizon(self) -> int:
        return self.total_steps if self.total_steps is not None else self.episodes * self.max_steps

    def epsilon(self, step: int) -> float:
        decay = max(1, int(self.eps_fraction * self.step_horizon))
        frac = min(1.0, step / decay)
        return self.eps_start + frac * (self.eps_end - self.eps_start)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()


@dataclass
class EpisodeRecord:
    episode: int
    ret: float
    epsilon: float
    steps: int


@dataclass
class TrainResult:
    net: QNetwork
    curve: list
    updates: int
    env_steps: int

    def returns(self) -> np.ndarray:
        return np.array([r.ret for r in self.curve])


def train(
    make_env: Callable,
    sample_workload: Callable[[np.random.Generator], object],
    cfg: DqnConfig,
    net: QNetwork | None = None,
) -> TrainResult:
    """Run epsilon-greedy DQN; fully determined by ``cfg.seed``."""
    rng = np.random.default_rng(cfg.seed)
    probe = make_env(sample_workload(rng))
    if net is None:
        net = QNetwork.init(probe.state_dim, probe.n_actions, cfg.hidden, rng)
    target = net.copy()
    opt = SGD(cfg.lr) if cfg.optimizer == "sgd" else Adam(cfg.lr)
    buf = ReplayBuffer(cfg.buffer_capacity, probe.state_dim, probe.n_actions)
    no_legal = np.zeros(probe.n_actions, dtype=bool)
    curve = []
    step = updates = 0
    env = probe
    for episode in range(cfg.episodes):
        if episode > 0:
            env = make_env(sample_workload(rng))
        s = env.reset()
        ret, eps, t = 0.0, cfg.epsilon(step), 0
        done = getattr(env, "done", False)
        while not done and t < cfg.max_steps:
            eps = cfg.epsilon(step)
            legal = env.legal_mask()
            a = select_action(net, s, eps, legal, rng)
            out = env.step(a)
            s2, r, done = out[0], float(out[1]), bool(out[2])
            buf.push(s, a, r, s2, done, no_legal if done else env.legal_mask())
            ret += r
            s = s2
            t += 1
            step += 1
            if len(buf) >= cfg.batch_size:
                S, A, R, S2, T, L2 = buf.sample(cfg.batch_size, rng)
                Y = bellman_targets(R, S2, T, L2, target, cfg.gamma)
                loss, *grads = td_loss_and_grads(net, S, A, Y)
                _check_finite(loss, grads)
                opt.apply(net, grads)
                updates += 1
                if updates % cfg.target_every == 0:
                    target = net.copy()
            if cfg.total_steps is not None and step >= cfg.total_steps:
                break
        curve.append(EpisodeRecord(episode, ret, eps, t))
        if cfg.total_steps is not None and step >= cfg.total_steps:
            break
    return TrainResult(net, curve, updates, step)


# --- files -----------------------------------------------------------------


def write_reward_curve(curve, fh) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["episode", "return", "epsilon", "steps"])
    for r in curve:
        w.writerow([r.episode, repr(float(r.ret)), repr(float(r.epsilon)), r.steps])


def save_checkpoint(net: QNetwork, path, seed: int = 0, config_hash: str = "") -> None:
    header = _HEADER.pack(
        CHECKPOINT_MAGIC,
        CHECKPOINT_VERSION,
        net.state_dim,
        net.n_actions,
        net.hidden,
        seed,
        config_hash.encode().ljust(64, b"\0")[:64],
    )
    Path(path).write_bytes(header + net.flat().astype("<f8").tobytes())


def load_checkpoint(path):
    """Returns ``(net, meta)`` where meta holds seed and config hash."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"policy checkpoint {path} not found; run 'elasticprune train' first")
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated checkpoint header")
    magic, version, state_dim, n_actions, hidden, seed, chash = _HEADER.unpack_from(raw)
    if magic != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a policy checkpoint")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    flat = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size)
    net = QNetwork.from_flat(flat, state_dim, n_actions, hidden)
    return net, {"seed": seed, "config_hash": chash.rstrip(b"\0").decode(), "version": version}
