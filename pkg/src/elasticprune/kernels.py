"""Hot numeric kernels.

Each kernel exists twice: a vectorised numpy version (``*_np``) and a loop
version compiled by numba (``*_nb``). The public name is bound to one of them
at import time according to ``ELASTICPRUNE_NUMBA``. Both versions are always
importable so tests and ``benchmarks/bench_kernels.py`` can compare them.

Network layout: ``W1`` is (state_dim, hidden), ``W2`` is (hidden, n_actions);
a batch of states ``S`` is (batch, state_dim).
"""

import numpy as np

from ._accel import USE_NUMBA, njit

# --- surrogate perplexity ------------------------------------------------


def surrogate_log_ppl_np(base, unary, pair_a, pair_b, pair_cost, pruned):
    total = base + unary[pruned].sum()
    if pair_a.size:
        total += pair_cost[pruned[pair_a] & pruned[pair_b]].sum()
    return float(total)


@njit
def surrogate_log_ppl_nb(base, unary, pair_a, pair_b, pair_cost, pruned):
    total = base
    for i in range(unary.shape[0]):
        if pruned[i]:
            total += unary[i]
    for k in range(pair_a.shape[0]):
        if pruned[pair_a[k]] and pruned[pair_b[k]]:
            total += pair_cost[k]
    return total


# --- Q-network ------------------------------------------------------------


def mlp_forward_np(W1, b1, W2, b2, S):
    Z1 = S @ W1 + b1
    return np.maximum(Z1, 0.0) @ W2 + b2


@njit
def mlp_forward_nb(W1, b1, W2, b2, S):
    Z1 = np.dot(S, W1)
    for b in range(Z1.shape[0]):
        for h in range(Z1.shape[1]):
            z = Z1[b, h] + b1[h]
            Z1[b, h] = z if z > 0.0 else 0.0
    Q = np.dot(Z1, W2)
    for b in range(Q.shape[0]):
        for a in range(Q.shape[1]):
            Q[b, a] += b2[a]
    return Q


def td_loss_grads_np(W1, b1, W2, b2, S, A, Y):
    """Mean squared TD error over the batch and its gradient wrt every parameter.

    Only the taken action's output enters the loss, so only the matching
    columns of ``W2`` and entries of ``b2`` receive gradient.
    """
    n = S.shape[0]
    Z1 = S @ W1 + b1
    Hh = np.maximum(Z1, 0.0)
    q = np.einsum("bh,hb->b", Hh, W2[:, A]) + b2[A]
    err = Y - q
    loss = float(np.mean(err * err))
    g = -2.0 * err / n

    gW2 = np.zeros_like(W2)
    np.add.at(gW2.T, A, g[:, None] * Hh)
    gb2 = np.zeros_like(b2)
    np.add.at(gb2, A, g)
    dZ1 = g[:, None] * W2[:, A].T * (Z1 > 0.0)
    gW1 = S.T @ dZ1
    gb1 = dZ1.sum(axis=0)
    return loss, gW1, gb1, gW2, gb2


@njit
def td_loss_grads_nb(W1, b1, W2, b2, S, A, Y):
    n = S.shape[0]
    hidden = W1.shape[1]
    Z1 = np.dot(S, W1)
    gW2 = np.zeros_like(W2)
    gb2 = np.zeros_like(b2)
    dZ1 = np.zeros((n, hidden))
    loss = 0.0
    for b in range(n):
        for h in range(hidden):
            Z1[b, h] += b1[h]
        a = A[b]
        q = b2[a]
        for h in range(hidden):
            if Z1[b, h] > 0.0:
                q += Z1[b, h] * W2[h, a]
        err = Y[b] - q
        loss += err * err
        g = -2.0 * err / n
        gb2[a] += g
        for h in range(hidden):
            if Z1[b, h] > 0.0:
                gW2[h, a] += g * Z1[b, h]
                dZ1[b, h] = g * W2[h, a]
    gW1 = np.dot(np.ascontiguousarray(S.T), dZ1)
    gb1 = np.zeros(hidden)
    for b in range(n):
        for h in range(hidden):
            gb1[h] += dZ1[b, h]
    return loss / n, gW1, gb1, gW2, gb2


def adam_update_np(p, g, m, v, lr, b1, b2, c1, c2, eps):
    """In-place Adam step on one parameter array; ``c1``/``c2`` are bias corrections."""
    m *= b1
    m += (1.0 - b1) * g
    v *= b2
    v += (1.0 - b2) * g * g
    p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


@njit(fastmath=True)
def adam_update_nb(p, g, m, v, lr, b1, b2, c1, c2, eps):
    pf = p.reshape(-1)
    gf = g.reshape(-1)
    mf = m.reshape(-1)
    vf = v.reshape(-1)
    for k in range(pf.shape[0]):
        gk = gf[k]
        mf[k] = b1 * mf[k] + (1.0 - b1) * gk
        vf[k] = b2 * vf[k] + (1.0 - b2) * gk * gk
        pf[k] -= lr * (mf[k] / c1) / (np.sqrt(vf[k] / c2) + eps)


def masked_row_max_np(Q, legal):
    return np.where(legal, Q, -np.inf).max(axis=1)


@njit
def masked_row_max_nb(Q, legal):
    out = np.full(Q.shape[0], -np.inf)
    for b in range(Q.shape[0]):
        for a in range(Q.shape[1]):
            if legal[b, a] and Q[b, a] > out[b]:
                out[b] = Q[b, a]
    return out


@njit
def masked_argmax_nb(q, legal):
    best = -1
    for a in range(q.shape[0]):
        if legal[a] and (best < 0 or q[a] > q[best]):
            best = a
    return best


def masked_argmax_np(q, legal):
    idx = np.flatnonzero(legal)
    if idx.size == 0:
        return -1
    # np.argmax returns the first maximum: lowest canonical index wins ties
    return int(idx[np.argmax(q[idx])])


if USE_NUMBA:
    surrogate_log_ppl = surrogate_log_ppl_nb
    mlp_forward = mlp_forward_nb
    td_loss_grads = td_loss_grads_nb
    masked_row_max = masked_row_max_nb
    masked_argmax = masked_argmax_nb
    adam_update = adam_update_nb
else:
    surrogate_log_ppl = surrogate_log_ppl_np
    mlp_forward = mlp_forward_np
    td_loss_grads = td_loss_grads_np
    masked_row_max = masked_row_max_np
    masked_argmax = masked_argmax_np
    adam_update = adam_update_np
