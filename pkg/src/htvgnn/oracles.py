"""Slow, direct reference computations used to cross-check the fast paths.

Nothing here touches the tape; each function spells its formula out with
plain loops or explicit sums so it can be trusted independently.
"""
from __future__ import annotations

import math

import numpy as np


def matmul_loops(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for r in range(k):
                s += a[i, r] * b[r, j]
            out[i, j] = s
    return out


def softmax_direct(x):
    x = [float(v) for v in x]
    top = max(x)
    e = [math.exp(v - top) for v in x]
    total = sum(e)
    return np.array([v / total for v in e])


def dtw_table(x, y):
    """Full (len(x)+1) x (len(y)+1) DP table with an infinite border."""
    n, m = len(x), len(y)
    D = [[math.inf] * (m + 1) for _ in range(n + 1)]
    D[0][0] = 0.0
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            D[i][j] = abs(float(x[i - 1]) - float(y[j - 1])) + min(D[i - 1][j], D[i][j - 1], D[i - 1][j - 1])
    return D[n][m]


def metrics_direct(pred, y, zero_threshold=1e-3):
    p = [float(v) for v in np.ravel(pred)]
    t = [float(v) for v in np.ravel(y)]
    n = len(p)
    mae = sum(abs(a - b) for a, b in zip(p, t)) / n
    rmse = math.sqrt(sum((a - b) ** 2 for a, b in zip(p, t)) / n)
    kept = [abs((b - a) / b) for a, b in zip(p, t) if abs(b) > zero_threshold]
    mape = 100.0 * sum(kept) / len(kept) if kept else None
    return mae, rmse, mape


def gram(m):
    m = np.asarray(m, float)
    n = m.shape[0]
    return np.array([[sum(m[i, k] * m[j, k] for k in range(m.shape[1])) for j in range(n)]
                     for i in range(n)])


def row_softmax_loops(s):
    return np.array([softmax_direct(row) for row in np.asarray(s, float)])


def attention_single_head(x, wq, wk, wv, mask=None):
    """softmax(Q (M K)ᵀ / sqrt(d)) V for one time step, nodes x width inputs."""
    x = np.asarray(x, float)
    q = matmul_loops(x, wq)
    k = matmul_loops(x, wk)
    v = matmul_loops(x, wv)
    if mask is not None:
        k = matmul_loops(mask, k)
    d = wq.shape[1]
    scores = matmul_loops(q, k.T) / math.sqrt(d)
    return matmul_loops(row_softmax_loops(scores), v)


def multi_head(x, wq, wk, wv, wo, mask=None):
    """Heads concatenated in order 1..h, then projected by wo."""
    heads = [attention_single_head(x, wq[i], wk[i], wv[i], mask) for i in range(wq.shape[0])]
    return matmul_loops(np.concatenate(heads, axis=1), wo)


def coupled_graphs(E, e, w):
    """Per-step Gram-softmax graphs mixed with causal softmax weights."""
    T = e.shape[0]
    base = [row_softmax_loops(gram(E + e[t])) for t in range(T)]
    out = []
    for t in range(T):
        c = softmax_direct(w[t, :t + 1])
        out.append(sum(c[k] * base[k] for k in range(t + 1)))
    return np.array(out)


def dynamic_graph(H, w_phi, a, mask):
    ev = matmul_loops(H, w_phi)
    n, d = ev.shape
    scores = np.array([[sum(a[k] * ev[i, k] for k in range(d)) + sum(a[d + k] * ev[j, k] for k in range(d))
                        for j in range(n)] for i in range(n)])
    return row_softmax_loops(scores) * np.asarray(mask, float)


def napl_conv(X, A, E_node, w_pool, b_pool):
    """((I + A) X)[n] @ (sum_k E[n,k] W_k) + E[n] @ b_pool, one node at a time."""
    X, A, E_node = np.asarray(X, float), np.asarray(A, float), np.asarray(E_node, float)
    n, d_in = X.shape
    d_E = E_node.shape[1]
    d_h = w_pool.shape[1] // d_in
    pool = np.asarray(w_pool, float).reshape(d_E, d_in, d_h)
    agg = X + matmul_loops(A, X)
    out = np.zeros((n, d_h))
    for i in range(n):
        W = sum(E_node[i, k] * pool[k] for k in range(d_E))
        b = sum(E_node[i, k] * b_pool[k] for k in range(d_E))
        out[i] = matmul_loops(agg[i:i + 1], W)[0] + b
    return out


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, float)))


def gru_step(H, h, A_s, A_d, E_s, E_v, params, prefix):
    """Fully expanded dual-graph GRU step."""
    def gate(x, g):
        s = napl_conv(x, A_s, E_s, params[f"{prefix}{g}.s.w_pool"], params[f"{prefix}{g}.s.b_pool"])
        d = napl_conv(x, A_d, E_v, params[f"{prefix}{g}.d.w_pool"], params[f"{prefix}{g}.d.b_pool"])
        return matmul_loops(np.concatenate([s, d], axis=1), params[f"{prefix}{g}.f"])

    hat = np.concatenate([H, h], axis=1)
    z = sigmoid(gate(hat, "z"))
    r = sigmoid(gate(hat, "r"))
    c = np.tanh(gate(np.concatenate([H, r * h], axis=1), "c"))
    return z * h + (1.0 - z) * c


def central_difference(f, x, eps=1e-5):
    x = np.array(x, float)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x)
        flat[i] = orig - eps
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return g
