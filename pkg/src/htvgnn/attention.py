"""Positional encoding and mask-enhanced multi-head self-attention over nodes."""
from __future__ import annotations

import numpy as np

from . import numcore as nc
from .errors import ContractError
from .numcore import Tensor


def positional_encoding(T: int, D: int) -> np.ndarray:
    if D % 2:
        raise ContractError(f"positional encoding needs an even width, got {D}")
    pos = np.arange(T, dtype=np.float64)[:, None]
    freq = 10000.0 ** (np.arange(0, D, 2, dtype=np.float64) / D)
    pe = np.empty((T, D))
    pe[:, 0::2] = np.sin(pos / freq)
    pe[:, 1::2] = np.cos(pos / freq)
    return pe


def mask_embedding_at(e_static: Tensor, e_daily: Tensor, e_weekly: Tensor, tod, dow) -> Tensor:
    """m_t = E ⊙ P^D_t ⊙ P^W_t with the calendar rows broadcast over nodes.

    ``tod``/``dow`` may be scalars or integer arrays of any shape S; the
    result is ``S + (N, d_m)``.
    """
    tod = np.asarray(tod, dtype=np.int64)
    dow = np.asarray(dow, dtype=np.int64)
    if tod.size and (tod.min() < 0 or tod.max() >= e_daily.shape[0]):
        raise ContractError(f"time-of-day index outside 0..{e_daily.shape[0] - 1}")
    if dow.size and (dow.min() < 0 or dow.max() >= 7):
        raise ContractError("day-of-week index outside 0..6")
    d_m = e_static.shape[1]
    daily = nc.reshape(nc.take(e_daily, tod, axis=0), tod.shape + (1, d_m))
    weekly = nc.reshape(nc.take(e_weekly, dow, axis=0), dow.shape + (1, d_m))
    return e_static * daily * weekly


def mask_matrix(m_t: Tensor) -> Tensor:
    """Gram matrix m_t m_tᵀ (N x N per leading index)."""
    return nc.matmul(m_t, nc.swapaxes(m_t, -1, -2))


def etpmsa(x: Tensor, masks, params: dict, prefix: str = "", return_weights: bool = False):
    """Multi-head attention across the node axis of ``x`` ([B, T, N, D]).

    ``masks`` is a ``[B, T, N, N]`` (or ``[T, N, N]``) tensor pre-multiplying
    the keys of every head, or ``None`` for plain attention.
    """
    wq, wk, wv = params[prefix + "wq"], params[prefix + "wk"], params[prefix + "wv"]
    wo = params[prefix + "wo"]
    h, D, d_head = wq.shape
    if x.shape[-1] != D:
        raise ContractError(f"attention width {D} does not match input width {x.shape[-1]}")
    lead = x.shape[:-2]
    n = x.shape[-2]
    xh = nc.reshape(x, lead + (1, n, D))
    q = nc.matmul(xh, wq)  # [..., h, N, dh]
    k = nc.matmul(xh, wk)
    v = nc.matmul(xh, wv)
    if masks is not None:
        masks = nc.as_tensor(masks)
        if masks.shape[-2:] != (n, n):
            raise ContractError(f"mask of shape {masks.shape} cannot gate keys of {n} nodes")
        k = nc.matmul(nc.reshape(masks, masks.shape[:-2] + (1, n, n)), k)
    scores = nc.matmul(q, nc.swapaxes(k, -1, -2)) * (1.0 / np.sqrt(d_head))
    weights = nc.softmax(scores, axis=-1)
    heads = nc.matmul(weights, v)  # [..., h, N, dh]
    nd = len(lead)
    merged = nc.reshape(nc.transpose(heads, tuple(range(nd)) + (nd + 1, nd, nd + 2)),
                        lead + (n, h * d_head))
    out = nc.matmul(merged, wo)
    return (out, weights) if return_weights else out


def mhsa_plain(x: Tensor, params: dict, prefix: str = "", return_weights: bool = False):
    return etpmsa(x, None, params, prefix, return_weights)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    mu = nc.mean(x, axis=-1, keepdims=True)
    centered = x - mu
    var = nc.mean(nc.square(centered), axis=-1, keepdims=True)
    return centered * nc.power(var + eps, -0.5) * gain + bias
