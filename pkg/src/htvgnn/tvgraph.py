"""Time-varying graph learners: coupled static graphs and masked dynamic graphs."""
from __future__ import annotations

import numpy as np

from . import numcore as nc
from .errors import ConfigError, ContractError
from .graphs import row_normalize
from .numcore import Tensor

GRAPH_KINDS = ("full", "no_coupling", "single_adaptive", "topology_only")


def step_embeddings(E: Tensor, e: Tensor) -> Tensor:
    """E_t = E + e_t for every step: ``[T, N, d_E]``."""
    return nc.reshape(E, (1,) + E.shape) + e


def static_graph_at(E: Tensor, e: Tensor, t: int) -> Tensor:
    if not 0 <= t < e.shape[0]:
        raise ContractError(f"step {t} outside 0..{e.shape[0] - 1}")
    Et = E + e[t]
    return nc.softmax(nc.matmul(Et, Et.T), axis=-1)


def static_graphs(Et: Tensor) -> Tensor:
    """Row-softmax Gram graphs for stacked embeddings ``[..., N, d_E]``."""
    return nc.softmax(nc.matmul(Et, nc.swapaxes(Et, -1, -2)), axis=-1)


def coupling_weights(w: Tensor) -> Tensor:
    """Row t: softmax of w[t, :t+1]; entries above the diagonal are exactly 0."""
    T = w.shape[0]
    return nc.softmax(w, axis=-1, where=np.tril(np.ones((T, T), dtype=bool)))


def couple(graphs: Tensor, w: Tensor) -> Tensor:
    """Causal convex mixture of per-step graphs ``[T, N, N]``."""
    T, n, _ = graphs.shape
    mixed = nc.matmul(coupling_weights(w), nc.reshape(graphs, (T, n * n)))
    return nc.reshape(mixed, (T, n, n))


def coupled_static_graphs(E: Tensor, e: Tensor, w: Tensor) -> Tensor:
    return couple(static_graphs(step_embeddings(E, e)), w)


def dynamic_graph_at(w_phi: Tensor, a: Tensor, H: Tensor, mask) -> tuple[Tensor, Tensor]:
    """Masked attention adjacency from hidden features ``H`` ([..., N, C_phi]).

    Returns ``(masked adjacency [..., N, N], mapped embedding [..., N, d_phi])``.
    """
    d_phi = w_phi.shape[1]
    if a.shape != (2 * d_phi,):
        raise ContractError(f"attention vector must have {2 * d_phi} entries, got {a.shape}")
    ev = nc.matmul(H, w_phi)
    a_src = nc.reshape(a[:d_phi], (d_phi, 1))
    a_dst = nc.reshape(a[d_phi:], (d_phi, 1))
    scores = nc.matmul(ev, a_src) + nc.swapaxes(nc.matmul(ev, a_dst), -1, -2)
    att = nc.softmax(scores, axis=-1)
    return att * np.asarray(mask, dtype=np.float64), ev


def graph_provider(kind: str, a_topo: np.ndarray | None = None):
    """Static-branch graphs and NAPL node embeddings for one ablation kind.

    The returned callable maps ``(E, e, w)`` to ``(graphs [T, N, N], node_emb [T, N, d_E])``.
    """
    if kind not in GRAPH_KINDS:
        raise ConfigError(f"unknown graph kind {kind!r}; expected one of {GRAPH_KINDS}")
    if kind == "topology_only" and a_topo is None:
        raise ConfigError("topology_only needs the topology adjacency")

    def provide(E: Tensor, e: Tensor, w: Tensor):
        T = e.shape[0]
        if kind == "single_adaptive":
            shared = static_graphs(E)
            n = E.shape[0]
            emb = nc.reshape(E, (1,) + E.shape) + np.zeros((T, 1, 1))
            return shared + np.zeros((T, n, n)), emb
        Et = step_embeddings(E, e)
        if kind == "topology_only":
            topo = row_normalize(np.asarray(a_topo, dtype=np.float64))
            return nc.Tensor(np.broadcast_to(topo, (T,) + topo.shape).copy()), Et
        base = static_graphs(Et)
        if kind == "no_coupling":
            return base, Et
        return couple(base, w), Et

    return provide
