"""Road topology, DTW traffic-pattern graphs and the dynamic-graph mask."""
from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass
from pathlib import Path

import numba
import numpy as np

from .errors import ContractError, GraphError


@dataclass
class GraphSet:
    a_topo: np.ndarray  # [N, N] binary, unit diagonal
    a_dtw: np.ndarray  # [N, N] binary, unit diagonal

    def __post_init__(self):
        self.a_topo = np.asarray(self.a_topo, dtype=np.float64)
        self.a_dtw = np.asarray(self.a_dtw, dtype=np.float64)
        for name in ("a_topo", "a_dtw"):
            a = getattr(self, name)
            if a.ndim != 2 or a.shape[0] != a.shape[1]:
                raise GraphError(f"{name} must be square, got {a.shape}")
            if not np.isin(a, (0.0, 1.0)).all():
                raise GraphError(f"{name} must be binary")
        if self.a_topo.shape != self.a_dtw.shape:
            raise GraphError(f"a_topo {self.a_topo.shape} and a_dtw {self.a_dtw.shape} differ in size")

    @property
    def n_nodes(self) -> int:
        return self.a_topo.shape[0]


def build_topology(edges, n_nodes: int, directed: bool = False) -> np.ndarray:
    a = np.eye(n_nodes)
    for edge in edges:
        i, j = int(edge[0]), int(edge[1])
        if not (0 <= i < n_nodes and 0 <= j < n_nodes):
            raise GraphError(f"edge ({i}, {j}) references a node outside 0..{n_nodes - 1}")
        a[i, j] = 1.0
        if not directed:
            a[j, i] = 1.0
    return a


def read_edge_csv(path) -> list[tuple[int, int, float]]:
    """Edge list with one header line, columns ``from,to,cost``."""
    edges = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader, None)
        for r, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                edges.append((int(float(row[0])), int(float(row[1])),
                              float(row[2]) if len(row) > 2 and row[2] else 1.0))
            except (ValueError, IndexError):
                raise GraphError(f"{path}: line {r} is not 'from,to,cost'") from None
    return edges


# ---------------------------------------------------------------- DTW

@numba.njit(cache=True)
def _dtw_kernel(x, y):
    n, m = x.shape[0], y.shape[0]
    prev = np.empty(m)
    cur = np.empty(m)
    prev[0] = abs(x[0] - y[0])
    for j in range(1, m):
        prev[j] = abs(x[0] - y[j]) + prev[j - 1]
    for i in range(1, n):
        cur[0] = abs(x[i] - y[0]) + prev[0]
        for j in range(1, m):
            best = prev[j]
            if cur[j - 1] < best:
                best = cur[j - 1]
            if prev[j - 1] < best:
                best = prev[j - 1]
            cur[j] = abs(x[i] - y[j]) + best
        prev, cur = cur, prev
    return prev[m - 1]


@numba.njit(cache=True)
def _dtw_pairwise(profiles):
    n = profiles.shape[0]
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            d = _dtw_kernel(profiles[i], profiles[j])
            out[i, j] = d
            out[j, i] = d
    return out


def dtw_distance(x, y) -> float:
    """Classic DTW with |x_i - y_j| local cost and up/left/diagonal steps."""
    x = np.ascontiguousarray(x, dtype=np.float64).ravel()
    y = np.ascontiguousarray(y, dtype=np.float64).ravel()
    if x.size == 0 or y.size == 0:
        raise ContractError("dtw_distance needs two nonempty series")
    return float(_dtw_kernel(x, y))


def dtw_matrix(profiles: np.ndarray) -> np.ndarray:
    return _dtw_pairwise(np.ascontiguousarray(profiles, dtype=np.float64))


def daily_profiles(values: np.ndarray, samples_per_day: int, channel: int = 0) -> np.ndarray:
    """Mean value per time-of-day slot for each node: ``[N, samples_per_day]``.

    ``values`` is ``[steps, N, C]`` and must start at time-of-day slot 0.
    """
    series = values[:, :, channel]
    steps, n_nodes = series.shape
    slot = np.arange(steps) % samples_per_day
    sums = np.zeros((samples_per_day, n_nodes))
    np.add.at(sums, slot, series)
    counts = np.bincount(slot, minlength=samples_per_day)
    if (counts == 0).any():
        raise GraphError(f"training data covers fewer than one full day ({steps} steps)")
    return (sums / counts[:, None]).T


def select_edges(dist: np.ndarray, sparsity: float) -> np.ndarray:
    """Symmetric binary graph over the closest node pairs.

    Keeps k = ceil(sparsity * N(N-1) / 2) unordered pairs, so roughly a
    ``sparsity`` fraction of the off-diagonal entries end up set.  Ties are
    broken by node index.
    """
    n = dist.shape[0]
    if not 0.0 <= sparsity <= 1.0:
        raise GraphError(f"sparsity must lie in [0, 1], got {sparsity}")
    pairs = n * (n - 1) // 2
    k = min(math.ceil(sparsity * pairs - 1e-9), pairs)
    if k <= 0:
        raise GraphError(f"sparsity {sparsity} keeps no edges for {n} nodes")
    ii, jj = np.triu_indices(n, 1)
    d = np.minimum(dist[ii, jj], dist[jj, ii])
    order = np.lexsort((jj, ii, d))[:k]
    a = np.eye(n)
    a[ii[order], jj[order]] = 1.0
    a[jj[order], ii[order]] = 1.0
    return a


def build_pattern_graph(ds, sparsity: float = 0.01, train_fraction: float = 0.6) -> np.ndarray:
    n_train = int(round(ds.steps * train_fraction))
    profiles = daily_profiles(ds.values[:n_train], ds.samples_per_day)
    return select_edges(dtw_matrix(profiles), sparsity)


def pattern_cache_key(values: np.ndarray, sparsity: float, train_fraction: float = 0.6) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(values, dtype="<f8").tobytes())
    h.update(repr((float(sparsity), float(train_fraction))).encode())
    return h.hexdigest()[:16]


def cached_pattern_graph(ds, cache_dir, sparsity: float = 0.01,
                         train_fraction: float = 0.6) -> tuple[np.ndarray, Path, bool]:
    """Return ``(a_dtw, path, hit)``; computes and stores on a miss."""
    from .data import read_packed, write_packed

    cache_dir = Path(cache_dir)
    key = pattern_cache_key(ds.values, sparsity, train_fraction)
    path = cache_dir / f"pattern_{key}.bin"
    if path.exists():
        return read_packed(path)[:, :, 0], path, True
    a = build_pattern_graph(ds, sparsity, train_fraction)
    cache_dir.mkdir(parents=True, exist_ok=True)
    write_packed(path, a)
    return a, path, False


def dynamic_mask(g: GraphSet) -> np.ndarray:
    """Union of topology and pattern supports, clipped to {0, 1}."""
    return np.minimum(g.a_topo + g.a_dtw, 1.0)


def row_normalize(a: np.ndarray) -> np.ndarray:
    s = a.sum(axis=1, keepdims=True)
    s[s == 0] = 1.0
    return a / s
