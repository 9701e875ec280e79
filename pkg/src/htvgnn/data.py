"""Traffic series ingestion, z-score normalization, splitting and windowing."""
from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import IngestionError, NormalizationError, WindowingError

HEADER = struct.Struct("<QQQ")


@dataclass
class SeriesDataset:
    values: np.ndarray  # [steps, nodes, channels], raw units
    interval_minutes: int = 5
    start_day_of_week: int = 0
    mean: np.ndarray | None = None  # per channel, training partition only
    std: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float64)
        if self.values.ndim != 3:
            raise IngestionError(f"series must be [steps, nodes, channels], got {self.values.shape}")
        if self.interval_minutes <= 0 or 1440 % self.interval_minutes:
            raise IngestionError(f"interval of {self.interval_minutes} min does not divide a day")
        if not 0 <= self.start_day_of_week < 7:
            raise IngestionError("start_day_of_week must be in 0..6")

    @property
    def steps(self) -> int:
        return self.values.shape[0]

    @property
    def n_nodes(self) -> int:
        return self.values.shape[1]

    @property
    def n_channels(self) -> int:
        return self.values.shape[2]

    @property
    def samples_per_day(self) -> int:
        return 1440 // self.interval_minutes

    def tod(self, idx) -> np.ndarray:
        return np.asarray(idx) % self.samples_per_day

    def dow(self, idx) -> np.ndarray:
        return (self.start_day_of_week + np.asarray(idx) // self.samples_per_day) % 7

    def normalize(self, x: np.ndarray) -> np.ndarray:
        self._require_stats()
        return (x - self.mean) / self.std

    def denormalize(self, x: np.ndarray) -> np.ndarray:
        self._require_stats()
        return x * self.std + self.mean

    def _require_stats(self):
        if self.mean is None or self.std is None:
            raise NormalizationError("normalization statistics not fitted; call zscore_fit_transform")


@dataclass
class ForecastBatch:
    x: np.ndarray  # [B, T, N, C] normalized
    y: np.ndarray  # [B, tau, N, C] raw scale
    tod: np.ndarray  # [B, T] int
    dow: np.ndarray  # [B, T] int
    index: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __len__(self):
        return self.x.shape[0]


# ---------------------------------------------------------------- loading

def load_series(path, layout: str = "csv_grid", channels: int = 1, interval_minutes: int = 5,
                start_day_of_week: int = 0, nodes: int | None = None) -> SeriesDataset:
    path = Path(path)
    if not path.exists():
        raise IngestionError(f"no such file: {path}")
    if layout == "csv_grid":
        values = _read_csv_grid(path, channels, nodes)
    elif layout == "packed_binary":
        values = read_packed(path)
    elif layout == "npz":
        with np.load(path) as z:
            key = "data" if "data" in z.files else z.files[0]
            values = np.asarray(z[key], dtype=np.float64)
        if values.ndim == 2:
            values = values[:, :, None]
    else:
        raise IngestionError(f"unknown layout {layout!r}")
    return SeriesDataset(values, interval_minutes=interval_minutes,
                         start_day_of_week=start_day_of_week)


def _read_csv_grid(path: Path, channels: int, nodes: int | None) -> np.ndarray:
    rows: list[list[float]] = []
    width = None
    with open(path, newline="") as fh:
        for r, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            if width is None:
                width = len(row)
            elif len(row) != width:
                raise IngestionError(f"{path.name} line {r}: expected {width} columns, found {len(row)}")
            parsed = []
            for c, cell in enumerate(row, start=1):
                cell = cell.strip()
                if cell == "":
                    parsed.append(math.nan)
                    continue
                try:
                    parsed.append(float(cell))
                except ValueError:
                    raise IngestionError(f"{path.name} line {r}, column {c}: cannot parse {cell!r}") from None
            rows.append(parsed)
    if not rows:
        raise IngestionError(f"{path} holds no data rows")
    if width % channels:
        raise IngestionError(f"{width} columns is not a multiple of {channels} channels")
    n_nodes = width // channels
    if nodes is not None and nodes != n_nodes:
        raise IngestionError(f"expected {nodes} nodes, file has {n_nodes}")
    grid = forward_fill(np.array(rows, dtype=np.float64))
    return grid.reshape(len(rows), n_nodes, channels)


def forward_fill(a: np.ndarray) -> np.ndarray:
    """Replace NaN with the last valid value above it; leading gaps become 0."""
    a = np.array(a, dtype=np.float64, copy=True)
    for i in range(a.shape[0]):
        hole = np.isnan(a[i])
        if hole.any():
            a[i][hole] = a[i - 1][hole] if i > 0 else 0.0
    return a


def read_packed(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < HEADER.size:
        raise IngestionError(f"{path}: truncated header")
    steps, nodes, chans = HEADER.unpack_from(raw)
    expected = steps * nodes * chans * 8
    body = raw[HEADER.size:]
    if len(body) != expected:
        raise IngestionError(
            f"{path}: header declares {steps}x{nodes}x{chans} ({expected} bytes) "
            f"but body holds {len(body)} bytes")
    return np.frombuffer(body, dtype="<f8").astype(np.float64).reshape(steps, nodes, chans)


def write_packed(path, values: np.ndarray) -> None:
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 2:
        values = values[:, :, None]
    if values.ndim != 3:
        raise IngestionError(f"packed_binary holds rank-3 arrays, got shape {values.shape}")
    with open(path, "wb") as fh:
        fh.write(HEADER.pack(*values.shape))
        fh.write(np.ascontiguousarray(values, dtype="<f8").tobytes())


# ---------------------------------------------------------------- normalization

def partition_bounds(steps: int, ratios=(0.6, 0.2, 0.2)) -> list[tuple[int, int]]:
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3:
        raise WindowingError(f"need three split ratios, got {len(ratios)}")
    if any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise WindowingError(f"split ratios must be positive and sum to 1, got {ratios}")
    n_train = int(round(steps * ratios[0]))
    n_val = int(round(steps * ratios[1]))
    return [(0, n_train), (n_train, n_train + n_val), (n_train + n_val, steps)]


def zscore_fit_transform(ds: SeriesDataset, train_fraction: float = 0.6) -> np.ndarray:
    """Fit per-channel mean/std on the leading training slice; return the normalized series."""
    if not 0.0 < train_fraction < 1.0:
        raise NormalizationError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    n_train = int(round(ds.steps * train_fraction))
    if n_train < 1:
        raise NormalizationError("training slice is empty")
    train = ds.values[:n_train].reshape(-1, ds.n_channels)
    mean = train.mean(axis=0)
    std = train.std(axis=0)  # population std
    if np.any(std <= 0):
        bad = np.flatnonzero(std <= 0).tolist()
        raise NormalizationError(f"zero standard deviation in training data for channel(s) {bad}")
    ds.mean, ds.std = mean, std
    return ds.normalize(ds.values)


# ---------------------------------------------------------------- windowing

@dataclass
class Split:
    name: str
    start: int
    stop: int  # exclusive
    windows: np.ndarray  # anchor indices t (last input step), absolute


def window_anchors(start: int, stop: int, T: int, tau: int) -> np.ndarray:
    """Anchors whose T inputs and tau targets all lie in [start, stop); may be empty."""
    if T < 1 or tau < 1:
        raise WindowingError(f"T and tau must be positive, got T={T}, tau={tau}")
    return np.arange(start + T - 1, stop - tau, dtype=np.int64)


def split_and_window(ds: SeriesDataset, ratios=(0.6, 0.2, 0.2), T: int = 12,
                     tau: int = 12) -> dict[str, Split]:
    bounds = partition_bounds(ds.steps, ratios)
    if ds.mean is None:
        zscore_fit_transform(ds, bounds[0][1] / ds.steps)
    splits = {name: Split(name, lo, hi, window_anchors(lo, hi, T, tau))
              for name, (lo, hi) in zip(("train", "val", "test"), bounds)}
    lo, hi = bounds[0]
    if not len(splits["train"].windows):
        raise WindowingError(
            f"training partition [{lo}, {hi}) has {hi - lo} steps, fewer than T + tau = {T + tau}")
    return splits


def make_batch(ds: SeriesDataset, anchors, T: int = 12, tau: int = 12,
               normalized: np.ndarray | None = None) -> ForecastBatch:
    anchors = np.asarray(anchors, dtype=np.int64)
    if normalized is None:
        normalized = ds.normalize(ds.values)
    past = anchors[:, None] + np.arange(-T + 1, 1)[None, :]
    future = anchors[:, None] + np.arange(1, tau + 1)[None, :]
    return ForecastBatch(
        x=normalized[past],
        y=ds.values[future],
        tod=ds.tod(past).astype(np.int64),
        dow=ds.dow(past).astype(np.int64),
        index=anchors,
    )


def iterate_batches(ds: SeriesDataset, anchors, batch_size: int, T: int = 12, tau: int = 12,
                    rng: np.random.Generator | None = None, normalized=None):
    anchors = np.asarray(anchors)
    order = rng.permutation(len(anchors)) if rng is not None else np.arange(len(anchors))
    if normalized is None:
        normalized = ds.normalize(ds.values)
    for lo in range(0, len(order), batch_size):
        yield make_batch(ds, anchors[order[lo:lo + batch_size]], T, tau, normalized)


# ---------------------------------------------------------------- synthetic data

def random_connected_edges(nodes: int, rng: np.random.Generator, extra: float = 0.5):
    """Random spanning tree plus ~extra*nodes additional undirected edges."""
    order = rng.permutation(nodes)
    edges = set()
    for k in range(1, nodes):
        parent = order[rng.integers(0, k)]
        a, b = sorted((int(order[k]), int(parent)))
        edges.add((a, b))
    for _ in range(int(round(extra * nodes))):
        a, b = sorted(int(v) for v in rng.choice(nodes, size=2, replace=False))
        edges.add((a, b))
    return sorted(edges)


def synth_network(nodes: int = 8, days: int = 4, seed: int = 0, interval_minutes: int = 5,
                  noise: float = 1.0, coupling: float = 0.4, lag: int = 1, ar: float = 0.5,
                  start_day_of_week: int = 0):
    """Deterministic synthetic road network.

    Each node carries a daily sinusoidal profile (level, amplitude, phase drawn
    per node) plus a stochastic residual.  Residuals follow an AR(1) process
    driven by Gaussian innovations and the lagged mean residual of the node's
    neighbours.  Returns ``(SeriesDataset, GraphSet)``.
    """
    from .graphs import GraphSet, build_topology

    if nodes < 2 or days < 2:
        raise ValueError("synth_network needs nodes >= 2 and days >= 2")
    rng = np.random.default_rng(seed)
    n = 1440 // interval_minutes
    steps = days * n
    edges = random_connected_edges(nodes, rng)
    level = rng.uniform(60.0, 140.0, nodes)
    amp = rng.uniform(0.3, 0.6, nodes) * level
    phase = rng.uniform(0.0, 2 * np.pi, nodes)
    innov = rng.standard_normal((steps, nodes))

    tod = np.arange(steps) % n
    angle = 2 * np.pi * tod[:, None] / n + phase[None, :]
    base = level + amp * (np.sin(angle) + 0.3 * np.sin(2 * angle))

    adj = np.zeros((nodes, nodes))
    for a, b in edges:
        adj[a, b] = adj[b, a] = 1.0
    nbr = adj / adj.sum(axis=1, keepdims=True)
    resid = np.zeros((steps, nodes))
    if noise != 0.0:
        for t in range(steps):
            prev = resid[t - 1] if t >= 1 else 0.0
            lagged = nbr @ resid[t - lag] if t >= lag else 0.0
            resid[t] = ar * prev + coupling * lagged + noise * innov[t]
    values = (base + resid)[:, :, None]
    ds = SeriesDataset(values, interval_minutes=interval_minutes,
                       start_day_of_week=start_day_of_week)
    a_topo = build_topology([(a, b, 1.0) for a, b in edges], nodes, directed=False)
    graphs = GraphSet(a_topo=a_topo, a_dtw=np.eye(nodes))
    return ds, graphs
