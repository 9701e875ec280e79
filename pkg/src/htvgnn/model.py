"""Dual-graph convolutional GRU and the full forecasting model."""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import numcore as nc
from .attention import etpmsa, layer_norm, mask_embedding_at, mask_matrix, positional_encoding
from .errors import ConfigError, ContractError, NumericError
from .graphs import GraphSet, dynamic_mask, row_normalize
from .numcore import Tensor
from .tvgraph import dynamic_graph_at, graph_provider

GATES = ("z", "r", "c")


@dataclass(frozen=True)
class ModelConfig:
    encoder_layers: int = 1
    decoder_layers: int = 1
    batch: int = 16
    heads: int = 8
    D: int = 64
    E: int = 5
    d_m: int = 15
    ctvgcrm_layers: int = 2
    T: int = 12
    tau: int = 12
    n_nodes: int = 170
    channels: int = 1
    samples_per_day: int = 288
    lr: float = 1e-3
    epochs: int = 100
    patience: int = 15
    sparsity: float = 0.01

    def __post_init__(self):
        if self.D % self.heads:
            raise ConfigError(f"width D={self.D} is not divisible by heads={self.heads}")
        if self.D % 2:
            raise ConfigError(f"width D={self.D} must be even for the positional encoding")
        for f in ("encoder_layers", "ctvgcrm_layers", "batch", "heads", "E", "d_m", "T", "tau",
                  "n_nodes", "channels", "samples_per_day"):
            if getattr(self, f) <= 0:
                raise ConfigError(f"{f} must be positive")

    @property
    def d_head(self) -> int:
        return self.D // self.heads

    @property
    def hidden(self) -> int:
        return self.D

    @property
    def d_phi(self) -> int:
        return self.E

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        types = {f.name: f.type for f in fields(cls)}
        kw = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, val = line.partition("=")
            key, val = key.strip(), val.strip()
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            kw[key] = float(val) if types[key] in ("float", float) else int(val)
        return cls(**kw)


# Published hyperparameters per dataset; n_nodes from each dataset.
PRESETS = {
    "pems03": ModelConfig(batch=16, heads=8, D=64, E=8, d_m=8, ctvgcrm_layers=2, n_nodes=358),
    "pems04": ModelConfig(batch=4, heads=8, D=64, E=6, d_m=18, ctvgcrm_layers=2, n_nodes=307),
    "pems07": ModelConfig(batch=8, heads=8, D=64, E=10, d_m=24, ctvgcrm_layers=2, n_nodes=883),
    "pems08": ModelConfig(batch=16, heads=8, D=64, E=5, d_m=15, ctvgcrm_layers=2, n_nodes=170),
    "synthetic": ModelConfig(batch=16, heads=2, D=16, E=4, d_m=4, ctvgcrm_layers=1, n_nodes=8,
                             samples_per_day=96, epochs=300, sparsity=0.1),
}


def preset(name: str, **overrides) -> ModelConfig:
    try:
        base = PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return replace(base, **overrides)


@dataclass(frozen=True)
class Ablation:
    name: str = "full"
    use_attention: bool = True
    use_mask: bool = True
    graph_kind: str = "full"
    dynamic_kind: str = "learned"  # or "topology"
    recurrent: bool = True


ABLATIONS = {
    "full": Ablation("full"),
    "wo-tm": Ablation("wo-tm", use_mask=False),
    "wo-cg": Ablation("wo-cg", graph_kind="no_coupling"),
    "wo-bc": Ablation("wo-bc", use_mask=False, graph_kind="no_coupling"),
    "wo-etpmsa": Ablation("wo-etpmsa", use_attention=False),
    "wo-tv": Ablation("wo-tv", graph_kind="topology_only", dynamic_kind="topology"),
    "wo-tr": Ablation("wo-tr", recurrent=False),
    "graph-sl": Ablation("graph-sl", graph_kind="no_coupling"),
    "graph-ag": Ablation("graph-ag", graph_kind="single_adaptive"),
    "graph-s": Ablation("graph-s", graph_kind="topology_only"),
}


def get_ablation(name: str) -> Ablation:
    try:
        return ABLATIONS[name]
    except KeyError:
        raise ConfigError(f"unknown ablation {name!r}; choose from {sorted(ABLATIONS)}") from None


# ---------------------------------------------------------------- parameters

def param_shapes(cfg: ModelConfig, ablation: Ablation | str = "full") -> dict[str, tuple]:
    ab = get_ablation(ablation) if isinstance(ablation, str) else ablation
    D, h, dh, dE, dm = cfg.D, cfg.heads, cfg.d_head, cfg.E, cfg.d_m
    hid, dphi = cfg.hidden, cfg.d_phi
    N, C, T = cfg.n_nodes, cfg.channels, cfg.T
    shapes: dict[str, tuple] = {"in.w": (C, D), "in.b": (D,)}
    for l in range(cfg.encoder_layers):
        p = f"enc.{l}."
        shapes.update({p + "wq": (h, D, dh), p + "wk": (h, D, dh), p + "wv": (h, D, dh),
                       p + "wo": (h * dh, D), p + "ln_g": (D,), p + "ln_b": (D,)})
    shapes.update({"mask.e_static": (N, dm), "mask.e_daily": (cfg.samples_per_day, dm),
                   "mask.e_weekly": (7, dm)})
    shapes.update({"graph.E": (N, dE), "graph.e": (T, N, dE), "graph.w": (T, T)})
    if ab.recurrent:
        for l in range(cfg.ctvgcrm_layers):
            d_in = D if l == 0 else hid
            p = f"rnn.{l}."
            shapes[p + "phi.w"] = (d_in, dphi)
            shapes[p + "phi.a"] = (2 * dphi,)
            for g in GATES:
                shapes[f"{p}{g}.s.w_pool"] = (dE, (d_in + hid) * hid)
                shapes[f"{p}{g}.s.b_pool"] = (dE, hid)
                shapes[f"{p}{g}.d.w_pool"] = (dphi, (d_in + hid) * hid)
                shapes[f"{p}{g}.d.b_pool"] = (dphi, hid)
                shapes[f"{p}{g}.f"] = (2 * hid, hid)
        shapes["head.w"] = (hid, cfg.tau * C)
    else:
        for l in range(cfg.ctvgcrm_layers):
            d_in = D if l == 0 else hid
            shapes[f"tr.{l}.w_pool"] = (dE, d_in * hid)
            shapes[f"tr.{l}.b_pool"] = (dE, hid)
        shapes["head.w"] = (T * hid, cfg.tau * C)
    shapes["head.b"] = (cfg.tau * C,)
    return shapes


EMBEDDINGS = ("graph.E", "graph.e")
MASK_EMBEDDINGS = ("mask.e_static", "mask.e_daily", "mask.e_weekly")
ZERO_INIT = ("in.b", "head.b")


def _fan_in(name: str, shape: tuple, cfg: ModelConfig) -> int:
    if name.endswith("w_pool"):
        return shape[1] // cfg.hidden
    if name.endswith("phi.a"):
        return shape[0] // 2
    if len(shape) == 3:  # per-head projections
        return shape[1]
    return shape[0]


def init_params(cfg: ModelConfig, seed: int = 0, ablation: Ablation | str = "full") -> dict[str, Tensor]:
    """Deterministic parameter initialization, keyed by hierarchical name."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg, ablation).items():
        if name in EMBEDDINGS:
            data = rng.uniform(-0.1, 0.1, shape)
        elif name == "mask.e_static":
            bound = np.sqrt(3.0 / shape[1])
            data = rng.uniform(-bound, bound, shape)
        elif name in ("mask.e_daily", "mask.e_weekly"):
            data = 1.0 + rng.uniform(-0.1, 0.1, shape)
        elif name in ZERO_INIT or name.endswith("ln_b"):
            data = np.zeros(shape)
        elif name.endswith("ln_g"):
            data = np.ones(shape)
        else:
            bound = 1.0 / np.sqrt(_fan_in(name, shape, cfg))
            data = rng.uniform(-bound, bound, shape)
        params[name] = Tensor(data, requires_grad=True, name=name)
    return params


def count_params(params: dict[str, Tensor]) -> int:
    return int(sum(p.size for p in params.values()))


# ---------------------------------------------------------------- building blocks

def graph_conv(X: Tensor, A, E_node: Tensor, w_pool: Tensor, b_pool: Tensor) -> Tensor:
    """Node-adaptive graph convolution: ((I + A) X) with per-node weights E_node @ w_pool.

    ``X`` is ``[..., N, d_in]``; ``A`` and ``E_node`` broadcast against the
    leading dimensions of ``X``.
    """
    d_in = X.shape[-1]
    d_E = E_node.shape[-1]
    if w_pool.shape[0] != d_E or w_pool.shape[1] % d_in:
        raise ContractError(f"weight pool {w_pool.shape} does not fit inputs of width {d_in} "
                            f"and embeddings of width {d_E}")
    A = nc.as_tensor(A)
    if A.shape[-1] != X.shape[-2]:
        raise ContractError(f"adjacency {A.shape} does not match {X.shape[-2]} nodes")
    return _node_adaptive(_aggregate(X, A), E_node, _stack_pool(w_pool, d_in), b_pool)


def _aggregate(X: Tensor, A) -> Tensor:
    return X + nc.matmul(A, X)


def _stack_pool(w_pool: Tensor, d_in: int) -> Tensor:
    """``[d_E, d_in * d_h]`` pool rearranged to ``[d_in, d_E * d_h]`` for one GEMM."""
    d_E = w_pool.shape[0]
    d_h = w_pool.shape[1] // d_in
    return nc.reshape(nc.transpose(nc.reshape(w_pool, (d_E, d_in, d_h)), (1, 0, 2)), (d_in, d_E * d_h))


def _node_adaptive(agg: Tensor, E_node: Tensor, pool: Tensor, b_pool: Tensor) -> Tensor:
    """Rows of ``agg`` times per-node weights sum_k E[n, k] * W_k, plus E_node @ b_pool.

    One GEMM against the stacked pool followed by an embedding-weighted sum
    avoids N tiny matrix products.
    """
    d_E = E_node.shape[-1]
    xw = nc.matmul(agg, pool)
    xw = nc.reshape(xw, xw.shape[:-1] + (d_E, pool.shape[1] // d_E))
    weights = nc.reshape(E_node, E_node.shape + (1,))
    return nc.sum(xw * weights, axis=-2) + nc.matmul(E_node, b_pool)


def stack_pools(params: dict, prefix: str, d_in: int) -> dict:
    """Per-layer rearranged weight pools, computed once and reused at every step."""
    return {f"{g}.{b}": _stack_pool(params[f"{prefix}{g}.{b}.w_pool"], d_in)
            for g in GATES for b in ("s", "d")}


def _gate(agg_s, agg_d, E_t, Ev_t, params, pools, prefix, g):
    s = _node_adaptive(agg_s, E_t, pools[g + ".s"], params[f"{prefix}{g}.s.b_pool"])
    d = _node_adaptive(agg_d, Ev_t, pools[g + ".d"], params[f"{prefix}{g}.d.b_pool"])
    return nc.matmul(nc.concat([s, d], axis=-1), params[f"{prefix}{g}.f"])


def cell_step(H_t: Tensor, h_prev, A_static, A_dyn, E_t: Tensor, Ev_t: Tensor, params: dict,
              prefix: str = "rnn.0.", force_z: float | None = None, pools: dict | None = None) -> Tensor:
    """One recurrence step with static- and dynamic-graph convolutions per gate."""
    h_prev = nc.as_tensor(h_prev)
    hat = nc.concat([H_t, h_prev], axis=-1)
    if pools is None:
        pools = stack_pools(params, prefix, hat.shape[-1])
    gate = "z"
    try:
        # z and r read the same input, so they share its graph aggregation
        agg_s, agg_d = _aggregate(hat, A_static), _aggregate(hat, A_dyn)
        if force_z is None:
            z = nc.sigmoid(_gate(agg_s, agg_d, E_t, Ev_t, params, pools, prefix, "z"))
        else:
            z = nc.Tensor(np.full(h_prev.shape, float(force_z)))
        gate = "r"
        r = nc.sigmoid(_gate(agg_s, agg_d, E_t, Ev_t, params, pools, prefix, "r"))
        gate = "c"
        g = nc.concat([H_t, r * h_prev], axis=-1)
        c = nc.tanh(_gate(_aggregate(g, A_static), _aggregate(g, A_dyn), E_t, Ev_t, params, pools,
                          prefix, "c"))
        gate = "update"
        return z * h_prev + (1.0 - z) * c
    except NumericError as exc:
        raise NumericError(f"non-finite hidden state in gate {gate}: {exc}") from exc


def _run_layer(seq, h, A_s, E_s, A_d, E_v, params, prefix):
    pools = stack_pools(params, prefix, seq.shape[-1] + h.shape[-1])
    outs = []
    for t in range(seq.shape[1]):
        h = cell_step(seq[:, t], h, A_s[t], A_d[:, t], E_s[t], E_v[:, t], params, prefix=prefix,
                      pools=pools)
        outs.append(h)
    return outs


# ---------------------------------------------------------------- model

class HTVGNN:
    """Attention encoder followed by a coupled time-varying graph GRU stack."""

    def __init__(self, cfg: ModelConfig, graphs: GraphSet, mean, std, params=None,
                 ablation: Ablation | str = "full", seed: int = 0):
        self.cfg = cfg
        self.ablation = get_ablation(ablation) if isinstance(ablation, str) else ablation
        if graphs.n_nodes != cfg.n_nodes:
            raise ConfigError(f"graphs cover {graphs.n_nodes} nodes, config expects {cfg.n_nodes}")
        self.graphs = graphs
        self.mean = np.asarray(mean, dtype=np.float64).reshape(cfg.channels)
        self.std = np.asarray(std, dtype=np.float64).reshape(cfg.channels)
        self.params = params if params is not None else init_params(cfg, seed, self.ablation)
        self._pe = positional_encoding(cfg.T, cfg.D)[:, None, :]
        self._dyn_mask = dynamic_mask(graphs)
        self._topo_norm = row_normalize(graphs.a_topo)
        self._provider = graph_provider(self.ablation.graph_kind, graphs.a_topo)

    # -- pieces exposed for inspection and tests
    def attention_masks(self, tod, dow) -> Tensor:
        p = self.params
        m = mask_embedding_at(p["mask.e_static"], p["mask.e_daily"], p["mask.e_weekly"], tod, dow)
        return mask_matrix(m)

    def static_graphs(self):
        p = self.params
        return self._provider(p["graph.E"], p["graph.e"], p["graph.w"])

    def encode(self, x, tod, dow) -> Tensor:
        p, cfg = self.params, self.cfg
        h = nc.matmul(nc.as_tensor(x), p["in.w"]) + p["in.b"]
        if not self.ablation.use_attention:
            return h
        h = h + self._pe
        masks = self.attention_masks(tod, dow) if self.ablation.use_mask else None
        for l in range(cfg.encoder_layers):
            pre = f"enc.{l}."
            att = etpmsa(h, masks, p, prefix=pre)
            h = layer_norm(h + att, p[pre + "ln_g"], p[pre + "ln_b"])
        return h

    def _recurrent(self, seq: Tensor) -> Tensor:
        p, cfg = self.params, self.cfg
        A_s, E_s = self.static_graphs()
        B = seq.shape[0]
        h = None
        for l in range(cfg.ctvgcrm_layers):
            pre = f"rnn.{l}."
            A_d, E_v = dynamic_graph_at(p[pre + "phi.w"], p[pre + "phi.a"], seq, self._dyn_mask)
            if self.ablation.dynamic_kind == "topology":
                A_d = nc.Tensor(np.broadcast_to(self._topo_norm, A_d.shape).copy())
            h0 = np.zeros((B, cfg.n_nodes, cfg.hidden))
            outs = _run_layer(seq, h0, A_s, E_s, A_d, E_v, p, pre)
            h = outs[-1]
            if l + 1 < cfg.ctvgcrm_layers:
                seq = nc.stack(outs, axis=1)
        return nc.matmul(h, p["head.w"]) + p["head.b"]

    def _feedforward(self, seq: Tensor) -> Tensor:
        p, cfg = self.params, self.cfg
        _, E_s = graph_provider("topology_only", self.graphs.a_topo)(p["graph.E"], p["graph.e"], p["graph.w"])
        for l in range(cfg.ctvgcrm_layers):
            seq = nc.tanh(graph_conv(seq, self._topo_norm, E_s, p[f"tr.{l}.w_pool"], p[f"tr.{l}.b_pool"]))
        B, T, N, H = seq.shape
        flat = nc.reshape(nc.transpose(seq, (0, 2, 1, 3)), (B, N, T * H))
        return nc.matmul(flat, p["head.w"]) + p["head.b"]

    def forward(self, batch) -> Tensor:
        """Raw-scale forecasts ``[B, tau, N, C]`` for a :class:`ForecastBatch`."""
        cfg = self.cfg
        x = np.asarray(batch.x, dtype=np.float64)
        if x.shape[1:] != (cfg.T, cfg.n_nodes, cfg.channels):
            raise ContractError(f"batch x has shape {x.shape}, expected (B, {cfg.T}, "
                                f"{cfg.n_nodes}, {cfg.channels})")
        seq = self.encode(x, batch.tod, batch.dow)
        out = self._recurrent(seq) if self.ablation.recurrent else self._feedforward(seq)
        B = x.shape[0]
        out = nc.reshape(out, (B, cfg.n_nodes, cfg.tau, cfg.channels))
        out = nc.transpose(out, (0, 2, 1, 3))
        return out * self.std + self.mean

    __call__ = forward


def masked_mae(pred: Tensor, y: np.ndarray, zero_threshold: float = 1e-3) -> Tensor:
    """Mean |pred - y| over entries whose target magnitude exceeds the threshold."""
    y = np.asarray(y, dtype=np.float64)
    keep = (np.abs(y) > zero_threshold).astype(np.float64)
    count = keep.sum()
    if count == 0:
        raise ContractError("every target entry is masked")
    return nc.sum(nc.absolute(pred - y) * keep) * (1.0 / count)


# ---------------------------------------------------------------- checkpoints

MAGIC = b"HTVGNNCK"
_LEN = struct.Struct("<Q")


def save_checkpoint(path, model: HTVGNN, extra: dict | None = None) -> None:
    tensors = {name: t.data for name, t in model.params.items()}
    tensors["graphs.a_topo"] = model.graphs.a_topo
    tensors["graphs.a_dtw"] = model.graphs.a_dtw
    tensors["stats.mean"] = model.mean
    tensors["stats.std"] = model.std
    manifest = {
        "config": model.cfg.to_text(),
        "ablation": model.ablation.name,
        "extra": extra or {},
        "tensors": [[name, list(arr.shape)] for name, arr in tensors.items()],
    }
    blob = json.dumps(manifest, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(_LEN.pack(len(blob)))
        fh.write(blob)
        for arr in tensors.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[HTVGNN, dict]:
    raw = Path(path).read_bytes()
    if raw[:len(MAGIC)] != MAGIC:
        raise ContractError(f"{path} is not a checkpoint")
    (n,) = _LEN.unpack_from(raw, len(MAGIC))
    start = len(MAGIC) + _LEN.size
    manifest = json.loads(raw[start:start + n])
    offset = start + n
    tensors = {}
    for name, shape in manifest["tensors"]:
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).astype(np.float64)
        tensors[name] = arr.reshape(shape)
        offset += 8 * count
    if offset != len(raw):
        raise ContractError(f"{path}: {len(raw) - offset} trailing bytes after tensors")
    cfg = ModelConfig.from_text(manifest["config"])
    graphs = GraphSet(tensors.pop("graphs.a_topo"), tensors.pop("graphs.a_dtw"))
    mean, std = tensors.pop("stats.mean"), tensors.pop("stats.std")
    params = {k: Tensor(v, requires_grad=True, name=k) for k, v in tensors.items()}
    model = HTVGNN(cfg, graphs, mean, std, params=params, ablation=manifest["ablation"])
    return model, manifest.get("extra", {})
