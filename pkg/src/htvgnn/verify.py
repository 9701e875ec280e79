"""End-to-end self-checks behind ``htvgnn verify``."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from . import oracles
from .attention import etpmsa, mask_embedding_at, mask_matrix, mhsa_plain
from .data import ForecastBatch
from .graphs import GraphSet, dtw_distance
from .model import HTVGNN, ModelConfig, masked_mae
from .trainer import metrics
from .tvgraph import coupled_static_graphs, dynamic_graph_at

GRAD_TOL = 1e-4


@dataclass
class Check:
    name: str
    passed: bool
    detail: str = ""


def tiny_config(**kw) -> ModelConfig:
    base = dict(encoder_layers=1, batch=1, heads=2, D=8, E=3, d_m=4, ctvgcrm_layers=2, T=4, tau=2,
                n_nodes=3, channels=1, samples_per_day=8)
    base.update(kw)
    return ModelConfig(**base)


def tiny_graphs(n=3) -> GraphSet:
    topo = np.eye(n)
    for i in range(n - 1):
        topo[i, i + 1] = topo[i + 1, i] = 1.0
    dtw = np.eye(n)
    dtw[0, n - 1] = dtw[n - 1, 0] = 1.0
    return GraphSet(topo, dtw)


def tiny_batch(cfg: ModelConfig, rng, B=1) -> ForecastBatch:
    n = cfg.samples_per_day
    start = rng.integers(0, 7 * n, size=B)
    idx = start[:, None] + np.arange(cfg.T)[None, :]
    return ForecastBatch(
        x=rng.standard_normal((B, cfg.T, cfg.n_nodes, cfg.channels)),
        y=rng.uniform(5.0, 15.0, (B, cfg.tau, cfg.n_nodes, cfg.channels)),
        tod=idx % n, dow=(idx // n) % 7)


def tiny_model(seed=0, ablation="full", **kw):
    cfg = tiny_config(**kw)
    rng = np.random.default_rng(seed)
    model = HTVGNN(cfg, tiny_graphs(cfg.n_nodes), mean=[10.0], std=[2.0], seed=seed, ablation=ablation)
    # move the embeddings off their small init so every branch carries signal
    for name in ("graph.E", "graph.e"):
        model.params[name].data[...] = rng.uniform(-1.0, 1.0, model.params[name].shape)
    return model, tiny_batch(cfg, rng)


def full_loss_gradcheck(seed=0, ablation="full") -> float:
    model, batch = tiny_model(seed, ablation)
    return nc.gradcheck(lambda p: masked_mae(model.forward(batch), batch.y), model.params)


def _gc(name, f, x):
    err = nc.gradcheck(f, x)
    return Check(f"gradcheck {name}", err < GRAD_TOL, f"max rel err {err:.2e}")


def suite_gradcheck() -> list[Check]:
    rng = np.random.default_rng(7)
    T = lambda *s: nc.Tensor(rng.standard_normal(s), requires_grad=True)  # noqa: E731
    checks = [
        _gc("matmul", lambda xs: nc.sum(nc.square(nc.matmul(xs[0], xs[1]))), [T(2, 3, 4), T(4, 2)]),
        _gc("softmax", lambda x: nc.sum(nc.softmax(x, axis=-1) * np.arange(5.0)), T(3, 5)),
        _gc("sigmoid/tanh", lambda x: nc.sum(nc.sigmoid(x) * nc.tanh(x)), T(4, 3)),
        _gc("concat", lambda xs: nc.sum(nc.square(nc.concat(xs, axis=1)) * np.arange(5.0)),
            [T(2, 2), T(2, 3)]),
        _gc("take", lambda x: nc.sum(nc.square(nc.take(x, np.array([[0, 2], [2, 2]]), axis=0))), T(3, 2)),
    ]
    x, wq, wk, wv, wo = T(1, 2, 3, 4), T(2, 4, 2), T(2, 4, 2), T(2, 4, 2), T(4, 4)
    masks = T(1, 2, 3, 3)

    def att(xs):
        p = dict(zip(("wq", "wk", "wv", "wo"), xs[1:5]))
        return nc.sum(nc.square(etpmsa(xs[0], xs[5], p)))

    checks.append(_gc("etpmsa (3 nodes, T=2, h=2, D=4)", att, [x, wq, wk, wv, wo, masks]))
    E, e, w = T(3, 2), T(3, 3, 2), T(3, 3)
    probe = rng.standard_normal((3, 3, 3))
    checks.append(_gc("coupled static graphs", lambda xs: nc.sum(coupled_static_graphs(*xs) * probe),
                      [E, e, w]))
    weights = rng.standard_normal((3, 3))
    mask = tiny_graphs(3).a_topo
    checks.append(_gc("dynamic graph", lambda xs: nc.sum(
        dynamic_graph_at(xs[0], xs[1], xs[2], mask)[0] * weights), [T(4, 2), T(4), T(3, 4)]))
    t0 = time.perf_counter()
    err = full_loss_gradcheck()
    checks.append(Check("gradcheck full loss (B=1,T=4,tau=2,N=3,D=8,h=2,d_m=4,d_E=3)", err < GRAD_TOL,
                        f"max rel err {err:.2e} in {time.perf_counter() - t0:.1f}s"))
    return checks


def suite_invariants(instances: int = 20) -> list[Check]:
    rng = np.random.default_rng(11)
    worst_rows, support_ok, causal, reduce_err, psd_ok = 0.0, True, 0.0, 0.0, True
    for _ in range(instances):
        model, batch = tiny_model(int(rng.integers(1 << 30)))
        p = model.params
        with nc.no_grad():
            A = coupled_static_graphs(p["graph.E"], p["graph.e"], p["graph.w"]).data
            worst_rows = max(worst_rows, float(np.abs(A.sum(-1) - 1).max()))
            H = rng.standard_normal((3, 8))
            mask = np.minimum(model.graphs.a_topo + model.graphs.a_dtw, 1.0)
            Ad, _ = dynamic_graph_at(p["rnn.0.phi.w"], p["rnn.0.phi.a"], H, mask)
            support_ok &= bool(np.all(Ad.data[mask == 0] == 0.0))
            bumped = p["graph.e"].data.copy()
            bumped[2:] += rng.standard_normal(bumped[2:].shape)
            A2 = coupled_static_graphs(p["graph.E"], nc.Tensor(bumped), p["graph.w"]).data
            causal = max(causal, float(np.abs(A2[:2] - A[:2]).max()))
            x = nc.Tensor(rng.standard_normal((2, 4, 3, 8)))
            eye = np.broadcast_to(np.eye(3), (2, 4, 3, 3))
            a = etpmsa(x, eye, p, prefix="enc.0.").data
            b = mhsa_plain(x, p, prefix="enc.0.").data
            reduce_err = max(reduce_err, float(np.abs(a - b).max()))
            m = mask_embedding_at(p["mask.e_static"], p["mask.e_daily"], p["mask.e_weekly"],
                                  batch.tod, batch.dow)
            M = mask_matrix(m).data
            psd_ok &= bool(np.allclose(M, np.swapaxes(M, -1, -2), atol=0, rtol=0)
                           and np.linalg.eigvalsh(M).min() > -1e-10)
    return [
        Check("coupled static graphs row-stochastic", worst_rows <= 1e-10, f"max |rowsum-1| {worst_rows:.1e}"),
        Check("dynamic graph support within topology+DTW union", support_ok, "exact zeros"),
        Check("coupling causality probe", causal == 0.0, f"max change {causal:.1e}"),
        Check("identity-mask reduction", reduce_err <= 1e-12, f"max diff {reduce_err:.1e}"),
        Check("mask matrices symmetric PSD", psd_ok, ""),
    ]


def suite_oracles(pairs: int = 200) -> list[Check]:
    rng = np.random.default_rng(5)
    dtw_ok = True
    for _ in range(pairs):
        x = rng.standard_normal(rng.integers(1, 9))
        y = rng.standard_normal(rng.integers(1, 9))
        dtw_ok &= dtw_distance(x, y) == oracles.dtw_table(x, y)
    pred = rng.uniform(1, 5, (6, 3, 2))
    y = rng.uniform(1, 5, (6, 3, 2))
    y[0, 0, 0] = 0.0
    rep = metrics(pred, y)
    ref = oracles.metrics_direct(pred, y)
    metric_err = max(abs(rep.mae - ref[0]), abs(rep.rmse - ref[1]), abs(rep.mape - ref[2]))
    a, b = rng.standard_normal((5, 4)), rng.standard_normal((4, 3))
    mm_err = float(np.abs(nc.matmul(a, b).data - oracles.matmul_loops(a, b)).max())
    return [
        Check("DTW equals full DP table", bool(dtw_ok), f"{pairs} random pairs"),
        Check("MAE/RMSE/MAPE equal direct formulas", metric_err <= 1e-12, f"max diff {metric_err:.1e}"),
        Check("matmul equals triple loop", mm_err <= 1e-12, f"max diff {mm_err:.1e}"),
    ]


SUITES = {"gradcheck": suite_gradcheck, "invariants": suite_invariants, "oracles": suite_oracles}
