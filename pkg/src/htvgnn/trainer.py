"""Optimization, metrics, evaluation and report formatting."""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numcore as nc
from .data import SeriesDataset, iterate_batches
from .errors import NumericError, TrainingError
from .model import HTVGNN, masked_mae, save_checkpoint

log = logging.getLogger(__name__)

GROUPS = (("15min", 3), ("30min", 6), ("60min", 12), ("Average", None))
TABLE_METRICS = (("MAE", "mae"), ("MAPE(%)", "mape"), ("RMSE", "rmse"))


@dataclass
class MetricReport:
    mae: float
    rmse: float
    mape: float | None  # percent; None when every target is below the zero threshold
    per_step: list[tuple[float, float, float | None]] = field(default_factory=list)
    groups: dict[str, tuple[float, float, float | None]] = field(default_factory=dict)

    def row(self) -> dict:
        out = {"mae": self.mae, "rmse": self.rmse, "mape": self.mape}
        for name, (mae, rmse, mape) in self.groups.items():
            out[f"mae_{name}"] = mae
            out[f"rmse_{name}"] = rmse
            out[f"mape_{name}"] = mape
        return out


def _core(pred: np.ndarray, y: np.ndarray, zero_threshold: float):
    err = pred - y
    mae = float(np.mean(np.abs(err)))
    rmse = float(np.sqrt(np.mean(err * err)))
    keep = np.abs(y) > zero_threshold
    mape = float(np.mean(np.abs(err[keep] / y[keep])) * 100.0) if keep.any() else None
    return mae, rmse, mape


def metrics(pred, y, zero_threshold: float = 1e-3, horizon: str = "cumulative") -> MetricReport:
    """MAE, RMSE and MAPE (percent) overall, per horizon step and per reporting group.

    Arrays with a horizon axis are ``[S, tau, ...]``.  ``horizon="cumulative"``
    averages steps 1..k for the 15/30/60-minute groups; ``"single"`` reports
    step k alone.
    """
    pred = np.asarray(pred, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if pred.shape != y.shape:
        raise ValueError(f"prediction shape {pred.shape} differs from target shape {y.shape}")
    if pred.size == 0:
        raise ValueError("metrics of an empty evaluation set")
    report = MetricReport(*_core(pred, y, zero_threshold))
    if pred.ndim >= 2:
        tau = pred.shape[1]
        report.per_step = [_core(pred[:, k], y[:, k], zero_threshold) for k in range(tau)]
        for name, k in GROUPS:
            if k is None:
                report.groups[name] = (report.mae, report.rmse, report.mape)
                continue
            k = min(k, tau)
            sl = slice(0, k) if horizon == "cumulative" else slice(k - 1, k)
            report.groups[name] = _core(pred[:, sl], y[:, sl], zero_threshold)
    return report


class Adam:
    """Bias-corrected Adam over a dict of named tensors."""

    def __init__(self, params: dict, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self) -> None:
        nc.zero_grads(self.params.values())


@dataclass
class TrainState:
    epoch: int = 0
    best_val_mae: float = math.inf
    best_epoch: int = -1
    patience_counter: int = 0
    seed: int = 0


@dataclass
class TrainResult:
    model: HTVGNN
    log: list[dict]
    state: TrainState
    checkpoint: Path | None


def predict(model: HTVGNN, ds: SeriesDataset, anchors, batch_size: int = 64,
            normalized: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Forecasts and targets ``[S, tau, N, C]`` in anchor order."""
    cfg = model.cfg
    preds, ys = [], []
    with nc.no_grad():
        for b in iterate_batches(ds, anchors, batch_size, cfg.T, cfg.tau, normalized=normalized):
            preds.append(model.forward(b).data)
            ys.append(b.y)
    return np.concatenate(preds), np.concatenate(ys)


def evaluate(model: HTVGNN, ds: SeriesDataset, anchors, zero_threshold: float = 1e-3,
             horizon: str = "cumulative", batch_size: int = 64) -> MetricReport:
    pred, y = predict(model, ds, anchors, batch_size)
    return metrics(pred, y, zero_threshold, horizon)


def train(model: HTVGNN, ds: SeriesDataset, splits: dict, epochs: int | None = None,
          seed: int = 0, lr: float | None = None, patience: int | None = None,
          out_dir=None, zero_threshold: float = 1e-3, batch_size: int | None = None,
          eval_every: int = 1) -> TrainResult:
    """Minibatch Adam on masked MAE with validation early stopping.

    The best-validation parameters are restored on return and, when
    ``out_dir`` is given, written to ``out_dir/checkpoint.bin``.
    """
    cfg = model.cfg
    epochs = cfg.epochs if epochs is None else epochs
    patience = cfg.patience if patience is None else patience
    batch_size = cfg.batch if batch_size is None else batch_size
    opt = Adam(model.params, lr=cfg.lr if lr is None else lr)
    rng = np.random.default_rng(seed)
    state = TrainState(seed=seed)
    ckpt = Path(out_dir) / "checkpoint.bin" if out_dir is not None else None
    if ckpt is not None:
        ckpt.parent.mkdir(parents=True, exist_ok=True)
    normalized = ds.normalize(ds.values)
    train_anchors = splits["train"].windows
    val_anchors = splits["val"].windows
    if not len(val_anchors):
        raise TrainingError("validation partition is shorter than T + tau; no windows to score")
    best = {k: p.data.copy() for k, p in model.params.items()}
    rows: list[dict] = []

    for epoch in range(epochs):
        state.epoch = epoch
        preds, targets, order = [], [], []
        for b in iterate_batches(ds, train_anchors, batch_size, cfg.T, cfg.tau, rng, normalized):
            try:
                # non-finite values are caught by the tape and reported below
                with np.errstate(over="ignore", invalid="ignore"):
                    out = model.forward(b)
                    loss = masked_mae(out, b.y, zero_threshold)
                    nc.backward(loss)
            except NumericError as exc:
                nc.get_tape().clear()
                _restore(model, best)
                where = f"; best checkpoint kept at {ckpt}" if ckpt is not None and ckpt.exists() else ""
                raise TrainingError(f"non-finite values at epoch {epoch}: {exc}{where}") from exc
            if not math.isfinite(loss.item()):
                raise TrainingError(f"loss became non-finite at epoch {epoch}")
            opt.step()
            opt.zero_grad()
            preds.append(out.data)
            targets.append(b.y)
            order.append(b.index)
        # restore anchor order so the epoch summary does not depend on the shuffle
        idx = np.argsort(np.concatenate(order), kind="stable")
        train_rep = metrics(np.concatenate(preds)[idx], np.concatenate(targets)[idx], zero_threshold)
        rows.append(_log_row(epoch, "train", model.ablation.name, train_rep))

        if (epoch + 1) % eval_every and epoch + 1 != epochs:
            continue
        val_rep = evaluate(model, ds, val_anchors, zero_threshold)
        rows.append(_log_row(epoch, "val", model.ablation.name, val_rep))
        log.info("epoch %d train_mae %.4f val_mae %.4f", epoch, train_rep.mae, val_rep.mae)
        if val_rep.mae < state.best_val_mae:
            state.best_val_mae = val_rep.mae
            state.best_epoch = epoch
            state.patience_counter = 0
            best = {k: p.data.copy() for k, p in model.params.items()}
            if ckpt is not None:
                save_checkpoint(ckpt, model, {"epoch": epoch, "seed": seed})
        else:
            state.patience_counter += 1
            if state.patience_counter >= patience:
                log.info("early stop at epoch %d (best %d)", epoch, state.best_epoch)
                break
    _restore(model, best)
    return TrainResult(model, rows, state, ckpt)


def _restore(model: HTVGNN, snapshot: dict) -> None:
    for k, p in model.params.items():
        p.data[...] = snapshot[k]
        p.grad = None


def _log_row(epoch: int, split: str, ablation: str, rep: MetricReport) -> dict:
    return {"epoch": epoch, "split": split, "ablation": ablation, **rep.row()}


LOG_FIELDS = ["epoch", "split", "ablation", "mae", "rmse", "mape"] + [
    f"{m}_{g}" for g, _ in GROUPS for m in ("mae", "rmse", "mape")]


def write_metric_log(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r.get(k)) for k in LOG_FIELDS})


def _fmt(v):
    if v is None:
        return "nan"
    if isinstance(v, float):
        return repr(v)
    return v


def format_table(report: MetricReport, label: str = "HTVGNN") -> str:
    """Fixed-width grid: 15min / 30min / 60min / Average x MAE, MAPE(%), RMSE."""
    first = max(8, len(label))
    cell = 9
    top = " " * first + "".join(f"|{name:^{cell * 3}}" for name, _ in GROUPS)
    sub = f"{'Model':<{first}}" + "".join(
        "|" + "".join(f"{m:^{cell}}" for m, _ in TABLE_METRICS) for _ in GROUPS)
    vals = f"{label:<{first}}"
    for name, _ in GROUPS:
        mae, rmse, mape = report.groups[name]
        got = {"mae": mae, "rmse": rmse, "mape": mape}
        vals += "|" + "".join(
            f"{'undef':^{cell}}" if got[k] is None else f"{got[k]:^{cell}.2f}" for _, k in TABLE_METRICS)
    rule = "-" * len(top)
    return "\n".join([rule, top, sub, rule, vals, rule])


def report_csv(report: MetricReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["horizon"] + [m for m, _ in TABLE_METRICS])
    for name, _ in GROUPS:
        mae, rmse, mape = report.groups[name]
        got = {"mae": mae, "rmse": rmse, "mape": mape}
        w.writerow([name] + [_fmt(got[k]) for _, k in TABLE_METRICS])
    return buf.getvalue()
