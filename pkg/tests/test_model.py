import numpy as np
import pytest

from htvgnn import numcore as nc
from htvgnn import oracles
from htvgnn.errors import ConfigError, ContractError
from htvgnn.model import (ABLATIONS, HTVGNN, ModelConfig, count_params, graph_conv,
                          init_params, load_checkpoint, masked_mae, param_shapes, preset,
                          save_checkpoint, cell_step)
from htvgnn.numcore import Tensor
from htvgnn.verify import tiny_batch, tiny_config, tiny_graphs, tiny_model

# closed-form count over the declared shapes for the PEMS08 preset, frozen here
PEMS08_PARAMS = 580761


# ---- node-adaptive graph convolution

def test_graph_conv_without_aggregation(rng):
    X = rng.standard_normal((3, 2))
    pool = np.eye(2).reshape(1, 4)
    out = graph_conv(Tensor(X), np.zeros((3, 3)), Tensor(np.full((3, 1), 2.0)),
                     Tensor(pool), Tensor(np.zeros((1, 2))))
    assert np.abs(out.data - 2 * X).max() <= 1e-15


def test_shared_embeddings_reduce_to_plain_gcn(rng):
    X, A = rng.standard_normal((4, 3)), rng.uniform(size=(4, 4))
    pool, b = rng.standard_normal((2, 3 * 5)), rng.standard_normal((2, 5))
    e = np.tile([[0.4, -1.1]], (4, 1))
    W = 0.4 * pool[0].reshape(3, 5) - 1.1 * pool[1].reshape(3, 5)
    bias = 0.4 * b[0] - 1.1 * b[1]
    out = graph_conv(Tensor(X), A, Tensor(e), Tensor(pool), Tensor(b)).data
    assert np.abs(out - ((X + A @ X) @ W + bias)).max() <= 1e-12


def test_graph_conv_per_node_oracle(rng):
    X, A, E = rng.standard_normal((2, 3)), rng.uniform(size=(2, 2)), rng.standard_normal((2, 2))
    pool, b = rng.standard_normal((2, 3 * 2)), rng.standard_normal((2, 2))
    out = graph_conv(Tensor(X), A, Tensor(E), Tensor(pool), Tensor(b)).data
    assert np.abs(out - oracles.napl_conv(X, A, E, pool, b)).max() <= 1e-12


def test_graph_conv_pool_mismatch(rng):
    with pytest.raises(ContractError):
        graph_conv(Tensor(np.ones((2, 3))), np.eye(2), Tensor(np.ones((2, 2))),
                   Tensor(np.ones((3, 6))), Tensor(np.ones((2, 2))))


# ---- recurrent cell

def cell_inputs(rng, N=2, D=2, hid=2, dE=2):
    cfg = ModelConfig(heads=1, D=D, E=dE, d_m=2, n_nodes=N, ctvgcrm_layers=1, T=1, tau=1,
                      samples_per_day=4)
    params = {k: v.data for k, v in init_params(cfg, seed=int(rng.integers(1000))).items()}
    for k in params:
        params[k] = rng.standard_normal(params[k].shape)
    H, h = rng.standard_normal((N, D)), rng.standard_normal((N, hid))
    As = oracles.row_softmax_loops(rng.standard_normal((N, N)))
    Ad = oracles.row_softmax_loops(rng.standard_normal((N, N)))
    Es, Ev = rng.standard_normal((N, dE)), rng.standard_normal((N, dE))
    return H, h, As, Ad, Es, Ev, params


def run_cell(inputs, **kw):
    H, h, As, Ad, Es, Ev, params = inputs
    tp = {k: Tensor(v) for k, v in params.items()}
    return cell_step(Tensor(H), h, As, Ad, Tensor(Es), Tensor(Ev), tp, prefix="rnn.0.", **kw).data


def test_forced_update_gate_one_keeps_state(rng):
    inputs = cell_inputs(rng)
    assert np.array_equal(run_cell(inputs, force_z=1.0), inputs[1])


def test_forced_update_gate_zero_gives_candidate(rng):
    inputs = cell_inputs(rng)
    H, h, As, Ad, Es, Ev, p = inputs
    pre = "rnn.0."
    r = oracles.sigmoid(np.concatenate([
        oracles.napl_conv(np.hstack([H, h]), As, Es, p[pre + "r.s.w_pool"], p[pre + "r.s.b_pool"]),
        oracles.napl_conv(np.hstack([H, h]), Ad, Ev, p[pre + "r.d.w_pool"], p[pre + "r.d.b_pool"])],
        axis=1) @ p[pre + "r.f"])
    g = np.hstack([H, r * h])
    c = np.tanh(np.concatenate([
        oracles.napl_conv(g, As, Es, p[pre + "c.s.w_pool"], p[pre + "c.s.b_pool"]),
        oracles.napl_conv(g, Ad, Ev, p[pre + "c.d.w_pool"], p[pre + "c.d.b_pool"])], axis=1) @ p[pre + "c.f"])
    assert np.abs(run_cell(inputs, force_z=0.0) - c).max() <= 1e-12


def test_cell_matches_expanded_oracle(rng):
    for _ in range(5):
        inputs = cell_inputs(rng)
        H, h, As, Ad, Es, Ev, p = inputs
        ref = oracles.gru_step(H, h, As, Ad, Es, Ev, p, "rnn.0.")
        assert np.abs(run_cell(inputs) - ref).max() <= 1e-10


def test_cell_convexity_bound(rng):
    for _ in range(20):
        inputs = cell_inputs(rng)
        H, h, As, Ad, Es, Ev, p = inputs
        out = run_cell(inputs)
        # candidate lies in (-1, 1); the update is a convex mix with h
        assert np.all(np.abs(out) <= np.maximum(np.abs(h), 1.0))


# ---- full model

def test_output_shape_default_horizon():
    cfg = preset("synthetic", T=12, tau=12)
    rng = np.random.default_rng(0)
    model = HTVGNN(cfg, tiny_graphs(8), [50.0], [10.0])
    out = model(tiny_batch(cfg, rng, B=2))
    assert out.shape == (2, 12, 8, 1)


def test_zero_head_predicts_mean():
    model, batch = tiny_model(3)
    model.params["head.w"].data[...] = 0.0
    model.params["head.b"].data[...] = 0.0
    assert np.array_equal(model(batch).data, np.full((1, 2, 3, 1), 10.0))


def test_forward_is_deterministic():
    model, batch = tiny_model(4)
    assert model(batch).data.tobytes() == model(batch).data.tobytes()


def test_same_seed_same_parameters():
    cfg = tiny_config()
    a, b = init_params(cfg, 9), init_params(cfg, 9)
    assert all(a[k].data.tobytes() == b[k].data.tobytes() for k in a)
    c = init_params(cfg, 10)
    assert any(a[k].data.tobytes() != c[k].data.tobytes() for k in a)


def test_pems08_parameter_count():
    cfg = preset("pems08")
    assert (cfg.batch, cfg.heads, cfg.D, cfg.E, cfg.d_m, cfg.ctvgcrm_layers) == (16, 8, 64, 5, 15, 2)
    assert count_params(init_params(cfg)) == PEMS08_PARAMS
    assert sum(int(np.prod(s)) for s in param_shapes(cfg).values()) == PEMS08_PARAMS


def test_initial_step_graphs_nearly_time_invariant():
    model = HTVGNN(preset("synthetic"), tiny_graphs(8), [0.0], [1.0], seed=0)
    A, _ = model.static_graphs()
    assert np.abs(A.data - A.data[0]).max() < 0.05


def test_wo_etpmsa_skips_attention():
    model, batch = tiny_model(2, ablation="wo-etpmsa")
    for k in ("enc.0.wq", "enc.0.wk", "mask.e_static"):
        model.params[k].data[...] = np.nan  # would poison the output if touched
    assert np.isfinite(model(batch).data).all()


def test_wo_bc_drops_mask_and_coupling():
    ab = ABLATIONS["wo-bc"]
    assert not ab.use_mask and ab.graph_kind == "no_coupling"


@pytest.mark.parametrize("name", [k for k in ABLATIONS if k != "full"])
def test_each_ablation_changes_output(name):
    full, batch = tiny_model(6)
    other, _ = tiny_model(6, ablation=name)
    shared = [k for k in full.params if k in other.params and full.params[k].shape == other.params[k].shape]
    for k in shared:
        other.params[k].data[...] = full.params[k].data
    assert np.abs(full(batch).data - other(batch).data).max() > 1e-8


def test_forward_rejects_wrong_window():
    model, batch = tiny_model(0)
    batch.x = batch.x[:, :3]
    with pytest.raises(ContractError, match="expected"):
        model(batch)


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(D=10, heads=4)
    with pytest.raises(ConfigError):
        preset("pems99")


def test_config_text_round_trip():
    cfg = preset("pems04", lr=3e-4)
    assert ModelConfig.from_text(cfg.to_text()) == cfg


def test_masked_mae_excludes_zero_targets():
    pred = Tensor(np.array([2.0, 5.0, 1.0]))
    assert masked_mae(pred, np.array([1.0, 0.0, 3.0])).item() == 1.5
    with pytest.raises(ContractError):
        masked_mae(pred, np.zeros(3))


def test_checkpoint_round_trip_bitwise(tmp_path):
    model, batch = tiny_model(8, ablation="wo-cg")
    save_checkpoint(tmp_path / "m.bin", model, {"epoch": 3})
    back, extra = load_checkpoint(tmp_path / "m.bin")
    assert extra == {"epoch": 3}
    assert back.ablation.name == "wo-cg" and back.cfg == model.cfg
    assert all(back.params[k].data.tobytes() == v.data.tobytes() for k, v in model.params.items())
    assert back(batch).data.tobytes() == model(batch).data.tobytes()


def test_checkpoint_rejects_foreign_file(tmp_path):
    p = tmp_path / "x.bin"
    p.write_bytes(b"not a checkpoint at all")
    with pytest.raises(ContractError):
        load_checkpoint(p)


def test_full_loss_gradient_flows_everywhere():
    model, batch = tiny_model(1)
    nc.backward(masked_mae(model(batch), batch.y))
    dead = [k for k, p in model.params.items() if p.grad is None or not np.any(p.grad)]
    assert dead == []
