import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from htvgnn import data as D
from htvgnn.errors import IngestionError, NormalizationError, WindowingError


def write(tmp_path, text, name="series.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_csv_direct_read(tmp_path):
    ds = D.load_series(write(tmp_path, "1,2\n3,4\n5,6\n"))
    assert ds.values.shape == (3, 2, 1)
    assert ds.values[1, 0, 0] == 3


def test_csv_hole_is_carried_forward(tmp_path):
    ds = D.load_series(write(tmp_path, "1,2\n,4\n5,6\n"))
    assert ds.values[1, 0, 0] == 1


def test_csv_leading_hole_becomes_zero(tmp_path):
    ds = D.load_series(write(tmp_path, ",2\n3,4\n"))
    assert ds.values[0, 0, 0] == 0


def test_csv_bad_cell_names_location(tmp_path):
    with pytest.raises(IngestionError, match="line 2, column 2"):
        D.load_series(write(tmp_path, "1,2\n3,x\n"))


def test_csv_multichannel(tmp_path):
    ds = D.load_series(write(tmp_path, "1,2,3,4\n5,6,7,8\n"), channels=2)
    assert ds.values.shape == (2, 2, 2)
    assert ds.values[1, 1, 0] == 7


def test_unknown_layout(tmp_path):
    with pytest.raises(IngestionError):
        D.load_series(write(tmp_path, "1\n"), layout="parquet")


def test_packed_round_trip_bitwise(tmp_path, rng):
    values = rng.standard_normal((17, 5, 2))
    values[3, 1, 0] = -0.0
    values[4, 2, 1] = 5e-324
    path = tmp_path / "x.bin"
    D.write_packed(path, values)
    back = D.load_series(path, layout="packed_binary").values
    assert back.tobytes() == values.tobytes()


def test_packed_truncated_body(tmp_path):
    path = tmp_path / "x.bin"
    D.write_packed(path, np.ones((2, 2, 1)))
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(IngestionError, match="body"):
        D.read_packed(path)


def test_npz_layout(tmp_path):
    path = tmp_path / "x.npz"
    np.savez(path, data=np.arange(12.0).reshape(4, 3))
    assert D.load_series(path, layout="npz").values.shape == (4, 3, 1)


# ---- normalization

def test_zscore_hand_values():
    ds = D.SeriesDataset(np.array([1.0, 2.0, 3.0, 9.0, 9.0])[:, None, None])
    norm = D.zscore_fit_transform(ds, 0.6)
    assert ds.mean[0] == 2.0
    assert abs(ds.std[0] - math.sqrt(2 / 3)) < 1e-15
    assert abs(norm[2, 0, 0] - 1.224744871391589) < 1e-12


def test_zscore_constant_train_raises():
    ds = D.SeriesDataset(np.array([4.0, 4.0, 4.0, 1.0, 2.0])[:, None, None])
    with pytest.raises(NormalizationError, match="zero standard deviation"):
        D.zscore_fit_transform(ds, 0.6)


def test_zscore_of_standardized_data_is_identity(rng):
    x = rng.standard_normal(60)
    x = (x - x.mean()) / x.std()
    ds = D.SeriesDataset(np.concatenate([x, rng.standard_normal(40)])[:, None, None])
    norm = D.zscore_fit_transform(ds, 0.6)
    assert np.abs(norm[:60, 0, 0] - x).max() <= 1e-12


def test_inverse_transform(rng):
    ds = D.SeriesDataset(rng.uniform(0, 500, (50, 4, 2)))
    norm = D.zscore_fit_transform(ds)
    assert np.abs(ds.denormalize(norm) - ds.values).max() <= 1e-10


def test_stats_use_training_slice_only(rng):
    vals = rng.standard_normal((100, 2, 1))
    vals[60:] += 1000.0
    ds = D.SeriesDataset(vals)
    D.zscore_fit_transform(ds, 0.6)
    assert abs(ds.mean[0]) < 1.0


# ---- splitting and windowing

def test_window_counts_for_100_steps():
    ds = D.SeriesDataset(np.random.default_rng(0).standard_normal((100, 2, 1)))
    splits = D.split_and_window(ds)
    assert [(s.start, s.stop) for s in splits.values()] == [(0, 60), (60, 80), (80, 100)]
    assert len(splits["train"].windows) == 60 - (12 + 12) + 1 == 37
    assert len(splits["val"].windows) == 0


def test_ratios_must_be_three_and_sum_to_one():
    with pytest.raises(WindowingError):
        D.partition_bounds(100, (0.5, 0.5))
    with pytest.raises(WindowingError):
        D.partition_bounds(100, (0.5, 0.3, 0.3))


def test_partition_too_short():
    ds = D.SeriesDataset(np.random.default_rng(0).standard_normal((30, 2, 1)))
    with pytest.raises(WindowingError, match="fewer than"):
        D.split_and_window(ds)


@settings(max_examples=30, deadline=None)
@given(st.integers(80, 400), st.integers(1, 12), st.integers(1, 12))
def test_windows_never_cross_partitions(steps, T, tau):
    ds = D.SeriesDataset(np.random.default_rng(steps).standard_normal((steps, 1, 1)))
    try:
        splits = D.split_and_window(ds, T=T, tau=tau)
    except WindowingError:
        return
    part = np.empty(steps, int)
    for k, s in enumerate(splits.values()):
        part[s.start:s.stop] = k
    for k, s in enumerate(splits.values()):
        for a in s.windows[[0, -1]] if len(s.windows) else []:
            assert set(part[a - T + 1:a + tau + 1]) == {k}


def test_time_of_day_wrap():
    ds = D.SeriesDataset(np.zeros((600, 1, 1)))
    assert ds.tod(287) == 287 and ds.tod(288) == 0


def test_day_of_week_wrap():
    ds = D.SeriesDataset(np.zeros((600, 1, 1)), start_day_of_week=6)
    assert ds.dow(288) == 0


def test_calendar_congruence():
    ds = D.SeriesDataset(np.zeros((5000, 1, 1)), interval_minutes=15, start_day_of_week=3)
    idx = np.arange(5000)
    n = ds.samples_per_day
    assert np.array_equal(ds.tod(idx), idx % n)
    assert np.array_equal((ds.dow(idx) - 3) % 7, (idx // n) % 7)


def test_batch_contents(rng):
    ds = D.SeriesDataset(rng.uniform(1, 9, (100, 3, 1)))
    splits = D.split_and_window(ds, T=4, tau=2)
    b = D.make_batch(ds, splits["val"].windows[:2], T=4, tau=2)
    a = splits["val"].windows[0]
    assert np.array_equal(b.y[0], ds.values[a + 1:a + 3])
    assert np.allclose(ds.denormalize(b.x[0]), ds.values[a - 3:a + 1], rtol=0, atol=1e-12)
    assert b.tod[0, -1] == a % 288


# ---- synthetic network

def test_synth_deterministic():
    a, ga = D.synth_network(seed=3)
    b, gb = D.synth_network(seed=3)
    assert a.values.tobytes() == b.values.tobytes()
    assert np.array_equal(ga.a_topo, gb.a_topo)


def test_synth_noise_free_is_periodic():
    ds, _ = D.synth_network(days=3, noise=0.0, interval_minutes=30)
    n = ds.samples_per_day
    assert np.array_equal(ds.values[n:], ds.values[:-n])


def test_synth_topology_connected_and_symmetric():
    _, g = D.synth_network(nodes=12, seed=5)
    a = g.a_topo
    assert np.array_equal(a, a.T)
    reach = np.linalg.matrix_power(a, 12) > 0
    assert reach.all()


def _lagged_neighbour_corr(coupling, seed=0):
    ds, g = D.synth_network(nodes=10, days=30, seed=seed, coupling=coupling)
    n = ds.samples_per_day
    # remove the deterministic daily component, leaving the residual process
    v = ds.values[:, :, 0]
    resid = v - np.tile(v.reshape(-1, n, v.shape[1]).mean(axis=0), (v.shape[0] // n, 1))
    corr = []
    for i in range(10):
        for j in range(10):
            if i != j and g.a_topo[i, j]:
                corr.append(np.corrcoef(resid[1:, i], resid[:-1, j])[0, 1])
    return float(np.mean(corr))


def test_uncoupled_residuals_are_uncorrelated():
    # sample-correlation oracle: independent AR(1) series give |r| ~ 1/sqrt(steps)
    assert abs(_lagged_neighbour_corr(0.0)) < 0.03
    assert _lagged_neighbour_corr(0.4) > 0.1
