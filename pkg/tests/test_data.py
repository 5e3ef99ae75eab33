import logging

import numpy as np
import pytest

from cy2mixer.data import (
    Normalizer,
    SignalTensor,
    SynthSpec,
    calendar_features,
    load_signals,
    make_windows,
    save_signals,
    split_bounds,
    synthesize_dataset,
)
from cy2mixer.errors import BadInterval, InvalidSpec, ParseError, ShapeInconsistent, SplitTooSmall
from cy2mixer.formats import read_matrix, read_tensor, write_matrix, write_tensor
from cy2mixer.topology import cycle_basis_paton

MONDAY = 1514764800


def write_csv(path, rows, header="timestamp,node,feature_0"):
    path.write_text(header + "\n" + "\n".join(rows) + "\n")
    return path


# --- ingestion ------------------------------------------------------------------


def test_load_small_csv(tmp_path):
    rows = [f"{300 * t},{v},{10 * t + v}" for t in range(3) for v in range(2)]
    s = load_signals(write_csv(tmp_path / "s.csv", rows))
    assert s.shape == (3, 2, 1)
    assert s.interval_seconds == 300 and s.start_timestamp == 0
    assert s.data[2, 1, 0] == 21.0


def test_locf_imputation(tmp_path):
    rows = []
    for t in range(7):
        for v in range(2):
            val = "" if (t == 5 and v == 1) or (t == 0 and v == 0) else str(t * 2 + v)
            rows.append(f"{60 * t},{v},{val}")
    s = load_signals(write_csv(tmp_path / "s.csv", rows))
    assert s.data[5, 1, 0] == s.data[4, 1, 0] == 9.0
    assert s.data[0, 0, 0] == 0.0  # leading gap
    assert np.isfinite(s.data).all()


def test_csv_errors(tmp_path):
    with pytest.raises(ParseError):
        load_signals(write_csv(tmp_path / "a.csv", ["0,0,1"], header="time,node,x"))
    with pytest.raises(ShapeInconsistent):
        load_signals(write_csv(tmp_path / "b.csv", ["0,0,1", "0,1,1", "300,0,1"]))
    with pytest.raises(BadInterval):
        load_signals(write_csv(tmp_path / "c.csv", ["0,0,1", "300,0,1", "900,0,1"]))
    with pytest.raises(BadInterval):
        load_signals(write_csv(tmp_path / "d.csv", ["0,0,1", "7,0,1"]))
    with pytest.raises(ParseError):
        load_signals(write_csv(tmp_path / "e.csv", ["0,0,abc"]))


def test_signal_tensor_validation():
    with pytest.raises(ParseError):
        SignalTensor(np.array([[[np.nan]]]))
    with pytest.raises(ShapeInconsistent):
        SignalTensor(np.zeros((3, 2)))
    assert SignalTensor(np.zeros((1, 1, 1))).steps_per_day == 288


@pytest.mark.parametrize("suffix", [".cy2s", ".csv"])
def test_signal_roundtrip(tmp_path, suffix):
    rng = np.random.default_rng(0)
    data = rng.standard_normal((20, 4, 2)).astype(np.float32).astype(np.float64)
    s = SignalTensor(data, MONDAY, 600)
    save_signals(s, tmp_path / f"s{suffix}")
    back = load_signals(tmp_path / f"s{suffix}")
    assert back.data.tobytes() == s.data.tobytes()
    assert (back.start_timestamp, back.interval_seconds) == (MONDAY, 600)


def test_binary_formats_roundtrip(tmp_path):
    rng = np.random.default_rng(1)
    t = rng.standard_normal((2, 3, 4))
    write_tensor(tmp_path / "t.cy2t", t)
    assert read_tensor(tmp_path / "t.cy2t").tobytes() == t.tobytes()
    m = rng.standard_normal((5, 5)).astype(np.float32)
    write_matrix(tmp_path / "m.cy2m", m)
    np.testing.assert_array_equal(read_matrix(tmp_path / "m.cy2m"), m)
    raw = (tmp_path / "m.cy2m").read_bytes()
    assert raw[:4] == b"CY2M" and int.from_bytes(raw[4:8], "little") == 5
    (tmp_path / "bad.cy2m").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(ParseError):
        read_matrix(tmp_path / "bad.cy2m")
    (tmp_path / "short.cy2m").write_bytes(raw[:-3])
    with pytest.raises(ParseError):
        read_matrix(tmp_path / "short.cy2m")


def test_cy2s_header_layout(tmp_path):
    s = SignalTensor(np.arange(6.0).reshape(3, 2, 1), MONDAY, 300)
    save_signals(s, tmp_path / "s.cy2s")
    raw = (tmp_path / "s.cy2s").read_bytes()
    assert raw[:4] == b"CY2S"
    assert [int.from_bytes(raw[i : i + 4], "little") for i in (4, 8, 12)] == [3, 2, 1]
    assert int.from_bytes(raw[16:24], "little") == MONDAY
    assert int.from_bytes(raw[24:28], "little") == 300
    np.testing.assert_array_equal(np.frombuffer(raw[28:], "<f4"), np.arange(6.0))


# --- calendar ------------------------------------------------------------------------


def test_calendar_features():
    s = SignalTensor(np.zeros((600, 1, 1)), MONDAY, 300)
    assert s.steps_per_day == 288
    tod, dow = calendar_features(s)
    assert (tod[0], dow[0]) == (0, 0)
    assert (tod[287], dow[287]) == (287, 0)
    assert (tod[288], dow[288]) == (0, 1)
    np.testing.assert_array_equal(tod, np.arange(600) % 288)
    sunday = SignalTensor(np.zeros((2, 1, 1)), MONDAY - 86400 + 3600, 3600)
    assert calendar_features(sunday)[1][0] == 6
    assert calendar_features(sunday)[0][0] == 1


# --- splits and windows -----------------------------------------------------------------


def test_split_bounds():
    assert split_bounds(100, (0.6, 0.2, 0.2)) == [(0, 60), (60, 80), (80, 100)]
    assert split_bounds(10, (1, 0, 0)) == [(0, 10), (10, 10), (10, 10)]
    with pytest.raises(SplitTooSmall):
        split_bounds(10, (0.5, 0.2, 0.2))


def test_window_counts():
    s = SignalTensor(np.random.default_rng(0).standard_normal((100, 3, 1)))
    train, val, test = make_windows(s, 12, 12)
    assert (len(train), len(val), len(test)) == (37, 0, 0)
    train, val, test = make_windows(s, 4, 4)
    assert (len(train), len(val), len(test)) == (53, 13, 13)
    assert train.inputs.shape == (53, 4, 3, 1) and train.targets.shape == (53, 4, 3, 1)


def test_window_contiguity_and_units():
    data = np.arange(200.0).reshape(200, 1, 1) * np.ones((1, 2, 1))
    s = SignalTensor(data)
    for ds in make_windows(s, 5, 3):
        norm = ds.normalization
        for i, start in enumerate(ds.starts):
            np.testing.assert_allclose(norm.denormalize(ds.inputs[i])[:, 0, 0], np.arange(start, start + 5), atol=1e-9)
            np.testing.assert_array_equal(ds.targets[i][:, 0, 0], np.arange(start + 5, start + 8))


def test_no_leakage():
    s = SignalTensor(np.random.default_rng(1).standard_normal((300, 2, 1)))
    train, val, test = make_windows(s, 6, 6)
    train_max = train.starts.max() + 6 + 6 - 1
    for ds in (val, test):
        assert ds.starts.min() > train_max
    assert val.starts.max() + 11 < test.starts.min()


def test_normalization_uses_train_rows_only():
    data = np.zeros((100, 1, 1))
    data[:60] = np.random.default_rng(2).standard_normal((60, 1, 1))
    data[60:] = 1e6
    norm = make_windows(SignalTensor(data), 4, 4)[0].normalization
    assert norm.mean[0] == pytest.approx(data[:60].mean())


def test_constant_signal_normalizes_to_zero():
    train = make_windows(SignalTensor(np.full((50, 2, 1), 7.0)), 4, 4)[0]
    assert not train.inputs.any()
    np.testing.assert_array_equal(train.targets, 7.0)


def test_ratio_one_warns(caplog):
    with caplog.at_level(logging.WARNING):
        train, val, test = make_windows(SignalTensor(np.zeros((40, 1, 1))), 4, 4, (1.0, 0.0, 0.0))
    assert len(train) == 33 and len(val) == len(test) == 0
    assert "empty" in caplog.text


def test_train_split_too_small():
    with pytest.raises(SplitTooSmall):
        make_windows(SignalTensor(np.zeros((30, 1, 1))), 12, 12)


def test_normalizer_invertible():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((500, 4, 3)) * [1.0, 100.0, 1e-3] + [5.0, -20.0, 0.0]
    norm = Normalizer.fit(x)
    np.testing.assert_allclose(norm.denormalize(norm.normalize(x)), x, rtol=0, atol=1e-10)


def test_batches_cover_dataset():
    train = make_windows(SignalTensor(np.zeros((100, 1, 1))), 4, 4)[0]
    seen = []
    for batch in train.batches(16, np.random.default_rng(0)):
        seen.append(len(batch[0]))
    assert sum(seen) == len(train)


# --- synthetic data ---------------------------------------------------------------------


def test_synth_ring_has_one_cycle():
    g, s = synthesize_dataset(SynthSpec(num_nodes=6, T_total=50))
    assert len(cycle_basis_paton(g)) == 1
    assert s.shape == (50, 6, 1)


def test_synth_rings_and_grid():
    g, _ = synthesize_dataset(SynthSpec(topology="rings", num_rings=3, ring_size=5, num_tail_nodes=2, T_total=10))
    assert g.num_nodes == 17 and len(cycle_basis_paton(g)) == 3
    g, _ = synthesize_dataset({"topology": "grid", "grid_rows": 3, "grid_cols": 4, "T_total": 10})
    assert len(cycle_basis_paton(g)) == 6


def test_synth_identical_without_noise_or_phase():
    _, s = synthesize_dataset(SynthSpec(num_nodes=5, noise=0.0, phase_spread=0.0, T_total=100))
    np.testing.assert_array_equal(s.data, np.broadcast_to(s.data[:, :1], s.data.shape))


def test_synth_deterministic_and_invalid():
    a = synthesize_dataset(SynthSpec(noise=0.3, seed=4, T_total=80))[1].data
    b = synthesize_dataset(SynthSpec(noise=0.3, seed=4, T_total=80))[1].data
    assert np.array_equal(a, b)
    with pytest.raises(InvalidSpec):
        synthesize_dataset({"bogus": 1})
    with pytest.raises(InvalidSpec):
        synthesize_dataset(SynthSpec(topology="star"))
    with pytest.raises(InvalidSpec):
        synthesize_dataset(SynthSpec(noise=-1))


def test_synth_cycle_coupling():
    # two rings of 6 joined by a bridge: nodes 0 and 2 share a cycle, 0 and 8 do not
    within, across = [], []
    for seed in range(10):
        _, s = synthesize_dataset(
            SynthSpec(topology="rings", num_rings=2, ring_size=6, noise=0.5, T_total=1000, seed=seed)
        )
        x = s.data[:, :, 0]
        within.append(np.corrcoef(x[:, 0], x[:, 2])[0, 1])
        across.append(np.corrcoef(x[:, 0], x[:, 8])[0, 1])
    assert np.mean(within) > np.mean(across)
