import numpy as np
import pandas as pd
import pytest

from hfc_rca.forecast import (
    FiberNodeSeriesSet,
    ForecastConfig,
    ForecastError,
    aggregate_to_fibernode,
    availability_filter,
    evaluate_forecast,
    persistence_baseline,
    random_split,
    temporal_split,
    window_dataset,
    write_forecast_report,
)
from hfc_rca.models import GBDTConfig, LogisticConfig
from hfc_rca.telemetry import aggregate_column_names


def _series_set(values, availability=None, fns=None):
    """Wrap a (n_cols, n_fns, T) array; columns default to the standard grid."""
    n_cols, n_fns, T = values.shape
    columns = aggregate_column_names()[:n_cols] if n_cols <= 44 else None
    fns = fns or tuple(f"FN{i}" for i in range(n_fns))
    avail = np.ones(n_fns) if availability is None else np.asarray(availability, dtype=float)
    return FiberNodeSeriesSet(
        fiber_nodes=tuple(fns),
        start=np.datetime64("2021-03-01T00", "h"),
        hours=T,
        columns=tuple(columns),
        values=values,
        availability=avail,
    )


def _target_pos(columns=None):
    return (columns or aggregate_column_names()).index("cer_mean_us")


# ---------------------------------------------------------------------------
# aggregation and availability

def test_aggregate_to_fibernode_matches_groupby(small_plant):
    series = aggregate_to_fibernode(small_plant.telemetry, small_plant.topology)
    topo = small_plant.topology
    assert series.fiber_nodes == tuple(sorted(topo.fiber_nodes))
    assert series.values.shape == (44, len(series.fiber_nodes), series.hours)
    assert np.isfinite(series.values).all()  # gaps are interpolated away

    tel = small_plant.telemetry.copy()
    tel["fn"] = tel["mac"].map(lambda m: topo.amplifiers[topo.modems[m]].fiber_node)
    tel["hour"] = pd.to_datetime(tel["ts"])
    fn_pos = {fn: i for i, fn in enumerate(series.fiber_nodes)}
    cidx = series.column_index
    sample = tel[tel["direction"] == "us"].groupby(["fn", "hour"])["cer"]
    checked = 0
    for (fn, hour), grp in sample:
        h = int((np.datetime64(hour, "h") - series.start) / np.timedelta64(1, "h"))
        got = series.values[cidx["cer_mean_us"], fn_pos[fn], h]
        assert got == pytest.approx(grp.mean(), abs=1e-12)
        checked += 1
        if checked >= 200:
            break
    assert checked == 200

    # Availability counts raw sample coverage per fiber-node.
    for fn, i in fn_pos.items():
        hours_present = tel.loc[tel["fn"] == fn, "hour"].nunique()
        assert series.availability[i] == pytest.approx(hours_present / series.hours)


def test_availability_filter_boundary_inclusive():
    values = np.zeros((1, 3, 10))
    series = _series_set(values, availability=[0.8, np.nextafter(0.8, 0.0), 1.0])
    kept, excluded = availability_filter(series, 0.8)
    assert kept == ["FN0", "FN2"]
    assert len(excluded) == 1
    assert excluded[0][0] == "FN1"
    assert excluded[0][1] < 0.8


# ---------------------------------------------------------------------------
# window construction

def test_window_dataset_no_leakage_audit():
    """10k random windows: features stop at the end hour, labels start after."""
    rng = np.random.default_rng(40)
    n_cols, n_fns, T = 3, 4, 400
    values = rng.normal(size=(n_cols, n_fns, T)) ** 2
    columns = ("snr_mean_us", "cer_mean_us", "tx_mean_us")
    series = FiberNodeSeriesSet(
        fiber_nodes=("F0", "F1", "F2", "F3"),
        start=np.datetime64("2021-03-01T00", "h"),
        hours=T,
        columns=columns,
        values=values,
        availability=np.ones(n_fns),
    )
    t_col = columns.index("cer_mean_us")
    checked = 0
    while checked < 10_000:
        window = int(rng.integers(2, 30))
        horizon = int(rng.integers(1, 10))
        hop = int(rng.integers(1, 4))
        cutoff = float(rng.uniform(0.2, 2.0))
        ds = window_dataset(
            series, window=window, hop=hop, horizon=horizon, cutoff=cutoff
        )
        assert ds.X.shape == (len(ds.y), window * n_cols)
        for r in rng.choice(len(ds.y), size=min(200, len(ds.y)), replace=False):
            e = int(ds.end_hour[r])
            fn = int(ds.fn_of_row[r])
            block = values[:, fn, :]
            target = block[t_col]
            expect_x = np.concatenate([block[c, e - window + 1 : e + 1] for c in range(n_cols)])
            assert np.array_equal(ds.X[r], expect_x)
            expect_y = bool((target[e + 1 : e + horizon + 1] >= cutoff).any())
            assert bool(ds.y[r]) == expect_y
            assert ds.last_target[r] == target[e]
            assert e + horizon <= T - 1  # label hours stay on the series
            checked += 1


def test_window_dataset_grid_and_columns():
    values = np.arange(2 * 1 * 20, dtype=float).reshape(2, 1, 20)
    series = FiberNodeSeriesSet(
        fiber_nodes=("F0",),
        start=np.datetime64("2021-03-01T00", "h"),
        hours=20,
        columns=("cer_mean_us", "snr_mean_us"),
        values=values,
        availability=np.ones(1),
    )
    ds = window_dataset(series, window=5, hop=3, horizon=2, cutoff=100.0)
    assert list(ds.end_hour) == [4, 7, 10, 13, 16]
    assert ds.feature_columns[:5] == (
        "cer_mean_us@t-04",
        "cer_mean_us@t-03",
        "cer_mean_us@t-02",
        "cer_mean_us@t-01",
        "cer_mean_us@t-00",
    )
    assert ds.feature_columns[5:] == tuple(f"snr_mean_us@t-{4 - i:02d}" for i in range(5))

    sub = window_dataset(series, window=5, horizon=2, cutoff=100.0, include=["F0"])
    assert set(sub.fn_of_row) == {0}

    with pytest.raises(ValueError, match="must all be >= 1"):
        window_dataset(series, window=0)
    with pytest.raises(ForecastError, match="unknown target column"):
        window_dataset(series, target_column="nope")


def test_horizon_monotonicity_of_positives():
    rng = np.random.default_rng(41)
    values = (rng.normal(size=(1, 3, 300)) ** 2)
    series = FiberNodeSeriesSet(
        fiber_nodes=("F0", "F1", "F2"),
        start=np.datetime64("2021-03-01T00", "h"),
        hours=300,
        columns=("cer_mean_us",),
        values=values,
        availability=np.ones(3),
    )
    cutoff = 1.5
    prev = None
    for horizon in (1, 2, 4, 8, 16):
        ds = window_dataset(series, window=6, horizon=horizon, cutoff=cutoff)
        keyed = {
            (int(f), int(e)): bool(v)
            for f, e, v in zip(ds.fn_of_row, ds.end_hour, ds.y)
        }
        if prev is not None:
            common = set(keyed) & set(prev)
            assert common
            # A longer horizon can only add crossings, never lose one.
            assert all(prev[key] <= keyed[key] for key in common)
            assert sum(keyed[k] for k in common) >= sum(prev[k] for k in common)
        prev = keyed


# ---------------------------------------------------------------------------
# baselines and splits

def _ramp_series(T=60):
    """Monotone target: once over any cutoff, it stays over."""
    target = np.linspace(0.0, 10.0, T).reshape(1, 1, T)
    return FiberNodeSeriesSet(
        fiber_nodes=("F0",),
        start=np.datetime64("2021-03-01T00", "h"),
        hours=T,
        columns=("cer_mean_us",),
        values=target,
        availability=np.ones(1),
    )


def test_persistence_definition_and_boundary():
    series = _ramp_series()
    ds = window_dataset(series, window=4, horizon=3, cutoff=5.0)
    probs = persistence_baseline(ds)
    assert np.array_equal(probs, (ds.last_target >= 5.0).astype(float))
    exact = window_dataset(series, window=4, horizon=1, cutoff=float(ds.last_target[10]))
    assert persistence_baseline(exact)[10] == 1.0  # >= is inclusive


def test_persistence_precision_one_on_monotone_target():
    series = _ramp_series()
    ds = window_dataset(series, window=4, horizon=2, cutoff=4.0)
    probs = persistence_baseline(ds)
    assert probs.sum() > 0
    assert (ds.y[probs == 1.0] == 1.0).all()


def test_temporal_split_no_overlap():
    series = _ramp_series(T=100)
    ds = window_dataset(series, window=10, horizon=5, cutoff=99.0)
    tr, te, boundary = temporal_split(ds, 0.6, total_hours=100)
    assert boundary == 60
    assert len(tr) and len(te)
    assert (ds.end_hour[tr] + ds.horizon <= boundary).all()
    assert (ds.end_hour[te] - ds.window + 1 > boundary).all()
    # Straddling windows are dropped, not assigned.
    assert len(tr) + len(te) < len(ds.y)
    # Manual recomputation of the masks.
    assert np.array_equal(tr, np.flatnonzero(ds.end_hour + 5 <= 60))
    assert np.array_equal(te, np.flatnonzero(ds.end_hour - 10 + 1 > 60))
    with pytest.raises(ValueError, match="train_fraction"):
        temporal_split(ds, 1.0)


def test_random_split_partition_and_determinism():
    series = _ramp_series(T=100)
    ds = window_dataset(series, window=10, horizon=5, cutoff=99.0)
    tr, te = random_split(ds, 0.8, seed=9)
    n = len(ds.y)
    assert len(tr) == int(np.floor(0.8 * n))
    assert sorted(np.concatenate([tr, te]).tolist()) == list(range(n))
    tr2, te2 = random_split(ds, 0.8, seed=9)
    assert np.array_equal(tr, tr2) and np.array_equal(te, te2)
    tr3, _ = random_split(ds, 0.8, seed=10)
    assert not np.array_equal(tr, tr3)


# ---------------------------------------------------------------------------
# the evaluation grid

FAST_CFG = ForecastConfig(
    window=24,
    horizons=(1, 3),
    cutoffs=(0.002, 0.006),
    logistic=LogisticConfig(learning_rate=0.05, epochs=40, l2=1e-3),
    gbdt=GBDTConfig(rounds=5, max_depth=3, min_leaf=5),
)


def test_evaluate_forecast_grid(small_plant):
    series = aggregate_to_fibernode(small_plant.telemetry, small_plant.topology)
    frame = evaluate_forecast(series, FAST_CFG)
    assert list(frame.columns) == [
        "horizon", "cutoff", "model", "split",
        "precision", "recall", "n_windows", "n_positive", "status",
    ]
    assert len(frame) == 2 * 2 * 3
    assert set(frame["status"]) <= {
        "ok", "no_test_windows", "no_train_windows", "no_positive_training_labels"
    }
    assert (frame["split"] == "temporal").all()
    # Window counts are a property of the (horizon, cutoff) cell.
    for _, grp in frame.groupby(["horizon", "cutoff"]):
        assert grp["n_windows"].nunique() == 1
    ok = frame[frame["status"] == "ok"]
    assert len(ok) > 0
    assert ((ok["recall"].dropna() >= 0) & (ok["recall"].dropna() <= 1)).all()


def test_evaluate_forecast_deterministic(tmp_path, small_plant):
    series = aggregate_to_fibernode(small_plant.telemetry, small_plant.topology)
    a = evaluate_forecast(series, FAST_CFG)
    b = evaluate_forecast(series, FAST_CFG)
    p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
    write_forecast_report(a, p1)
    write_forecast_report(b, p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_evaluate_forecast_guards():
    bad_avail = _series_set(np.zeros((1, 1, 50)), availability=[0.5])
    with pytest.raises(ForecastError, match="availability filter"):
        evaluate_forecast(bad_avail, ForecastConfig())

    series = _ramp_series(T=200)
    with pytest.raises(ForecastError, match="unknown split"):
        evaluate_forecast(series, ForecastConfig(split="sideways"))
    with pytest.raises(ForecastError, match="unknown forecast model"):
        evaluate_forecast(
            series,
            ForecastConfig(window=8, horizons=(1,), cutoffs=(2.0,), models=("nope",)),
        )
