"""Fiber-node fault forecasting: will the error rate cross a cutoff soon?

Telemetry is pooled per fiber-node, fiber-nodes with poor raw coverage are
excluded, and overlapping windows of W hours become training rows. A window
ending at hour h is positive when the target series meets the cutoff anywhere
in (h, h + horizon]. Features never look past h, and the temporal split
drops straddling windows so no test window's feature hours overlap any
training label hours.

The persistence baseline (predict "above cutoff soon" iff the target is
above the cutoff right now) is the score to beat.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pandas as pd

from . import models as M
from .seeding import substream
from .telemetry import (
    aggregate_column_names,
    interpolate_missing,
    _aggregate_by_entity,
)
from .evaluation import binary_metrics

DEFAULT_WINDOW = 72
DEFAULT_TARGET = "cer_mean_us"
DEFAULT_MIN_AVAILABILITY = 0.8


class ForecastError(Exception):
    pass


@dataclass
class FiberNodeSeriesSet:
    """Gap-free hourly aggregates per fiber-node plus raw-coverage fractions."""

    fiber_nodes: tuple[str, ...]
    start: np.datetime64
    hours: int
    columns: tuple[str, ...]
    values: np.ndarray  # (n_columns, n_fiber_nodes, n_hours)
    availability: np.ndarray  # fraction of hours with >= 1 raw sample

    @property
    def column_index(self):
        return {c: i for i, c in enumerate(self.columns)}


def aggregate_to_fibernode(frame, topo):
    """Pool all modem samples of each fiber-node into hourly aggregate series.

    Availability counts hours with at least one surviving raw sample, before
    any interpolation closes the gaps.
    """
    fns = tuple(sorted(topo.fiber_nodes))
    fn_pos = {fn: i for i, fn in enumerate(fns)}
    mac_to_fn = {
        mac: fn_pos[topo.amplifiers[amp].fiber_node] for mac, amp in topo.modems.items()
    }
    values, presence, start, hours, columns = _aggregate_by_entity(frame, mac_to_fn, fns)
    for c in range(values.shape[0]):
        for e in range(values.shape[1]):
            row = values[c, e]
            if np.isnan(row).any():
                if not np.isfinite(row).any():
                    raise ForecastError(
                        f"fiber-node {fns[e]} has no samples at all for {columns[c]}"
                    )
                values[c, e] = interpolate_missing(row)
    availability = presence.sum(axis=1) / float(hours)
    return FiberNodeSeriesSet(
        fiber_nodes=fns,
        start=start,
        hours=hours,
        columns=columns,
        values=values,
        availability=availability,
    )


def availability_filter(series_set, min_fraction=DEFAULT_MIN_AVAILABILITY):
    """Split fiber-nodes into (kept, excluded-with-fraction) by raw coverage.

    The boundary is inclusive: exactly min_fraction stays in.
    """
    kept = []
    excluded = []
    for i, fn in enumerate(series_set.fiber_nodes):
        frac = float(series_set.availability[i])
        if frac >= min_fraction:
            kept.append(fn)
        else:
            excluded.append((fn, frac))
    return kept, excluded


@dataclass
class ForecastDataset:
    """Flattened windows for one (horizon, cutoff) cell."""

    window: int
    horizon: int
    cutoff: float
    target_column: str
    fiber_nodes: tuple[str, ...]
    fn_of_row: np.ndarray  # index into fiber_nodes
    end_hour: np.ndarray  # window's last feature hour, per row
    X: np.ndarray  # (n_windows, window * n_columns)
    y: np.ndarray
    last_target: np.ndarray  # target value at end_hour, per row
    feature_columns: tuple[str, ...]


def window_dataset(series_set, window=DEFAULT_WINDOW, hop=1, horizon=1,
                   cutoff=2.0, target_column=DEFAULT_TARGET, include=None):
    """Cut overlapping windows and label them by future cutoff crossings.

    A window owns feature hours [h - window + 1, h] and is positive when the
    target reaches the cutoff in (h, h + horizon]. Windows whose horizon runs
    off the end of the series are dropped entirely.
    """
    if window < 1 or hop < 1 or horizon < 1:
        raise ValueError("window, hop and horizon must all be >= 1")
    if target_column not in series_set.column_index:
        raise ForecastError(f"unknown target column {target_column!r}")
    names = series_set.fiber_nodes
    sel = range(len(names)) if include is None else [names.index(f) for f in include]
    t_col = series_set.column_index[target_column]
    T = series_set.hours
    ends = np.arange(window - 1, T - horizon, hop, dtype=np.int64)
    n_cols = len(series_set.columns)

    fn_rows = []
    end_rows = []
    xs = []
    ys = []
    lasts = []
    for e in sel:
        if ends.size == 0:
            continue
        block = series_set.values[:, e, :]  # (n_cols, T)
        target = block[t_col]
        future_hit = np.zeros(T, dtype=bool)
        hit = target >= cutoff
        for d in range(1, horizon + 1):
            future_hit[: T - d] |= hit[d:]
        windows = np.lib.stride_tricks.sliding_window_view(block, window, axis=1)
        # windows[c, s, :] covers hours [s, s + window); window ending at h
        # starts at h - window + 1.
        starts = ends - window + 1
        w = windows[:, starts, :]  # (n_cols, n_windows, window)
        xs.append(np.ascontiguousarray(w.transpose(1, 0, 2)).reshape(len(ends), -1))
        ys.append(future_hit[ends])
        lasts.append(target[ends])
        fn_rows.append(np.full(len(ends), e, dtype=np.int64))
        end_rows.append(ends)

    X = np.concatenate(xs, axis=0) if xs else np.empty((0, n_cols * window))
    feature_columns = tuple(
        f"{c}@t-{window - 1 - i:02d}"
        for c in series_set.columns
        for i in range(window)
    )
    return ForecastDataset(
        window=window,
        horizon=horizon,
        cutoff=float(cutoff),
        target_column=target_column,
        fiber_nodes=names,
        fn_of_row=np.concatenate(fn_rows) if fn_rows else np.empty(0, dtype=np.int64),
        end_hour=np.concatenate(end_rows) if end_rows else np.empty(0, dtype=np.int64),
        X=X,
        y=np.concatenate(ys).astype(float) if ys else np.empty(0),
        last_target=np.concatenate(lasts) if lasts else np.empty(0),
        feature_columns=feature_columns,
    )


def persistence_baseline(dataset):
    """Probability 1 when the target already meets the cutoff at window end."""
    return (dataset.last_target >= dataset.cutoff).astype(float)


def temporal_split(dataset, train_fraction=0.8, total_hours=None):
    """Train strictly before a boundary hour, test strictly after it.

    Train windows must have their label horizon resolved by the boundary
    (end + horizon <= boundary); test windows must start after it. Windows
    straddling the boundary are dropped so features and labels never mix
    across the split.
    """
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must be in (0, 1)")
    T = total_hours if total_hours is not None else int(dataset.end_hour.max()) + dataset.horizon + 1
    boundary = int(np.floor(train_fraction * T))
    train = dataset.end_hour + dataset.horizon <= boundary
    test = dataset.end_hour - dataset.window + 1 > boundary
    return np.flatnonzero(train), np.flatnonzero(test), boundary


def random_split(dataset, train_fraction=0.8, seed=0):
    """Seeded permutation split over windows, leakage accepted by design."""
    rng = substream(seed, "forecast-random-split")
    n = len(dataset.y)
    perm = rng.permutation(n)
    n_train = int(np.floor(train_fraction * n))
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


def _standardize_fit(X):
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    std = np.where(std == 0, 1.0, std)
    return mean, std


@dataclass(frozen=True)
class ForecastConfig:
    window: int = DEFAULT_WINDOW
    hop: int = 1
    horizons: tuple[int, ...] = (1, 3, 8)
    cutoffs: tuple[float, ...] = (2.0, 6.0)
    target_column: str = DEFAULT_TARGET
    min_availability: float = DEFAULT_MIN_AVAILABILITY
    split: str = "temporal"
    train_fraction: float = 0.8
    seed: int = 0
    models: tuple[str, ...] = ("persistence", "logistic", "gbdt")
    logistic: object = None  # LogisticConfig override
    gbdt: object = None  # GBDTConfig override


def evaluate_forecast(series_set, cfg=None):
    """Run the (horizon, cutoff, model) grid; one report row per cell.

    Cells that end up without test windows or without any positive training
    label are reported with blank metrics rather than failing the run.
    """
    cfg = cfg or ForecastConfig()
    if cfg.split not in ("temporal", "random"):
        raise ForecastError(f"unknown split {cfg.split!r}")
    kept, _ = availability_filter(series_set, cfg.min_availability)
    if not kept:
        raise ForecastError("no fiber-node passes the availability filter")
    log_cfg = cfg.logistic or M.LogisticConfig(learning_rate=0.05, epochs=200, l2=1e-3)
    gb_cfg = cfg.gbdt or M.GBDTConfig(rounds=30, max_depth=3, min_leaf=20, seed=cfg.seed)

    rows = []
    for horizon in cfg.horizons:
        for cutoff in cfg.cutoffs:
            ds = window_dataset(
                series_set,
                window=cfg.window,
                hop=cfg.hop,
                horizon=horizon,
                cutoff=cutoff,
                target_column=cfg.target_column,
                include=kept,
            )
            if cfg.split == "temporal":
                tr, te, _ = temporal_split(ds, cfg.train_fraction, total_hours=series_set.hours)
            else:
                tr, te = random_split(ds, cfg.train_fraction, cfg.seed)

            for model_name in cfg.models:
                row = {
                    "horizon": int(horizon),
                    "cutoff": float(cutoff),
                    "model": model_name,
                    "split": cfg.split,
                    "precision": float("nan"),
                    "recall": float("nan"),
                    "n_windows": int(len(te)),
                    "n_positive": int(ds.y[te].sum()) if len(te) else 0,
                }
                if len(te) == 0:
                    row["status"] = "no_test_windows"
                    rows.append(row)
                    continue
                if model_name == "persistence":
                    probs = persistence_baseline(ds)[te]
                elif len(tr) == 0:
                    row["status"] = "no_train_windows"
                    rows.append(row)
                    continue
                elif ds.y[tr].sum() == 0:
                    row["status"] = "no_positive_training_labels"
                    rows.append(row)
                    continue
                else:
                    mean, std = _standardize_fit(ds.X[tr])
                    X_tr = (ds.X[tr] - mean) / std
                    X_te = (ds.X[te] - mean) / std
                    if model_name == "logistic":
                        model = M.train_logistic(X_tr, ds.y[tr], ds.feature_columns, log_cfg)
                    elif model_name == "gbdt":
                        model = M.train_gbdt(X_tr, ds.y[tr], ds.feature_columns, gb_cfg)
                    else:
                        raise ForecastError(f"unknown forecast model {model_name!r}")
                    probs = M.predict_proba(model, X_te, ds.feature_columns)
                bm = binary_metrics(probs, ds.y[te])
                row["precision"] = bm.precision
                row["recall"] = bm.recall
                row["status"] = "ok"
                rows.append(row)
    return pd.DataFrame(
        rows,
        columns=[
            "horizon", "cutoff", "model", "split",
            "precision", "recall", "n_windows", "n_positive", "status",
        ],
    )


def write_forecast_report(frame, path):
    frame.to_csv(path, index=False)
