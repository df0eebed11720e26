"""Hourly channel telemetry: aggregation, gap filling, feature construction.

Raw samples arrive per (modem, channel, direction, hour). They are reduced to
per-amplifier hourly series (mean/std/min/max over the modems behind each
last-line amplifier), gaps are closed by linear interpolation, and each
aggregate series is expanded into change-sensitive feature columns.

Feature columns are named ``{metric}_{agg}_{transform}_{dir}``, e.g.
``tx_mean_chratio_us``. Change transforms at the first hour, or across a
zero previous value, are undefined; those cells carry NaN and a companion
``chmiss`` column records where that happened. The NaN sentinel survives
until normalization, after which it is consumed as 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pandas as pd
import polars as pl

DIRECTIONS = ("us", "ds")
METRICS = {"us": ("snr", "tx", "rx", "cer", "ccer"), "ds": ("snr", "tx", "rx", "cer", "ccer", "mrefl")}
AGGREGATES = ("mean", "std", "min", "max")
TRANSFORMS = ("val", "chratio", "relchg", "range4h", "chmiss")
METRIC_CSV_COLUMNS = {
    "snr": "snr_db",
    "tx": "tx_dbmv",
    "rx": "rx_dbmv",
    "cer": "cer",
    "ccer": "ccer",
    "mrefl": "mrefl_db",
}
TELEMETRY_COLUMNS = (
    "ts", "mac", "channel", "direction",
    "snr_db", "tx_dbmv", "rx_dbmv", "cer", "ccer", "mrefl_db",
)
TS_FORMAT = "%Y-%m-%dT%H:%M:%SZ"
HOUR = np.timedelta64(1, "h")


class TelemetryError(Exception):
    """Malformed or inconsistent telemetry input."""


def aggregate_column_names():
    """The 44 per-amplifier aggregate series names, in canonical order."""
    return tuple(
        f"{metric}_{agg}_{d}" for d in DIRECTIONS for metric in METRICS[d] for agg in AGGREGATES
    )


def feature_column_names():
    """The 220 feature column names, in canonical order."""
    return tuple(
        f"{metric}_{agg}_{tr}_{d}"
        for d in DIRECTIONS
        for metric in METRICS[d]
        for agg in AGGREGATES
        for tr in TRANSFORMS
    )


def interpolate_missing(values):
    """Fill NaN gaps in an hourly series by linear interpolation.

    Interior gaps are interpolated between the nearest present neighbours;
    leading/trailing gaps take the nearest present value. A series with no
    present values at all cannot be filled and raises.
    """
    v = np.asarray(values, dtype=float)
    if v.ndim != 1:
        raise ValueError(f"expected a 1-D series, got shape {v.shape}")
    if v.size == 0:
        raise ValueError("empty series")
    mask = np.isfinite(v)
    if mask.all():
        return v.copy()
    if not mask.any():
        raise ValueError("series has no present values to interpolate from")
    idx = np.flatnonzero(mask)
    return np.interp(np.arange(v.size), idx, v[idx])


def sliding_window_range(series, width=4):
    """Max minus min over a trailing window of `width` hours.

    Works on a 1-D series or row-wise on a 2-D array. Windows are truncated
    at the start of the series, so out[0] is always 0.
    """
    if width < 1:
        raise ValueError(f"window width must be >= 1, got {width}")
    x = np.asarray(series, dtype=float)
    one_d = x.ndim == 1
    if one_d:
        x = x[None, :]
    if x.ndim != 2:
        raise ValueError(f"expected 1-D or 2-D input, got shape {x.shape}")
    n = x.shape[1]
    if n == 0:
        return x[0].copy() if one_d else x.copy()
    w = min(width, n)
    hi = np.empty_like(x)
    lo = np.empty_like(x)
    hi[:, :w] = np.maximum.accumulate(x[:, :w], axis=1)
    lo[:, :w] = np.minimum.accumulate(x[:, :w], axis=1)
    win = np.lib.stride_tricks.sliding_window_view(x, w, axis=1)
    hi[:, w - 1 :] = win.max(axis=2)
    lo[:, w - 1 :] = win.min(axis=2)
    out = hi - lo
    return out[0] if one_d else out


@dataclass
class AmplifierSeriesSet:
    """Gap-free hourly aggregate series for every amplifier in a plant.

    values has shape (n_columns, n_amplifiers, n_hours).
    """

    amplifiers: tuple[str, ...]
    start: np.datetime64
    hours: int
    columns: tuple[str, ...]
    values: np.ndarray

    @property
    def column_index(self):
        return {c: i for i, c in enumerate(self.columns)}

    def grid(self):
        return self.start + np.arange(self.hours) * HOUR


@dataclass
class FeatureTable:
    """Per-amplifier hourly feature matrix, shape (n_columns, n_amps, n_hours)."""

    amplifiers: tuple[str, ...]
    start: np.datetime64
    hours: int
    columns: tuple[str, ...]
    values: np.ndarray

    @property
    def column_index(self):
        return {c: i for i, c in enumerate(self.columns)}

    def grid(self):
        return self.start + np.arange(self.hours) * HOUR

    def hour_of(self, ts):
        """Grid index of a timestamp; raises if off-grid."""
        delta = (np.datetime64(ts, "s") - np.datetime64(self.start, "s")) / np.timedelta64(1, "h")
        h = int(delta)
        if h != delta or not 0 <= h < self.hours:
            raise ValueError(f"timestamp {ts} is not on the feature grid")
        return h

    def tensor(self, amplifier_ids, start_hour, n_hours):
        """Dense block (len(ids), n_hours, n_columns) for a set of amplifiers."""
        if start_hour < 0 or start_hour + n_hours > self.hours:
            raise ValueError(
                f"hours [{start_hour}, {start_hour + n_hours}) outside grid of {self.hours}"
            )
        amp_index = {a: i for i, a in enumerate(self.amplifiers)}
        try:
            rows = [amp_index[a] for a in amplifier_ids]
        except KeyError as exc:
            raise KeyError(f"amplifier {exc.args[0]!r} not in feature table") from exc
        block = self.values[:, rows, start_hour : start_hour + n_hours]
        return np.ascontiguousarray(block.transpose(1, 2, 0))


def _parse_timestamps(raw):
    ts = pd.to_datetime(raw, format="ISO8601", utc=True)
    if ts.isna().any():
        bad = raw[ts.isna()].iloc[0]
        raise TelemetryError(f"unparseable timestamp {bad!r}")
    ts64 = ts.dt.tz_localize(None).to_numpy().astype("datetime64[s]")
    if ((ts64 - ts64.astype("datetime64[h]").astype("datetime64[s]")) != np.timedelta64(0, "s")).any():
        raise TelemetryError("timestamps must be aligned to whole hours")
    return ts64.astype("datetime64[h]")


def _grouped_moments(keys, values, n_cells):
    """Mean/std/min/max/count of `values` grouped by integer `keys`.

    NaN values are excluded; cells with no finite value get count 0 and NaN
    stats. The std is the population std, computed from deviations around the
    group mean (a second pass) so large means do not eat the precision.
    """
    ok = np.isfinite(values)
    k = keys[ok]
    v = values[ok]
    order = np.argsort(k, kind="stable")
    k = k[order]
    v = v[order]
    count = np.bincount(k, minlength=n_cells).astype(np.int64)
    boundaries = np.flatnonzero(np.diff(k)) + 1
    starts = np.concatenate(([0], boundaries))
    out_mean = np.full(n_cells, np.nan)
    out_std = np.full(n_cells, np.nan)
    out_min = np.full(n_cells, np.nan)
    out_max = np.full(n_cells, np.nan)
    if v.size:
        uniq = k[starts]
        sums = np.add.reduceat(v, starts)
        out_mean[uniq] = sums / count[uniq]
        dev = v - out_mean[k]
        out_std[uniq] = np.sqrt(np.add.reduceat(dev * dev, starts) / count[uniq])
        out_min[uniq] = np.minimum.reduceat(v, starts)
        out_max[uniq] = np.maximum.reduceat(v, starts)
    return out_mean, out_std, out_min, out_max, count


def _aggregate_by_entity(frame, entity_of_mac, entity_ids):
    """Shared reduction: hourly mean/std/min/max per (entity, direction, metric).

    Returns (values (n_cols, n_entities, n_hours) with NaN where no samples,
    presence (n_entities, n_hours) bool, start, hours, columns).
    """
    missing = set(TELEMETRY_COLUMNS) - set(frame.columns)
    if missing:
        raise TelemetryError(f"telemetry is missing column(s) {sorted(missing)}")
    unknown = set(frame.columns) - set(TELEMETRY_COLUMNS)
    if unknown:
        raise TelemetryError(f"telemetry has unknown column(s) {sorted(unknown)}")
    if len(frame) == 0:
        raise TelemetryError("telemetry is empty")

    ts = _parse_timestamps(frame["ts"])
    direction = frame["direction"].to_numpy()
    bad_dir = ~np.isin(direction, ("us", "ds"))
    if bad_dir.any():
        raise TelemetryError(f"unknown direction {direction[bad_dir][0]!r}")

    ent_idx = frame["mac"].map(entity_of_mac).to_numpy()
    if pd.isna(ent_idx).any():
        bad = frame["mac"].to_numpy()[pd.isna(ent_idx)]
        raise TelemetryError(f"{len(set(bad))} modem MAC(s) not in topology, e.g. {bad[0]!r}")
    ent_idx = ent_idx.astype(np.int64)

    us_mrefl = (direction == "us") & np.isfinite(
        pd.to_numeric(frame["mrefl_db"], errors="coerce").to_numpy(dtype=float)
    )
    if us_mrefl.any():
        raise TelemetryError("mrefl_db present on an upstream row; it is downstream-only")

    start = ts.min()
    hours = int((ts.max() - start) / HOUR) + 1
    hour_idx = ((ts - start) / HOUR).astype(np.int64)
    dir_idx = (direction == "ds").astype(np.int64)
    n_ent = len(entity_ids)

    columns = aggregate_column_names()
    values = np.full((len(columns), n_ent, hours), np.nan)
    col_pos = {c: i for i, c in enumerate(columns)}

    presence = np.zeros((n_ent, hours), dtype=bool)
    presence[ent_idx, hour_idx] = True

    n_cells = n_ent * hours
    for d, d_i in (("us", 0), ("ds", 1)):
        sel = dir_idx == d_i
        if not sel.any():
            continue
        keys = ent_idx[sel] * hours + hour_idx[sel]
        for metric in METRICS[d]:
            col = pd.to_numeric(frame[METRIC_CSV_COLUMNS[metric]], errors="coerce").to_numpy(dtype=float)
            mean, std, mn, mx, _ = _grouped_moments(keys, col[sel], n_cells)
            for agg, arr in (("mean", mean), ("std", std), ("min", mn), ("max", mx)):
                values[col_pos[f"{metric}_{agg}_{d}"]] = arr.reshape(n_ent, hours)

    return values, presence, start, hours, columns


def aggregate_to_amplifier(frame, topo):
    """Reduce modem/channel samples to per-amplifier hourly aggregate series.

    Samples are grouped by the last-line amplifier behind each modem. Hours
    with no surviving sample for an amplifier are filled by interpolation,
    so the result covers the full observed grid without holes.
    """
    amp_ids = tuple(sorted({a for fn in topo.fiber_nodes for a in topo.last_line_amplifiers(fn)}))
    amp_pos = {a: i for i, a in enumerate(amp_ids)}
    mac_to_amp = {mac: amp_pos[amp] for mac, amp in topo.modems.items()}
    values, _, start, hours, columns = _aggregate_by_entity(frame, mac_to_amp, amp_ids)
    for c in range(values.shape[0]):
        for a in range(values.shape[1]):
            row = values[c, a]
            if np.isnan(row).any():
                if not np.isfinite(row).any():
                    raise TelemetryError(
                        f"amplifier {amp_ids[a]} has no samples at all for {columns[c]}"
                    )
                values[c, a] = interpolate_missing(row)
    return AmplifierSeriesSet(
        amplifiers=amp_ids, start=start, hours=hours, columns=columns, values=values
    )


def compute_features(series_set):
    """Expand aggregate series into value/change/window-range feature columns."""
    agg_cols = series_set.columns
    agg_pos = {c: i for i, c in enumerate(agg_cols)}
    out_cols = feature_column_names()
    n_amps, hours = len(series_set.amplifiers), series_set.hours
    out = np.empty((len(out_cols), n_amps, hours))

    pos = 0
    for d in DIRECTIONS:
        for metric in METRICS[d]:
            for agg in AGGREGATES:
                x = series_set.values[agg_pos[f"{metric}_{agg}_{d}"]]
                prev = np.empty_like(x)
                prev[:, 1:] = x[:, :-1]
                prev[:, 0] = np.nan
                ok = np.isfinite(prev) & (prev != 0.0)
                with np.errstate(divide="ignore", invalid="ignore"):
                    chratio = np.where(ok, x / prev, np.nan)
                    relchg = np.where(ok, (x - prev) / prev, np.nan)
                out[pos] = x
                out[pos + 1] = chratio
                out[pos + 2] = relchg
                out[pos + 3] = sliding_window_range(x, 4)
                out[pos + 4] = (~ok).astype(float)
                pos += 5

    return FeatureTable(
        amplifiers=series_set.amplifiers,
        start=series_set.start,
        hours=series_set.hours,
        columns=out_cols,
        values=out,
    )


def format_grid(start, hours):
    grid = start + np.arange(hours) * HOUR
    return np.datetime_as_string(grid.astype("datetime64[s]"), unit="s")


def write_features_csv(table, path):
    """Persist a feature table as CSV, rows ordered by (amplifier, ts)."""
    n_amps, hours = len(table.amplifiers), table.hours
    ts_col = np.char.add(format_grid(table.start, hours), "Z")
    data = {
        "amplifier": np.repeat(np.asarray(table.amplifiers, dtype=object), hours),
        "ts": np.tile(ts_col, n_amps),
    }
    flat = table.values.transpose(1, 2, 0).reshape(n_amps * hours, len(table.columns))
    df = pl.DataFrame(data)
    df = df.with_columns(
        [pl.Series(name, flat[:, i]) for i, name in enumerate(table.columns)]
    )
    df.write_csv(path)


def read_features_csv(path):
    """Load a feature table written by write_features_csv."""
    header = pl.read_csv(path, n_rows=0)
    cols = tuple(header.columns)
    if cols[:2] != ("amplifier", "ts"):
        raise TelemetryError("features file must start with amplifier,ts columns")
    feature_cols = cols[2:]
    expected = feature_column_names()
    if tuple(feature_cols) != expected:
        raise TelemetryError("features file columns do not match the expected layout")
    df = pl.read_csv(
        path,
        schema_overrides={"amplifier": pl.Utf8, "ts": pl.Utf8, **{c: pl.Float64 for c in feature_cols}},
    )
    amps = df["amplifier"].to_numpy()
    ts = pd.to_datetime(df["ts"].to_numpy(), format="ISO8601", utc=True)
    ts64 = ts.tz_localize(None).to_numpy().astype("datetime64[h]")
    amp_ids = tuple(sorted(set(amps.tolist())))
    start = ts64.min()
    hours = int((ts64.max() - start) / HOUR) + 1
    if len(df) != len(amp_ids) * hours:
        raise TelemetryError("features file does not cover a dense amplifier x hour grid")
    amp_pos = {a: i for i, a in enumerate(amp_ids)}
    rows = np.array([amp_pos[a] for a in amps.tolist()])
    hour_idx = ((ts64 - start) / HOUR).astype(np.int64)
    values = np.full((len(expected), len(amp_ids), hours), np.nan)
    mat = df.select(feature_cols).to_numpy()
    values[:, rows, hour_idx] = mat.T
    return FeatureTable(
        amplifiers=amp_ids, start=start, hours=hours, columns=expected, values=values
    )


def telemetry_to_csv(frame, path):
    """Write raw samples with canonical ordering and ISO timestamps."""
    df = frame.copy()
    ts = pd.to_datetime(df["ts"])
    df["ts"] = ts.dt.strftime(TS_FORMAT)
    df = df.sort_values(["ts", "mac", "channel", "direction"], kind="stable")
    df.to_csv(path, index=False, columns=list(TELEMETRY_COLUMNS))


def telemetry_from_csv(path):
    df = pd.read_csv(path, dtype={"mac": str, "channel": str, "direction": str})
    return df
