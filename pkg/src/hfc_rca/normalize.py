"""Double normalization of session features: per-hub, then per-incident.

Stage one removes regional calibration offsets: every feature column is
z-scored against its hub's statistics, which are always fitted on training
sessions only and can be persisted for reuse. Stage two removes incident-level
common mode: within one session, each (hour, column) cell is z-scored across
the candidate amplifiers, so a value expresses "how unusual is this candidate
relative to its peers right now".

Zero spread maps to 0, not an error. NaN sentinel cells (undefined change
features) pass through both stages untouched and are consumed as 0 at the
end. The order is fixed: hub first, incident second; running the hub stage
on incident-normalized data is refused.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .incidents import SessionDataset


class NormalizationError(Exception):
    """Stage misuse or missing statistics."""


@dataclass
class HubStats:
    """Per-hub column means and population stds, fitted on training data.

    The pooled statistics cover all training rows together; they are the
    fallback for hubs that never appeared in training (small folds can
    leave a hub entirely in the held-out split).
    """

    columns: tuple[str, ...]
    mean: dict[str, np.ndarray]
    std: dict[str, np.ndarray]
    pooled_mean: np.ndarray | None = None
    pooled_std: np.ndarray | None = None

    def hubs(self):
        return tuple(sorted(self.mean))

    def for_hub(self, hub):
        """Stats for one hub, falling back to the pooled training stats."""
        if hub in self.mean:
            return self.mean[hub], self.std[hub]
        if self.pooled_mean is None:
            raise NormalizationError(f"no training statistics for hub {hub!r}")
        return self.pooled_mean, self.pooled_std


def _nan_mean_std(x):
    """Column-wise nan-aware mean and population std of a 2-D block."""
    count = np.sum(np.isfinite(x), axis=0)
    with np.errstate(invalid="ignore"):
        mean = np.where(count > 0, np.nansum(x, axis=0) / np.maximum(count, 1), np.nan)
        dev = x - mean
        var = np.where(
            count > 0, np.nansum(dev * dev, axis=0) / np.maximum(count, 1), np.nan
        )
    return mean, np.sqrt(var)


def hub_standardize(X, hub_of_row, stats=None, columns=None):
    """Z-score rows of X against their hub's column statistics.

    X is (n_rows, n_columns); hub_of_row assigns each row a hub. Without
    precomputed stats they are fitted on X itself (nan-aware, population
    std). Columns with zero spread in a hub standardize to 0 rather than
    blowing up; NaN cells stay NaN.
    """
    X = np.asarray(X, dtype=float)
    hubs = np.asarray(hub_of_row)
    if X.ndim != 2 or len(hubs) != X.shape[0]:
        raise ValueError("X must be (n_rows, n_columns) with one hub per row")
    if columns is None:
        columns = tuple(f"c{i}" for i in range(X.shape[1]))
    fitted = stats is None
    if fitted:
        mean = {}
        std = {}
        for hub in sorted(set(hubs.tolist())):
            m, s = _nan_mean_std(X[hubs == hub])
            mean[hub] = m
            std[hub] = s
        pm, ps = _nan_mean_std(X)
        stats = HubStats(tuple(columns), mean, std, pm, ps)
    else:
        if tuple(columns) != stats.columns:
            raise NormalizationError("hub statistics were fitted on different columns")
    out = np.empty_like(X)
    for hub in sorted(set(hubs.tolist())):
        rows = hubs == hub
        m, s = stats.for_hub(hub)
        with np.errstate(invalid="ignore", divide="ignore"):
            z = (X[rows] - m) / s
        block = X[rows]
        zero_spread = (s == 0) | ~np.isfinite(s)
        z[:, zero_spread] = np.where(np.isfinite(block[:, zero_spread]), 0.0, np.nan)
        out[rows] = z
    return out, stats


def fit_hub_stats(dataset, hub_of_fn):
    """Fit HubStats from the session tensors of a training dataset."""
    _require_state(dataset, "raw", "fit hub statistics")
    blocks = {}
    for s in dataset.sessions:
        hub = hub_of_fn[s.fiber_node]
        blocks.setdefault(hub, []).append(s.features.reshape(-1, s.features.shape[-1]))
    mean = {}
    std = {}
    for hub in sorted(blocks):
        m, s = _nan_mean_std(np.concatenate(blocks[hub], axis=0))
        mean[hub] = m
        std[hub] = s
    pooled = np.concatenate(
        [b for hub in sorted(blocks) for b in blocks[hub]], axis=0
    )
    pm, ps = _nan_mean_std(pooled)
    return HubStats(tuple(dataset.columns), mean, std, pm, ps)


def _require_state(dataset, expected, doing):
    if dataset.norm_state != expected:
        raise NormalizationError(
            f"cannot {doing} on {dataset.norm_state!r} data; expected {expected!r}"
        )


def apply_hub_stats(dataset, hub_of_fn, stats):
    """Hub-standardize every session tensor; returns a new dataset."""
    _require_state(dataset, "raw", "hub-standardize")
    if tuple(dataset.columns) != stats.columns:
        raise NormalizationError("hub statistics were fitted on different columns")
    out = []
    for s in dataset.sessions:
        hub = hub_of_fn[s.fiber_node]
        m, sd = stats.for_hub(hub)
        x = s.features
        with np.errstate(invalid="ignore", divide="ignore"):
            z = (x - m) / sd
        zero_spread = (sd == 0) | ~np.isfinite(sd)
        if zero_spread.any():
            z[..., zero_spread] = np.where(
                np.isfinite(x[..., zero_spread]), 0.0, np.nan
            )
        out.append(s.copy_with(features=z))
    return SessionDataset(out, dataset.columns, norm_state="hub")


def incident_standardize_tensor(tensor):
    """Z-score one session's (candidates, hours, columns) block across candidates.

    Returns (normalized tensor, degenerate flag); a single-candidate session
    is all zeros and flagged.
    """
    x = np.asarray(tensor, dtype=float)
    if x.ndim != 3:
        raise ValueError(f"expected (candidates, hours, columns), got shape {x.shape}")
    degenerate = x.shape[0] < 2
    count = np.sum(np.isfinite(x), axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = np.where(count > 0, np.nansum(x, axis=0) / np.maximum(count, 1), np.nan)
        dev = x - mean
        std = np.sqrt(
            np.where(count > 0, np.nansum(dev * dev, axis=0) / np.maximum(count, 1), np.nan)
        )
        z = (x - mean) / std
    zero_spread = (std == 0) | ~np.isfinite(std)
    if zero_spread.any():
        fill = np.where(np.isfinite(x), 0.0, np.nan)
        z = np.where(zero_spread[None, :, :], fill, z)
    return z, degenerate


def incident_standardize(dataset):
    """Apply cross-candidate z-scoring to every session; returns a new dataset."""
    if "incident" in dataset.norm_state:
        raise NormalizationError("sessions are already incident-standardized")
    out = []
    for s in dataset.sessions:
        z, degenerate = incident_standardize_tensor(s.features)
        out.append(s.copy_with(features=z, degenerate=degenerate))
    state = "hub+incident" if dataset.norm_state == "hub" else "incident"
    return SessionDataset(out, dataset.columns, norm_state=state)


def fill_missing(dataset):
    """Consume NaN sentinels as 0 after normalization is complete."""
    out = [s.copy_with(features=np.nan_to_num(s.features, nan=0.0)) for s in dataset.sessions]
    return SessionDataset(out, dataset.columns, norm_state=dataset.norm_state + "+filled")


def double_normalize(dataset, hub_of_fn, stats=None):
    """The full chain: hub z-score, incident z-score, sentinel fill.

    Stats are fitted on `dataset` itself when not provided; pass training
    stats to transform held-out sessions without leakage.
    """
    if stats is None:
        stats = fit_hub_stats(dataset, hub_of_fn)
    hubbed = apply_hub_stats(dataset, hub_of_fn, stats)
    both = incident_standardize(hubbed)
    return fill_missing(both), stats


def save_hub_stats(stats, path):
    doc = {
        "columns": list(stats.columns),
        "hubs": {
            hub: {
                "mean": [float(v) for v in stats.mean[hub]],
                "std": [float(v) for v in stats.std[hub]],
            }
            for hub in stats.hubs()
        },
    }
    if stats.pooled_mean is not None:
        doc["pooled"] = {
            "mean": [float(v) for v in stats.pooled_mean],
            "std": [float(v) for v in stats.pooled_std],
        }
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_hub_stats(path):
    with open(path) as fh:
        doc = json.load(fh)
    pooled = doc.get("pooled")
    return HubStats(
        columns=tuple(doc["columns"]),
        mean={h: np.asarray(v["mean"], dtype=float) for h, v in doc["hubs"].items()},
        std={h: np.asarray(v["std"], dtype=float) for h, v in doc["hubs"].items()},
        pooled_mean=None if pooled is None else np.asarray(pooled["mean"], dtype=float),
        pooled_std=None if pooled is None else np.asarray(pooled["std"], dtype=float),
    )
