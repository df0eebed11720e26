"""Candidate scorers: business rule, logistic regression, boosted trees, stumps.

Every model consumes the same flattened session representation (one row per
candidate amplifier, columns = 72 hourly values per feature plus per-session
summary stats) and produces a probability-like score in (0, 1). A model
remembers the exact column manifest it was trained against and refuses to
score anything else.

The business rule needs no training and reads raw, un-normalized features;
the learned models expect double-normalized input. Boosted trees are trained
on 256-bin quantile histograms with Newton leaf values and exact threshold
playback: the stored split thresholds are real data values, so reloading a
model from JSON reproduces its scores bit for bit.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, asdict

import numpy as np
from numba import njit

from .seeding import substream

SESSION_HOURS = 72
SUMMARY_STATS = ("mean", "std", "min", "max")


class ManifestMismatchError(ValueError):
    """Scoring input columns differ from the model's training manifest."""


class ModelFormatError(ValueError):
    """Persisted model file is malformed."""


@dataclass
class ScorerModel:
    kind: str
    manifest: tuple[str, ...]
    params: dict


def flattened_manifest(columns):
    """Column names of the flattened per-candidate row layout."""
    hour_cols = [f"{c}@h{h:02d}" for h in range(SESSION_HOURS) for c in columns]
    summary_cols = [f"{c}@sess_{s}" for s in SUMMARY_STATS for c in columns]
    return tuple(hour_cols + summary_cols)


def flatten_sessions(dataset):
    """One row per (session, candidate): hourly features plus summaries.

    Returns (X, y, incident_of_row, rows, manifest) where rows is a list of
    (incident_id, amplifier) and incident_of_row indexes dataset.sessions.
    """
    columns = tuple(dataset.columns)
    manifest = flattened_manifest(columns)
    xs = []
    ys = []
    incident_of_row = []
    rows = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", category=RuntimeWarning)
        for s_i, s in enumerate(dataset.sessions):
            t = s.features
            if t is None:
                raise ValueError(f"session {s.incident_id} has no feature tensor")
            if t.shape[1] != SESSION_HOURS or t.shape[2] != len(columns):
                raise ValueError(
                    f"session {s.incident_id} tensor shape {t.shape} does not match "
                    f"({len(s.candidates)}, {SESSION_HOURS}, {len(columns)})"
                )
            hourly = t.reshape(t.shape[0], -1)
            summaries = np.concatenate(
                [
                    np.nanmean(t, axis=1),
                    np.nanstd(t, axis=1),
                    np.nanmin(t, axis=1),
                    np.nanmax(t, axis=1),
                ],
                axis=1,
            )
            xs.append(np.concatenate([hourly, summaries], axis=1))
            labels = set(s.labels)
            for amp in s.candidates:
                ys.append(1.0 if amp in labels else 0.0)
                incident_of_row.append(s_i)
                rows.append((s.incident_id, amp))
    X = np.concatenate(xs, axis=0) if xs else np.empty((0, len(manifest)))
    return X, np.asarray(ys), np.asarray(incident_of_row), rows, manifest


def _check_manifest(model, columns):
    cols = tuple(columns)
    if cols != tuple(model.manifest):
        n = sum(1 for a, b in zip(cols, model.manifest) if a != b)
        raise ManifestMismatchError(
            f"input has {len(cols)} columns vs model's {len(model.manifest)}; "
            f"{n} positions differ among the overlap"
        )


def _sigmoid(z):
    out = np.empty_like(z, dtype=float)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _sample_weights(y, class_weight):
    """Per-row weights; 'balanced' gives positives weight n_neg/n_pos."""
    y = np.asarray(y, dtype=float)
    if class_weight is None:
        return np.ones_like(y)
    if class_weight == "balanced":
        n_pos = float(y.sum())
        n_neg = float(len(y) - y.sum())
        w_pos = n_neg / n_pos if n_pos > 0 else 1.0
        return np.where(y > 0, w_pos, 1.0)
    w0, w1 = float(class_weight[0]), float(class_weight[1])
    return np.where(y > 0, w1, w0)


# ---------------------------------------------------------------------------
# business rule

BUSINESS_RULE_COLUMN = "tx_mean_range4h_us"
BUSINESS_RULE_LOOKBACK = 24


def business_rule(manifest, lookback=BUSINESS_RULE_LOOKBACK, column=BUSINESS_RULE_COLUMN):
    """Training-free scorer: peak upstream-tx 4h swing over the last hours.

    Scores are monotonically squashed into (0, 1); ranking is untouched.
    Expects raw (pre-normalization) feature rows.
    """
    manifest = tuple(manifest)
    needed = _rule_positions(manifest, column, lookback)
    if not needed:
        raise ValueError(
            f"manifest has no hourly {column!r} columns in the last {lookback}h"
        )
    return ScorerModel(
        kind="business_rule",
        manifest=manifest,
        params={"lookback": int(lookback), "column": column},
    )


def _rule_positions(manifest, column, lookback):
    wanted = {f"{column}@h{h:02d}" for h in range(SESSION_HOURS - lookback, SESSION_HOURS)}
    return [i for i, name in enumerate(manifest) if name in wanted]


def business_rule_score(session, columns, lookback=BUSINESS_RULE_LOOKBACK, column=BUSINESS_RULE_COLUMN):
    """Raw rule score per candidate, straight from a session tensor."""
    columns = tuple(columns)
    if column not in columns:
        raise ValueError(f"{column!r} is not a session feature column")
    c = columns.index(column)
    window = session.features[:, SESSION_HOURS - lookback :, c]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", category=RuntimeWarning)
        return np.nanmax(window, axis=1)


def _squash(score):
    return 0.5 + 0.5 * score / (1.0 + np.abs(score))


# ---------------------------------------------------------------------------
# logistic regression

@dataclass(frozen=True)
class LogisticConfig:
    learning_rate: float = 0.1
    epochs: int = 500
    l2: float = 1e-3
    class_weight: object = "balanced"


def logistic_loss_grad(params, X, y, l2=0.0, sample_weight=None):
    """Mean weighted logistic loss and its gradient; bias is unregularized.

    params packs the weights with the bias as the last entry.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    w = params[:-1]
    b = params[-1]
    sw = np.ones_like(y) if sample_weight is None else np.asarray(sample_weight, dtype=float)
    n = len(y)
    z = X @ w + b
    loss = float(np.sum(sw * (np.logaddexp(0.0, z) - y * z)) / n + 0.5 * l2 * (w @ w))
    r = sw * (_sigmoid(z) - y) / n
    grad = np.concatenate([X.T @ r + l2 * w, [r.sum()]])
    return loss, grad


def train_logistic(X, y, manifest, cfg=None):
    """Full-batch gradient descent from zero init; fully deterministic."""
    cfg = cfg or LogisticConfig()
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if not np.isfinite(X).all():
        raise ValueError("training matrix contains non-finite values")
    sw = _sample_weights(y, cfg.class_weight)
    params = np.zeros(X.shape[1] + 1)
    trace = []
    for _ in range(cfg.epochs):
        loss, grad = logistic_loss_grad(params, X, y, cfg.l2, sw)
        trace.append(loss)
        params = params - cfg.learning_rate * grad
    loss, _ = logistic_loss_grad(params, X, y, cfg.l2, sw)
    trace.append(loss)
    return ScorerModel(
        kind="logistic",
        manifest=tuple(manifest),
        params={
            "weights": params[:-1].tolist(),
            "bias": float(params[-1]),
            "config": _logistic_config_dict(cfg),
            "loss_trace": [float(v) for v in trace],
        },
    )


def _logistic_config_dict(cfg):
    d = asdict(cfg)
    if not isinstance(d["class_weight"], (str, type(None))):
        d["class_weight"] = list(d["class_weight"])
    return d


# ---------------------------------------------------------------------------
# gradient-boosted trees

@dataclass(frozen=True)
class GBDTConfig:
    rounds: int = 200
    max_depth: int = 6
    learning_rate: float = 0.1
    min_leaf: int = 5
    reg_lambda: float = 1.0
    min_split_gain: float = 0.0
    feature_subsample: float = 1.0
    max_bins: int = 256
    class_weight: object = "balanced"
    seed: int = 0


@njit(cache=True)
def _hist_fill(codes, rows, g, h, hist_g, hist_h, hist_n):
    hist_g[:, :] = 0.0
    hist_h[:, :] = 0.0
    hist_n[:, :] = 0
    for i in range(rows.size):
        r = rows[i]
        gv = g[r]
        hv = h[r]
        for f in range(codes.shape[1]):
            b = codes[r, f]
            hist_g[f, b] += gv
            hist_h[f, b] += hv
            hist_n[f, b] += 1


@njit(cache=True)
def _best_split(hist_g, hist_h, hist_n, n_bins, total_g, total_h, total_n, lam, min_leaf):
    best_gain = -np.inf
    best_f = -1
    best_b = -1
    parent = total_g * total_g / (total_h + lam)
    for f in range(hist_g.shape[0]):
        nb = n_bins[f]
        if nb < 2:
            continue
        gl = 0.0
        hl = 0.0
        nl = 0
        for b in range(nb - 1):
            gl += hist_g[f, b]
            hl += hist_h[f, b]
            nl += hist_n[f, b]
            nr = total_n - nl
            if nl < min_leaf:
                continue
            if nr < min_leaf:
                break
            gr = total_g - gl
            hr = total_h - hl
            gain = 0.5 * (gl * gl / (hl + lam) + gr * gr / (hr + lam) - parent)
            if gain > best_gain:
                best_gain = gain
                best_f = f
                best_b = b
    return best_f, best_b, best_gain


@njit(cache=True)
def _partition(codes, rows, f, b, left_out, right_out):
    nl = 0
    nr = 0
    for i in range(rows.size):
        r = rows[i]
        if codes[r, f] <= b:
            left_out[nl] = r
            nl += 1
        else:
            right_out[nr] = r
            nr += 1
    return nl, nr


@njit(cache=True)
def _predict_codes(codes, feat, thr_bin, left, right, value, out):
    for r in range(codes.shape[0]):
        node = 0
        while feat[node] >= 0:
            if codes[r, feat[node]] <= thr_bin[node]:
                node = left[node]
            else:
                node = right[node]
        out[r] += value[node]


@njit(cache=True)
def _predict_values(X, feat, thr, left, right, value, out):
    for r in range(X.shape[0]):
        node = 0
        while feat[node] >= 0:
            if X[r, feat[node]] <= thr[node]:
                node = left[node]
            else:
                node = right[node]
        out[r] += value[node]


def _bin_columns(X, max_bins):
    """Per-column quantile edges and uint8 codes; code <= b iff x <= edge[b]."""
    n, F = X.shape
    qs = np.linspace(0.0, 1.0, max_bins + 1)[1:-1]
    edges = []
    codes = np.empty((n, F), dtype=np.uint8)
    n_bins = np.empty(F, dtype=np.int64)
    for f in range(F):
        col = X[:, f]
        e = np.unique(np.quantile(col, qs))
        edges.append(e)
        codes[:, f] = np.searchsorted(e, col, side="left").astype(np.uint8)
        n_bins[f] = len(e) + 1
    return codes, edges, n_bins


def _build_tree(codes, g, h, n_bins, cfg):
    """Depth-first histogram tree; returns parallel node arrays (local bins)."""
    feat = []
    thr_bin = []
    left = []
    right = []
    value = []
    F = codes.shape[1]
    hist_g = np.empty((F, 256))
    hist_h = np.empty((F, 256))
    hist_n = np.empty((F, 256), dtype=np.int64)
    all_rows = np.arange(codes.shape[0], dtype=np.int64)

    def new_node():
        feat.append(-1)
        thr_bin.append(-1)
        left.append(-1)
        right.append(-1)
        value.append(0.0)
        return len(feat) - 1

    root = new_node()
    stack = [(root, all_rows, 0)]
    while stack:
        node, rows, depth = stack.pop()
        total_g = float(g[rows].sum())
        total_h = float(h[rows].sum())
        if depth >= cfg.max_depth or rows.size < 2 * cfg.min_leaf:
            value[node] = -cfg.learning_rate * total_g / (total_h + cfg.reg_lambda)
            continue
        _hist_fill(codes, rows, g, h, hist_g, hist_h, hist_n)
        f, b, gain = _best_split(
            hist_g, hist_h, hist_n, n_bins, total_g, total_h, rows.size,
            cfg.reg_lambda, cfg.min_leaf,
        )
        if f < 0 or gain < cfg.min_split_gain:
            value[node] = -cfg.learning_rate * total_g / (total_h + cfg.reg_lambda)
            continue
        l_buf = np.empty(rows.size, dtype=np.int64)
        r_buf = np.empty(rows.size, dtype=np.int64)
        nl, nr = _partition(codes, rows, f, b, l_buf, r_buf)
        feat[node] = f
        thr_bin[node] = b
        l_id = new_node()
        r_id = new_node()
        left[node] = l_id
        right[node] = r_id
        stack.append((r_id, r_buf[:nr].copy(), depth + 1))
        stack.append((l_id, l_buf[:nl].copy(), depth + 1))
    return (
        np.asarray(feat, dtype=np.int64),
        np.asarray(thr_bin, dtype=np.int64),
        np.asarray(left, dtype=np.int64),
        np.asarray(right, dtype=np.int64),
        np.asarray(value, dtype=np.float64),
    )


def train_gbdt(X, y, manifest, cfg=None):
    """Boosted trees on quantile-binned features, logistic loss, Newton leaves.

    Single-threaded and fully deterministic: node order, tie-breaking on
    (feature, bin), and the feature subsample stream are all fixed by config.
    """
    cfg = cfg or GBDTConfig()
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if not np.isfinite(X).all():
        raise ValueError("training matrix contains non-finite values")
    if X.shape[0] != y.shape[0]:
        raise ValueError("X and y row counts differ")
    n, F = X.shape
    sw = _sample_weights(y, cfg.class_weight)
    s_pos = float((sw * y).sum())
    s_neg = float((sw * (1.0 - y)).sum())
    base = float(np.clip(np.log(max(s_pos, 1e-12) / max(s_neg, 1e-12)), -15.0, 15.0))

    codes, edges, n_bins = _bin_columns(X, cfg.max_bins)
    rng = substream(cfg.seed, "gbdt-feature-subsample")
    k_sub = max(1, int(round(cfg.feature_subsample * F))) if cfg.feature_subsample < 1.0 else F

    margin = np.full(n, base)
    trace = [_mean_logloss(margin, y, sw)]
    trees = []
    for _ in range(cfg.rounds):
        p = _sigmoid(margin)
        g = sw * (p - y)
        h = sw * p * (1.0 - p)
        if k_sub < F:
            sub = np.sort(rng.choice(F, size=k_sub, replace=False))
            codes_t = np.ascontiguousarray(codes[:, sub])
            bins_t = n_bins[sub]
        else:
            sub = None
            codes_t = codes
            bins_t = n_bins
        feat, thr_bin, left, right, value = _build_tree(codes_t, g, h, bins_t, cfg)
        _predict_codes(codes_t, feat, thr_bin, left, right, value, margin)
        trace.append(_mean_logloss(margin, y, sw))
        if sub is not None:
            feat = np.where(feat >= 0, sub[np.clip(feat, 0, None)], -1)
        thr = [
            float(edges[f][b]) if f >= 0 else None for f, b in zip(feat, thr_bin)
        ]
        trees.append(
            {
                "feature": feat.tolist(),
                "threshold": thr,
                "left": left.tolist(),
                "right": right.tolist(),
                "value": value.tolist(),
            }
        )
    return ScorerModel(
        kind="gbdt",
        manifest=tuple(manifest),
        params={
            "base_score": base,
            "trees": trees,
            "config": _gbdt_config_dict(cfg),
            "loss_trace": [float(v) for v in trace],
        },
    )


def _gbdt_config_dict(cfg):
    d = asdict(cfg)
    if not isinstance(d["class_weight"], (str, type(None))):
        d["class_weight"] = list(d["class_weight"])
    return d


def _mean_logloss(margin, y, sw):
    return float(np.sum(sw * (np.logaddexp(0.0, margin) - y * margin)) / len(y))


def _gbdt_margin(model, X):
    X = np.ascontiguousarray(X, dtype=float)
    out = np.full(X.shape[0], float(model.params["base_score"]))
    for tree in model.params["trees"]:
        feat = np.asarray(tree["feature"], dtype=np.int64)
        thr = np.asarray(
            [np.nan if v is None else v for v in tree["threshold"]], dtype=np.float64
        )
        left = np.asarray(tree["left"], dtype=np.int64)
        right = np.asarray(tree["right"], dtype=np.int64)
        value = np.asarray(tree["value"], dtype=np.float64)
        _predict_values(X, feat, thr, left, right, value, out)
    return out


def predict_proba(model, X, columns):
    """Score rows with any model kind; manifest must match exactly."""
    _check_manifest(model, columns)
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != len(model.manifest):
        raise ValueError(f"X shape {X.shape} does not match manifest of {len(model.manifest)}")
    if model.kind == "business_rule":
        pos = _rule_positions(model.manifest, model.params["column"], model.params["lookback"])
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", category=RuntimeWarning)
            score = np.nanmax(X[:, pos], axis=1)
        return _squash(score)
    if model.kind == "logistic":
        w = np.asarray(model.params["weights"], dtype=float)
        b = float(model.params["bias"])
        return _sigmoid(X @ w + b)
    if model.kind == "gbdt":
        return _sigmoid(_gbdt_margin(model, X))
    if model.kind == "rule_list":
        return _rule_list_scores(model, X)
    raise ValueError(f"unknown model kind {model.kind!r}")


# ---------------------------------------------------------------------------
# stump rule discovery

@dataclass(frozen=True)
class StumpRule:
    column: str
    threshold: float
    direction: str  # ">" fires above the threshold, "<=" at or below
    quality: float  # weighted relative accuracy
    support: int
    precision: float

    def fires(self, x):
        return x > self.threshold if self.direction == ">" else x <= self.threshold


@dataclass(frozen=True)
class RuleConfig:
    n_thresholds: int = 15
    min_support: int = 5
    max_rules: int = 20


def discover_rules(X, y, columns, cfg=None):
    """Exhaustive single-feature threshold scan ranked by weighted relative accuracy.

    quality = coverage * (precision - base_rate); positive quality means the
    rule concentrates positives better than chance. Deterministic order:
    quality desc, then column name, threshold, direction.
    """
    cfg = cfg or RuleConfig()
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n = len(y)
    if n == 0:
        return []
    base = float(y.mean())
    qs = np.linspace(0.0, 1.0, cfg.n_thresholds + 2)[1:-1]
    rules = []
    for j, name in enumerate(columns):
        col = X[:, j]
        order = np.argsort(col, kind="stable")
        sorted_vals = col[order]
        cum_pos = np.concatenate([[0.0], np.cumsum(y[order])])
        total_pos = cum_pos[-1]
        for thr in np.unique(np.quantile(col, qs)):
            idx = int(np.searchsorted(sorted_vals, thr, side="right"))
            n_le, n_gt = idx, n - idx
            pos_le = float(cum_pos[idx])
            pos_gt = total_pos - pos_le
            for direction, support, pos in ((">", n_gt, pos_gt), ("<=", n_le, pos_le)):
                if support < cfg.min_support:
                    continue
                precision = pos / support
                quality = (support / n) * (precision - base)
                rules.append(
                    StumpRule(
                        column=str(name),
                        threshold=float(thr),
                        direction=direction,
                        quality=float(quality),
                        support=int(support),
                        precision=float(precision),
                    )
                )
    rules.sort(key=lambda r: (-r.quality, r.column, r.threshold, r.direction))
    return rules[: cfg.max_rules]


def rule_list_model(rules, manifest):
    """Score rows by the best-quality rule that fires (simple voting scorer)."""
    return ScorerModel(
        kind="rule_list",
        manifest=tuple(manifest),
        params={"rules": [asdict(r) for r in rules]},
    )


def _rule_list_scores(model, X):
    manifest = {name: i for i, name in enumerate(model.manifest)}
    votes = np.zeros(X.shape[0])
    total = 0.0
    for rec in model.params["rules"]:
        rule = StumpRule(**rec)
        col = X[:, manifest[rule.column]]
        weight = max(rule.quality, 0.0)
        votes += weight * rule.fires(col)
        total += weight
    if total > 0:
        votes /= total
    return _squash(votes)


# ---------------------------------------------------------------------------
# persistence

def save_model(model, path):
    doc = {"kind": model.kind, "manifest": list(model.manifest), "params": model.params}
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def load_model(path):
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ModelFormatError(f"{path}: not valid JSON: {exc}") from exc
    for key in ("kind", "manifest", "params"):
        if key not in doc:
            raise ModelFormatError(f"{path}: missing {key!r}")
    return ScorerModel(
        kind=doc["kind"], manifest=tuple(doc["manifest"]), params=doc["params"]
    )
