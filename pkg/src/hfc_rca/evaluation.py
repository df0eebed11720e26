"""Two-stage ranked evaluation under incident-grouped cross-validation.

Stage one treats candidate scoring as plain binary classification at a fixed
threshold. Stage two asks the operational question: rank the candidates of
each incident and check whether a true root cause appears in the top k. An
incident counts as one hit or one miss regardless of its candidate count, so
TP@k + FP@k always equals the number of evaluated incidents.

Folds split by incident: all candidates of one incident land in the same
fold, and per-hub normalization statistics are refitted from each fold's
training incidents only. The business rule is training-free and reads raw
features; its stage-one positives are its top-1 picks, which makes its
stage-one precision equal precision@1 and its recall 1.0 by construction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
import pandas as pd

from . import models as M
from . import normalize as N
from .incidents import SessionDataset
from .seeding import substream

DEFAULT_KS = (1, 3)
DEFAULT_THRESHOLD = 0.5
MODEL_KINDS = ("business_rule", "logistic", "gbdt", "rule_list")


class EvaluationError(Exception):
    pass


@dataclass
class BinaryMetrics:
    precision: float
    recall: float
    precision_defined: bool
    recall_defined: bool


def binary_metrics(probs, labels, threshold=DEFAULT_THRESHOLD):
    """Precision/recall of prob >= threshold; zero denominators are flagged."""
    probs = np.asarray(probs, dtype=float)
    labels = np.asarray(labels, dtype=float)
    if probs.shape != labels.shape:
        raise ValueError("probs and labels must align")
    pred = probs >= threshold
    pos = labels > 0
    tp = float(np.sum(pred & pos))
    fp = float(np.sum(pred & ~pos))
    fn = float(np.sum(~pred & pos))
    p_def = (tp + fp) > 0
    r_def = (tp + fn) > 0
    return BinaryMetrics(
        precision=tp / (tp + fp) if p_def else float("nan"),
        recall=tp / (tp + fn) if r_def else float("nan"),
        precision_defined=p_def,
        recall_defined=r_def,
    )


@dataclass
class ScoredRanking:
    incident_id: str
    ranking: tuple  # ((amplifier, probability), ...) best first

    def top(self, k):
        return tuple(a for a, _ in self.ranking[:k])


def rank_within_incident(session, probs):
    """Order a session's candidates by score, descending; ties by id.

    probs may be a mapping amplifier -> probability or an array aligned with
    session.candidates. Every candidate needs a score.
    """
    if isinstance(probs, dict):
        missing = [a for a in session.candidates if a not in probs]
        if missing:
            raise EvaluationError(
                f"incident {session.incident_id}: no probability for {missing[0]!r}"
            )
        pairs = [(a, float(probs[a])) for a in session.candidates]
    else:
        probs = np.asarray(probs, dtype=float)
        if probs.shape != (len(session.candidates),):
            raise EvaluationError(
                f"incident {session.incident_id}: got {probs.shape} probabilities "
                f"for {len(session.candidates)} candidates"
            )
        pairs = list(zip(session.candidates, probs.astype(float)))
    pairs.sort(key=lambda ap: (-ap[1], ap[0]))
    return ScoredRanking(session.incident_id, tuple(pairs))


def precision_at_k(rankings, sessions_by_id, k):
    """(precision@k, FP@k, TP@k): an incident hits when any label is in top k."""
    if k < 1:
        raise ValueError("k must be >= 1")
    tp = 0
    for r in rankings:
        labels = set(sessions_by_id[r.incident_id].labels)
        if labels & set(r.top(k)):
            tp += 1
    fp = len(rankings) - tp
    prec = tp / len(rankings) if rankings else float("nan")
    return prec, fp, tp


def assign_folds(n_incidents, n_folds, seed):
    """Deterministic permutation split of incident indices into folds."""
    if n_folds < 2:
        raise ValueError("need at least 2 folds")
    if n_incidents < n_folds:
        raise EvaluationError(
            f"cannot split {n_incidents} incidents into {n_folds} folds"
        )
    rng = substream(seed, "fold-assignment")
    perm = rng.permutation(n_incidents)
    return [np.sort(part) for part in np.array_split(perm, n_folds)]


@dataclass
class FoldCell:
    fold: int
    model: str
    k: int
    n_incidents: int
    stage1: BinaryMetrics
    p_at_k: float
    fp_at_k: int
    tp_at_k: int


@dataclass
class EvaluationReport:
    cells: list  # FoldCell
    ks: tuple
    n_folds: int

    def summary_rows(self):
        """Mean/std over folds per (k, model); stds are population stds."""
        rows = []
        key = {}
        for c in self.cells:
            key.setdefault((c.k, c.model), []).append(c)
        for (k, model), cells in key.items():
            def agg(vals, defined=None):
                v = np.asarray(vals, dtype=float)
                if defined is not None:
                    v = v[np.asarray(defined, dtype=bool)]
                if v.size == 0:
                    return float("nan"), float("nan")
                return float(v.mean()), float(v.std())

            p1m, p1s = agg(
                [c.stage1.precision for c in cells],
                [c.stage1.precision_defined for c in cells],
            )
            r1m, r1s = agg(
                [c.stage1.recall for c in cells],
                [c.stage1.recall_defined for c in cells],
            )
            pkm, pks = agg([c.p_at_k for c in cells])
            fpm, fps = agg([c.fp_at_k for c in cells])
            tpm, tps = agg([c.tp_at_k for c in cells])
            rows.append(
                {
                    "k": k,
                    "model": model,
                    "precision_step1_mean": p1m,
                    "precision_step1_std": p1s,
                    "recall_step1_mean": r1m,
                    "recall_step1_std": r1s,
                    "precision_at_k_mean": pkm,
                    "precision_at_k_std": pks,
                    "false_positives_at_k_mean": fpm,
                    "false_positives_at_k_std": fps,
                    "true_positives_at_k_mean": tpm,
                    "true_positives_at_k_std": tps,
                }
            )
        def sort_key(r):
            pk = r["precision_at_k_mean"]
            return (r["k"], -(pk if pk == pk else -1.0), r["model"])

        rows.sort(key=sort_key)
        return rows


def model_from_spec(spec, X_train, y_train, manifest):
    kind = spec["kind"]
    if kind == "business_rule":
        return M.business_rule(
            manifest,
            lookback=spec.get("lookback", M.BUSINESS_RULE_LOOKBACK),
            column=spec.get("column", M.BUSINESS_RULE_COLUMN),
        )
    if kind == "logistic":
        cfg = M.LogisticConfig(**{k: v for k, v in spec.items() if k not in ("kind", "name")})
        return M.train_logistic(X_train, y_train, manifest, cfg)
    if kind == "gbdt":
        cfg = M.GBDTConfig(**{k: v for k, v in spec.items() if k not in ("kind", "name")})
        return M.train_gbdt(X_train, y_train, manifest, cfg)
    if kind == "rule_list":
        cfg = M.RuleConfig(**{k: v for k, v in spec.items() if k not in ("kind", "name")})
        rules = M.discover_rules(X_train, y_train, manifest, cfg)
        return M.rule_list_model(rules, manifest)
    raise EvaluationError(f"unknown model kind {kind!r}")


def cross_validate(dataset, hub_of_fn, model_specs, n_folds=5, seed=0,
                   ks=DEFAULT_KS, threshold=DEFAULT_THRESHOLD):
    """Incident-grouped CV of several scorers over one session dataset.

    dataset must be raw (un-normalized); each fold fits hub statistics on its
    training incidents, double-normalizes both sides, and trains every spec.
    Returns an EvaluationReport with one cell per (fold, model, k).
    """
    if dataset.norm_state != "raw":
        raise EvaluationError("cross_validate expects raw sessions")
    sessions = sorted(dataset.sessions, key=lambda s: s.incident_id)
    raw = SessionDataset(sessions, dataset.columns)
    folds = assign_folds(len(sessions), n_folds, seed)
    names = []
    for spec in model_specs:
        name = spec.get("name", spec["kind"])
        if name in names:
            raise EvaluationError(f"duplicate model name {name!r}")
        names.append(name)

    # Raw flattened rows serve the training-free business rule.
    X_raw, _, inc_raw, _, manifest = M.flatten_sessions(raw)

    cells = []
    for fold_i, test_idx in enumerate(folds):
        test_set = set(test_idx.tolist())
        train_sessions = [s for i, s in enumerate(sessions) if i not in test_set]
        test_sessions = [s for i, s in enumerate(sessions) if i in test_set]
        train_ds = SessionDataset(train_sessions, raw.columns)
        test_ds = SessionDataset(test_sessions, raw.columns)

        stats = N.fit_hub_stats(train_ds, hub_of_fn)
        norm_train, _ = N.double_normalize(train_ds, hub_of_fn, stats)
        norm_test, _ = N.double_normalize(test_ds, hub_of_fn, stats)
        X_tr, y_tr, _, _, manifest_n = M.flatten_sessions(norm_train)
        X_te, y_te, inc_te, _, _ = M.flatten_sessions(norm_test)
        raw_rows_te = np.isin(inc_raw, test_idx)
        X_te_raw = X_raw[raw_rows_te]

        for spec, name in zip(model_specs, names):
            kind = spec["kind"]
            model = model_from_spec(spec, X_tr, y_tr, manifest_n)
            if kind == "business_rule":
                probs = M.predict_proba(model, X_te_raw, manifest)
            else:
                probs = M.predict_proba(model, X_te, manifest_n)

            rankings = []
            row0 = 0
            for s in test_sessions:
                n_c = len(s.candidates)
                rankings.append(rank_within_incident(s, probs[row0 : row0 + n_c]))
                row0 += n_c

            if kind == "business_rule":
                # The rule flags exactly its top pick per incident: stage-one
                # precision is the hit rate of those picks, recall is 1 by
                # construction (every incident gets exactly one flag).
                hits = sum(
                    1
                    for r, s in zip(rankings, test_sessions)
                    if r.top(1)[0] in set(s.labels)
                )
                n_inc = len(test_sessions)
                stage1 = BinaryMetrics(
                    precision=hits / n_inc if n_inc else float("nan"),
                    recall=1.0 if n_inc else float("nan"),
                    precision_defined=n_inc > 0,
                    recall_defined=n_inc > 0,
                )
            else:
                stage1 = binary_metrics(probs, y_te, threshold)

            by_id = {s.incident_id: s for s in test_sessions}
            for k in ks:
                pk, fp, tp = precision_at_k(rankings, by_id, k)
                cells.append(
                    FoldCell(
                        fold=fold_i,
                        model=name,
                        k=k,
                        n_incidents=len(test_sessions),
                        stage1=stage1,
                        p_at_k=pk,
                        fp_at_k=fp,
                        tp_at_k=tp,
                    )
                )
    return EvaluationReport(cells=cells, ks=tuple(ks), n_folds=n_folds)


def report_frames(report):
    """(summary frame, per-fold frame) ready for CSV."""
    summary = pd.DataFrame(report.summary_rows())
    folds = pd.DataFrame(
        {
            "fold": c.fold,
            "model": c.model,
            "k": c.k,
            "n_incidents": c.n_incidents,
            "precision_step1": c.stage1.precision,
            "recall_step1": c.stage1.recall,
            "precision_at_k": c.p_at_k,
            "false_positives_at_k": c.fp_at_k,
            "true_positives_at_k": c.tp_at_k,
        }
        for c in report.cells
    )
    return summary, folds


def write_report(report, csv_path, json_path, folds_path=None):
    """Persist the summary as CSV and a field-identical JSON document."""
    summary, folds = report_frames(report)
    summary.to_csv(csv_path, index=False)
    doc = {
        "n_folds": report.n_folds,
        "ks": list(report.ks),
        "rows": [
            {k: (None if isinstance(v, float) and np.isnan(v) else v) for k, v in row.items()}
            for row in report.summary_rows()
        ],
    }
    with open(json_path, "w") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1)
        fh.write("\n")
    if folds_path is not None:
        folds.to_csv(folds_path, index=False)


def format_report(report):
    """Console table of the summary rows."""
    rows = report.summary_rows()
    if not rows:
        return "no evaluation results"
    header = f"{'k':>2} {'model':<14} {'p@k':>7} {'fp@k':>7} {'tp@k':>7} {'p.step1':>8} {'r.step1':>8}"
    lines = [header, "-" * len(header)]
    for r in rows:
        lines.append(
            f"{r['k']:>2} {r['model']:<14} "
            f"{r['precision_at_k_mean']:>7.3f} {r['false_positives_at_k_mean']:>7.1f} "
            f"{r['true_positives_at_k_mean']:>7.1f} "
            f"{r['precision_step1_mean']:>8.3f} {r['recall_step1_mean']:>8.3f}"
        )
    return "\n".join(lines)
