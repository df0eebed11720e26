"""Stage orchestration over on-disk artifacts.

Each stage reads named input files, writes named outputs into the run
directory, and records sha256 digests in manifest.json. Reruns with the same
config and inputs produce byte-identical artifacts; nothing in the outputs
depends on wall-clock time or thread count.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import pandas as pd

from . import evaluation as E
from . import forecast as F
from . import incidents as I
from . import models as M
from . import normalize as N
from . import simulator as S
from . import telemetry as T
from .config import config_hash
from .topology import load_topology, save_topology

STAGES = ("simulate", "featurize", "sessionize", "train", "evaluate", "forecast", "report")

ARTIFACTS = {
    "topology": "topology.json",
    "telemetry": "telemetry.csv",
    "alarms": "alarms.csv",
    "tickets": "tickets.csv",
    "groundtruth": "groundtruth.json",
    "features": "features.csv",
    "sessions": "sessions.jsonl",
    "session_report": "session_report.csv",
    "model": "model.json",
    "norm_stats": "norm_stats.json",
    "report_csv": "report.csv",
    "report_json": "report.json",
    "report_folds": "report_folds.csv",
    "forecast_report": "forecast_report.csv",
}

STAGE_INPUTS = {
    "simulate": (),
    "featurize": ("topology", "telemetry"),
    "sessionize": ("topology", "alarms", "tickets", "features"),
    "train": ("topology", "features", "sessions"),
    "evaluate": ("topology", "features", "sessions"),
    "forecast": ("topology", "telemetry"),
    "report": ("report_json",),
}


class DependencyError(Exception):
    """A stage's input artifact is missing."""


def artifact_path(out_dir, name):
    return Path(out_dir) / ARTIFACTS[name]


def _sha256(path):
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _require_inputs(stage, out_dir):
    missing = []
    for name in STAGE_INPUTS[stage]:
        if not artifact_path(out_dir, name).exists():
            missing.append(str(artifact_path(out_dir, name)))
    if missing:
        raise DependencyError(
            f"stage {stage!r} needs missing input(s): {', '.join(missing)}; "
            "run the producing stage first"
        )


def _update_manifest(out_dir, cfg, stage, inputs, outputs):
    path = Path(out_dir) / "manifest.json"
    doc = {"config_hash": config_hash(cfg), "seed": cfg.run.seed, "stages": {}}
    if path.exists():
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError:
            pass
        doc["config_hash"] = config_hash(cfg)
        doc["seed"] = cfg.run.seed
        doc.setdefault("stages", {})
    doc["stages"][stage] = {
        "inputs": {n: _sha256(artifact_path(out_dir, n)) for n in inputs},
        "outputs": {n: _sha256(artifact_path(out_dir, n)) for n in outputs},
    }
    path.write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")


def _write_frame_csv(frame, path, ts_columns=()):
    out = frame.copy()
    for col in ts_columns:
        out[col] = pd.to_datetime(out[col]).dt.strftime(T.TS_FORMAT)
    out.to_csv(path, index=False)


def stage_simulate(cfg, out_dir, log=print):
    plant = S.generate_plant(cfg.simulate)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_topology(plant.topology, out / ARTIFACTS["topology"])
    T.telemetry_to_csv(plant.telemetry, out / ARTIFACTS["telemetry"])
    _write_frame_csv(plant.alarms, out / ARTIFACTS["alarms"], ts_columns=("start_ts", "end_ts"))
    plant.tickets.to_csv(out / ARTIFACTS["tickets"], index=False)
    (out / ARTIFACTS["groundtruth"]).write_text(
        json.dumps(plant.groundtruth, sort_keys=True, indent=1) + "\n"
    )
    log(
        f"simulate: {len(plant.topology.modems)} modems, "
        f"{len(plant.telemetry)} samples, {len(plant.faults)} faults"
    )
    outputs = ("topology", "telemetry", "alarms", "tickets", "groundtruth")
    _update_manifest(out_dir, cfg, "simulate", (), outputs)


def stage_featurize(cfg, out_dir, log=print):
    _require_inputs("featurize", out_dir)
    out = Path(out_dir)
    topo = load_topology(out / ARTIFACTS["topology"])
    frame = T.telemetry_from_csv(out / ARTIFACTS["telemetry"])
    series = T.aggregate_to_amplifier(frame, topo)
    table = T.compute_features(series)
    T.write_features_csv(table, out / ARTIFACTS["features"])
    log(
        f"featurize: {len(table.amplifiers)} amplifiers x {table.hours}h x "
        f"{len(table.columns)} columns"
    )
    _update_manifest(out_dir, cfg, "featurize", STAGE_INPUTS["featurize"], ("features",))


def _load_sessions(cfg, out_dir):
    out = Path(out_dir)
    topo = load_topology(out / ARTIFACTS["topology"])
    table = T.read_features_csv(out / ARTIFACTS["features"])
    sessions = I.read_sessions_jsonl(out / ARTIFACTS["sessions"], features=table)
    dataset = I.SessionDataset(sessions, table.columns)
    hub_of_fn = dict(topo.fiber_nodes)
    return topo, table, dataset, hub_of_fn


def stage_sessionize(cfg, out_dir, log=print):
    _require_inputs("sessionize", out_dir)
    out = Path(out_dir)
    topo = load_topology(out / ARTIFACTS["topology"])
    alarms = pd.read_csv(out / ARTIFACTS["alarms"])
    tickets = pd.read_csv(out / ARTIFACTS["tickets"]).fillna("")
    table = T.read_features_csv(out / ARTIFACTS["features"])
    dataset, join, skipped = I.sessionize(
        alarms,
        tickets,
        table,
        topo,
        merge_gap_hours=cfg.sessionize.merge_gap_hours,
        tolerance_hours=cfg.sessionize.tolerance_hours,
    )
    I.write_sessions_jsonl(dataset.sessions, out / ARTIFACTS["sessions"])
    report = join.report_frame()
    if skipped:
        report = pd.concat(
            [
                report,
                pd.DataFrame(
                    [
                        {"kind": "session", "id": t, "reason": r, "fiber_node": "", "start": "", "end": ""}
                        for t, r in skipped
                    ]
                ),
            ],
            ignore_index=True,
        )
    report.to_csv(out / ARTIFACTS["session_report"], index=False)
    n_pos, n_rows, ratio = I.imbalance_summary(dataset.sessions)
    log(
        f"sessionize: {len(dataset.sessions)} sessions, "
        f"{len(join.unmatched_tickets)} unmatched tickets, "
        f"{len(join.unmatched_windows)} unmatched windows; "
        f"candidate imbalance {n_pos}/{n_rows} = {ratio:.4f}"
    )
    _update_manifest(
        out_dir, cfg, "sessionize", STAGE_INPUTS["sessionize"], ("sessions", "session_report")
    )


def _model_specs(cfg):
    specs = []
    for name in cfg.evaluate.models:
        spec = {"kind": name}
        spec.update(cfg.models.get(name, {}))
        specs.append(spec)
    return specs


def stage_train(cfg, out_dir, log=print):
    _require_inputs("train", out_dir)
    out = Path(out_dir)
    topo, table, dataset, hub_of_fn = _load_sessions(cfg, out_dir)
    if not dataset.sessions:
        raise DependencyError("no sessions to train on")
    kind = cfg.train.model
    spec = {"kind": kind}
    spec.update(cfg.models.get(kind, {}))
    stats = N.fit_hub_stats(dataset, hub_of_fn)
    normed, _ = N.double_normalize(dataset, hub_of_fn, stats)
    X, y, _, _, manifest = M.flatten_sessions(normed)
    if kind == "business_rule":
        X_raw, _, _, _, manifest_raw = M.flatten_sessions(dataset)
        model = E.model_from_spec(spec, X_raw, y, manifest_raw)
    else:
        model = E.model_from_spec(spec, X, y, manifest)
    M.save_model(model, out / ARTIFACTS["model"])
    N.save_hub_stats(stats, out / ARTIFACTS["norm_stats"])
    log(f"train: {kind} on {len(dataset.sessions)} sessions, {X.shape[1]} columns")
    _update_manifest(out_dir, cfg, "train", STAGE_INPUTS["train"], ("model", "norm_stats"))


def stage_evaluate(cfg, out_dir, log=print):
    _require_inputs("evaluate", out_dir)
    out = Path(out_dir)
    topo, table, dataset, hub_of_fn = _load_sessions(cfg, out_dir)
    report = E.cross_validate(
        dataset,
        hub_of_fn,
        _model_specs(cfg),
        n_folds=cfg.evaluate.folds,
        seed=cfg.run.seed,
        ks=tuple(cfg.evaluate.ks),
        threshold=cfg.evaluate.threshold,
    )
    E.write_report(
        report,
        out / ARTIFACTS["report_csv"],
        out / ARTIFACTS["report_json"],
        out / ARTIFACTS["report_folds"],
    )
    log(E.format_report(report))
    _update_manifest(
        out_dir, cfg, "evaluate", STAGE_INPUTS["evaluate"],
        ("report_csv", "report_json", "report_folds"),
    )


def stage_forecast(cfg, out_dir, log=print):
    _require_inputs("forecast", out_dir)
    out = Path(out_dir)
    topo = load_topology(out / ARTIFACTS["topology"])
    frame = T.telemetry_from_csv(out / ARTIFACTS["telemetry"])
    series = F.aggregate_to_fibernode(frame, topo)
    fc = cfg.forecast
    fcfg = F.ForecastConfig(
        window=fc.window,
        hop=fc.hop,
        horizons=tuple(fc.horizons),
        cutoffs=tuple(fc.cutoffs),
        target_column=fc.target_column,
        min_availability=fc.min_availability,
        split=fc.split,
        train_fraction=fc.train_fraction,
        seed=cfg.run.seed,
        models=tuple(fc.models),
    )
    frame_out = F.evaluate_forecast(series, fcfg)
    F.write_forecast_report(frame_out, out / ARTIFACTS["forecast_report"])
    kept, excluded = F.availability_filter(series, fc.min_availability)
    log(
        f"forecast: {len(kept)} fiber-nodes in, {len(excluded)} excluded, "
        f"{len(frame_out)} report rows"
    )
    _update_manifest(
        out_dir, cfg, "forecast", STAGE_INPUTS["forecast"], ("forecast_report",)
    )


def stage_report(cfg, out_dir, log=print):
    _require_inputs("report", out_dir)
    out = Path(out_dir)
    doc = json.loads((out / ARTIFACTS["report_json"]).read_text())
    rows = doc.get("rows", [])
    if not rows:
        log("no evaluation rows")
        return
    header = f"{'k':>2} {'model':<14} {'p@k':>7} {'fp@k':>7} {'tp@k':>7} {'p.step1':>8} {'r.step1':>8}"
    log(header)
    log("-" * len(header))

    def fmt(v, spec):
        return format(v, spec) if isinstance(v, (int, float)) and v is not None else "   -"

    for r in rows:
        log(
            f"{r['k']:>2} {r['model']:<14} "
            f"{fmt(r['precision_at_k_mean'], '7.3f')} {fmt(r['false_positives_at_k_mean'], '7.1f')} "
            f"{fmt(r['true_positives_at_k_mean'], '7.1f')} "
            f"{fmt(r['precision_step1_mean'], '8.3f')} {fmt(r['recall_step1_mean'], '8.3f')}"
        )


STAGE_FUNCS = {
    "simulate": stage_simulate,
    "featurize": stage_featurize,
    "sessionize": stage_sessionize,
    "train": stage_train,
    "evaluate": stage_evaluate,
    "forecast": stage_forecast,
    "report": stage_report,
}


def run_pipeline(cfg, stages, out_dir=None, log=print):
    out = out_dir or cfg.run.out_dir
    for stage in stages:
        if stage not in STAGE_FUNCS:
            raise ValueError(f"unknown stage {stage!r}")
        STAGE_FUNCS[stage](cfg, out, log=log)
