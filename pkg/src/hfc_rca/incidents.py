"""Incident sessionization: alarms -> fiber-node windows -> labeled sessions.

High-noise device alarms are lifted to their fiber-node and merged into
incident windows. Maintenance tickets are parsed for amplifier aliases and
joined to the nearest window of the same fiber-node within a tolerance.
Each matched pair becomes a session: the fiber-node's last-line amplifiers
as candidates, the cited amplifiers as labels, and 72 hours of features per
candidate ending right where the incident starts.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np
import pandas as pd

from .topology import normalize_alias
from .telemetry import HOUR

SESSION_HOURS = 72
HIGH_NOISE = "high_noise"


class SessionError(Exception):
    """Inconsistent alarm/ticket/feature inputs."""


@dataclass(frozen=True)
class IncidentWindow:
    fiber_node: str
    start: np.datetime64
    end: np.datetime64


@dataclass
class IncidentSession:
    incident_id: str
    fiber_node: str
    start: np.datetime64
    end: np.datetime64
    ticket_id: str
    candidates: tuple[str, ...]
    labels: tuple[str, ...]
    features: np.ndarray | None = None  # (n_candidates, 72, n_columns)
    degenerate: bool = False

    def copy_with(self, **kw):
        return replace(self, **kw)


@dataclass
class SessionDataset:
    """Sessions plus the feature-column names their tensors are built from."""

    sessions: list[IncidentSession]
    columns: tuple[str, ...]
    norm_state: str = "raw"  # raw -> hub -> hub+incident -> final


def _naive_seconds(values):
    """Parse timestamps to tz-naive UTC numpy datetime64[s]."""
    if np.isscalar(values) or isinstance(values, (str, pd.Timestamp)):
        ts = pd.to_datetime(values, utc=True).tz_localize(None)
        return np.datetime64(ts.to_datetime64(), "s")
    idx = pd.DatetimeIndex(pd.to_datetime(values, utc=True)).tz_localize(None)
    return idx.to_numpy().astype("datetime64[s]")


def filter_high_noise(alarms):
    """Keep only high-noise alarms; other alarm types are not ingress."""
    return alarms.loc[alarms["alarm_type"] == HIGH_NOISE].reset_index(drop=True)


def merge_alarms_to_fibernode(alarms, topo, merge_gap_hours=2):
    """Overlapping or near-by alarms of one fiber-node become one window.

    Alarms are lifted from device to fiber-node; windows closer than
    merge_gap_hours are merged. Unknown devices are an input error.
    """
    if merge_gap_hours < 0:
        raise ValueError("merge_gap_hours must be >= 0")
    windows = []
    if len(alarms) == 0:
        return windows
    fn_col = []
    for dev in alarms["device_id"]:
        try:
            fn_col.append(topo.fiber_node_of(dev))
        except KeyError as exc:
            raise SessionError(f"alarm references unknown device {dev!r}") from exc
    starts = _naive_seconds(alarms["start_ts"])
    ends = _naive_seconds(alarms["end_ts"])
    if (ends < starts).any():
        bad = int(np.flatnonzero(ends < starts)[0])
        raise SessionError(f"alarm row {bad} ends before it starts")
    gap = np.timedelta64(int(merge_gap_hours * 3600), "s")
    by_fn = {}
    for fn, s, e in zip(fn_col, starts, ends):
        by_fn.setdefault(fn, []).append((s, e))
    for fn in sorted(by_fn):
        spans = sorted(by_fn[fn], key=lambda se: (se[0].astype(int), se[1].astype(int)))
        cur_s, cur_e = spans[0]
        for s, e in spans[1:]:
            if s - cur_e <= gap:
                cur_e = max(cur_e, e)
            else:
                windows.append(IncidentWindow(fn, cur_s, cur_e))
                cur_s, cur_e = s, e
        windows.append(IncidentWindow(fn, cur_s, cur_e))
    windows.sort(key=lambda w: (str(w.start), w.fiber_node))
    return windows


def build_alias_index(topo):
    """Map from normalized-alias token tuples to amplifier ids."""
    index = {}
    for norm, amp in topo.alias_map.items():
        index[tuple(norm.split("-"))] = amp
    return index


def parse_root_cause(text, alias_index):
    """Amplifiers cited in free text, by normalized-alias token matching.

    Returns the distinct amplifier ids in first-appearance order; an empty
    tuple means the text resolves to nothing (unparseable).
    """
    if not text:
        return ()
    tokens = normalize_alias(text).split("-")
    lengths = sorted({len(k) for k in alias_index})
    found = []
    for i in range(len(tokens)):
        for L in lengths:
            if i + L > len(tokens):
                break
            amp = alias_index.get(tuple(tokens[i : i + L]))
            if amp is not None and amp not in found:
                found.append(amp)
    return tuple(found)


def parse_ticket(ticket_row, alias_index):
    """Parse one ticket's root_cause_text, falling back to its notes."""
    cited = parse_root_cause(str(ticket_row.get("root_cause_text") or ""), alias_index)
    if not cited:
        cited = parse_root_cause(str(ticket_row.get("notes") or ""), alias_index)
    return cited


@dataclass
class JoinResult:
    matches: list  # (IncidentWindow, ticket_id, parsed amplifier ids)
    unmatched_tickets: list  # (ticket_id, reason)
    unmatched_windows: list  # IncidentWindow

    def report_frame(self):
        rows = [
            {"kind": "ticket", "id": t, "reason": r, "fiber_node": "", "start": "", "end": ""}
            for t, r in self.unmatched_tickets
        ]
        rows.extend(
            {
                "kind": "window",
                "id": "",
                "reason": "no_ticket",
                "fiber_node": w.fiber_node,
                "start": str(np.datetime64(w.start, "s")) + "Z",
                "end": str(np.datetime64(w.end, "s")) + "Z",
            }
            for w in self.unmatched_windows
        )
        return pd.DataFrame(rows, columns=["kind", "id", "reason", "fiber_node", "start", "end"])


def temporal_join(windows, tickets, topo, tolerance_hours=24):
    """Attach each parseable ticket to the nearest incident window.

    A ticket is eligible for windows of the fiber-node its cited amplifiers
    belong to, when its creation time falls within [start - tol, end + tol].
    Nearest |window.start - created| wins; ties go to the earlier window.
    Tickets whose citations span several fiber-nodes are ambiguous and
    reported, not guessed at.
    """
    alias_index = build_alias_index(topo)
    by_fn = {}
    for w in windows:
        by_fn.setdefault(w.fiber_node, []).append(w)
    tol = np.timedelta64(int(tolerance_hours * 3600), "s")

    matches = []
    unmatched_tickets = []
    matched_windows = set()
    for _, row in tickets.iterrows():
        tid = row["ticket_id"]
        cited = parse_ticket(row, alias_index)
        if not cited:
            unmatched_tickets.append((tid, "unparseable"))
            continue
        fns = {topo.amplifiers[a].fiber_node for a in cited}
        if len(fns) > 1:
            unmatched_tickets.append((tid, "ambiguous_fiber_nodes"))
            continue
        fn = next(iter(fns))
        created = _naive_seconds(row["created_ts"])
        best = None
        for w in by_fn.get(fn, ()):
            if not (w.start - tol <= created <= w.end + tol):
                continue
            dist = abs((w.start - created).astype("timedelta64[s]").astype(np.int64))
            key = (dist, w.start.astype("datetime64[s]").astype(np.int64))
            if best is None or key < best[0]:
                best = (key, w)
        if best is None:
            unmatched_tickets.append((tid, "no_window"))
            continue
        matches.append((best[1], tid, cited))
        matched_windows.add((best[1].fiber_node, str(best[1].start)))

    unmatched_windows = [
        w for w in windows if (w.fiber_node, str(w.start)) not in matched_windows
    ]
    return JoinResult(matches, unmatched_tickets, unmatched_windows)


def _incident_id(fn, start, ticket_id):
    stamp = pd.Timestamp(start).strftime("%Y%m%d%H")
    return f"{fn}-{stamp}-{ticket_id}"


def build_sessions(join_result, features, topo):
    """Labeled sessions with a (candidates, 72h, columns) feature tensor each.

    The tensor covers [window.start - 72h, window.start): strictly before the
    incident becomes visible, so only precursor behaviour separates the
    candidates. Matches whose lookback is not fully on the feature grid, or
    whose citations are not last-line candidates, are skipped with a reason.
    """
    sessions = []
    skipped = []
    for window, ticket_id, cited in join_result.matches:
        fn = window.fiber_node
        candidates = topo.last_line_amplifiers(fn)
        if not candidates:
            skipped.append((ticket_id, "no_candidates"))
            continue
        labels = tuple(sorted(set(cited) & set(candidates)))
        if not labels:
            skipped.append((ticket_id, "cited_amplifier_not_last_line"))
            continue
        start_s = np.datetime64(window.start, "s")
        grid_start = np.datetime64(features.start, "s")
        offset = (start_s - grid_start) / np.timedelta64(1, "h")
        end_hour = int(np.ceil(offset))
        if end_hour - SESSION_HOURS < 0 or end_hour > features.hours:
            skipped.append((ticket_id, "insufficient_coverage"))
            continue
        try:
            tensor = features.tensor(candidates, end_hour - SESSION_HOURS, SESSION_HOURS)
        except KeyError:
            skipped.append((ticket_id, "candidate_missing_from_features"))
            continue
        sessions.append(
            IncidentSession(
                incident_id=_incident_id(fn, window.start, ticket_id),
                fiber_node=fn,
                start=np.datetime64(window.start, "s"),
                end=np.datetime64(window.end, "s"),
                ticket_id=ticket_id,
                candidates=candidates,
                labels=labels,
                features=tensor,
            )
        )
    sessions.sort(key=lambda s: s.incident_id)
    return sessions, skipped


def sessionize(alarms, tickets, features, topo, merge_gap_hours=2, tolerance_hours=24):
    """Alarms + tickets + features -> SessionDataset plus join/skip reports."""
    windows = merge_alarms_to_fibernode(filter_high_noise(alarms), topo, merge_gap_hours)
    join = temporal_join(windows, tickets, topo, tolerance_hours)
    sessions, skipped = build_sessions(join, features, topo)
    return SessionDataset(sessions, features.columns), join, skipped


def imbalance_summary(sessions):
    """(positive rows, candidate rows, ratio) across sessions."""
    n_pos = sum(len(s.labels) for s in sessions)
    n_rows = sum(len(s.candidates) for s in sessions)
    return n_pos, n_rows, (n_pos / n_rows if n_rows else float("nan"))


def _iso(ts):
    return str(np.datetime64(ts, "s")) + "Z"


def write_sessions_jsonl(sessions, path):
    """Session metadata as JSON lines; tensors are rebuilt from features."""
    with open(path, "w") as fh:
        for s in sessions:
            fh.write(
                json.dumps(
                    {
                        "incident_id": s.incident_id,
                        "fiber_node": s.fiber_node,
                        "start": _iso(s.start),
                        "end": _iso(s.end),
                        "ticket_id": s.ticket_id,
                        "candidates": list(s.candidates),
                        "labels": list(s.labels),
                    },
                    sort_keys=True,
                )
                + "\n"
            )


def read_sessions_jsonl(path, features=None):
    """Load sessions; attach tensors when a feature table is given."""
    sessions = []
    with open(path) as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SessionError(f"{path}:{line_no}: not valid JSON: {exc}") from exc
            s = IncidentSession(
                incident_id=rec["incident_id"],
                fiber_node=rec["fiber_node"],
                start=np.datetime64(rec["start"].rstrip("Z"), "s"),
                end=np.datetime64(rec["end"].rstrip("Z"), "s"),
                ticket_id=rec["ticket_id"],
                candidates=tuple(rec["candidates"]),
                labels=tuple(rec["labels"]),
            )
            if features is not None:
                offset = (s.start - np.datetime64(features.start, "s")) / np.timedelta64(1, "h")
                end_hour = int(np.ceil(offset))
                s.features = features.tensor(s.candidates, end_hour - SESSION_HOURS, SESSION_HOURS)
            sessions.append(s)
    sessions.sort(key=lambda s: s.incident_id)
    return sessions
