"""Seeded synthetic plant generator with ground-truth fault labels.

Produces a topology, hourly modem telemetry, ingress faults with a known
root-cause amplifier, and the operational exhaust around them (device alarms,
maintenance tickets). Every draw comes from a named substream of one root
seed, so the same config reproduces the same plant byte for byte, and the
fault set does not move when unrelated knobs (e.g. ticket noise) change.

A fault plays out in two phases at an amplifier chosen per fiber-node:

* precursor: the root-cause amplifier's modems transmit hotter (upstream tx
  shifted by tx_spike_db) for `lead` hours before the incident;
* incident: every modem in the fiber-node sees depressed upstream SNR and
  inflated CER/CCER for `duration` hours, scaled by `severity`.

Tickets cite the repaired amplifier by one of its aliases, mangled the way
field staff type them (case changes, dash/space/underscore swaps, unpadded
numbers). With probability `ticket_noise` the citation is dropped entirely
and the ticket is unresolvable by parsing.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .seeding import substream
from .topology import NetworkTopology, build_topology
from .telemetry import DIRECTIONS, METRICS, METRIC_CSV_COLUMNS, HOUR

# Baseline (mean, sigma) per direction and metric. CER/CCER are error ratios
# clamped to [0, 1]; after clamping a sizeable share of samples sit at exactly
# zero, which downstream change-ratio features must tolerate.
BASELINES = {
    "us": {
        "snr": (34.0, 1.5),
        "tx": (43.0, 2.0),
        "rx": (2.0, 1.5),
        "cer": (8e-4, 1.5e-3),
        "ccer": (4e-3, 4e-3),
    },
    "ds": {
        "snr": (38.0, 1.2),
        "tx": (30.0, 1.5),
        "rx": (-2.0, 1.5),
        "cer": (5e-4, 1e-3),
        "ccer": (3e-3, 3e-3),
        "mrefl": (-30.0, 2.5),
    },
}
RATIO_METRICS = ("cer", "ccer")

# Incident-phase effect sizes per unit severity.
SNR_DEPRESSION_DB = 8.0
CER_INFLATION = 0.03
CCER_INFLATION = 0.06

@dataclass(frozen=True)
class PlantConfig:
    seed: int = 0
    n_hubs: int = 2
    fibernodes_per_hub: int = 3
    amps_per_fibernode: int = 4
    modems_per_amp: int = 2
    channels_per_modem: int = 1
    hours: int = 400
    start_time: str = "2021-03-01T00:00:00Z"
    drop_fraction: float = 0.02
    hub_shift_sigmas: float = 2.0
    noise_scale_range: tuple[float, float] = (0.7, 1.3)
    fault_rate: float = 2.0
    tx_spike_db: float = 6.0
    precursor_lead_range: tuple[int, int] = (6, 24)
    severity_range: tuple[float, float] = (0.5, 1.5)
    duration_range: tuple[int, int] = (4, 12)
    ticket_noise: float = 0.0
    ticket_jitter_hours: int = 4
    alarm_jitter_hours: int = 2
    distractor_alarm_rate: float = 0.3

    def validate(self):
        problems = []
        if self.n_hubs < 1 or self.fibernodes_per_hub < 1 or self.amps_per_fibernode < 1:
            problems.append("plant counts must be >= 1")
        if self.modems_per_amp < 1 or self.channels_per_modem < 1:
            problems.append("modems_per_amp and channels_per_modem must be >= 1")
        if max(self.n_hubs, self.fibernodes_per_hub, self.amps_per_fibernode, self.modems_per_amp) > 255:
            problems.append("per-level counts above 255 exhaust the MAC numbering scheme")
        if self.hours < 1:
            problems.append("hours must be >= 1")
        if not 0.0 <= self.drop_fraction < 1.0:
            problems.append("drop_fraction must be in [0, 1)")
        if not 0.0 <= self.ticket_noise <= 1.0:
            problems.append("ticket_noise must be in [0, 1]")
        if self.fault_rate < 0:
            problems.append("fault_rate must be >= 0")
        lo, hi = self.precursor_lead_range
        if not 1 <= lo <= hi <= 72:
            problems.append("precursor_lead_range must satisfy 1 <= lo <= hi <= 72")
        dlo, dhi = self.duration_range
        if not 1 <= dlo <= dhi:
            problems.append("duration_range must satisfy 1 <= lo <= hi")
        if problems:
            raise ValueError("bad plant config: " + "; ".join(problems))
        return self

    def start64(self):
        return np.datetime64(self.start_time.rstrip("Z"), "h")


@dataclass(frozen=True)
class FaultSpec:
    fiber_node: str
    root_cause: str          # a last-line amplifier in that fiber-node
    incident_start: np.datetime64
    duration: int            # hours of visible incident
    severity: float
    precursor_lead: int      # hours of tx spike before incident_start
    tx_spike_db: float

    def validate(self, topo):
        if self.fiber_node not in topo.fiber_nodes:
            raise ValueError(f"fault in unknown fiber-node {self.fiber_node!r}")
        if self.root_cause not in topo.last_line_amplifiers(self.fiber_node):
            raise ValueError(
                f"fault root cause {self.root_cause!r} is not a last-line amplifier of {self.fiber_node}"
            )
        if not 1 <= self.precursor_lead <= 72:
            raise ValueError("precursor_lead must be in [1, 72]")
        if self.duration < 1:
            raise ValueError("duration must be >= 1")
        return self


@dataclass
class Plant:
    config: PlantConfig
    topology: NetworkTopology
    telemetry: pd.DataFrame
    faults: list[FaultSpec]
    alarms: pd.DataFrame
    tickets: pd.DataFrame
    groundtruth: list[dict] = field(default_factory=list)


def _alias_variants(hub_i, fn_i, amp_i, style):
    """Field spellings for one amplifier; all normalize to distinct keys."""
    canonical = f"AMP-{hub_i:02d}-{fn_i:02d}-{amp_i:02d}"
    unpadded = f"A-{hub_i}-{fn_i}-{amp_i}"
    if style == 0:
        regional = f"VST {hub_i:02d}-{fn_i:02d}-{amp_i:02d}"
    elif style == 1:
        regional = f"amp_{hub_i}_{fn_i}_{amp_i}"
    else:
        regional = f"LE{hub_i:02d}.{fn_i:02d}.{amp_i:02d}"
    return (canonical, regional, unpadded)


def generate_topology(cfg):
    """Random amplifier forest with modems on every amplifier."""
    cfg.validate()
    rng = substream(cfg.seed, "topology")
    hubs = [f"HUB{h:02d}" for h in range(cfg.n_hubs)]
    fiber_nodes = []
    amplifiers = []
    modems = []
    for h, hub in enumerate(hubs):
        style = h % 3
        for f in range(cfg.fibernodes_per_hub):
            fn = f"FN{h:02d}{f:02d}"
            fiber_nodes.append({"id": fn, "hub": hub})
            amp_ids = []
            for a in range(cfg.amps_per_fibernode):
                amp_id = f"AMP{h:02d}{f:02d}{a:02d}"
                parent_pool = [fn] + amp_ids
                parent = parent_pool[int(rng.integers(len(parent_pool)))]
                amplifiers.append(
                    {
                        "id": amp_id,
                        "parent": parent,
                        "fiber_node": fn,
                        "aliases": list(_alias_variants(h, f, a, style)),
                        "lat": round(47.0 + 0.01 * h + 1e-4 * float(rng.integers(1000)), 6),
                        "lon": round(8.0 + 0.01 * f + 1e-4 * float(rng.integers(1000)), 6),
                    }
                )
                amp_ids.append(amp_id)
                for m in range(cfg.modems_per_amp):
                    mac = f"02:00:{h:02X}:{f:02X}:{a:02X}:{m:02X}"
                    modems.append({"mac": mac, "amplifier": amp_id})
    return build_topology(
        {"hubs": hubs, "fiber_nodes": fiber_nodes, "amplifiers": amplifiers, "modems": modems}
    )


def draw_hub_params(topo, cfg):
    """Per-hub baseline shifts and noise scales, one substream per hub."""
    params = {}
    for hub in topo.hubs:
        rng = substream(cfg.seed, "hub-params", hub)
        per_metric = {}
        for d in DIRECTIONS:
            for metric in METRICS[d]:
                base_mean, base_sigma = BASELINES[d][metric]
                shift = float(rng.uniform(-1.0, 1.0)) * cfg.hub_shift_sigmas * base_sigma
                sigma = base_sigma * float(rng.uniform(*cfg.noise_scale_range))
                per_metric[(d, metric)] = (base_mean + shift, sigma)
        params[hub] = per_metric
    return params


def _fibernode_frame(topo, cfg, fn, hub_params):
    """Baseline samples for one fiber-node, faults not yet applied."""
    rng = substream(cfg.seed, "telemetry", fn)
    hub = topo.fiber_nodes[fn]
    start = cfg.start64()
    amps = topo.last_line_amplifiers(fn)
    macs = [m for a in amps for m in topo.modems_by_amplifier[a]]
    channels = [str(c) for c in range(cfg.channels_per_modem)]
    n_mc = len(macs) * len(channels)
    T = cfg.hours

    mac_col = np.repeat(np.asarray(macs, dtype=object), len(channels) * T * 2)
    chan_col = np.tile(np.repeat(np.asarray(channels, dtype=object), T * 2), len(macs))
    ts_block = np.repeat(start + np.arange(T) * HOUR, 2)
    ts_col = np.tile(ts_block, n_mc)
    dir_col = np.tile(np.asarray(["us", "ds"], dtype=object), n_mc * T)

    frame = pd.DataFrame({"ts": ts_col, "mac": mac_col, "channel": chan_col, "direction": dir_col})
    dir_is_ds = frame["direction"].to_numpy() == "ds"
    n_rows = len(frame)
    for metric, csv_col in METRIC_CSV_COLUMNS.items():
        col = np.full(n_rows, np.nan)
        for d, sel in (("us", ~dir_is_ds), ("ds", dir_is_ds)):
            if metric not in METRICS[d]:
                continue
            mean, sigma = hub_params[hub][(d, metric)]
            draws = mean + sigma * rng.standard_normal(int(sel.sum()))
            if metric in RATIO_METRICS:
                draws = np.clip(draws, 0.0, 1.0)
            col[sel] = draws
        frame[csv_col] = col

    keep = rng.random(n_rows) >= cfg.drop_fraction
    return frame.loc[keep].reset_index(drop=True)


def inject_cpd_fault(frame, topo, fault):
    """Apply one fault's precursor and incident phases to a sample frame.

    Mutates only rows inside the fault's fiber-node and time range; everything
    else is untouched. Returns (frame, ground-truth record).
    """
    fault.validate(topo)
    root_macs = set(topo.modems_by_amplifier[fault.root_cause])
    fn_macs = {
        m
        for a in topo.last_line_amplifiers(fault.fiber_node)
        for m in topo.modems_by_amplifier[a]
    }
    ts = frame["ts"].to_numpy()
    mac = frame["mac"].to_numpy()
    is_us = frame["direction"].to_numpy() == "us"
    start = np.datetime64(fault.incident_start, "h")
    pre_start = start - fault.precursor_lead * HOUR
    end = start + fault.duration * HOUR

    pre_rows = (
        np.isin(mac, list(root_macs)) & is_us & (ts >= pre_start) & (ts < start)
    )
    frame.loc[pre_rows, "tx_dbmv"] += fault.tx_spike_db

    inc_rows = np.isin(mac, list(fn_macs)) & is_us & (ts >= start) & (ts < end)
    frame.loc[inc_rows, "snr_db"] -= fault.severity * SNR_DEPRESSION_DB
    frame.loc[inc_rows, "cer"] = np.clip(
        frame.loc[inc_rows, "cer"] + fault.severity * CER_INFLATION, 0.0, 1.0
    )
    frame.loc[inc_rows, "ccer"] = np.clip(
        frame.loc[inc_rows, "ccer"] + fault.severity * CCER_INFLATION, 0.0, 1.0
    )

    record = {
        "fiber_node": fault.fiber_node,
        "root_cause": fault.root_cause,
        "incident_start": str(np.datetime64(fault.incident_start, "s")) + "Z",
        "duration": int(fault.duration),
        "severity": float(fault.severity),
        "precursor_lead": int(fault.precursor_lead),
        "tx_spike_db": float(fault.tx_spike_db),
        "modems_affected": len(fn_macs),
    }
    return frame, record


# Faults are placed in evenly sized slots so consecutive incidents in one
# fiber-node stay far enough apart that their 72h lookback windows and alarm
# jitter never overlap or merge.
_SLOT_MIN_HOURS = 90
_FIRST_FAULT_HOUR = 80


def draw_faults(topo, cfg):
    """Fault specs per fiber-node; count is floor(rate) + Bernoulli(frac)."""
    cfg.validate()
    start = cfg.start64()
    d_lo, d_hi = cfg.duration_range
    usable = cfg.hours - _FIRST_FAULT_HOUR - d_hi - cfg.ticket_jitter_hours - 2
    faults = []
    for fn in sorted(topo.fiber_nodes):
        rng = substream(cfg.seed, "faults", fn)
        whole = int(np.floor(cfg.fault_rate))
        frac = cfg.fault_rate - whole
        n = whole + (1 if rng.random() < frac else 0)
        if n == 0:
            continue
        slot = usable / n
        if slot < _SLOT_MIN_HOURS:
            raise ValueError(
                f"hours={cfg.hours} is too short for fault_rate={cfg.fault_rate}: "
                f"need at least {_SLOT_MIN_HOURS}h per fault after the first {_FIRST_FAULT_HOUR}h"
            )
        amps = topo.last_line_amplifiers(fn)
        jitter_max = max(1.0, slot - _SLOT_MIN_HOURS)
        for j in range(n):
            offset = _FIRST_FAULT_HOUR + j * slot + float(rng.uniform(0.0, jitter_max))
            hour = int(min(offset, cfg.hours - d_hi - 2))
            faults.append(
                FaultSpec(
                    fiber_node=fn,
                    root_cause=amps[int(rng.integers(len(amps)))],
                    incident_start=start + hour * HOUR,
                    duration=int(rng.integers(d_lo, d_hi + 1)),
                    severity=float(rng.uniform(*cfg.severity_range)),
                    precursor_lead=int(
                        rng.integers(cfg.precursor_lead_range[0], cfg.precursor_lead_range[1] + 1)
                    ),
                    tx_spike_db=cfg.tx_spike_db,
                )
            )
    faults.sort(key=lambda f: (str(f.incident_start), f.fiber_node))
    return faults


_MANGLE_CASES = ("upper", "lower", "title", "asis")
_MANGLE_SEPS = ("-", " ", "_", ".")
_NOTE_TEMPLATES = (
    "Techniker vor Ort, Verstaerker {alias} getauscht, Stecker korrodiert.",
    "Ingress lokalisiert: {alias}. Rueckwegdaempfung nachgeregelt.",
    "CPD an {alias} behoben; Anschluss neu verschraubt.",
    "Stoerung beseitigt, Modul {alias} ersetzt.",
)
_NOISE_NOTES = (
    "Stoerung nicht reproduzierbar, Messung ohne Befund.",
    "Segment geprueft, Ursache unklar, Ticket geschlossen.",
    "Kein Zugang zum Verteiler, keine Reparatur dokumentiert.",
)


def _mangle_alias(alias, rng):
    case = _MANGLE_CASES[int(rng.integers(len(_MANGLE_CASES)))]
    sep = _MANGLE_SEPS[int(rng.integers(len(_MANGLE_SEPS)))]
    out = alias
    if case == "upper":
        out = out.upper()
    elif case == "lower":
        out = out.lower()
    elif case == "title":
        out = out.title()
    for old in ("-", "_", " ", "."):
        if old != sep:
            out = out.replace(old, sep)
    return out


def emit_alarms(faults, topo, cfg):
    """Device alarms: one jittered high-noise alarm per affected amplifier.

    For each fault a random non-empty subset of the fiber-node's last-line
    amplifiers raises an alarm; one anchor alarm keeps the exact incident
    start so the merged window begins when the damage does. Distractor alarms
    of other types are sprinkled across the plant and must be filtered out.
    """
    rows = []
    for i, fault in enumerate(faults):
        rng = substream(cfg.seed, "alarms", i)
        amps = topo.last_line_amplifiers(fault.fiber_node)
        k = int(rng.integers(1, len(amps) + 1))
        chosen = sorted(rng.choice(len(amps), size=k, replace=False).tolist())
        start = np.datetime64(fault.incident_start, "h")
        end = start + fault.duration * HOUR
        for pos, a_i in enumerate(chosen):
            if pos == 0:
                a_start = start
            else:
                a_start = start + int(rng.integers(0, cfg.alarm_jitter_hours + 1)) * HOUR
            a_end = end - int(rng.integers(0, cfg.alarm_jitter_hours + 1)) * HOUR
            if a_end <= a_start:
                a_end = a_start + HOUR
            rows.append((amps[a_i], "high_noise", a_start, a_end))

    rng = substream(cfg.seed, "alarm-noise")
    n_distract = int(len(topo.fiber_nodes) * cfg.hours / 100.0 * cfg.distractor_alarm_rate)
    all_amps = sorted(topo.amplifiers)
    start0 = cfg.start64()
    for _ in range(n_distract):
        amp = all_amps[int(rng.integers(len(all_amps)))]
        at = start0 + int(rng.integers(cfg.hours)) * HOUR
        kind = ("low_snr", "power_supply")[int(rng.integers(2))]
        rows.append((amp, kind, at, at + int(rng.integers(1, 5)) * HOUR))

    alarms = pd.DataFrame(rows, columns=["device_id", "alarm_type", "start_ts", "end_ts"])
    alarms["start_ts"] = pd.to_datetime(alarms["start_ts"])
    alarms["end_ts"] = pd.to_datetime(alarms["end_ts"])
    return alarms.sort_values(
        ["start_ts", "device_id", "alarm_type"], kind="stable"
    ).reset_index(drop=True)


def emit_tickets(faults, topo, cfg):
    """One maintenance ticket per fault, citing a mangled alias of the fix.

    With probability ticket_noise the citation is dropped: the ticket is
    still filed but carries no resolvable device reference.
    """
    rows = []
    truth = []
    for i, fault in enumerate(faults):
        rng = substream(cfg.seed, "tickets", i)
        ticket_id = f"T{i:05d}"
        start = np.datetime64(fault.incident_start, "h")
        created = start + int(rng.integers(-cfg.ticket_jitter_hours, cfg.ticket_jitter_hours + 1)) * HOUR
        closed = start + (fault.duration + int(rng.integers(2, 48))) * HOUR
        garbled = bool(rng.random() < cfg.ticket_noise)
        if garbled:
            notes = _NOISE_NOTES[int(rng.integers(len(_NOISE_NOTES)))]
            cited = ""
        else:
            aliases = topo.amplifiers[fault.root_cause].aliases
            alias = aliases[int(rng.integers(len(aliases)))]
            cited = _mangle_alias(alias, rng)
            notes = _NOTE_TEMPLATES[int(rng.integers(len(_NOTE_TEMPLATES)))].format(alias=cited)
        rows.append(
            (
                ticket_id,
                str(np.datetime64(created, "s")) + "Z",
                str(np.datetime64(closed, "s")) + "Z",
                "high_noise",
                notes,
                cited,
            )
        )
        truth.append({"ticket_id": ticket_id, "parseable": not garbled})
    tickets = pd.DataFrame(
        rows,
        columns=["ticket_id", "created_ts", "closed_ts", "category", "notes", "root_cause_text"],
    )
    return tickets, truth


def generate_plant(cfg):
    """Full seeded plant: topology, telemetry with faults, alarms, tickets."""
    cfg.validate()
    topo = generate_topology(cfg)
    hub_params = draw_hub_params(topo, cfg)
    faults = draw_faults(topo, cfg)
    by_fn = {}
    for fault in faults:
        by_fn.setdefault(fault.fiber_node, []).append(fault)

    frames = []
    records = {}
    for fn in sorted(topo.fiber_nodes):
        frame = _fibernode_frame(topo, cfg, fn, hub_params)
        for fault in by_fn.get(fn, []):
            frame, rec = inject_cpd_fault(frame, topo, fault)
            records[(fault.fiber_node, str(fault.incident_start))] = rec
        frames.append(frame)
    telemetry = pd.concat(frames, ignore_index=True)
    telemetry = telemetry.sort_values(
        ["ts", "mac", "channel", "direction"], kind="stable"
    ).reset_index(drop=True)

    alarms = emit_alarms(faults, topo, cfg)
    tickets, ticket_truth = emit_tickets(faults, topo, cfg)
    groundtruth = []
    for i, fault in enumerate(faults):
        rec = dict(records[(fault.fiber_node, str(fault.incident_start))])
        rec.update(ticket_truth[i])
        groundtruth.append(rec)
    return Plant(
        config=cfg,
        topology=topo,
        telemetry=telemetry,
        faults=faults,
        alarms=alarms,
        tickets=tickets,
        groundtruth=groundtruth,
    )
