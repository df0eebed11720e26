import dataclasses

import numpy as np
import pandas as pd
import pytest

from conftest import SMALL_PLANT_CFG
from hfc_rca.simulator import (
    CCER_INFLATION,
    CER_INFLATION,
    FaultSpec,
    PlantConfig,
    SNR_DEPRESSION_DB,
    draw_faults,
    emit_alarms,
    emit_tickets,
    generate_plant,
    generate_topology,
    inject_cpd_fault,
)
from hfc_rca.telemetry import HOUR, METRIC_CSV_COLUMNS


def test_config_validation_rejects_bad_values():
    with pytest.raises(ValueError, match="counts must be >= 1"):
        PlantConfig(n_hubs=0).validate()
    with pytest.raises(ValueError, match="drop_fraction"):
        PlantConfig(drop_fraction=1.0).validate()
    with pytest.raises(ValueError, match="ticket_noise"):
        PlantConfig(ticket_noise=1.5).validate()
    with pytest.raises(ValueError, match="fault_rate"):
        PlantConfig(fault_rate=-1.0).validate()
    with pytest.raises(ValueError, match="precursor_lead_range"):
        PlantConfig(precursor_lead_range=(0, 24)).validate()
    with pytest.raises(ValueError, match="MAC numbering"):
        PlantConfig(modems_per_amp=300).validate()


def test_generate_topology_structure():
    topo = generate_topology(SMALL_PLANT_CFG)
    assert len(topo.hubs) == SMALL_PLANT_CFG.n_hubs
    assert len(topo.fiber_nodes) == SMALL_PLANT_CFG.n_hubs * SMALL_PLANT_CFG.fibernodes_per_hub
    n_amps = len(topo.fiber_nodes) * SMALL_PLANT_CFG.amps_per_fibernode
    assert len(topo.amplifiers) == n_amps
    assert len(topo.modems) == n_amps * SMALL_PLANT_CFG.modems_per_amp
    # Every amplifier carries modems, so every amplifier is last-line.
    for fn in topo.fiber_nodes:
        assert set(topo.last_line_amplifiers(fn)) == {
            a for a, rec in topo.amplifiers.items() if rec.fiber_node == fn
        }
    # MACs are unique and follow the 02:00:... scheme.
    assert len(set(topo.modems)) == len(topo.modems)
    assert all(m.startswith("02:00:") for m in topo.modems)


def test_generate_topology_deterministic():
    a = generate_topology(SMALL_PLANT_CFG)
    b = generate_topology(SMALL_PLANT_CFG)
    assert sorted(a.amplifiers) == sorted(b.amplifiers)
    for amp in a.amplifiers:
        assert a.amplifiers[amp] == b.amplifiers[amp]
    assert a.modems == b.modems


def test_generate_plant_deterministic(small_plant):
    again = generate_plant(SMALL_PLANT_CFG)
    pd.testing.assert_frame_equal(small_plant.telemetry, again.telemetry)
    pd.testing.assert_frame_equal(small_plant.alarms, again.alarms)
    pd.testing.assert_frame_equal(small_plant.tickets, again.tickets)
    assert small_plant.faults == again.faults
    assert small_plant.groundtruth == again.groundtruth


def test_different_seed_changes_telemetry(small_plant):
    other = generate_plant(dataclasses.replace(SMALL_PLANT_CFG, seed=8))
    assert not small_plant.telemetry["snr_db"].equals(other.telemetry["snr_db"])


def test_fault_set_ignores_ticket_and_alarm_knobs(small_plant):
    noisy_cfg = dataclasses.replace(
        SMALL_PLANT_CFG, ticket_noise=0.7, distractor_alarm_rate=0.0
    )
    noisy = generate_plant(noisy_cfg)
    assert noisy.faults == small_plant.faults
    pd.testing.assert_frame_equal(noisy.telemetry, small_plant.telemetry)


def test_draw_faults_counts_and_spacing():
    cfg = dataclasses.replace(SMALL_PLANT_CFG, hours=600, fault_rate=3.0)
    topo = generate_topology(cfg)
    faults = draw_faults(topo, cfg)
    per_fn = {}
    for f in faults:
        f.validate(topo)
        per_fn.setdefault(f.fiber_node, []).append(f)
    assert set(per_fn) == set(topo.fiber_nodes)
    d_hi = cfg.duration_range[1]
    for fn, group in per_fn.items():
        assert len(group) == 3
        starts = sorted(int((f.incident_start - cfg.start64()) / HOUR) for f in group)
        assert starts[0] >= 80
        assert starts[-1] + d_hi + 2 <= cfg.hours
        for a, b in zip(starts, starts[1:]):
            # Wide enough that the next incident's lookback starts after the
            # previous incident (and its alarms) have fully ended.
            assert b - a >= 86


def test_draw_faults_fractional_rate():
    cfg = dataclasses.replace(SMALL_PLANT_CFG, hours=600, fault_rate=1.5)
    topo = generate_topology(cfg)
    counts = {}
    for f in draw_faults(topo, cfg):
        counts[f.fiber_node] = counts.get(f.fiber_node, 0) + 1
    assert set(counts.values()) <= {1, 2}


def test_draw_faults_rejects_overcrowded_plant():
    cfg = dataclasses.replace(SMALL_PLANT_CFG, hours=200, fault_rate=2.0)
    topo = generate_topology(cfg)
    with pytest.raises(ValueError, match="too short"):
        draw_faults(topo, cfg)


def test_fault_spec_validation(toy_topology):
    start = np.datetime64("2021-03-01T00", "h")
    ok = FaultSpec("FN1", "A2", start, 4, 1.0, 6, 6.0)
    assert ok.validate(toy_topology) is ok
    with pytest.raises(ValueError, match="unknown fiber-node"):
        FaultSpec("FN9", "A2", start, 4, 1.0, 6, 6.0).validate(toy_topology)
    with pytest.raises(ValueError, match="not a last-line"):
        FaultSpec("FN1", "A1", start, 4, 1.0, 6, 6.0).validate(toy_topology)
    with pytest.raises(ValueError, match="precursor_lead"):
        FaultSpec("FN1", "A2", start, 4, 1.0, 0, 6.0).validate(toy_topology)
    with pytest.raises(ValueError, match="duration"):
        FaultSpec("FN1", "A2", start, 0, 1.0, 6, 6.0).validate(toy_topology)


def test_fault_injection_touches_only_its_footprint(small_plant):
    """Diff a faulted plant against the fault-free twin row by row."""
    base_cfg = dataclasses.replace(SMALL_PLANT_CFG, fault_rate=0.0)
    base = generate_plant(base_cfg).telemetry
    faulty = small_plant.telemetry
    topo = small_plant.topology

    for col in ("ts", "mac", "channel", "direction"):
        assert faulty[col].equals(base[col])

    ts = faulty["ts"].to_numpy()
    mac = faulty["mac"].to_numpy()
    is_us = faulty["direction"].to_numpy() == "us"
    pre = np.zeros(len(faulty), dtype=bool)
    inc = np.zeros(len(faulty), dtype=bool)
    sev = np.zeros(len(faulty))
    for f in small_plant.faults:
        root_macs = list(topo.modems_by_amplifier[f.root_cause])
        fn_macs = [
            m
            for a in topo.last_line_amplifiers(f.fiber_node)
            for m in topo.modems_by_amplifier[a]
        ]
        start = np.datetime64(f.incident_start, "h")
        p = np.isin(mac, root_macs) & is_us & (ts >= start - f.precursor_lead * HOUR) & (ts < start)
        i = np.isin(mac, fn_macs) & is_us & (ts >= start) & (ts < start + f.duration * HOUR)
        pre |= p
        inc |= i
        sev[i] = f.severity

    assert pre.any() and inc.any()
    assert not (pre & inc).any()

    tx_b = base["tx_dbmv"].to_numpy()
    tx_f = faulty["tx_dbmv"].to_numpy()
    assert np.array_equal(tx_f[~pre], tx_b[~pre], equal_nan=True)
    assert np.array_equal(tx_f[pre], tx_b[pre] + SMALL_PLANT_CFG.tx_spike_db)

    snr_b = base["snr_db"].to_numpy()
    snr_f = faulty["snr_db"].to_numpy()
    assert np.array_equal(snr_f[~inc], snr_b[~inc], equal_nan=True)
    assert np.array_equal(snr_f[inc], snr_b[inc] - sev[inc] * SNR_DEPRESSION_DB)

    for col, bump in (("cer", CER_INFLATION), ("ccer", CCER_INFLATION)):
        b = base[col].to_numpy()
        f_ = faulty[col].to_numpy()
        assert np.array_equal(f_[~inc], b[~inc], equal_nan=True)
        assert np.array_equal(f_[inc], np.clip(b[inc] + sev[inc] * bump, 0.0, 1.0))

    # Downstream metrics and rx are never part of the fault signature.
    for col in ("rx_dbmv", "mrefl_db"):
        assert np.array_equal(faulty[col].to_numpy(), base[col].to_numpy(), equal_nan=True)


def test_inject_rejects_invalid_fault(toy_topology):
    frame = pd.DataFrame(
        {
            "ts": [np.datetime64("2021-03-01T00", "h")],
            "mac": ["02:00:00:00:00:01"],
            "channel": ["0"],
            "direction": ["us"],
            **{c: [1.0] for c in METRIC_CSV_COLUMNS.values()},
        }
    )
    bad = FaultSpec("FN1", "A1", np.datetime64("2021-03-01T10", "h"), 4, 1.0, 6, 6.0)
    with pytest.raises(ValueError, match="not a last-line"):
        inject_cpd_fault(frame, toy_topology, bad)


def test_telemetry_frame_basics(small_plant):
    tel = small_plant.telemetry
    cfg = SMALL_PLANT_CFG
    start = cfg.start64()
    ts = tel["ts"].to_numpy().astype("datetime64[h]")
    assert ts.min() >= start
    assert ts.max() < start + cfg.hours * HOUR
    full = (
        len(small_plant.topology.modems) * cfg.channels_per_modem * cfg.hours * 2
    )
    assert len(tel) == pytest.approx(full * (1 - cfg.drop_fraction), rel=0.02)
    us = tel["direction"] == "us"
    assert tel.loc[us, "mrefl_db"].isna().all()
    assert tel.loc[~us, "mrefl_db"].notna().all()
    for col in ("cer", "ccer"):
        vals = tel[col].to_numpy()
        assert np.nanmin(vals) >= 0.0
        assert np.nanmax(vals) <= 1.0


def test_alarms_anchor_and_window(small_plant):
    cfg = dataclasses.replace(SMALL_PLANT_CFG, distractor_alarm_rate=0.0)
    plant = generate_plant(cfg)
    assert plant.faults == small_plant.faults
    alarms = plant.alarms
    assert (alarms["alarm_type"] == "high_noise").all()
    topo = plant.topology
    for f in plant.faults:
        start = pd.Timestamp(np.datetime64(f.incident_start, "s"))
        end = start + pd.Timedelta(hours=int(f.duration))
        amps = set(topo.last_line_amplifiers(f.fiber_node))
        mine = alarms[
            alarms["device_id"].isin(amps)
            & (alarms["start_ts"] >= start)
            & (alarms["start_ts"] <= start + pd.Timedelta(hours=cfg.alarm_jitter_hours))
        ]
        assert len(mine) >= 1
        # The anchor alarm opens exactly at the incident start.
        assert (mine["start_ts"] == start).any()
        assert (mine["end_ts"] > mine["start_ts"]).all()
        assert (mine["end_ts"] <= end).all() or (
            # A fully jittered-down end can be pushed back up to start+1h.
            (mine["end_ts"] <= end) | (mine["end_ts"] == mine["start_ts"] + pd.Timedelta(hours=1))
        ).all()


def test_distractor_alarms_have_other_types(small_plant):
    kinds = set(small_plant.alarms["alarm_type"])
    assert "high_noise" in kinds
    assert kinds <= {"high_noise", "low_snr", "power_supply"}
    n_distract = int(
        len(small_plant.topology.fiber_nodes)
        * SMALL_PLANT_CFG.hours
        / 100.0
        * SMALL_PLANT_CFG.distractor_alarm_rate
    )
    assert (small_plant.alarms["alarm_type"] != "high_noise").sum() == n_distract


def test_tickets_cite_parseable_aliases(small_plant):
    tickets = small_plant.tickets
    assert len(tickets) == len(small_plant.faults)
    assert list(tickets["ticket_id"]) == [f"T{i:05d}" for i in range(len(tickets))]
    for (_, t), f, g in zip(tickets.iterrows(), small_plant.faults, small_plant.groundtruth):
        assert g["parseable"] is True
        assert t["root_cause_text"] != ""
        assert t["root_cause_text"] in t["notes"]
        created = pd.Timestamp(t["created_ts"].rstrip("Z"))
        start = pd.Timestamp(str(np.datetime64(f.incident_start, "s")))
        delta_h = abs((created - start).total_seconds()) / 3600.0
        assert delta_h <= SMALL_PLANT_CFG.ticket_jitter_hours


def test_ticket_noise_drops_citations():
    cfg = dataclasses.replace(SMALL_PLANT_CFG, ticket_noise=1.0)
    plant = generate_plant(cfg)
    assert (plant.tickets["root_cause_text"] == "").all()
    assert all(g["parseable"] is False for g in plant.groundtruth)

    mid = generate_plant(dataclasses.replace(SMALL_PLANT_CFG, ticket_noise=0.5))
    for (_, t), g in zip(mid.tickets.iterrows(), mid.groundtruth):
        assert g["parseable"] == (t["root_cause_text"] != "")


def test_groundtruth_records_are_consistent(small_plant):
    topo = small_plant.topology
    assert len(small_plant.groundtruth) == len(small_plant.faults)
    for g, f in zip(small_plant.groundtruth, small_plant.faults):
        assert g["fiber_node"] == f.fiber_node
        assert g["root_cause"] == f.root_cause
        assert g["root_cause"] in topo.last_line_amplifiers(g["fiber_node"])
        assert g["incident_start"] == str(np.datetime64(f.incident_start, "s")) + "Z"
        assert g["modems_affected"] == (
            SMALL_PLANT_CFG.amps_per_fibernode * SMALL_PLANT_CFG.modems_per_amp
        )
        assert g["severity"] == f.severity
        assert g["precursor_lead"] == f.precursor_lead


def test_emit_alarms_and_tickets_standalone(small_plant):
    """The emitters are pure functions of (faults, topo, cfg)."""
    a1 = emit_alarms(small_plant.faults, small_plant.topology, SMALL_PLANT_CFG)
    pd.testing.assert_frame_equal(a1, small_plant.alarms)
    t1, truth = emit_tickets(small_plant.faults, small_plant.topology, SMALL_PLANT_CFG)
    pd.testing.assert_frame_equal(t1, small_plant.tickets)
    assert [g["parseable"] for g in small_plant.groundtruth] == [
        t["parseable"] for t in truth
    ]
