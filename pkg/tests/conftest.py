"""Shared fixtures: a hand-built toy topology and one cached synthetic plant."""

from __future__ import annotations

import numpy as np
import pandas as pd
import pytest

from hfc_rca.simulator import PlantConfig, generate_plant
from hfc_rca.telemetry import HOUR, aggregate_to_amplifier, compute_features
from hfc_rca.topology import build_topology


def toy_topology_dict():
    return {
        "hubs": ["HUBA", "HUBB"],
        "fiber_nodes": [
            {"id": "FN1", "hub": "HUBA"},
            {"id": "FN2", "hub": "HUBA"},
            {"id": "FN3", "hub": "HUBB"},
        ],
        "amplifiers": [
            {"id": "A1", "parent": "FN1", "fiber_node": "FN1", "aliases": ["AMP-01-01", "amp_1_1"]},
            {"id": "A2", "parent": "A1", "fiber_node": "FN1", "aliases": ["AMP-01-02"]},
            {"id": "A3", "parent": "A1", "fiber_node": "FN1", "aliases": ["AMP-01-03"], "lat": 47.1, "lon": 8.2},
            {"id": "B1", "parent": "FN2", "fiber_node": "FN2", "aliases": ["AMP-02-01"]},
            {"id": "C1", "parent": "FN3", "fiber_node": "FN3", "aliases": ["AMP-03-01"]},
        ],
        "modems": [
            {"mac": "02:00:00:00:00:01", "amplifier": "A2"},
            {"mac": "02:00:00:00:00:02", "amplifier": "A2"},
            {"mac": "02:00:00:00:00:03", "amplifier": "A3"},
            {"mac": "02:00:00:00:00:04", "amplifier": "B1"},
            {"mac": "02:00:00:00:00:05", "amplifier": "C1"},
        ],
    }


@pytest.fixture
def toy_topology():
    return build_topology(toy_topology_dict())


SMALL_PLANT_CFG = PlantConfig(
    seed=7,
    n_hubs=2,
    fibernodes_per_hub=2,
    amps_per_fibernode=3,
    modems_per_amp=2,
    hours=300,
    fault_rate=1.5,
)


@pytest.fixture(scope="session")
def small_plant():
    return generate_plant(SMALL_PLANT_CFG)


@pytest.fixture(scope="session")
def small_features(small_plant):
    series = aggregate_to_amplifier(small_plant.telemetry, small_plant.topology)
    return compute_features(series)


def synth_frame(topo, hours=30, seed=3, drop=0.1):
    """Random telemetry for a hand-built plant, with sample drops."""
    rng = np.random.default_rng(seed)
    start = np.datetime64("2021-03-01T00", "h")
    rows = []
    for mac in sorted(topo.modems):
        for h in range(hours):
            for direction in ("us", "ds"):
                if rng.random() < drop:
                    continue
                ts = str(np.datetime64(start + h * HOUR, "s")) + "Z"
                rows.append(
                    {
                        "ts": ts,
                        "mac": mac,
                        "channel": "0",
                        "direction": direction,
                        "snr_db": rng.normal(35, 2),
                        "tx_dbmv": rng.normal(40, 3),
                        "rx_dbmv": rng.normal(0, 2),
                        "cer": abs(rng.normal(0.001, 0.001)),
                        "ccer": abs(rng.normal(0.004, 0.002)),
                        "mrefl_db": rng.normal(-30, 2) if direction == "ds" else np.nan,
                    }
                )
    return pd.DataFrame(rows), start
