"""Calibrate the simulator's precursor spike against the business rule.

The business rule ranks candidates by the largest 4h swing in mean upstream
transmit level over the day before the incident, so its hit rate depends
directly on how far tx_spike_db stands out of the noise floor. This script
scans candidate spike sizes on the frozen benchmark plant and reports the
cross-validated business-rule p@1 for each, flagging the values that land in
the target band. The shipped configs/benchmark.toml pins the chosen value.

Run from the repository root:

    python3 scripts/calibrate_spike.py
    python3 scripts/calibrate_spike.py --values 2.0,2.5,3.0 --full 2.5

--full additionally trains the logistic and gradient-boosted rankers at one
spike value on the same folds, to confirm the learned models keep a healthy
margin over the rule. Results for the shipped plant (seed 23, 5 hubs x 10
fiber-nodes x 6 amps x 2 modems, 800 h, 6 faults per fiber-node):

    spike 2.0: rule p@1 = 0.227   in band
    spike 2.5: rule p@1 = 0.280   in band   <- shipped
    spike 3.0: rule p@1 = 0.347   in band
    spike 4.0: rule p@1 = 0.483
    spike 6.0: rule p@1 = 0.850

    --full 2.5: business_rule 0.280, logistic 0.903, gbdt 0.987
"""

import argparse
import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from hfc_rca import evaluation as E
from hfc_rca import incidents as I
from hfc_rca import simulator as S
from hfc_rca import telemetry as T

TARGET_BAND = (0.20, 0.45)

BENCHMARK_PLANT = dict(
    seed=23,
    n_hubs=5,
    fibernodes_per_hub=10,
    amps_per_fibernode=6,
    modems_per_amp=2,
    hours=800,
    fault_rate=6.0,
)

FULL_SPECS = [
    {"kind": "business_rule"},
    {"kind": "logistic", "epochs": 150, "learning_rate": 0.05},
    {"kind": "gbdt", "rounds": 30, "max_depth": 3, "min_leaf": 10},
]


def build_sessions(spike):
    cfg = S.PlantConfig(tx_spike_db=spike, **BENCHMARK_PLANT)
    plant = S.generate_plant(cfg)
    series = T.aggregate_to_amplifier(plant.telemetry, plant.topology)
    table = T.compute_features(series)
    dataset, _, skipped = I.sessionize(plant.alarms, plant.tickets, table, plant.topology)
    if skipped:
        raise RuntimeError(f"benchmark plant dropped {len(skipped)} sessions")
    return dataset, dict(plant.topology.fiber_nodes)


def p_at_1(dataset, hub_of_fn, specs, folds, seed):
    report = E.cross_validate(dataset, hub_of_fn, specs, n_folds=folds, seed=seed, ks=(1,))
    return {
        row["model"]: row["precision_at_k_mean"]
        for row in report.summary_rows()
        if row["k"] == 1
    }


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument(
        "--values",
        default="2.0,2.5,3.0,4.0,6.0",
        help="comma list of tx_spike_db values to scan",
    )
    parser.add_argument("--folds", type=int, default=5)
    parser.add_argument("--seed", type=int, default=0, help="fold-assignment seed")
    parser.add_argument(
        "--full",
        type=float,
        default=None,
        metavar="SPIKE",
        help="also train logistic and gbdt at this spike value",
    )
    args = parser.parse_args(argv)

    lo, hi = TARGET_BAND
    for spike in [float(v) for v in args.values.split(",") if v]:
        t0 = time.time()
        dataset, hub_of_fn = build_sessions(spike)
        scores = p_at_1(dataset, hub_of_fn, [{"kind": "business_rule"}], args.folds, args.seed)
        p1 = scores["business_rule"]
        flag = "in band" if lo <= p1 <= hi else ""
        print(
            f"spike {spike:4.1f}: rule p@1 = {p1:.3f}  "
            f"({len(dataset.sessions)} sessions, {time.time() - t0:.0f}s)  {flag}"
        )

    if args.full is not None:
        print(f"\nfull roster at spike {args.full}:")
        t0 = time.time()
        dataset, hub_of_fn = build_sessions(args.full)
        scores = p_at_1(dataset, hub_of_fn, FULL_SPECS, args.folds, args.seed)
        for model, p1 in sorted(scores.items()):
            print(f"  {model:<14} p@1 = {p1:.3f}")
        print(f"  ({time.time() - t0:.0f}s)")
    return 0


if __name__ == "__main__":
    sys.exit(main())
