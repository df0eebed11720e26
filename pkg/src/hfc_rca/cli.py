"""Command-line entry point.

Every subcommand takes a TOML config plus targeted flag overrides; flags win
over file values. Exit codes: 0 success, 2 configuration problem, 3 missing
stage input, 4 invalid data.
"""

from __future__ import annotations

import argparse
import os
import sys
import traceback

from .config import (
    ConfigError,
    EvaluateSection,
    ForecastSection,
    RunSection,
    SessionizeSection,
    load_config_with_overrides,
)
from .simulator import PlantConfig
from .evaluation import EvaluationError
from .forecast import ForecastError
from .incidents import SessionError
from .models import ManifestMismatchError, ModelFormatError
from .normalize import NormalizationError
from .pipeline import STAGES, DependencyError, run_pipeline
from .telemetry import TelemetryError
from .topology import TopologyError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DEPENDENCY = 3
EXIT_VALIDATION = 4

_RUN = RunSection()
_EVAL = EvaluateSection()
_FORECAST = ForecastSection()
_SESS = SessionizeSection()
_PLANT = PlantConfig()


def _int_list(text):
    return [int(part) for part in text.split(",") if part]


def _float_list(text):
    return [float(part) for part in text.split(",") if part]


def _str_list(text):
    return [part.strip() for part in text.split(",") if part.strip()]


def build_parser():
    parser = argparse.ArgumentParser(
        prog="hfc-rca",
        description=(
            "Root-cause ranking and fault forecasting for upstream high-noise "
            "incidents in HFC cable plants."
        ),
    )
    parser.add_argument(
        "--threads",
        type=int,
        default=int(os.environ.get("HFC_RCA_THREADS", str(_RUN.threads))),
        help=(
            "worker thread budget; accepted for compatibility, results are "
            f"identical at any value (default {_RUN.threads}, env HFC_RCA_THREADS)"
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", help="TOML config file (defaults apply without one)")
        p.add_argument("--out", help=f"run directory (default {_RUN.out_dir!r})")
        p.add_argument(
            "--set",
            dest="overrides",
            action="append",
            default=[],
            metavar="SECTION.KEY=VALUE",
            help="override any config value, e.g. --set simulate.hours=400",
        )

    p = sub.add_parser("simulate", help="generate a synthetic plant with known faults")
    add_common(p)
    p.add_argument("--seed", type=int, help=f"plant seed (default {_PLANT.seed})")

    p = sub.add_parser("featurize", help="telemetry.csv -> features.csv")
    add_common(p)

    p = sub.add_parser("sessionize", help="alarms + tickets + features -> sessions.jsonl")
    add_common(p)
    p.add_argument(
        "--merge-gap", type=float,
        help=f"merge alarm windows closer than this many hours (default {_SESS.merge_gap_hours})",
    )
    p.add_argument(
        "--tolerance", type=float,
        help=f"ticket-to-window time tolerance in hours (default {_SESS.tolerance_hours})",
    )

    p = sub.add_parser("train", help="fit the configured model on all sessions")
    add_common(p)
    p.add_argument("--model", help="model to train: business_rule | logistic | gbdt | rule_list")

    p = sub.add_parser("evaluate", help="grouped cross-validation of the model roster")
    add_common(p)
    p.add_argument("--models", type=_str_list, help=f"comma list (default {','.join(_EVAL.models)})")
    p.add_argument("--folds", type=int, help=f"fold count (default {_EVAL.folds})")
    p.add_argument("--k", type=_int_list, help=f"comma list of cutoffs (default {','.join(map(str, _EVAL.ks))})")
    p.add_argument("--seed", type=int, help=f"fold-assignment seed (default {_RUN.seed})")
    p.add_argument("--threshold", type=float, help=f"stage-1 threshold (default {_EVAL.threshold})")

    p = sub.add_parser("forecast", help="fiber-node cutoff-crossing forecast grid")
    add_common(p)
    p.add_argument("--horizons", type=_int_list, help=f"comma list of hours (default {','.join(map(str, _FORECAST.horizons))})")
    p.add_argument("--cutoffs", type=_float_list, help=f"comma list of target cutoffs (default {','.join(map(str, _FORECAST.cutoffs))})")
    p.add_argument("--split", choices=("temporal", "random"), help=f"default {_FORECAST.split}")
    p.add_argument("--window", type=int, help=f"feature window hours (default {_FORECAST.window})")
    p.add_argument("--hop", type=int, help=f"window stride hours (default {_FORECAST.hop})")

    p = sub.add_parser("report", help="print the evaluation summary table")
    add_common(p)

    p = sub.add_parser("run", help="run several stages in order")
    add_common(p)
    p.add_argument("--stages", type=_str_list, default=list(STAGES[:-1]),
                   help=f"comma list from: {','.join(STAGES)}")
    p.add_argument("--seed", type=int, help="override both run and plant seeds")
    return parser


def _flag_overrides(args):
    """Translate dedicated flags into config override assignments."""
    over = []
    flag_map = {
        "seed": ("run.seed", "simulate.seed"),
        "merge_gap": ("sessionize.merge_gap_hours",),
        "tolerance": ("sessionize.tolerance_hours",),
        "model": ("train.model",),
        "models": ("evaluate.models",),
        "folds": ("evaluate.folds",),
        "k": ("evaluate.ks",),
        "threshold": ("evaluate.threshold",),
        "horizons": ("forecast.horizons",),
        "cutoffs": ("forecast.cutoffs",),
        "split": ("forecast.split",),
        "window": ("forecast.window",),
        "hop": ("forecast.hop",),
        "threads": ("run.threads",),
    }
    if args.command == "forecast" and getattr(args, "models", None):
        flag_map["models"] = ("forecast.models",)
    for flag, keys in flag_map.items():
        value = getattr(args, flag, None)
        if value is None:
            continue
        for key in keys:
            over.append((key, value))
    if getattr(args, "out", None):
        over.append(("run.out_dir", args.out))
    return over


def _materialize(args):
    data_overrides = list(args.overrides)
    cfg = load_config_with_overrides(getattr(args, "config", None), data_overrides)
    from .config import config_from_dict, config_to_dict, validate_config

    doc = config_to_dict(cfg)
    for key, value in _flag_overrides(args):
        node = doc
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        if isinstance(value, tuple):
            value = list(value)
        node[parts[-1]] = value
    cfg = config_from_dict(doc)
    validate_config(cfg)
    return cfg


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _materialize(args)
        if args.command == "run":
            stages = args.stages
            unknown = [s for s in stages if s not in STAGES]
            if unknown:
                raise ConfigError(f"unknown stage(s) {unknown}")
            run_pipeline(cfg, stages, cfg.run.out_dir)
        else:
            run_pipeline(cfg, [args.command], cfg.run.out_dir)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DependencyError as exc:
        print(f"dependency error: {exc}", file=sys.stderr)
        return EXIT_DEPENDENCY
    except (
        TopologyError,
        TelemetryError,
        SessionError,
        NormalizationError,
        EvaluationError,
        ForecastError,
        ManifestMismatchError,
        ModelFormatError,
        ValueError,
    ) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception:
        traceback.print_exc()
        return 1
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
