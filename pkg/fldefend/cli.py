"""
Experiment runner.

`run` executes one config across seeds, malicious rates and aggregators and
writes one directory per run; `compare` lines up finished runs side by side.
CSV layouts are documented in README.md and versioned by SCHEMA_VERSION.
"""

import argparse
import json
import logging
import platform
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from scipy.stats import iqr

from fldefend import __version__
from fldefend.config import config_hash, config_to_dict, load_config, task_hash, with_workers
from fldefend.errors import ConfigurationError
from fldefend.metrics import export_confusion_csv
from fldefend.settings import configure_logging, load_settings
from fldefend.sim import ExperimentResult, run_experiment
from fldefend.utils import write_frame, write_json

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
ROUND_COLUMNS = [
    "schema_version",
    "seed",
    "aggregator",
    "malicious_rate",
    "round",
    "cohort",
    "malicious_in_cohort",
    "outliers",
    "goal_source",
    "goal_target",
    "accepted",
    "skipped",
    "eval_source",
    "eval_target",
    "gacc",
    "srec",
    "asr",
    "num_blacklisted",
    "blacklist",
    "ratings",
]
TIMING_COLUMNS = ["seed", "round", "cohort_size", "detection_seconds", "server_seconds"]
METRICS = ("gacc", "srec", "asr")
INCOMPLETE_MARKER = ".incomplete"


def _ids(values: Sequence[int]) -> str:
    return ";".join(str(v) for v in values)


def rounds_frame(result: ExperimentResult) -> pd.DataFrame:
    config = result.config
    rows = []
    for log in result.logs:
        snap = log.snapshot
        rows.append({
            "schema_version": SCHEMA_VERSION,
            "seed": config.seed,
            "aggregator": config.aggregator.kind.value,
            "malicious_rate": config.malicious_rate,
            "round": log.round,
            "cohort": _ids(log.cohort),
            "malicious_in_cohort": _ids(log.malicious_in_cohort),
            "outliers": _ids(log.outliers),
            "goal_source": log.goal[0] if log.goal else None,
            "goal_target": log.goal[1] if log.goal else None,
            "accepted": int(log.accepted),
            "skipped": int(log.skipped),
            "eval_source": snap.pair[0],
            "eval_target": snap.pair[1],
            "gacc": snap.gacc,
            "srec": snap.srec,
            "asr": snap.asr,
            "num_blacklisted": len(log.blacklist),
            "blacklist": _ids(log.blacklist),
            "ratings": ";".join(f"{k}:{v:.2f}" for k, v in sorted(log.ratings.items())),
        })
    df = pd.DataFrame(rows, columns=ROUND_COLUMNS)
    return df.astype({"goal_source": "Int64", "goal_target": "Int64"})


def timings_frame(result: ExperimentResult) -> pd.DataFrame:
    rows = [
        {
            "seed": result.config.seed,
            "round": log.round,
            "cohort_size": len(log.cohort),
            "detection_seconds": log.detection_seconds,
            "server_seconds": log.server_seconds,
        }
        for log in result.logs
    ]
    return pd.DataFrame(rows, columns=TIMING_COLUMNS)


def features_frame(result: ExperimentResult, round_log) -> Optional[pd.DataFrame]:
    """Raw f'/g' feature rows of one round, for offline visualization."""
    report = round_log.report
    if report is None:
        return None
    values = report.features.values
    df = pd.DataFrame(values, columns=[f"u{i + 1}" for i in range(values.shape[1])])
    df.insert(0, "client_id", report.features.client_ids)
    df.insert(1, "malicious", [int(c in result.malicious_ids) for c in report.features.client_ids])
    df.insert(2, "outlier", [int(c in report.outliers) for c in report.features.client_ids])
    df.insert(3, "goal_source", report.goal.source)
    df.insert(4, "goal_target", report.goal.target)
    return df


def build_summary(result: ExperimentResult) -> Dict[str, Any]:
    config = result.config
    final = result.final_snapshot
    malicious_blacklisted, benign_blacklisted = result.exclusion_counts()
    return {
        "schema_version": SCHEMA_VERSION,
        "metadata": {
            "config_hash": config_hash(config),
            "task_hash": task_hash(config),
            "seed": config.seed,
            "aggregator": config.aggregator.kind.value,
            "attack_mode": config.attack.mode,
            "malicious_rate": config.malicious_rate,
            "rounds_planned": config.rounds,
            "rounds_completed": len(result.logs),
            "halted": result.halted,
            "versions": {
                "fldefend": __version__,
                "python": platform.python_version(),
                "numpy": np.__version__,
                "pandas": pd.__version__,
            },
        },
        "config": config_to_dict(config),
        "final": {
            "round": result.logs[-1].round if result.logs else None,
            "test_samples": final.total if final else None,
            **(final.as_dict() if final else dict.fromkeys(("gacc", "srec", "asr", "pair"))),
        },
        "diagnostics": {
            "malicious_ids": list(result.malicious_ids),
            "malicious_blacklisted": malicious_blacklisted,
            "benign_blacklisted": benign_blacklisted,
            "rounds_rejected": sum(1 for log in result.logs if not log.accepted),
            "goal_identification_rate": result.goal_identification_rate(),
        },
    }


def write_run(
    result: ExperimentResult,
    run_dir: Path,
    export_features: bool = False,
    export_confusions: bool = False,
) -> Dict[str, Any]:
    """Write every artifact of a finished run into run_dir."""
    run_dir = Path(run_dir)
    write_frame(rounds_frame(result), run_dir / "rounds.csv")
    write_frame(timings_frame(result), run_dir / "timings.csv")
    if result.final_snapshot is not None:
        export_confusion_csv(result.final_snapshot, run_dir / "confusion_final.csv")
    for log in result.logs:
        if export_confusions:
            export_confusion_csv(log.snapshot, run_dir / f"confusion_round_{log.round:03d}.csv")
        if export_features:
            df = features_frame(result, log)
            if df is not None:
                write_frame(df, run_dir / f"features_round_{log.round:03d}.csv")
    summary = build_summary(result)
    write_json(summary, run_dir / "summary.json")
    return summary


def run_directory_name(aggregator: str, malicious_rate: float, seed: int) -> str:
    return f"{aggregator}_mr{malicious_rate:.2f}_seed{seed}"


def sweep_summary(summaries: List[Dict[str, Any]]) -> pd.DataFrame:
    """Median and IQR of the final metrics across seeds per (aggregator, attack, rate)."""
    rows = [
        {
            "aggregator": s["metadata"]["aggregator"],
            "attack_mode": s["metadata"]["attack_mode"],
            "malicious_rate": s["metadata"]["malicious_rate"],
            "seed": s["metadata"]["seed"],
            **{m: s["final"][m] for m in METRICS},
        }
        for s in summaries
    ]
    df = pd.DataFrame(rows)
    out = []
    for (aggregator, attack_mode, rate), group in df.groupby(["aggregator", "attack_mode", "malicious_rate"], sort=True):
        row = {"aggregator": aggregator, "attack_mode": attack_mode, "malicious_rate": rate, "num_seeds": len(group)}
        for m in METRICS:
            values = pd.to_numeric(group[m], errors="coerce").to_numpy(dtype=float)
            row[f"{m}_median"] = float(np.nanmedian(values)) if np.any(~np.isnan(values)) else None
            row[f"{m}_iqr"] = float(iqr(values, nan_policy="omit")) if np.any(~np.isnan(values)) else None
        out.append(row)
    return pd.DataFrame(out)


def run(
    config_path: Path,
    output_dir: Path,
    seed: Optional[int] = None,
    seed_count: int = 1,
    malicious_rates: Optional[Sequence[float]] = None,
    aggregators: Optional[Sequence[str]] = None,
    attack_mode: Optional[str] = None,
    workers: int = 1,
    export_features: bool = False,
    export_confusions: bool = False,
) -> int:
    """Execute every (aggregator, rate, seed) combination; returns an exit status."""
    output_dir = Path(output_dir)
    try:
        base, raw = load_config(config_path, {"attack.mode": attack_mode})
    except ConfigurationError as e:
        print(f"{config_path}: {e}", file=sys.stderr)
        return 2

    first_seed = base.seed if seed is None else seed
    seeds = [first_seed + i for i in range(max(1, seed_count))]
    rates = list(malicious_rates) if malicious_rates else [base.malicious_rate]
    kinds = list(aggregators) if aggregators else [base.aggregator.kind.value]

    summaries = []
    for kind in kinds:
        for rate in rates:
            for s in seeds:
                overrides = {"seed": s, "federation.malicious_rate": rate, "aggregator.kind": kind, "attack.mode": attack_mode}
                try:
                    config, _ = load_config(config_path, overrides)
                except ConfigurationError as e:
                    print(f"{config_path}: {e}", file=sys.stderr)
                    return 2
                config = with_workers(config, workers)

                run_dir = output_dir / run_directory_name(kind, rate, s)
                run_dir.mkdir(parents=True, exist_ok=True)
                marker = run_dir / INCOMPLETE_MARKER
                marker.write_text("run started but did not finish\n", encoding="utf-8")
                logger.info("starting run %s", run_dir)
                try:
                    result = run_experiment(config)
                    summary = write_run(result, run_dir, export_features, export_confusions)
                except ConfigurationError as e:
                    print(f"{config_path}: {e}", file=sys.stderr)
                    return 2
                except Exception:
                    logger.exception("run %s failed", run_dir)
                    return 1
                marker.unlink()
                summaries.append(summary)
                logger.info(
                    "finished %s: GAcc=%s SRec=%s ASR=%s",
                    run_dir.name, summary["final"]["gacc"], summary["final"]["srec"], summary["final"]["asr"],
                )

    if len(summaries) > 1:
        table = sweep_summary(summaries)
        write_frame(table, output_dir / "sweep_summary.csv")
        write_json({"runs": len(summaries), "groups": table.to_dict(orient="records")}, output_dir / "sweep_summary.json")
    return 0


def _rank_flags(values: pd.Series, higher_is_better: bool) -> List[str]:
    ranks = pd.to_numeric(values, errors="coerce").rank(method="dense", ascending=not higher_is_better)
    return ["best" if r == 1 else "second" if r == 2 else "" for r in ranks]


def compare(run_dirs: Sequence[Path], output: Optional[Path] = None) -> pd.DataFrame:
    """Side-by-side GAcc/SRec/ASR table with best/second-best flags."""
    if len(run_dirs) < 2:
        raise ConfigurationError("compare needs at least two run directories")

    summaries = []
    for run_dir in run_dirs:
        path = Path(run_dir) / "summary.json"
        if not path.exists():
            raise ConfigurationError(f"{run_dir} has no summary.json (run incomplete?)")
        with open(path, encoding="utf-8") as f:
            summaries.append((Path(run_dir), json.load(f)))

    task_hashes = {s["metadata"]["task_hash"] for _, s in summaries}
    if len(task_hashes) > 1:
        raise ConfigurationError("runs use different tasks and cannot be compared")

    df = pd.DataFrame([
        {
            "run": run_dir.name,
            "aggregator": s["metadata"]["aggregator"],
            "attack_mode": s["metadata"]["attack_mode"],
            "malicious_rate": s["metadata"]["malicious_rate"],
            "seed": s["metadata"]["seed"],
            **{m: s["final"][m] for m in METRICS},
        }
        for run_dir, s in summaries
    ])
    df["gacc_flag"] = _rank_flags(df["gacc"], higher_is_better=True)
    df["srec_flag"] = _rank_flags(df["srec"], higher_is_better=True)
    df["asr_flag"] = _rank_flags(df["asr"], higher_is_better=False)

    if output is not None:
        write_frame(df, Path(output))
    print(df.to_string(index=False))
    return df


def _float_list(text: str) -> List[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fldefend", description="Federated-learning TLFA defense simulator")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    parser.add_argument("-q", "--quiet", action="store_true", help="warnings and errors only")
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run a config (optionally as a sweep)")
    run_p.add_argument("config", type=Path)
    run_p.add_argument("-o", "--output", type=Path, default=None, help="output directory (default $FLDEFEND_OUTPUT_DIR)")
    run_p.add_argument("--seed", type=int, default=None)
    run_p.add_argument("--seed-count", type=int, default=1)
    run_p.add_argument("--malicious-rate", type=_float_list, default=None, help="comma-separated sweep, e.g. 0.2,0.3,0.4,0.5")
    run_p.add_argument("--aggregator", type=lambda s: [v for v in s.split(",") if v], default=None,
                       help="comma-separated aggregators, e.g. fedavg,defend")
    run_p.add_argument("--attack", choices=["none", "static", "adaptive"], default=None, help="override attack.mode")
    run_p.add_argument("--workers", type=int, default=None, help="local-training threads (default $FLDEFEND_WORKERS)")
    run_p.add_argument("--export-features", action="store_true", help="write features_round_XXX.csv")
    run_p.add_argument("--export-confusions", action="store_true", help="write confusion_round_XXX.csv")

    cmp_p = sub.add_parser("compare", help="compare finished runs")
    cmp_p.add_argument("run_dirs", type=Path, nargs="+")
    cmp_p.add_argument("-o", "--output", type=Path, default=Path("comparison.csv"))
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    settings = load_settings()
    args = build_parser().parse_args(argv)
    level = "DEBUG" if args.verbose else "WARNING" if args.quiet else settings.log_level
    configure_logging(level)

    if args.command == "run":
        return run(
            config_path=args.config,
            output_dir=args.output or settings.output_dir,
            seed=args.seed,
            seed_count=args.seed_count,
            malicious_rates=args.malicious_rate,
            aggregators=args.aggregator,
            attack_mode=args.attack,
            workers=args.workers or settings.workers,
            export_features=args.export_features,
            export_confusions=args.export_confusions,
        )
    try:
        compare(args.run_dirs, args.output)
    except ConfigurationError as e:
        print(f"Error: {e}", file=sys.stderr)
        return 2
    return 0
