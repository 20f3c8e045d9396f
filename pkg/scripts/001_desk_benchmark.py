import sys
from dataclasses import replace
from pathlib import Path
from typing import Dict, List

import numpy as np
import pandas as pd

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from fldefend.aggregation import AggregatorKind, AggregatorSpec
from fldefend.config import load_config
from fldefend.data import AttackSpec
from fldefend.settings import configure_logging
from fldefend.sim import ExperimentResult, SimConfig, run_experiment
from fldefend.utils import write_frame

BASELINES = [AggregatorKind.KRUM, AggregatorKind.TMEAN, AggregatorKind.MEDIAN, AggregatorKind.FOOLSGOLD]


def run_many(config: SimConfig, seeds: List[int]) -> List[ExperimentResult]:
    """
    Run one config over several seeds.

    Args:
        config: Base configuration (its seed is replaced)
        seeds: Master seeds to run

    Returns:
        One ExperimentResult per seed, in seed order
    """
    return [run_experiment(replace(config, seed=s)) for s in seeds]


def medians(results: List[ExperimentResult]) -> Dict[str, float]:
    finals = [r.final_snapshot for r in results]
    out = {}
    for metric in ("gacc", "srec", "asr"):
        values = [getattr(f, metric) for f in finals if getattr(f, metric) is not None]
        out[metric] = float(np.median(values)) if values else float("nan")
    return out


def with_aggregator(config: SimConfig, kind: AggregatorKind) -> SimConfig:
    return replace(config, aggregator=AggregatorSpec(kind=kind))


def check(label: str, passed: bool, detail: str) -> bool:
    print(f"  [{'PASS' if passed else 'FAIL'}] {label}: {detail}")
    return passed


def main():
    config_path = Path(__file__).resolve().parent.parent / "configs" / "desk_benchmark.yaml"
    output_dir = Path(__file__).resolve().parent.parent / "runs" / "desk_benchmark"
    output_dir.mkdir(parents=True, exist_ok=True)
    configure_logging("WARNING")

    base, _ = load_config(config_path)
    seeds = list(range(5))
    no_attack = replace(base, attack=AttackSpec(mode="none", pairs=base.attack.pairs))

    print(f"Desk benchmark: K={base.num_clients}, M={base.clients_per_round}, T={base.rounds}, seeds={seeds}")
    print("Running FedAvg without attack...")
    clean = medians(run_many(with_aggregator(no_attack, AggregatorKind.FEDAVG), seeds))
    print("Running FedAvg under attack...")
    fedavg = medians(run_many(with_aggregator(base, AggregatorKind.FEDAVG), seeds))
    print("Running DEFEND under attack...")
    defend_results = run_many(with_aggregator(base, AggregatorKind.DEFEND), seeds)
    defend = medians(defend_results)

    baselines = {}
    for kind in BASELINES:
        print(f"Running {kind.value} under attack...")
        baselines[kind.value] = medians(run_many(with_aggregator(base, kind), seeds))

    print("Running the malicious-rate sweep (20% to 50%)...")
    sweep_rows = []
    for rate in (0.2, 0.3, 0.4, 0.5):
        for kind in (AggregatorKind.FEDAVG, AggregatorKind.DEFEND):
            stats = medians(run_many(with_aggregator(replace(base, malicious_rate=rate), kind), seeds))
            sweep_rows.append({"aggregator": kind.value, "malicious_rate": rate, **stats})
    sweep = pd.DataFrame(sweep_rows)

    table = pd.DataFrame(
        [{"aggregator": "fedavg (no attack)", **clean}, {"aggregator": "fedavg", **fedavg}, {"aggregator": "defend", **defend}]
        + [{"aggregator": name, **stats} for name, stats in baselines.items()]
    )
    write_frame(table, output_dir / "benchmark.csv")
    write_frame(sweep, output_dir / "malicious_rate_sweep.csv")
    print("\n" + table.to_string(index=False))
    print("\n" + sweep.to_string(index=False))

    print("\nAcceptance:")
    results = []
    gap = fedavg["asr"] - clean["asr"]
    results.append(check("attack severity", gap >= 0.20, f"FedAvg ASR gap {gap:.3f} (>= 0.20)"))
    results.append(check(
        "parity with no attack",
        abs(defend["srec"] - clean["srec"]) <= 0.05 and abs(defend["asr"] - clean["asr"]) <= 0.05,
        f"SRec {defend['srec']:.3f} vs {clean['srec']:.3f}, ASR {defend['asr']:.3f} vs {clean['asr']:.3f}",
    ))
    for name, stats in baselines.items():
        results.append(check(
            f"beats {name}",
            defend["srec"] - stats["srec"] >= 0.10 and stats["asr"] - defend["asr"] >= 0.10,
            f"SRec {defend['srec']:.3f} vs {stats['srec']:.3f}, ASR {defend['asr']:.3f} vs {stats['asr']:.3f}",
        ))

    at_half = sweep[sweep["malicious_rate"] == 0.5].set_index("aggregator")
    results.append(check(
        "robust at 50% malicious",
        at_half.loc["defend", "asr"] <= 0.15 and at_half.loc["fedavg", "asr"] >= 0.40,
        f"DEFEND ASR {at_half.loc['defend', 'asr']:.3f}, FedAvg ASR {at_half.loc['fedavg', 'asr']:.3f}",
    ))

    rates = [r.goal_identification_rate() for r in defend_results]
    rate = float(np.median([r for r in rates if r is not None])) if any(r is not None for r in rates) else 0.0
    results.append(check("goal identification", rate >= 0.8, f"median rate {rate:.3f} (>= 0.80)"))

    good_seeds = sum(1 for r in defend_results if r.exclusion_counts()[0] >= 8 and r.exclusion_counts()[1] <= 1)
    results.append(check("exclusion quality", good_seeds >= 4, f"{good_seeds} of {len(seeds)} seeds"))

    print(f"\n{sum(results)} of {len(results)} checks passed")
    print(f"Output files saved to: {output_dir}")


if __name__ == "__main__":
    main()
