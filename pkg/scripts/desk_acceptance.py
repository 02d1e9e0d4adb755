#!/usr/bin/env python3
"""
Desk-scale trend checks for FedCPC.

Runs the full lab once per seed on the default synthetic corpus and checks
the directional results:

    a) CPC pre-training lifts k=1 ranking accuracy above twice chance
    b) Fed-CNN-LSTM and FedCPC-CNN-LSTM both beat macro-F1 0.40
    c) FedCPC-CNN-LSTM beats Fed-CNN-LSTM in at least 2 of 3 seeds
    d) central CPC-CNN-LSTM is at least as good as FedCPC-CNN-LSTM in 2 of 3 seeds

Usage:
    python scripts/desk_acceptance.py [--seeds 0,1,2] [--work-dir runs/acceptance]
"""

import sys
from dataclasses import dataclass
from pathlib import Path

import click

sys.path.insert(0, str(Path(__file__).parent.parent))

from src.classifiers import FeatureKind, HeadKind
from src.cpc import evaluate_ranking
from src.eval_metrics import MetricsReport, format_percent, write_table
from src.logging_config import get_logger
from src.pipeline import load_waves, stage_evaluate, stage_gen_data, stage_pretrain, stage_train
from src.run_config import RunConfig, load_run_config

logger = get_logger(__name__)


@dataclass
class SeedOutcome:
    seed: int
    ranking_k1: float
    chance: float
    fed_cnn_lstm: MetricsReport
    fedcpc_cnn_lstm: MetricsReport
    central_cpc_cnn_lstm: MetricsReport


def run_seed(base: RunConfig, seed: int, work_dir: Path) -> SeedOutcome:
    root = work_dir / f"seed-{seed}"

    def at(name: str) -> RunConfig:
        return base.with_overrides(
            {"run": {"seed": seed, "output_dir": str(root / name), "corpus_dir": str(root / "corpus")}}
        )

    manifest = stage_gen_data(at("corpus"))

    central_cpc = stage_pretrain(at("cpc-central"), manifest, "central")
    federated_cpc = stage_pretrain(at("cpc-federated"), manifest, "federated")

    fed_baseline = stage_train(at("fed-cnn-lstm"), manifest, "federated", FeatureKind.MFCC, HeadKind.CNN_LSTM)
    fedcpc = stage_train(
        at("fedcpc-cnn-lstm"), manifest, "federated", FeatureKind.CPC, HeadKind.CNN_LSTM, federated_cpc.params
    )
    central = stage_train(
        at("central-cpc-cnn-lstm"), manifest, "central", FeatureKind.CPC, HeadKind.CNN_LSTM, central_cpc.params
    )

    def score(name: str, model: object) -> MetricsReport:
        return stage_evaluate(at(name), manifest, model.checkpoint_params(), "test", name)  # type: ignore[attr-defined]

    config = at("cpc-federated")
    test_waves = load_waves(config.corpus_dir, manifest.by_split("test"))
    ranking = evaluate_ranking(test_waves, federated_cpc, seed)

    return SeedOutcome(
        seed=seed,
        ranking_k1=ranking[1],
        chance=1.0 / config.cpc.n_candidates,
        fed_cnn_lstm=score("fed-cnn-lstm", fed_baseline),
        fedcpc_cnn_lstm=score("fedcpc-cnn-lstm", fedcpc),
        central_cpc_cnn_lstm=score("central-cpc-cnn-lstm", central),
    )


def check(outcomes: list[SeedOutcome]) -> dict[str, bool]:
    def f1(report: MetricsReport) -> float:
        return report.macro.f1

    return {
        "a) ranking k=1 > 2x chance": all(o.ranking_k1 > 2 * o.chance for o in outcomes),
        "b) both federated systems > 0.40 macro-F1": all(
            f1(o.fed_cnn_lstm) > 0.40 and f1(o.fedcpc_cnn_lstm) > 0.40 for o in outcomes
        ),
        "c) FedCPC beats Fed baseline in 2 of 3": sum(
            f1(o.fedcpc_cnn_lstm) > f1(o.fed_cnn_lstm) for o in outcomes
        ) >= 2,
        "d) central >= federated in 2 of 3": sum(
            f1(o.central_cpc_cnn_lstm) >= f1(o.fedcpc_cnn_lstm) for o in outcomes
        ) >= 2,
    }


@click.command()
@click.option("--config", "config_path", type=click.Path(path_type=Path), help="Run config INI file")
@click.option("--seeds", default="0,1,2", show_default=True, help="Comma-separated seeds")
@click.option("--work-dir", type=click.Path(path_type=Path), default=Path("runs/acceptance"), show_default=True)
@click.option("--separability", type=float, default=0.7, show_default=True)
def main(config_path: Path | None, seeds: str, work_dir: Path, separability: float) -> None:
    """Run the three-seed trend checks and print a pass/fail table."""
    base = load_run_config(config_path).unwrap().with_overrides({"corpus": {"separability": separability}})
    outcomes = []
    for seed in (int(s) for s in seeds.split(",")):
        logger.info("acceptance_seed_started", seed=seed)
        outcomes.append(run_seed(base, seed, work_dir))

    write_table(
        work_dir / "metrics_table.md",
        [
            (f"{name} (seed {o.seed})", report)
            for o in outcomes
            for name, report in (
                ("Fed-CNN-LSTM", o.fed_cnn_lstm),
                ("FedCPC-CNN-LSTM", o.fedcpc_cnn_lstm),
                ("CPC-CNN-LSTM", o.central_cpc_cnn_lstm),
            )
        ],
    )

    click.echo(f"{'seed':<6}{'rank@1':>8}{'Fed':>8}{'FedCPC':>8}{'Central':>9}")
    for o in outcomes:
        click.echo(
            f"{o.seed:<6}{format_percent(o.ranking_k1):>8}{format_percent(o.fed_cnn_lstm.macro.f1):>8}"
            f"{format_percent(o.fedcpc_cnn_lstm.macro.f1):>8}{format_percent(o.central_cpc_cnn_lstm.macro.f1):>9}"
        )
    results = check(outcomes)
    for name, passed in results.items():
        click.echo(f"{'PASS' if passed else 'FAIL'}  {name}")
    sys.exit(0 if all(results.values()) else 1)


if __name__ == "__main__":
    main()
