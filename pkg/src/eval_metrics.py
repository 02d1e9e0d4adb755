"""
Confusion matrices, precision/recall/F1 and the report artifacts.

Rows of a confusion matrix are true classes, columns predicted classes.
A zero denominator makes the affected metric 0 rather than NaN.
"""

from __future__ import annotations

import csv
from collections.abc import Sequence
from dataclasses import dataclass
from html import escape
from pathlib import Path
from typing import Literal

import numpy as np

from .classifiers import Label
from .error_handler import ArtifactIOError, ContractViolation
from .logging_config import get_logger

logger = get_logger(__name__)

N_CLASSES = len(Label)
Average = Literal["macro", "weighted"]


@dataclass(frozen=True)
class ConfusionMatrix:
    counts: np.ndarray

    def __post_init__(self) -> None:
        if self.counts.shape != (N_CLASSES, N_CLASSES):
            raise ContractViolation(f"confusion matrix must be 3x3, got {self.counts.shape}")
        if np.any(self.counts < 0):
            raise ContractViolation("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def row(self, label: Label) -> np.ndarray:
        return self.counts[int(label)]


@dataclass(frozen=True)
class ClassMetrics:
    precision: float
    recall: float
    f1: float


@dataclass(frozen=True)
class MetricsReport:
    per_class: dict[Label, ClassMetrics]
    macro: ClassMetrics
    n_examples: int
    average: Average = "macro"


def confusion(true_labels: Sequence[int], predicted_labels: Sequence[int]) -> ConfusionMatrix:
    if len(true_labels) != len(predicted_labels):
        raise ContractViolation(
            f"{len(true_labels)} true labels but {len(predicted_labels)} predictions"
        )
    counts = np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64)
    for t, p in zip(true_labels, predicted_labels, strict=True):
        if not (0 <= int(t) < N_CLASSES and 0 <= int(p) < N_CLASSES):
            raise ContractViolation(f"label pair ({t}, {p}) outside 0..{N_CLASSES - 1}")
        counts[int(t), int(p)] += 1
    return ConfusionMatrix(counts)


def _ratio(num: float, den: float) -> float:
    return float(num / den) if den > 0 else 0.0


def macro_metrics(cm: ConfusionMatrix, average: Average = "macro") -> MetricsReport:
    """
    Per-class precision, recall and F1 plus their average.

    ``macro`` takes the unweighted mean over the three classes;
    ``weighted`` weights each class by its number of true examples.
    """
    total = cm.total
    if total == 0:
        raise ContractViolation("cannot compute metrics of an empty confusion matrix")
    counts = cm.counts.astype(np.float64)
    per_class: dict[Label, ClassMetrics] = {}
    for label in Label:
        c = int(label)
        tp = counts[c, c]
        precision = _ratio(tp, counts[:, c].sum())
        recall = _ratio(tp, counts[c, :].sum())
        f1 = _ratio(2 * precision * recall, precision + recall)
        per_class[label] = ClassMetrics(precision, recall, f1)

    if average == "macro":
        weights = [1.0 / N_CLASSES] * N_CLASSES
    else:
        weights = [counts[int(label), :].sum() / total for label in Label]
    summary = ClassMetrics(
        precision=sum(w * per_class[label].precision for w, label in zip(weights, Label, strict=True)),
        recall=sum(w * per_class[label].recall for w, label in zip(weights, Label, strict=True)),
        f1=sum(w * per_class[label].f1 for w, label in zip(weights, Label, strict=True)),
    )
    return MetricsReport(per_class, summary, total, average)


def format_percent(value: float) -> str:
    """0.7534 -> '75.3'."""
    return f"{100.0 * value:.1f}"


# -- artifacts ---------------------------------------------------------

CSV_HEADER = ["class", "precision", "recall", "f1"]


def report_rows(report: MetricsReport) -> list[list[str]]:
    rows = [
        [label.name, repr(m.precision), repr(m.recall), repr(m.f1)]
        for label, m in report.per_class.items()
    ]
    rows.append([report.average, repr(report.macro.precision), repr(report.macro.recall), repr(report.macro.f1)])
    return rows


def write_report_csv(path: Path, report: MetricsReport) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(CSV_HEADER)
            writer.writerows(report_rows(report))
    except OSError as e:
        raise ArtifactIOError(f"cannot write metrics {path}: {e}", str(path)) from e


def read_report_csv(path: Path) -> dict[str, ClassMetrics]:
    """Rows keyed by their ``class`` column (HC, MCI, AD, macro or weighted)."""
    try:
        with path.open(newline="", encoding="utf-8") as fh:
            return {
                row["class"]: ClassMetrics(
                    float(row["precision"]), float(row["recall"]), float(row["f1"])
                )
                for row in csv.DictReader(fh)
            }
    except OSError as e:
        raise ArtifactIOError(f"cannot read metrics {path}: {e}", str(path)) from e


def render_heatmap_svg(cm: ConfusionMatrix, cell: int = 80) -> str:
    """Self-contained SVG: one shaded rect and one count label per cell."""
    margin = 70
    size = margin + N_CLASSES * cell + 10
    peak = max(1, int(cm.counts.max()))
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
        f'viewBox="0 0 {size} {size}" font-family="sans-serif" font-size="14">',
        f'<text x="{margin + N_CLASSES * cell / 2}" y="16" text-anchor="middle">predicted</text>',
        f'<text x="14" y="{margin + N_CLASSES * cell / 2}" text-anchor="middle" '
        f'transform="rotate(-90 14 {margin + N_CLASSES * cell / 2})">true</text>',
    ]
    for label in Label:
        offset = margin + int(label) * cell + cell / 2
        name = escape(label.name)
        parts.append(f'<text class="tick" x="{offset}" y="{margin - 10}" text-anchor="middle">{name}</text>')
        parts.append(f'<text class="tick" x="{margin - 10}" y="{offset + 5}" text-anchor="end">{name}</text>')
    for t in range(N_CLASSES):
        for p in range(N_CLASSES):
            count = int(cm.counts[t, p])
            shade = int(255 - 200 * count / peak)
            x, y = margin + p * cell, margin + t * cell
            colour = "white" if shade < 140 else "black"
            parts.append(
                f'<rect class="cell" x="{x}" y="{y}" width="{cell}" height="{cell}" '
                f'fill="rgb({shade},{shade},255)" stroke="white"/>'
            )
            parts.append(
                f'<text class="count" x="{x + cell / 2}" y="{y + cell / 2 + 5}" '
                f'text-anchor="middle" fill="{colour}">{count}</text>'
            )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


@dataclass(frozen=True)
class ReportPaths:
    csv: Path
    svg: Path


def emit_report(report: MetricsReport, cm: ConfusionMatrix, out_dir: Path) -> ReportPaths:
    """Write ``metrics.csv`` and ``confusion.svg`` into ``out_dir``."""
    paths = ReportPaths(out_dir / "metrics.csv", out_dir / "confusion.svg")
    write_report_csv(paths.csv, report)
    try:
        paths.svg.write_text(render_heatmap_svg(cm), encoding="utf-8")
    except OSError as e:
        raise ArtifactIOError(f"cannot write heatmap {paths.svg}: {e}", str(paths.svg)) from e
    logger.info(
        "report_written",
        directory=str(out_dir),
        macro_f1=report.macro.f1,
        n_examples=report.n_examples,
    )
    return paths


def render_table(systems: Sequence[tuple[str, MetricsReport]]) -> str:
    """Markdown comparison table with one-decimal percentages."""
    lines = [
        "| System | Precision(%) | Recall(%) | F1(%) |",
        "|---|---|---|---|",
    ]
    for name, report in systems:
        m = report.macro
        lines.append(
            f"| {name} | {format_percent(m.precision)} | {format_percent(m.recall)} | {format_percent(m.f1)} |"
        )
    return "\n".join(lines) + "\n"


def write_table(path: Path, systems: Sequence[tuple[str, MetricsReport]]) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(render_table(systems), encoding="utf-8")
    except OSError as e:
        raise ArtifactIOError(f"cannot write table {path}: {e}", str(path)) from e


def write_predictions_csv(
    path: Path,
    utterance_ids: Sequence[str],
    true_labels: Sequence[int],
    logits: np.ndarray,
) -> None:
    """Columns: utterance_id, true, pred, logit0..logit2."""
    if not (len(utterance_ids) == len(true_labels) == len(logits)):
        raise ContractViolation("prediction columns differ in length")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["utterance_id", "true", "pred", *(f"logit{i}" for i in range(N_CLASSES))])
            for uid, true, row in zip(utterance_ids, true_labels, logits, strict=True):
                writer.writerow(
                    [uid, Label(int(true)).name, Label(int(np.argmax(row))).name, *(repr(float(v)) for v in row)]
                )
    except OSError as e:
        raise ArtifactIOError(f"cannot write predictions {path}: {e}", str(path)) from e
