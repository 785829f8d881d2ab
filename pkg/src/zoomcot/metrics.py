"""Contains-substring accuracy and aggregate reporting."""

from __future__ import annotations

import io
import csv as _csv
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from typing import Iterable, Mapping, Sequence


class EmptyAnswerList(ValueError):
    pass


def normalize_answer_text(text: str) -> str:
    """Case-fold and remove all whitespace.

    Whitespace is collapsed away entirely (not squeezed to single spaces)
    so spacing differences around currency signs, codes, and dates never
    split an otherwise-exact containment match.
    """
    return "".join(text.split()).casefold()


@dataclass(frozen=True)
class EvalResult:
    sample_id: str
    correct: bool
    matched_answer: str | None
    final_answer: str

    def __post_init__(self) -> None:
        if self.correct != (self.matched_answer is not None):
            raise ValueError("correct must hold exactly when matched_answer is set")


def contains_correct(
    response: str, answers: Sequence[str], sample_id: str = ""
) -> EvalResult:
    """A response is correct iff it contains some ground-truth answer.

    Both sides are normalized before the substring test; the match recorded
    is the first answer, in answer order, whose normalized form occurs in
    the normalized response.
    """
    if not answers:
        raise EmptyAnswerList("answers must be non-empty")
    norm_response = normalize_answer_text(response)
    for answer in answers:
        norm = normalize_answer_text(answer)
        if norm and norm in norm_response:
            return EvalResult(sample_id, True, answer, response)
    return EvalResult(sample_id, False, None, response)


def accuracy_percent(correct: int, total: int) -> float:
    """100 * correct / total, rounded half-up to 2 decimals."""
    pct = (Decimal(100 * correct) / Decimal(total)).quantize(
        Decimal("0.01"), rounding=ROUND_HALF_UP
    )
    return float(pct)


def _mean_2dp(values: Sequence[float]) -> float:
    mean = sum(Decimal(str(v)) for v in values) / Decimal(len(values))
    return float(mean.quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))


GroupKey = tuple[str, str]  # (strategy, dataset)


@dataclass(frozen=True)
class ReportRow:
    strategy: str
    dataset: str
    total: int
    correct: int
    accuracy: float | None  # None marks a declared-but-empty group

    @property
    def warning(self) -> bool:
        return self.accuracy is None


@dataclass(frozen=True)
class Report:
    """Per-(strategy, dataset) accuracies plus per-strategy macro averages."""

    rows: tuple[ReportRow, ...]
    averages: tuple[tuple[str, float], ...]

    def to_markdown(self) -> str:
        lines = [
            "| strategy | dataset | samples | correct | accuracy |",
            "| --- | --- | ---: | ---: | ---: |",
        ]
        for row in self.rows:
            acc = f"{row.accuracy:.2f}" if row.accuracy is not None else "(no results)"
            lines.append(
                f"| {row.strategy} | {row.dataset} | {row.total} | {row.correct} | {acc} |"
            )
        for strategy, avg in self.averages:
            lines.append(f"| {strategy} | average | | | {avg:.2f} |")
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = _csv.writer(buf, lineterminator="\n")
        writer.writerow(["strategy", "dataset", "samples", "correct", "accuracy"])
        for row in self.rows:
            acc = f"{row.accuracy:.2f}" if row.accuracy is not None else ""
            writer.writerow([row.strategy, row.dataset, row.total, row.correct, acc])
        for strategy, avg in self.averages:
            writer.writerow([strategy, "average", "", "", f"{avg:.2f}"])
        return buf.getvalue()


def report_from_counts(counts: Sequence[tuple[GroupKey, int, int]]) -> Report:
    """Build a report from ordered ((strategy, dataset), total, correct)
    triples; a zero total yields a warning row excluded from averages."""
    rows = []
    by_strategy: dict[str, list[float]] = {}
    strategy_order: list[str] = []
    for (strategy, dataset), total, correct in counts:
        accuracy = accuracy_percent(correct, total) if total else None
        rows.append(ReportRow(strategy, dataset, total, correct, accuracy))
        if strategy not in by_strategy:
            by_strategy[strategy] = []
            strategy_order.append(strategy)
        if accuracy is not None:
            by_strategy[strategy].append(accuracy)
    averages = tuple(
        (s, _mean_2dp(by_strategy[s])) for s in strategy_order if by_strategy[s]
    )
    return Report(rows=tuple(rows), averages=averages)


def aggregate(
    results: Iterable[EvalResult],
    grouping: Mapping[str, GroupKey],
    declared_groups: Sequence[GroupKey] | None = None,
) -> Report:
    """Fold results into a report; declared empty groups get warning rows.

    Results are sorted by sample id before folding, so shards evaluated
    concurrently aggregate deterministically. Row order follows
    declared_groups when given, otherwise first appearance.
    """
    counts: dict[GroupKey, list[int]] = {}
    order: list[GroupKey] = list(declared_groups or [])
    for key in order:
        counts.setdefault(key, [0, 0])
    for result in sorted(results, key=lambda r: r.sample_id):
        key = grouping[result.sample_id]
        if key not in counts:
            counts[key] = [0, 0]
            order.append(key)
        counts[key][0] += 1
        counts[key][1] += int(result.correct)
    return report_from_counts([(key, counts[key][0], counts[key][1]) for key in order])
