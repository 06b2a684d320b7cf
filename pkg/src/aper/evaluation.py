"""Incremental accuracy metrics.

Accuracies are kept as exact fractions of counts; floats are only a rendering.
"Old" classes at stage b are all classes of tasks 1..b-1 pooled together.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, Optional, Sequence

import numpy as np

from .exceptions import ProtocolError
from .stream import IncrementalStream

CSV_COLUMNS = ("stage", "n_seen_classes", "acc_overall", "acc_new", "acc_old", "n_test")
SUMMARY_COLUMNS = ("A_last", "A_avg")


@dataclass(frozen=True)
class MetricsRecord:
    stage: int
    n_seen_classes: int
    correct_new: int
    total_new: int
    correct_old: int
    total_old: int
    counts: dict  # class id -> (correct, total)

    @property
    def n_test(self) -> int:
        return self.total_new + self.total_old

    @property
    def accuracy(self) -> Fraction:
        return Fraction(self.correct_new + self.correct_old, self.n_test)

    @property
    def acc_new(self) -> Fraction:
        return Fraction(self.correct_new, self.total_new)

    @property
    def acc_old(self) -> Optional[Fraction]:
        return Fraction(self.correct_old, self.total_old) if self.total_old else None

    def as_row(self) -> dict:
        return {"stage": self.stage, "n_seen_classes": self.n_seen_classes,
                "acc_overall": repr(float(self.accuracy)), "acc_new": repr(float(self.acc_new)),
                "acc_old": "" if self.acc_old is None else repr(float(self.acc_old)),
                "n_test": self.n_test}


@dataclass(frozen=True)
class RunSummary:
    records: tuple
    A_last: Fraction
    A_avg: Fraction

    @property
    def B(self) -> int:
        return len(self.records)


def evaluate_stage(predict_fn: Callable[[np.ndarray], np.ndarray], stream: IncrementalStream,
                   b: int) -> MetricsRecord:
    """Exact accuracy of ``predict_fn`` on the cumulative test set after stage ``b``."""
    test = stream.cumulative_test_set(b)
    seen = stream.seen_classes(b)
    pred = np.asarray(predict_fn(test.X)).reshape(-1)
    if len(pred) != len(test):
        raise ProtocolError(f"{len(pred)} predictions for {len(test)} test examples")
    unknown = set(np.unique(pred).tolist()) - set(seen)
    if unknown:
        raise ProtocolError(f"predicted classes {sorted(unknown)} not seen by stage {b}")

    new = set(stream.task_label_spaces[b - 1])
    hit = pred == test.y
    counts, tallies = {}, {True: [0, 0], False: [0, 0]}
    for c in seen:
        mask = test.y == c
        correct, total = int(hit[mask].sum()), int(mask.sum())
        counts[c] = (correct, total)
        tallies[c in new][0] += correct
        tallies[c in new][1] += total
    return MetricsRecord(stage=b, n_seen_classes=len(seen),
                         correct_new=tallies[True][0], total_new=tallies[True][1],
                         correct_old=tallies[False][0], total_old=tallies[False][1],
                         counts=counts)


def summarize(records: Sequence[MetricsRecord]) -> RunSummary:
    stages = [r.stage for r in records]
    if not records or stages != list(range(1, len(records) + 1)):
        raise ProtocolError(f"records must cover stages 1..B contiguously, got {stages}")
    accs = [r.accuracy for r in records]
    return RunSummary(tuple(records), accs[-1], sum(accs, Fraction(0)) / len(accs))


def write_metrics_csv(records: Sequence[MetricsRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for r in records:
            writer.writerow(r.as_row())


def read_metrics_csv(path) -> list[dict]:
    """Parse a metrics file; ``acc_old`` is None on the first stage."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
            raise ValueError(f"unexpected columns {reader.fieldnames}")
        rows = []
        for row in reader:
            rows.append({"stage": int(row["stage"]), "n_seen_classes": int(row["n_seen_classes"]),
                         "acc_overall": float(row["acc_overall"]), "acc_new": float(row["acc_new"]),
                         "acc_old": float(row["acc_old"]) if row["acc_old"] else None,
                         "n_test": int(row["n_test"])})
    return rows


def summary_line(summary: RunSummary) -> str:
    return f"A_last={float(summary.A_last):.6f} A_avg={float(summary.A_avg):.6f}"


def write_summary_csv(summary: RunSummary, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SUMMARY_COLUMNS)
        writer.writerow([repr(float(summary.A_last)), repr(float(summary.A_avg))])
