"""MAP and NDCG_p with multi-run aggregation and report emission.

Conventions: average precision is binary (a label is relevant when it is
nonzero after thresholding); NDCG uses gain 2^rel - 1 with a log2(i + 1)
position discount, normalized by the descending-label ideal ordering. With
binary labels the gain reduces to rel, so the convention only matters for
graded data. Results are reported both as metrics and as error rates
(1 - metric), the latter matching how retrieval quality is usually quoted.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .numerics import Array

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("map", "ndcg3", "ndcg5")


class UndefinedMetricError(ValueError):
    """Raised for rankings with no positive label."""


def average_precision(ranked_labels) -> float:
    """Mean of precision taken at each relevant hit.

    ``ranked_labels`` is binary relevance in rank order (first element is the
    top result). Raises ``UndefinedMetricError`` without any positive.
    """
    r = np.asarray(ranked_labels, dtype=np.float64)
    hits = np.flatnonzero(r > 0)
    if hits.size == 0:
        raise UndefinedMetricError("average precision needs at least one positive label")
    precisions = np.cumsum(r > 0)[hits] / (hits + 1.0)
    return float(precisions.mean())


def ndcg(ranked_labels, p: int) -> float:
    """NDCG at cutoff ``p`` for graded labels in rank order."""
    if p < 1:
        raise ValueError(f"cutoff must be >= 1, got {p}")
    r = np.asarray(ranked_labels, dtype=np.float64)
    if not np.any(r > 0):
        raise UndefinedMetricError("NDCG needs at least one positive label")
    ideal = np.sort(r)[::-1]
    dcg = _dcg(r[:p])
    idcg = _dcg(ideal[:p])
    return float(dcg / idcg)


def _dcg(labels: Array) -> float:
    gains = 2.0 ** labels - 1.0
    discounts = np.log2(np.arange(2, labels.size + 2))
    return float(np.sum(gains / discounts))


def aggregate_runs(values):
    """Sample mean and sd (n-1 denominator) over per-run values.

    A single run has no spread: sd comes back as None, never a fake 0.
    """
    vals = np.asarray(list(values), dtype=np.float64)
    if vals.size == 0:
        raise ValueError("no runs to aggregate")
    mean = float(vals.mean())
    sd = float(vals.std(ddof=1)) if vals.size >= 2 else None
    return mean, sd


# ----------------------------------------------------------------------
# per-dataset evaluation and reporting
# ----------------------------------------------------------------------

def ranked_label_sequence(labels, order) -> list:
    labels = list(labels)
    return [labels[i] for i in order]


def evaluate_rankings(label_rows, orders, *, threshold: int = 1, cutoffs=(3, 5)):
    """Per-query metrics for one run.

    ``label_rows[i]`` are episode i's graded labels, ``orders[i]`` the emitted
    ranking (candidate positions). Labels binarize at ``threshold`` for every
    metric; pass ``threshold=None`` to keep graded gains in NDCG. Queries
    with no positive after thresholding are skipped with a count (protocol
    datasets never produce them).
    """
    per_query = {"map": []}
    for p in cutoffs:
        per_query[f"ndcg{p}"] = []
    skipped = 0
    for labels, order in zip(label_rows, orders):
        ranked = np.asarray(ranked_label_sequence(labels, order), dtype=np.float64)
        binary = ranked if threshold is None else (ranked >= threshold).astype(np.float64)
        if not np.any(binary > 0):
            skipped += 1
            continue
        per_query["map"].append(average_precision(binary))
        for p in cutoffs:
            per_query[f"ndcg{p}"].append(ndcg(binary, p))
    if skipped:
        log.warning("skipped %d queries with no positive label at threshold %r",
                    skipped, threshold)
    return RunResult(per_query={k: np.asarray(v) for k, v in per_query.items()},
                     skipped=skipped)


@dataclass
class RunResult:
    """One run's per-query metric values."""

    per_query: dict
    skipped: int = 0

    def mean(self, name: str) -> float:
        return float(self.per_query[name].mean())

    def means(self) -> dict:
        return {k: self.mean(k) for k in self.per_query}


@dataclass
class MetricReport:
    """Mean/sd over runs for each metric, with the error-rate convention."""

    metrics: dict                  # name -> {"mean", "sd", "error", "error_sd"}
    runs: int
    per_query: dict = field(default_factory=dict)   # name -> per-run list of arrays

    @classmethod
    def from_runs(cls, run_results) -> "MetricReport":
        runs = list(run_results)
        if not runs:
            raise ValueError("no runs to report")
        names = list(runs[0].per_query)
        metrics = {}
        per_query = {}
        for name in names:
            means = [r.mean(name) for r in runs]
            mean, sd = aggregate_runs(means)
            metrics[name] = {
                "mean": mean,
                "sd": sd,
                "error": 1.0 - mean,
                "error_sd": sd,
            }
            per_query[name] = [r.per_query[name] for r in runs]
        return cls(metrics=metrics, runs=len(runs), per_query=per_query)

    def error(self, name: str) -> float:
        return self.metrics[name]["error"]

    def to_json(self, extra=None) -> str:
        doc = {
            "runs": self.runs,
            "metrics": {
                name: {
                    "mean": vals["mean"],
                    "sd": vals["sd"],
                    "error": vals["error"],
                    "error_sd": vals["error_sd"],
                }
                for name, vals in self.metrics.items()
            },
        }
        if extra:
            doc.update(extra)
        return json.dumps(doc, sort_keys=True, separators=(",", ":"))

    def render_table(self) -> str:
        """Aligned error-rate table, columns MAP / NDCG3 / NDCG5, percent."""
        cols = [c for c in METRIC_COLUMNS if c in self.metrics]
        head = ["error"] + [c.upper() for c in cols]
        row = ["mean"] + [f"{self.metrics[c]['error'] * 100:.2f}%" for c in cols]
        lines = [head, row]
        if self.runs >= 2:
            lines.append(
                ["sd."] + [f"({self.metrics[c]['error_sd'] * 100:.2f}%)" for c in cols]
            )
        widths = [max(len(line[i]) for line in lines) for i in range(len(head))]
        return "\n".join(
            "  ".join(cell.rjust(widths[i]) for i, cell in enumerate(line))
            for line in lines
        )
