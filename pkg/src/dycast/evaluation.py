"""Scoring discovered graphs against ground truth: precision, recall, F1 and delay accuracy."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Sequence

from .graph import CausalGraph
from .pipeline import run_pipeline

__all__ = [
    "EvaluationError",
    "EvalReport",
    "precision_recall_f1",
    "delay_estimation_accuracy",
    "score_graph",
    "format_table",
    "evaluate_run",
]

REPORT_FORMAT = "dycast-eval-report"
REPORT_VERSION = 1

Pair = tuple[str, str]


class EvaluationError(ValueError):
    """Predicted and true graphs are not comparable."""


def _f1(p: float, r: float) -> float:
    return 2 * p * r / (p + r) if p + r > 0 else 0.0


def precision_recall_f1(predicted: CausalGraph, truth: CausalGraph, strict_delay: bool = False):
    """Edge-level scores; an edge matches when cause and effect coincide.

    With ``strict_delay`` a match additionally needs the delays to differ by at
    most one step. Returns ``(P, R, F1, tp, fp, fn)`` with sorted pair lists.
    Precision is 1 when nothing is predicted; recall is 1 when the truth is empty.
    """
    if sorted(predicted.nodes) != sorted(truth.nodes):
        raise EvaluationError(
            f"node sets differ: predicted {sorted(predicted.nodes)} vs truth {sorted(truth.nodes)}"
        )
    pred, true = predicted.pairs(), truth.pairs()
    hits = pred & true
    if strict_delay:
        hits = {pq for pq in hits if abs(predicted.edge(*pq).delay - truth.edge(*pq).delay) <= 1}
    tp = sorted(hits)
    fp = sorted(pred - hits)
    fn = sorted(true - hits)
    p = len(tp) / len(pred) if pred else 1.0
    r = len(tp) / len(true) if true else 1.0
    return p, r, _f1(p, r), tp, fp, fn


def delay_estimation_accuracy(predicted: Sequence[int], true: Sequence[int]) -> float | None:
    """``1 - mean |d_hat - d|`` over matched edges; ``None`` when there are none.

    Not clamped: gross delay errors drive the value below zero.
    """
    if len(predicted) != len(true):
        raise EvaluationError("delay lists must have equal length")
    if not predicted:
        return None
    return 1.0 - sum(abs(int(a) - int(b)) for a, b in zip(predicted, true)) / len(predicted)


@dataclass
class EvalReport:
    precision: float
    recall: float
    f1: float
    dea: float | None
    tp: list[Pair]
    fp: list[Pair]
    fn: list[Pair]
    delays: list[tuple[Pair, int, int]] = field(default_factory=list)  # (edge, true, predicted)
    truth_empty: bool = False
    meta: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {
            "format": REPORT_FORMAT,
            "version": REPORT_VERSION,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "dea": self.dea,
            "tp": [list(e) for e in self.tp],
            "fp": [list(e) for e in self.fp],
            "fn": [list(e) for e in self.fn],
            "delays": [{"cause": e[0], "effect": e[1], "true": t, "predicted": p} for e, t, p in self.delays],
            "truth_empty": self.truth_empty,
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "EvalReport":
        if d.get("format") != REPORT_FORMAT or d.get("version") != REPORT_VERSION:
            raise EvaluationError("not a version-1 evaluation report")
        return cls(
            precision=float(d["precision"]),
            recall=float(d["recall"]),
            f1=float(d["f1"]),
            dea=None if d["dea"] is None else float(d["dea"]),
            tp=[tuple(e) for e in d["tp"]],
            fp=[tuple(e) for e in d["fp"]],
            fn=[tuple(e) for e in d["fn"]],
            delays=[((x["cause"], x["effect"]), int(x["true"]), int(x["predicted"])) for x in d["delays"]],
            truth_empty=bool(d["truth_empty"]),
            meta=dict(d.get("meta", {})),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls.from_dict(json.loads(text))


def score_graph(predicted: CausalGraph, truth: CausalGraph, strict_delay: bool = False) -> EvalReport:
    p, r, f1, tp, fp, fn = precision_recall_f1(predicted, truth, strict_delay)
    delays = [(e, truth.edge(*e).delay, predicted.edge(*e).delay) for e in tp]
    dea = delay_estimation_accuracy([d for _, _, d in delays], [t for _, t, _ in delays])
    return EvalReport(p, r, f1, dea, tp, fp, fn, delays, truth_empty=not truth.edges)


def format_table(rows: Sequence[tuple[str, EvalReport]]) -> str:
    """Plain-text table with one row per labelled report."""
    head = f"{'run':<16} {'F1':>6} {'Recall':>7} {'Precision':>9} {'DEA':>7}"
    lines = [head, "-" * len(head)]
    for label, rep in rows:
        dea = "n/a" if rep.dea is None else f"{rep.dea:.3f}"
        lines.append(f"{label:<16} {rep.f1:>6.3f} {rep.recall:>7.3f} {rep.precision:>9.3f} {dea:>7}")
    return "\n".join(lines) + "\n"


def evaluate_run(dataset, config, jobs: int = 1, strict_delay: bool = False) -> EvalReport:
    """Train, discover and score against ``dataset.truth``."""
    if dataset.truth is None:
        raise EvaluationError("dataset carries no ground-truth graph")
    result = run_pipeline(dataset, config, jobs)
    report = score_graph(result.graph, dataset.truth, strict_delay)
    report.meta = {"seed": config.seed, "profile": config.profile, "fold": config.fold}
    return report
