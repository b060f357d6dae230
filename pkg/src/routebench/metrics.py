"""Binary hallucination metrics and the composite average.

Covers three report shapes consumed from external benchmark outcome files:
yes/no object-presence questions scored as a confusion matrix (accuracy,
precision, recall, F1 with "yes" as the positive class), scenario-tagged
accuracy aggregation over synthetic and real-world items, and the composite
average of an F1 score with an overall accuracy.  All values are percentages
in [0, 100], kept at full precision internally; rounding is a display
concern.

Wire formats, one JSON object per line: ``{"pred": "yes"|"no", "label":
"yes"|"no"}`` for binary outcomes and ``{"scenario": "synthetic"|"real",
"correct": bool}`` for scenario results.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .benchmark import DatasetError

YES = "yes"
NO = "no"
SCENARIOS = ("synthetic", "real")


@dataclass(frozen=True)
class BinaryOutcome:
    pred: str
    label: str

    def __post_init__(self):
        for field_name, value in (("pred", self.pred), ("label", self.label)):
            if value not in (YES, NO):
                raise ValueError(f"{field_name} must be 'yes' or 'no', got {value!r}")


@dataclass(frozen=True)
class MetricsRow:
    """Percentages in [0, 100]; ``degenerate`` lists metrics that were 0/0."""

    accuracy: float
    precision: float
    recall: float
    f1: float
    degenerate: tuple = ()

    def __post_init__(self):
        for name in ("accuracy", "precision", "recall", "f1"):
            value = getattr(self, name)
            if not 0.0 <= value <= 100.0:
                raise ValueError(f"{name} must be in [0, 100], got {value}")
        unknown = set(self.degenerate) - {"precision", "recall", "f1"}
        if unknown:
            raise ValueError(f"unknown degenerate flags: {sorted(unknown)}")
        object.__setattr__(self, "degenerate", tuple(self.degenerate))

    def to_json_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "degenerate": list(self.degenerate),
        }


def confusion_counts(outcomes) -> tuple:
    """(tp, fp, fn, tn) with "yes" as the positive class."""
    tp = fp = fn = tn = 0
    for outcome in outcomes:
        if outcome.pred == YES:
            if outcome.label == YES:
                tp += 1
            else:
                fp += 1
        elif outcome.label == YES:
            fn += 1
        else:
            tn += 1
    return tp, fp, fn, tn


def pope_metrics(outcomes) -> MetricsRow:
    """Confusion-matrix metrics over yes/no outcomes, as percentages."""
    items = list(outcomes)
    if not items:
        raise ValueError("pope_metrics needs at least one outcome")
    tp, fp, fn, tn = confusion_counts(items)
    accuracy = 100.0 * (tp + tn) / len(items)
    degenerate = []
    if tp + fp > 0:
        precision = 100.0 * tp / (tp + fp)
    else:
        precision = 0.0
        degenerate.append("precision")
    if tp + fn > 0:
        recall = 100.0 * tp / (tp + fn)
    else:
        recall = 0.0
        degenerate.append("recall")
    if precision + recall > 0:
        f1 = 2.0 * precision * recall / (precision + recall)
    else:
        f1 = 0.0
        degenerate.append("f1")
    return MetricsRow(
        accuracy=accuracy,
        precision=precision,
        recall=recall,
        f1=f1,
        degenerate=tuple(degenerate),
    )


def autohallusion_aggregate(results, scenario_mean: bool = False) -> dict:
    """Accuracy per scenario plus overall, as percentages.

    ``results`` holds (scenario, correct) pairs with scenario "synthetic" or
    "real".  Overall is item-weighted by default; ``scenario_mean`` averages
    the per-scenario accuracies instead.  An empty scenario is reported as
    None and excluded from the scenario mean.
    """
    items = list(results)
    if not items:
        raise ValueError("autohallusion_aggregate needs at least one result")
    per_scenario = {}
    for scenario in SCENARIOS:
        sub = [correct for s, correct in items if s == scenario]
        per_scenario[scenario] = 100.0 * sum(sub) / len(sub) if sub else None
    known = sum(1 for s, _ in items if s in SCENARIOS)
    if known != len(items):
        bad = next(s for s, _ in items if s not in SCENARIOS)
        raise ValueError(f"unknown scenario {bad!r}; expected 'synthetic' or 'real'")
    if scenario_mean:
        present = [v for v in per_scenario.values() if v is not None]
        overall = sum(present) / len(present)
    else:
        overall = 100.0 * sum(correct for _, correct in items) / len(items)
    return {
        "overall": overall,
        "synthetic": per_scenario["synthetic"],
        "real": per_scenario["real"],
    }


def avg_metric(pope_f1: float, autohallusion_overall: float) -> float:
    """Arithmetic mean of an F1 percentage and an overall-accuracy percentage."""
    for name, value in (("pope_f1", pope_f1), ("autohallusion_overall", autohallusion_overall)):
        if not 0.0 <= value <= 100.0:
            raise ValueError(f"{name} must be in [0, 100], got {value}")
    return (pope_f1 + autohallusion_overall) / 2.0


def loads_binary_outcomes(text: str) -> list:
    outcomes = []
    for line_num, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            doc = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DatasetError(f"line {line_num}: invalid JSON: {exc}") from exc
        try:
            outcomes.append(BinaryOutcome(pred=doc["pred"], label=doc["label"]))
        except (KeyError, TypeError, ValueError) as exc:
            message = f"missing field {exc}" if isinstance(exc, KeyError) else str(exc)
            raise DatasetError(f"line {line_num}: {message}") from exc
    if not outcomes:
        raise DatasetError("outcome file contains no entries")
    return outcomes


def load_binary_outcomes(path) -> list:
    return loads_binary_outcomes(Path(path).read_text(encoding="utf-8"))


def loads_scenario_results(text: str) -> list:
    results = []
    for line_num, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            doc = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DatasetError(f"line {line_num}: invalid JSON: {exc}") from exc
        try:
            scenario = doc["scenario"]
            correct = doc["correct"]
        except KeyError as exc:
            raise DatasetError(f"line {line_num}: missing field {exc}") from exc
        if scenario not in SCENARIOS:
            raise DatasetError(
                f"line {line_num}: unknown scenario {scenario!r}; "
                "expected 'synthetic' or 'real'"
            )
        if not isinstance(correct, bool):
            raise DatasetError(f"line {line_num}: 'correct' must be a boolean")
        results.append((scenario, correct))
    if not results:
        raise DatasetError("scenario file contains no entries")
    return results


def load_scenario_results(path) -> list:
    return loads_scenario_results(Path(path).read_text(encoding="utf-8"))
