"""AUROC evaluation under the distribution-shift and error-detection protocols.

All detection scores arrive oriented "higher = in-distribution"; the
OOD-ness statistic the AUC is defined over is the negated score. AUC is
the rank-based Mann-Whitney estimate with midrank tie handling, i.e.
P(ood statistic > id statistic) + 0.5 P(equal).

Settings:
    dsd             any OOD record vs any ID record, predictions ignored
    ed_indist       misclassified ID vs correctly classified ID
    ed_corruption   misclassified OOD vs correctly classified ID
    ed_adversarial  successfully attacked records vs their own originals

Reports aggregate per shift type with unweighted dataset means, then
average the shift-type means (not the datasets) into the overall figure.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Callable, Mapping, Union

import numpy as np
from scipy.stats import rankdata

from .errors import EvaluationError
from .ingest import DatasetBundle, link_counterparts, restrict_by_labels, take

SETTINGS = ("dsd", "ed_indist", "ed_adversarial", "ed_corruption")

CSV_HEADER = ("setting", "shift_type", "dataset", "scorer", "auc", "n_id", "n_ood")

ScoreFn = Callable[[DatasetBundle], np.ndarray]


@dataclass(frozen=True)
class EvalTask:
    setting: str
    id_source: str
    ood_source: str | None
    scorer: str

    def __post_init__(self):
        if self.setting not in SETTINGS:
            raise ValueError(f"unknown setting {self.setting!r}")
        if self.setting != "ed_indist" and self.ood_source is None:
            raise ValueError(f"{self.setting} requires an ood_source")


@dataclass(frozen=True)
class EvalOutcome:
    """AUC plus the per-side score arrays (kept for distribution dumps)."""

    auc: float
    id_scores: np.ndarray
    ood_scores: np.ndarray

    @property
    def n_id(self) -> int:
        return int(self.id_scores.size)

    @property
    def n_ood(self) -> int:
        return int(self.ood_scores.size)


@dataclass(frozen=True)
class TaskResult:
    setting: str
    shift_type: str
    dataset: str
    scorer: str
    auc: float
    n_id: int
    n_ood: int


@dataclass(frozen=True)
class EvalReport:
    tasks: tuple[TaskResult, ...]
    averages: dict
    accuracy: dict = field(default_factory=dict)
    timing: dict = field(default_factory=dict)


def auroc(id_scores, ood_scores) -> float:
    """Mann-Whitney AUC with midrank ties; inputs oriented higher = ID."""
    id_scores = np.asarray(id_scores, dtype=np.float64).ravel()
    ood_scores = np.asarray(ood_scores, dtype=np.float64).ravel()
    if id_scores.size == 0:
        raise EvaluationError("auroc: empty in-distribution side")
    if ood_scores.size == 0:
        raise EvaluationError("auroc: empty out-of-distribution side")
    detection = np.concatenate([-ood_scores, -id_scores])
    ranks = rankdata(detection)
    m = ood_scores.size
    u = ranks[:m].sum() - m * (m + 1) / 2.0
    return float(u / (m * id_scores.size))


def _resolve(scorer: Union[str, ScoreFn], stats, temperature: float) -> ScoreFn:
    if callable(scorer):
        return scorer
    from .scores import score_bundle  # local import keeps this module score-agnostic

    name = str(scorer)
    if stats is None:
        raise ValueError(f"scorer {name!r} given by name requires fitted stats")
    return lambda bundle: score_bundle(bundle, stats, [name], temperature)[:, 0]


def _require_labels(bundle: DatasetBundle, side: str) -> None:
    if (bundle.labels < 0).any():
        raise EvaluationError(
            f"{bundle.dataset_id}: error detection touches records without "
            f"ground truth on the {side} side"
        )


def evaluate_dsd(
    id_bundle: DatasetBundle,
    ood_bundle: DatasetBundle,
    scorer: Union[str, ScoreFn],
    stats=None,
    temperature: float = 1.0,
) -> EvalOutcome:
    """Distribution shift detection: all OOD records against all ID records.

    For multi-label OOD sets carrying a label restriction, the ID side is
    first restricted to the matching classes.
    """
    fn = _resolve(scorer, stats, temperature)
    restriction = ood_bundle.manifest.label_restriction
    if ood_bundle.shift_type == "multi_label" and restriction:
        id_bundle = restrict_by_labels(id_bundle, restriction)
        if len(id_bundle) == 0:
            raise EvaluationError(
                f"{ood_bundle.dataset_id}: label restriction left the ID side empty"
            )
    id_scores = fn(id_bundle)
    ood_scores = fn(ood_bundle)
    return EvalOutcome(auroc(id_scores, ood_scores), id_scores, ood_scores)


def evaluate_ed(
    task: EvalTask,
    bundles: Mapping[str, DatasetBundle],
    scorer: Union[str, ScoreFn],
    stats=None,
    temperature: float = 1.0,
) -> EvalOutcome:
    """Error detection under the three ED settings.

    ed_indist: positives are misclassified ID records. ed_corruption:
    positives are misclassified OOD records, negatives correctly
    classified ID records. ed_adversarial: only pairs flagged as
    successful attacks participate, attacked records against their own
    originals.
    """
    fn = _resolve(scorer, stats, temperature)
    if task.setting == "ed_indist":
        bundle = bundles[task.id_source]
        _require_labels(bundle, "in-distribution")
        scores = fn(bundle)
        correct = bundle.predictions == bundle.labels
        if not (~correct).any():
            raise EvaluationError(
                f"{bundle.dataset_id}: no misclassified samples (empty positive side)"
            )
        if not correct.any():
            raise EvaluationError(
                f"{bundle.dataset_id}: no correctly classified samples (empty negative side)"
            )
        id_scores, ood_scores = scores[correct], scores[~correct]
        return EvalOutcome(auroc(id_scores, ood_scores), id_scores, ood_scores)

    if task.setting == "ed_corruption":
        id_bundle = bundles[task.id_source]
        ood_bundle = bundles[task.ood_source]
        _require_labels(id_bundle, "in-distribution")
        _require_labels(ood_bundle, "corrupted")
        id_correct = id_bundle.predictions == id_bundle.labels
        ood_wrong = ood_bundle.predictions != ood_bundle.labels
        if not id_correct.any():
            raise EvaluationError(
                f"{id_bundle.dataset_id}: no correctly classified ID samples"
            )
        if not ood_wrong.any():
            raise EvaluationError(
                f"{ood_bundle.dataset_id}: no misclassified corrupted samples"
            )
        id_scores = fn(take(id_bundle, np.flatnonzero(id_correct)))
        ood_scores = fn(take(ood_bundle, np.flatnonzero(ood_wrong)))
        return EvalOutcome(auroc(id_scores, ood_scores), id_scores, ood_scores)

    if task.setting == "ed_adversarial":
        ood_bundle = bundles[task.ood_source]
        origin = ood_bundle.manifest.origin_dataset_id
        if task.id_source != origin:
            raise EvaluationError(
                f"{ood_bundle.dataset_id}: id_source {task.id_source!r} is not the "
                f"origin dataset {origin!r}"
            )
        clean_bundle = bundles[task.id_source]
        _require_labels(clean_bundle, "clean")
        pairs = link_counterparts(ood_bundle, clean_bundle)
        flagged = np.flatnonzero(pairs.successful_attack)
        if flagged.size == 0:
            raise EvaluationError(
                f"{ood_bundle.dataset_id}: no successful attacks to evaluate"
            )
        ood_scores = fn(take(ood_bundle, flagged))
        id_scores = fn(take(clean_bundle, pairs.clean_indices[flagged]))
        return EvalOutcome(auroc(id_scores, ood_scores), id_scores, ood_scores)

    raise ValueError(f"evaluate_ed cannot handle setting {task.setting!r}")


def compute_accuracy(bundle: DatasetBundle) -> float | None:
    """Fraction of correct predictions over labeled records; None if unlabeled."""
    labeled = bundle.labels >= 0
    if not labeled.any():
        return None
    return float((bundle.predictions[labeled] == bundle.labels[labeled]).mean())


def _group_mean(rows: list[TaskResult], key) -> dict[str, float]:
    groups: dict[str, list[float]] = {}
    for row in rows:
        groups.setdefault(key(row), []).append(row.auc)
    return {k: float(np.mean(v)) for k, v in sorted(groups.items())}


def aggregate_report(
    results,
    accuracy: dict | None = None,
    timing: dict | None = None,
) -> EvalReport:
    """Per-scorer shift-type means and the mean-of-type-means overall figure.

    DSD tasks group by the OOD dataset's shift type; ED tasks group by
    their setting. The overall value averages the group means, so shift
    types with many datasets do not dominate.
    """
    results = tuple(results)
    averages: dict[str, dict] = {}
    for scorer in sorted({r.scorer for r in results}):
        dsd_rows = [r for r in results if r.scorer == scorer and r.setting == "dsd"]
        ed_rows = [r for r in results if r.scorer == scorer and r.setting != "dsd"]
        entry: dict = {}
        if dsd_rows:
            per_type = _group_mean(dsd_rows, lambda r: r.shift_type)
            entry["dsd_per_shift_type"] = per_type
            entry["dsd_overall"] = float(np.mean(list(per_type.values())))
        if ed_rows:
            per_setting = _group_mean(ed_rows, lambda r: r.setting)
            entry["ed_per_setting"] = per_setting
            entry["ed_overall"] = float(np.mean(list(per_setting.values())))
        averages[scorer] = entry
    return EvalReport(
        tasks=results,
        averages=averages,
        accuracy=dict(sorted((accuracy or {}).items())),
        timing=dict(sorted((timing or {}).items())),
    )


def _task_sort_key(row: TaskResult):
    return (row.setting, row.shift_type, row.dataset, row.scorer)


def emit_report(report: EvalReport, format: str = "json") -> bytes:
    """Serialize a report with deterministic row and key ordering."""
    if format == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for row in sorted(report.tasks, key=_task_sort_key):
            writer.writerow(
                [row.setting, row.shift_type, row.dataset, row.scorer,
                 repr(row.auc), row.n_id, row.n_ood]
            )
        return buf.getvalue().encode("utf-8")
    if format == "json":
        payload = {
            "tasks": [
                {
                    "setting": r.setting,
                    "shift_type": r.shift_type,
                    "dataset": r.dataset,
                    "scorer": r.scorer,
                    "auc": r.auc,
                    "n_id": r.n_id,
                    "n_ood": r.n_ood,
                }
                for r in sorted(report.tasks, key=_task_sort_key)
            ],
            "averages": report.averages,
            "accuracy": report.accuracy,
            "timing": report.timing,
        }
        return (json.dumps(payload, indent=2, sort_keys=True) + "\n").encode("utf-8")
    raise ValueError(f"unknown report format {format!r}")


def read_report(data: bytes, format: str = "json") -> EvalReport:
    """Inverse of emit_report. CSV carries tasks only; JSON the full report."""
    if format == "csv":
        reader = csv.reader(io.StringIO(data.decode("utf-8")))
        header = next(reader)
        if tuple(header) != CSV_HEADER:
            raise EvaluationError(f"unexpected CSV header: {header}")
        tasks = tuple(
            TaskResult(
                setting=row[0],
                shift_type=row[1],
                dataset=row[2],
                scorer=row[3],
                auc=float(row[4]),
                n_id=int(row[5]),
                n_ood=int(row[6]),
            )
            for row in reader
        )
        return aggregate_report(tasks)
    if format == "json":
        payload = json.loads(data.decode("utf-8"))
        tasks = tuple(TaskResult(**t) for t in payload["tasks"])
        return EvalReport(
            tasks=tasks,
            averages=payload["averages"],
            accuracy=payload.get("accuracy", {}),
            timing=payload.get("timing", {}),
        )
    raise ValueError(f"unknown report format {format!r}")
