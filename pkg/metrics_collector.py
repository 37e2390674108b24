"""
Classification metrics and cross-validation reports.

An EvalReport is the machine-readable record of one (dataset, pipeline, seed)
cell; MetricsCollector writes reports to a report directory as pretty,
key-sorted JSON and reads them back.
"""

import os
import json
import logging
from dataclasses import dataclass, field, asdict
from typing import Dict, List, Optional, Sequence

import numpy as np

logger = logging.getLogger('dcnnfrf.eval')

REPORT_FORMAT = 'dcnnfrf-report/1'


class EvaluationError(ValueError):
    """Base class for metric and experiment failures."""


class LengthMismatch(EvaluationError):
    pass


class LabelOutOfRange(EvaluationError):
    pass


def _paired_labels(predicted: Sequence[int], truth: Sequence[int]):
    predicted = np.asarray(predicted, dtype=np.int64).ravel()
    truth = np.asarray(truth, dtype=np.int64).ravel()
    if predicted.size != truth.size:
        raise LengthMismatch(f"{predicted.size} predictions for {truth.size} true labels")
    if truth.size == 0:
        raise LengthMismatch("no labels to score")
    return predicted, truth


def accuracy(predicted: Sequence[int], truth: Sequence[int]) -> float:
    """Fraction of positions where prediction equals truth."""
    predicted, truth = _paired_labels(predicted, truth)
    return float(np.mean(predicted == truth))


def confusion_matrix(predicted: Sequence[int], truth: Sequence[int], n_classes: int) -> np.ndarray:
    """Counts indexed [true class, predicted class]."""
    predicted, truth = _paired_labels(predicted, truth)
    for name, values in (('predicted', predicted), ('true', truth)):
        if values.min() < 0 or values.max() >= n_classes:
            raise LabelOutOfRange(f"{name} label outside [0, {n_classes})")
    matrix = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(matrix, (truth, predicted), 1)
    return matrix


@dataclass
class EvalReport:
    dataset: str
    pipeline: str
    seed: int
    folds: int
    per_fold_accuracy: List[float]
    fold_sizes: List[int]
    mean_accuracy: float
    train_time_seconds: float
    confusion: List[List[int]]
    class_names: List[str]
    config_fingerprint: str
    n_instances: int
    n_attributes: int
    random_features: Optional[int] = None
    oob_error: Optional[float] = None
    per_fold_time: List[float] = field(default_factory=list)
    per_fold_oob: List[Optional[float]] = field(default_factory=list)
    failed_folds: List[int] = field(default_factory=list)
    learning_rates: List[List[float]] = field(default_factory=list)
    notes: List[str] = field(default_factory=list)

    @property
    def cell_name(self) -> str:
        return f"{self.dataset}__{self.pipeline.replace('+', '-')}__seed{self.seed}"

    @property
    def completed(self) -> bool:
        return len(self.failed_folds) < self.folds

    def pooled_accuracy(self) -> float:
        """Correct predictions over all scored test rows, read off the confusion matrix."""
        matrix = np.asarray(self.confusion, dtype=np.int64)
        total = matrix.sum()
        return float(np.trace(matrix) / total) if total else float('nan')

    def to_dict(self, include_timings: bool = False) -> Dict:
        """Report as a JSON-ready dict; wall-clock fields only when ``include_timings``."""
        data = asdict(self)
        if not include_timings:
            data.pop('train_time_seconds')
            data.pop('per_fold_time')
        data['format'] = REPORT_FORMAT
        return data

    @classmethod
    def from_dict(cls, data: Dict) -> 'EvalReport':
        data = dict(data)
        if data.pop('format', REPORT_FORMAT) != REPORT_FORMAT:
            raise EvaluationError("unsupported report format")
        data.setdefault('train_time_seconds', float('nan'))
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise EvaluationError(f"unknown report fields: {', '.join(sorted(unknown))}")
        return cls(**data)


def weighted_mean_accuracy(per_fold_accuracy: Sequence[float], fold_sizes: Sequence[int]) -> float:
    """Instance-weighted mean of per-fold accuracies."""
    acc = np.asarray(per_fold_accuracy, dtype=np.float64)
    sizes = np.asarray(fold_sizes, dtype=np.float64)
    if acc.size == 0 or sizes.sum() == 0:
        return float('nan')
    return float(np.dot(acc, sizes) / sizes.sum())


class MetricsCollector:
    """Keeps the reports of one experiment run and persists them under ``report_dir``."""

    def __init__(self, report_dir: str):
        self.report_dir = report_dir
        self.reports: List[EvalReport] = []
        self.timings: Dict[str, Dict] = {}
        os.makedirs(os.path.join(report_dir, 'cells'), exist_ok=True)

    def report_path(self, report: EvalReport) -> str:
        return os.path.join(self.report_dir, 'cells', f"{report.cell_name}.json")

    def add_report(self, report: EvalReport) -> str:
        """Record a report and write it to disk; returns the file path."""
        self.reports.append(report)
        self.timings[report.cell_name] = {
            'train_time_seconds': report.train_time_seconds,
            'per_fold_time': list(report.per_fold_time),
        }
        path = self.report_path(report)
        save_report(report, path)
        logger.info(f"📊 {report.dataset} / {report.pipeline}: mean accuracy {report.mean_accuracy:.4f} "
                    f"over {report.folds - len(report.failed_folds)} folds")
        return path

    def save_timings(self) -> str:
        path = os.path.join(self.report_dir, 'timings.json')
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(self.timings, f, indent=2, sort_keys=True)
        return path


def save_report(report: EvalReport, path: str, include_timings: bool = False) -> None:
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(report.to_dict(include_timings=include_timings), f, indent=2, sort_keys=True)
        f.write('\n')


def load_report(path: str) -> EvalReport:
    try:
        with open(path, 'r', encoding='utf-8') as f:
            return EvalReport.from_dict(json.load(f))
    except json.JSONDecodeError as e:
        raise EvaluationError(f"{path}: not a report file ({e})")
