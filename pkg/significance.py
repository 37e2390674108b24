"""
Paired Student t-test over matched accuracy samples (e.g. per-fold accuracies
of two pipelines run on the same folds).
"""

import math
from dataclasses import dataclass, asdict
from typing import Dict, Sequence

import numpy as np
from scipy.special import betainc, stdtrit

from metrics_collector import EvaluationError, LengthMismatch


class ZeroVariance(EvaluationError):
    pass


@dataclass
class TTestResult:
    t: float
    df: int
    p_value: float
    mean_difference: float
    significant_at_05: bool

    def to_dict(self) -> Dict:
        return asdict(self)


def paired_ttest(a: Sequence[float], b: Sequence[float]) -> TTestResult:
    """Two-sided paired t-test of mean(a - b) against zero, df = n - 1."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size != b.size:
        raise LengthMismatch(f"paired samples differ in length: {a.size} vs {b.size}")
    if a.size < 2:
        raise LengthMismatch(f"a paired t-test needs at least 2 pairs, got {a.size}")

    diff = a - b
    df = diff.size - 1
    mean = float(diff.mean())
    sd = float(diff.std(ddof=1))
    if sd == 0.0:
        if mean == 0.0:
            return TTestResult(t=0.0, df=df, p_value=1.0, mean_difference=0.0, significant_at_05=False)
        raise ZeroVariance(f"every paired difference equals {mean:g}; t is undefined")

    t = mean / (sd / math.sqrt(diff.size))
    # two-sided tail of Student's t via the regularised incomplete beta function
    p = float(betainc(df / 2.0, 0.5, df / (df + t * t)))
    return TTestResult(t=float(t), df=df, p_value=p, mean_difference=mean, significant_at_05=p < 0.05)


def critical_t(df: int, alpha: float = 0.05) -> float:
    """|t| beyond which a two-sided test at level ``alpha`` rejects."""
    if df < 1:
        raise EvaluationError(f"degrees of freedom must be positive, got {df}")
    return float(stdtrit(df, 1.0 - alpha / 2.0))
