"""
Paired comparisons and continual-learning scores.
"""
from typing import Sequence
import numpy as np
from pydantic import BaseModel
from scipy.stats import linregress, ttest_rel

class PairedStats(BaseModel):
    """
    Paired differences a - b over seeds.
    """
    n: int
    mean_difference: float
    std_difference: float
    win_fraction: float
    t_statistic: float | None = None
    p_value: float | None = None

def paired_statistics(a: Sequence[float], b: Sequence[float]) -> PairedStats:
    """
    Paired statistics of a against b; a wins a pair when a < b.
    """
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    diff = a - b
    t = p = None
    if diff.size > 1 and np.ptp(diff) > 0:
        res = ttest_rel(a, b)
        t, p = float(res.statistic), float(res.pvalue)
    return PairedStats(
        n=int(diff.size),
        mean_difference=float(np.mean(diff)) if diff.size else 0.0,
        std_difference=float(np.std(diff, ddof=1)) if diff.size > 1 else 0.0,
        win_fraction=float(np.mean(diff < 0)) if diff.size else 0.0,
        t_statistic=t,
        p_value=p,
    )

def forgetting(losses) -> float:
    """
    Mean over all but the last task of the final loss minus the best loss
    seen after that task was trained. losses[j, i] is the loss on task i
    after training on task j. Larger is worse.
    """
    L = np.asarray(losses, dtype=float)
    n = L.shape[0]
    if n < 2:
        return 0.0
    return float(np.mean([L[-1, i] - np.min(L[i:, i]) for i in range(n - 1)]))

def plasticity(losses) -> float:
    """
    Mean loss reduction on each new task from training on it.
    """
    L = np.asarray(losses, dtype=float)
    n = L.shape[0]
    if n < 2:
        return 0.0
    return float(np.mean([L[i - 1, i] - L[i, i] for i in range(1, n)]))

class LinearFit(BaseModel):
    slope: float
    intercept: float
    r2: float

def linear_fit(x: Sequence[float], y: Sequence[float]) -> LinearFit:
    fit = linregress(np.asarray(x, dtype=float), np.asarray(y, dtype=float))
    return LinearFit(slope=fit.slope, intercept=fit.intercept,
        r2=fit.rvalue ** 2)
