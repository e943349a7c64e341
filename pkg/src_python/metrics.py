"""
Classification metrics with PD as the positive class, and per-fold aggregation.
"""

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.stats import rankdata

from errors import EmptyInput, SingleClass
from nn import bce_smoothed

THRESHOLD = 0.5
METRIC_NAMES = ("accuracy", "auc", "f1", "loss")


@dataclass(frozen=True)
class Confusion:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def n(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass(frozen=True)
class EvalResult:
    n: int
    accuracy: float
    f1: float
    auc: float
    loss: float
    tp: int
    fp: int
    tn: int
    fn: int

    def to_dict(self) -> Dict:
        return asdict(self)


def _as_arrays(probs, labels) -> Tuple[np.ndarray, np.ndarray]:
    p = np.asarray(probs, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1).astype(int)
    if p.size == 0:
        raise EmptyInput("No predictions to score")
    if p.size != y.size:
        raise ValueError(f"{p.size} probabilities for {y.size} labels")
    return p, y


def accuracy_f1(probs, labels, threshold: float = THRESHOLD) -> Tuple[float, float, Confusion]:
    p, y = _as_arrays(probs, labels)
    pred = p >= threshold
    pos = y == 1
    confusion = Confusion(
        tp=int(np.sum(pred & pos)),
        fp=int(np.sum(pred & ~pos)),
        tn=int(np.sum(~pred & ~pos)),
        fn=int(np.sum(~pred & pos)),
    )
    accuracy = (confusion.tp + confusion.tn) / confusion.n
    denom = 2 * confusion.tp + confusion.fp + confusion.fn
    f1 = 2 * confusion.tp / denom if denom else 0.0
    return accuracy, f1, confusion


def auc(probs, labels) -> float:
    """Mann-Whitney AUC: P(score_pos > score_neg) with ties counted as one half."""
    p, y = _as_arrays(probs, labels)
    n_pos = int(np.sum(y == 1))
    n_neg = p.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SingleClass()
    ranks = rankdata(p)  # average ranks resolve ties
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def bce(probs, labels, epsilon: float = 0.0) -> float:
    p, y = _as_arrays(probs, labels)
    loss, _ = bce_smoothed(p, y, epsilon)
    return loss


def evaluate(probs, labels, epsilon: float = 0.0, threshold: float = THRESHOLD) -> EvalResult:
    """All metrics at once; AUC is NaN when only one class is present."""
    accuracy, f1, c = accuracy_f1(probs, labels, threshold)
    try:
        area = auc(probs, labels)
    except SingleClass:
        area = float("nan")
    return EvalResult(c.n, accuracy, f1, area, bce(probs, labels, epsilon), c.tp, c.fp, c.tn, c.fn)


def _scaled(name: str, value: float) -> float:
    return value if name == "loss" else value * 100.0


@dataclass
class FoldReport:
    results: List[EvalResult]
    strategy: str = ""
    seed: int = 0
    config_hash: str = ""
    mean: Dict[str, float] = field(default_factory=dict)
    std: Dict[str, float] = field(default_factory=dict)

    def to_frame(self) -> pd.DataFrame:
        """One row per fold plus mean and std rows; every row on the same percent scale."""
        rows = [
            {"fold": str(i), "n": r.n, **{m: _scaled(m, getattr(r, m)) for m in METRIC_NAMES}}
            for i, r in enumerate(self.results)
        ]
        rows.append({"fold": "mean", "n": sum(r.n for r in self.results), **self.mean})
        rows.append({"fold": "std", "n": sum(r.n for r in self.results), **self.std})
        return pd.DataFrame(rows, columns=["fold", "n", *METRIC_NAMES])

    def to_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(path, index=False)
        return path

    def to_dict(self) -> Dict:
        return {
            "strategy": self.strategy,
            "seed": self.seed,
            "config_hash": self.config_hash,
            "folds": [r.to_dict() for r in self.results],
            "mean": self.mean,
            "std": self.std,
        }


def aggregate_folds(results: Sequence[EvalResult], strategy: str = "", seed: int = 0,
                    config_hash: str = "") -> FoldReport:
    """Mean and population std per metric over folds where it is defined; accuracy, AUC and F1 in percent."""
    if not results:
        raise EmptyInput("No fold results to aggregate")
    mean, std = {}, {}
    for name in METRIC_NAMES:
        values = np.array([_scaled(name, getattr(r, name)) for r in results], dtype=np.float64)
        finite = values[~np.isnan(values)]
        if finite.size == 0:
            mean[name] = std[name] = float("nan")
            continue
        mean[name] = float(np.mean(finite))
        std[name] = float(np.std(finite, ddof=0))
    return FoldReport(list(results), strategy, seed, config_hash, mean, std)
