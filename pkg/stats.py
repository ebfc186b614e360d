"""
Evaluation metrics and statistical tests.

Classification metrics, rank AUC, detection delay, Welch's t, Cohen's d,
percentile bootstrap and Kruskal-Wallis H, plus CSV/JSON table writers.
"""

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import structlog
from scipy.special import betainc, gammaincc
from scipy.stats import rankdata

from errors import StatisticsError, ValidationError

logger = structlog.get_logger(__name__)


@dataclass
class MetricReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    tn: int
    fn: int
    auc: Optional[float] = None
    mean_delay: Optional[float] = None
    # names of metrics whose denominator was zero (reported as 0)
    undefined: List[str] = field(default_factory=list)

    @property
    def n(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def to_dict(self) -> Dict:
        return asdict(self)


@dataclass
class TestResult:
    statistic: float
    dof: float
    p_value: float
    effect_size: Optional[float] = None

    __test__ = False  # not a pytest class


@dataclass
class DelaySummary:
    mean_delay: Optional[float]
    n_detected: int
    n_missed: int

    @property
    def miss_rate(self) -> float:
        total = self.n_detected + self.n_missed
        return self.n_missed / total if total else 0.0


def _binary(values: Sequence, name: str) -> np.ndarray:
    arr = np.asarray(values)
    if arr.ndim != 1:
        arr = arr.reshape(-1)
    if not np.isin(arr, (0, 1)).all():
        raise ValidationError(f"{name} must be binary")
    return arr.astype(np.int64)


def _ratio(num: int, den: int, name: str, undefined: List[str]) -> float:
    if den == 0:
        undefined.append(name)
        return 0.0
    return num / den


def classification_metrics(labels: Sequence[int], predictions: Sequence[int]) -> MetricReport:
    y = _binary(labels, "labels")
    p = _binary(predictions, "predictions")
    if y.size == 0:
        raise ValidationError("empty input")
    if y.size != p.size:
        raise ValidationError("labels and predictions differ in length", labels=y.size, predictions=p.size)

    tp = int(np.sum((y == 1) & (p == 1)))
    fp = int(np.sum((y == 0) & (p == 1)))
    tn = int(np.sum((y == 0) & (p == 0)))
    fn = int(np.sum((y == 1) & (p == 0)))

    undefined: List[str] = []
    precision = _ratio(tp, tp + fp, "precision", undefined)
    recall = _ratio(tp, tp + fn, "recall", undefined)
    if precision + recall == 0:
        undefined.append("f1")
        f1 = 0.0
    else:
        f1 = 2 * precision * recall / (precision + recall)
    return MetricReport(
        accuracy=(tp + tn) / y.size,
        precision=precision,
        recall=recall,
        f1=f1,
        tp=tp,
        fp=fp,
        tn=tn,
        fn=fn,
        undefined=undefined,
    )


def roc_auc(labels: Sequence[int], scores: Sequence[float]) -> float:
    """Mann-Whitney AUC with midranks for ties"""
    y = _binary(labels, "labels")
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    if y.size != s.size:
        raise ValidationError("labels and scores differ in length")
    n_pos = int(y.sum())
    n_neg = int(y.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise StatisticsError("AUC needs both classes", positives=n_pos, negatives=n_neg)
    ranks = rankdata(s, method="average")
    rank_sum = float(ranks[y == 1].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def detection_delay(onset: int, fired_steps: Iterable[int]) -> Optional[float]:
    """Steps from onset to the first detection at or after it; None is a miss"""
    if onset < 0:
        raise ValidationError("onset must be >= 0", onset=onset)
    after = [s for s in fired_steps if s >= onset]
    if not after:
        return None
    return float(min(after) - onset)


def summarize_delays(delays: Iterable[Optional[float]]) -> DelaySummary:
    """Mean over detected scenarios; misses are counted, never averaged in"""
    values = list(delays)
    detected = [d for d in values if d is not None]
    missed = len(values) - len(detected)
    return DelaySummary(
        mean_delay=float(np.mean(detected)) if detected else None,
        n_detected=len(detected),
        n_missed=missed,
    )


def false_alarm_rate(labels: Sequence[int], fired: Sequence[int]) -> float:
    """Fraction of clean steps with a fired decision"""
    y = _binary(labels, "labels")
    f = _binary(fired, "fired")
    if y.size != f.size:
        raise ValidationError("labels and fired differ in length")
    clean = y == 0
    if not clean.any():
        return 0.0
    return float(f[clean].mean())


def t_two_tailed_p(t: float, dof: float) -> float:
    """P(|T| >= |t|) for Student's t via the regularized incomplete beta"""
    if dof <= 0:
        raise StatisticsError("degrees of freedom must be positive", dof=dof)
    x = dof / (dof + t * t)
    return float(min(max(betainc(dof / 2.0, 0.5, x), 0.0), 1.0))


def chi2_sf(statistic: float, dof: float) -> float:
    """Upper tail of the chi-square distribution via the regularized gamma"""
    if statistic <= 0:
        return 1.0
    return float(gammaincc(dof / 2.0, statistic / 2.0))


def cohens_d(mean_a: float, std_a: float, mean_b: float, std_b: float) -> float:
    """(mean_b - mean_a) / sqrt((std_a^2 + std_b^2) / 2)"""
    pooled = math.sqrt((std_a * std_a + std_b * std_b) / 2.0)
    if pooled == 0:
        raise StatisticsError("Cohen's d undefined: both standard deviations are zero")
    return (mean_b - mean_a) / pooled


def cohens_d_weighted(
    mean_a: float, std_a: float, n_a: int, mean_b: float, std_b: float, n_b: int
) -> float:
    """Cohen's d with the sample-size weighted pooled standard deviation"""
    if n_a + n_b <= 2:
        raise StatisticsError("need more than two observations in total", n_a=n_a, n_b=n_b)
    pooled = math.sqrt(((n_a - 1) * std_a**2 + (n_b - 1) * std_b**2) / (n_a + n_b - 2))
    if pooled == 0:
        raise StatisticsError("Cohen's d undefined: both standard deviations are zero")
    return (mean_b - mean_a) / pooled


def welch_t(sample_a: Sequence[float], sample_b: Sequence[float]) -> TestResult:
    a = np.asarray(sample_a, dtype=np.float64)
    b = np.asarray(sample_b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise StatisticsError("each sample needs at least two values", n_a=a.size, n_b=b.size)
    var_a, var_b = a.var(ddof=1), b.var(ddof=1)
    if var_a == 0 and var_b == 0:
        raise StatisticsError("Welch's t undefined: both variances are zero")

    se_a, se_b = var_a / a.size, var_b / b.size
    t = float((a.mean() - b.mean()) / math.sqrt(se_a + se_b))
    dof = float((se_a + se_b) ** 2 / (se_a**2 / (a.size - 1) + se_b**2 / (b.size - 1)))
    # sample_a against sample_b, same orientation as t
    effect = cohens_d(float(b.mean()), float(b.std(ddof=1)), float(a.mean()), float(a.std(ddof=1)))
    return TestResult(statistic=t, dof=dof, p_value=t_two_tailed_p(t, dof), effect_size=effect)


def bootstrap_ci(
    sample: Sequence[float],
    n_resamples: int = 10_000,
    level: float = 0.95,
    seed: int = 0,
    statistic: Callable[..., np.ndarray] = np.mean,
) -> Tuple[float, float]:
    """Percentile bootstrap interval for statistic(sample)"""
    x = np.asarray(sample, dtype=np.float64)
    if x.size == 0:
        raise StatisticsError("empty sample")
    if x.size < 2:
        raise StatisticsError("bootstrap needs at least two values", n=x.size)
    if n_resamples < 100:
        raise ValidationError("n_resamples must be >= 100", n_resamples=n_resamples)
    if not 0 < level < 1:
        raise ValidationError("level must be in (0, 1)", level=level)

    rng = np.random.default_rng(seed)
    index = rng.integers(0, x.size, size=(n_resamples, x.size))
    values = statistic(x[index], axis=1)
    tail = (1.0 - level) / 2.0
    lo, hi = np.quantile(values, [tail, 1.0 - tail])
    return float(lo), float(hi)


def kruskal_wallis(groups: Sequence[Sequence[float]]) -> TestResult:
    """H with midranks and tie correction; effect size eta^2 = (H - k + 1) / (n - k)"""
    arrays = [np.asarray(g, dtype=np.float64).reshape(-1) for g in groups]
    k = len(arrays)
    if k < 2:
        raise StatisticsError("need at least two groups", groups=k)
    if any(a.size == 0 for a in arrays):
        raise StatisticsError("every group must be non-empty")
    pooled = np.concatenate(arrays)
    n = pooled.size
    if n < 5:
        raise StatisticsError("need at least five observations in total", n=n)

    ranks = rankdata(pooled, method="average")
    bounds = np.cumsum([0] + [a.size for a in arrays])
    rank_term = sum(ranks[bounds[i] : bounds[i + 1]].sum() ** 2 / arrays[i].size for i in range(k))
    h = 12.0 / (n * (n + 1)) * rank_term - 3.0 * (n + 1)

    _, tie_counts = np.unique(pooled, return_counts=True)
    correction = 1.0 - float(np.sum(tie_counts**3 - tie_counts)) / (n**3 - n)
    if correction == 0:
        raise StatisticsError("Kruskal-Wallis undefined: all values are tied")
    h = max(h / correction, 0.0)

    dof = float(k - 1)
    return TestResult(
        statistic=float(h),
        dof=dof,
        p_value=chi2_sf(h, dof),
        effect_size=(h - k + 1) / (n - k),
    )


def score_distribution(scores_normal: Sequence[float], scores_attack: Sequence[float]) -> Dict:
    """Summary of anomaly scores under normal and attack conditions"""
    normal = np.asarray(scores_normal, dtype=np.float64)
    attack = np.asarray(scores_attack, dtype=np.float64)
    summary: Dict = {}
    for name, values in (("normal", normal), ("attack", attack)):
        if values.size == 0:
            raise StatisticsError(f"no {name} scores")
        summary[name] = {
            "n": int(values.size),
            "mean": float(values.mean()),
            "std": float(values.std(ddof=1)) if values.size > 1 else 0.0,
            "max": float(values.max()),
        }
    try:
        summary["cohens_d"] = cohens_d(
            summary["normal"]["mean"], summary["normal"]["std"], summary["attack"]["mean"], summary["attack"]["std"]
        )
        summary["welch"] = asdict(welch_t(attack, normal))
    except StatisticsError as e:
        logger.warning("score_distribution_degenerate", error=str(e))
        summary["cohens_d"] = None
        summary["welch"] = None
    return summary


METRIC_COLUMNS = ["Model", "ACC", "Precision", "Recall", "F1-score", "AUC"]
COMPARISON_COLUMNS = ["Comparison", "t-statistic", "DoF", "p-value", "Cohen's d"]
ABLATION_COLUMNS = ["Variant", "F1-score", "Detection delay"]


def metric_table(rows: Sequence[Tuple[str, MetricReport]]) -> pd.DataFrame:
    return pd.DataFrame(
        [[name, r.accuracy, r.precision, r.recall, r.f1, r.auc] for name, r in rows],
        columns=METRIC_COLUMNS,
    )


def comparison_table(rows: Sequence[Tuple[str, TestResult]]) -> pd.DataFrame:
    return pd.DataFrame(
        [[name, r.statistic, r.dof, r.p_value, r.effect_size] for name, r in rows],
        columns=COMPARISON_COLUMNS,
    )


def ablation_table(rows: Sequence[Tuple[str, Optional[float], Optional[float]]]) -> pd.DataFrame:
    return pd.DataFrame([list(r) for r in rows], columns=ABLATION_COLUMNS)


def write_table(frame: pd.DataFrame, path: Path) -> None:
    """CSV or JSON by suffix"""
    path = Path(path)
    if path.suffix == ".json":
        records = json.loads(frame.to_json(orient="records", double_precision=15))
        path.write_text(json.dumps(records, indent=2) + "\n", encoding="utf-8")
    else:
        frame.to_csv(path, index=False, lineterminator="\n")


def write_plot_data(path: Path, series: Dict[str, Tuple[Sequence[float], Sequence[float]]]) -> int:
    """Long-format (x, y, series) CSV; returns the number of points"""
    frames = [
        pd.DataFrame({"x": np.asarray(x), "y": np.asarray(y), "series": name})
        for name, (x, y) in series.items()
    ]
    frame = pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(columns=["x", "y", "series"])
    frame.to_csv(path, index=False, lineterminator="\n")
    return len(frame)
