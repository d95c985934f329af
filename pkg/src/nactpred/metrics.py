"""Evaluation suite: confusion metrics, ROC-AUC, threshold selection,
DeLong's test, paired stratified bootstrap, calibration, confidence
buckets, attention export, and report assembly.

ROC-AUC is computed twice on every call — once by threshold sweep with
trapezoid integration and once as the Mann-Whitney pairwise statistic with
half credit for ties — and the two must agree to 1e-12.  The pairwise
count is kept as a permanent internal oracle for the sweep.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "ScoredCohort",
    "ConfusionMatrix",
    "PointMetrics",
    "CalibrationBin",
    "ConfidenceBuckets",
    "DelongResult",
    "BootstrapResult",
    "UndefinedMetricError",
    "confusion",
    "point_metrics",
    "roc_auc",
    "roc_auc_pairwise",
    "select_threshold",
    "delong_variance",
    "delong_test",
    "bootstrap_ci",
    "paired_bootstrap",
    "reliability_bins",
    "confidence_buckets",
    "export_attention",
    "build_report",
    "read_cohort",
    "write_cohort",
    "render_point_metrics",
    "render_report",
]


class UndefinedMetricError(ValueError):
    """A metric that needs both classes was asked of a single-class cohort."""


@dataclass
class ScoredCohort:
    """Per-patient prediction records: unique ids, probabilities, labels."""

    ids: list[str]
    probabilities: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.ids = [str(i) for i in self.ids]
        self.probabilities = np.asarray(self.probabilities, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if not (len(self.ids) == self.probabilities.size == self.labels.size):
            raise ValueError("ids, probabilities and labels must align")
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("patient ids must be unique")
        if not np.all(np.isfinite(self.probabilities)):
            raise ValueError("probabilities must be finite")
        if self.probabilities.size and (self.probabilities.min() < 0.0
                                        or self.probabilities.max() > 1.0):
            raise ValueError("probabilities must lie in [0, 1]")
        if not np.all((self.labels == 0) | (self.labels == 1)):
            raise ValueError("labels must be 0 or 1")

    def __len__(self) -> int:
        return len(self.ids)

    @classmethod
    def from_records(cls, records: Iterable[dict]) -> "ScoredCohort":
        rows = list(records)
        return cls(ids=[r["id"] for r in rows],
                   probabilities=[r["probability"] for r in rows],
                   labels=[r["label"] for r in rows])

    def to_records(self) -> list[dict]:
        return [{"id": i, "probability": float(p), "label": int(l)}
                for i, p, l in zip(self.ids, self.probabilities, self.labels)]

    def take(self, indices: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(labels, probabilities) at the given indices, for resampling."""
        return self.labels[indices], self.probabilities[indices]


def read_cohort(path: str | Path) -> ScoredCohort:
    """Read a JSON-lines cohort file (one record per patient)."""
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append(json.loads(line))
    return ScoredCohort.from_records(rows)


def write_cohort(path: str | Path, cohort: ScoredCohort) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for record in cohort.to_records():
            fh.write(json.dumps(record) + "\n")


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass(frozen=True)
class PointMetrics:
    accuracy: float
    precision: float
    recall: float
    f1: float
    degenerate: tuple[str, ...] = ()


def confusion(cohort: ScoredCohort, threshold: float) -> ConfusionMatrix:
    """Tally predictions with the rule: predict class 1 iff p >= threshold."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold {threshold} outside [0, 1]")
    predicted = cohort.probabilities >= threshold
    actual = cohort.labels == 1
    return ConfusionMatrix(
        tp=int(np.sum(predicted & actual)),
        fp=int(np.sum(predicted & ~actual)),
        tn=int(np.sum(~predicted & ~actual)),
        fn=int(np.sum(~predicted & actual)),
    )


def point_metrics(cm: ConfusionMatrix) -> PointMetrics:
    """Accuracy, precision, recall, F1; zero denominators give 0, flagged."""
    degenerate = []

    def ratio(num: int, den: int, name: str) -> float:
        if den == 0:
            degenerate.append(name)
            return 0.0
        return num / den

    accuracy = ratio(cm.tp + cm.tn, cm.total, "accuracy")
    precision = ratio(cm.tp, cm.tp + cm.fp, "precision")
    recall = ratio(cm.tp, cm.tp + cm.fn, "recall")
    if precision + recall == 0.0:
        degenerate.append("f1")
        f1 = 0.0
    else:
        f1 = 2.0 * precision * recall / (precision + recall)
    return PointMetrics(accuracy, precision, recall, f1, tuple(degenerate))


def _split_scores(cohort: ScoredCohort) -> tuple[np.ndarray, np.ndarray]:
    pos = cohort.probabilities[cohort.labels == 1]
    neg = cohort.probabilities[cohort.labels == 0]
    if pos.size == 0 or neg.size == 0:
        raise UndefinedMetricError("ROC analysis needs both classes present")
    return pos, neg


def _pairwise_auc(pos: np.ndarray, neg: np.ndarray) -> float:
    """Mann-Whitney statistic: P(pos > neg) + 0.5 * P(pos == neg)."""
    wins = np.sum(pos[:, None] > neg[None, :], dtype=np.float64)
    ties = np.sum(pos[:, None] == neg[None, :], dtype=np.float64)
    return (wins + 0.5 * ties) / (pos.size * neg.size)


def _sweep_auc(pos: np.ndarray, neg: np.ndarray) -> float:
    """Threshold sweep over distinct scores, trapezoid over the ROC curve."""
    scores = np.concatenate([pos, neg])
    labels = np.concatenate([np.ones(pos.size, bool), np.zeros(neg.size, bool)])
    order = np.argsort(-scores, kind="stable")
    scores, labels = scores[order], labels[order]
    # Curve vertices sit at the end of every tied-score group.
    boundary = np.nonzero(np.diff(scores))[0]
    cut = np.concatenate([boundary, [scores.size - 1]])
    tp = np.cumsum(labels)[cut]
    fp = np.cumsum(~labels)[cut]
    tpr = np.concatenate([[0.0], tp / pos.size])
    fpr = np.concatenate([[0.0], fp / neg.size])
    return float(np.trapezoid(tpr, fpr))


def roc_auc_pairwise(cohort: ScoredCohort) -> float:
    """Pairwise Mann-Whitney AUC (the oracle route)."""
    return _pairwise_auc(*_split_scores(cohort))


def roc_auc(cohort: ScoredCohort) -> float:
    """ROC-AUC by threshold sweep, cross-checked against the pairwise count."""
    pos, neg = _split_scores(cohort)
    area = _sweep_auc(pos, neg)
    oracle = _pairwise_auc(pos, neg)
    if abs(area - oracle) > 1e-12:
        raise AssertionError(
            f"trapezoid AUC {area!r} disagrees with pairwise oracle {oracle!r}")
    return area


def select_threshold(cohort: ScoredCohort) -> float:
    """F1-maximizing threshold over midpoints of adjacent distinct scores.

    Candidates are the midpoints between adjacent sorted unique
    probabilities plus the endpoints {0, 1}; ties resolve to the lowest
    candidate.
    """
    _split_scores(cohort)  # both classes required
    distinct = np.unique(cohort.probabilities)
    midpoints = (distinct[:-1] + distinct[1:]) / 2.0
    candidates = np.unique(np.concatenate([[0.0], midpoints, [1.0]]))
    best_threshold, best_f1 = 0.0, -1.0
    for t in candidates:
        f1 = point_metrics(confusion(cohort, float(t))).f1
        if f1 > best_f1:
            best_threshold, best_f1 = float(t), f1
    return best_threshold


# ---------------------------------------------------------------------------
# DeLong's test


@dataclass(frozen=True)
class DelongResult:
    auc_a: float
    auc_b: float
    delta: float
    z: float
    p_value: float


def _midranks(x: np.ndarray) -> np.ndarray:
    """Ranks (1-based) with ties sharing the mean rank of their run."""
    order = np.argsort(x, kind="stable")
    sorted_x = x[order]
    n = x.size
    ranks = np.empty(n, dtype=np.float64)
    i = 0
    while i < n:
        j = i
        while j < n and sorted_x[j] == sorted_x[i]:
            j += 1
        ranks[i:j] = 0.5 * (i + j - 1) + 1.0
        i = j
    out = np.empty(n, dtype=np.float64)
    out[order] = ranks
    return out


def _placements(cohort: ScoredCohort) -> tuple[float, np.ndarray, np.ndarray]:
    """AUC plus per-positive and per-negative placement values."""
    pos, neg = _split_scores(cohort)
    m, n = pos.size, neg.size
    all_ranks = _midranks(np.concatenate([pos, neg]))
    pos_ranks = _midranks(pos)
    neg_ranks = _midranks(neg)
    auc = (all_ranks[:m].sum() - m * (m + 1) / 2.0) / (m * n)
    v_pos = (all_ranks[:m] - pos_ranks) / n               # placements of positives
    v_neg = 1.0 - (all_ranks[m:] - neg_ranks) / m         # placements of negatives
    return auc, v_pos, v_neg


def delong_variance(cohort: ScoredCohort) -> tuple[float, float]:
    """(AUC, DeLong variance) for one score set."""
    auc, v_pos, v_neg = _placements(cohort)
    m, n = v_pos.size, v_neg.size
    if m < 2 or n < 2:
        raise UndefinedMetricError("DeLong variance needs >= 2 patients per class")
    return auc, float(np.var(v_pos, ddof=1) / m + np.var(v_neg, ddof=1) / n)


def delong_test(cohort_a: ScoredCohort, cohort_b: ScoredCohort) -> DelongResult:
    """Paired DeLong test for the AUC difference of two models.

    Both cohorts must list the same patients in the same order with the
    same labels.  A zero-variance difference (e.g. identical score
    vectors) yields z = 0 and p = 1 exactly.
    """
    if cohort_a.ids != cohort_b.ids or not np.array_equal(cohort_a.labels,
                                                          cohort_b.labels):
        raise ValueError("paired comparison needs identical patients and labels")
    auc_a, vp_a, vn_a = _placements(cohort_a)
    auc_b, vp_b, vn_b = _placements(cohort_b)
    m, n = vp_a.size, vn_a.size
    if m < 2 or n < 2:
        raise UndefinedMetricError("DeLong test needs >= 2 patients per class")
    cov_pos = np.cov(np.stack([vp_a, vp_b]), ddof=1)
    cov_neg = np.cov(np.stack([vn_a, vn_b]), ddof=1)
    s = cov_pos / m + cov_neg / n
    variance = float(s[0, 0] + s[1, 1] - 2.0 * s[0, 1])
    delta = auc_a - auc_b
    if variance <= 0.0 or math.isclose(variance, 0.0, abs_tol=1e-24):
        return DelongResult(auc_a, auc_b, delta, 0.0, 1.0)
    z = delta / math.sqrt(variance)
    p = math.erfc(abs(z) / math.sqrt(2.0))
    return DelongResult(auc_a, auc_b, delta, z, min(1.0, p))


# ---------------------------------------------------------------------------
# stratified bootstrap


@dataclass(frozen=True)
class BootstrapResult:
    point_a: float
    point_b: float | None
    ci_a: tuple[float, float]
    ci_b: tuple[float, float] | None
    diff_ci: tuple[float, float] | None
    p_value: float | None
    n_resamples: int
    seed: int


MetricFn = Callable[[np.ndarray, np.ndarray], float]
"""Metric signature: (labels, probabilities) -> float."""


def _stratified_indices(labels: np.ndarray, seed: int,
                        resample: int) -> np.ndarray:
    """Resample with replacement within each class; counts preserved.

    Each resample draws from its own deterministic substream seeded by
    (seed, resample index), so resamples are order-independent and the
    whole procedure is reproducible bitwise.
    """
    rng = np.random.default_rng([seed, resample])
    out = np.empty(labels.size, dtype=np.int64)
    cursor = 0
    for cls in (0, 1):
        members = np.nonzero(labels == cls)[0]
        if members.size == 0:
            raise ValueError(f"class {cls} missing; stratified resampling undefined")
        draws = members[rng.integers(0, members.size, members.size)]
        out[cursor:cursor + members.size] = draws
        cursor += members.size
    return out


def bootstrap_ci(cohort: ScoredCohort, metric: MetricFn, n_resamples: int = 2000,
                 seed: int = 0) -> BootstrapResult:
    """Percentile CI (2.5/97.5) of a metric under stratified resampling."""
    if n_resamples < 100:
        raise ValueError("use at least 100 resamples")
    values = np.empty(n_resamples)
    for i in range(n_resamples):
        idx = _stratified_indices(cohort.labels, seed, i)
        values[i] = metric(*cohort.take(idx))
    lo, hi = np.percentile(values, [2.5, 97.5])
    point = metric(cohort.labels, cohort.probabilities)
    return BootstrapResult(point_a=point, point_b=None,
                           ci_a=(float(lo), float(hi)), ci_b=None,
                           diff_ci=None, p_value=None,
                           n_resamples=n_resamples, seed=seed)


def paired_bootstrap(cohort_a: ScoredCohort, cohort_b: ScoredCohort,
                     metric: MetricFn, n_resamples: int = 2000,
                     seed: int = 0) -> BootstrapResult:
    """Paired stratified bootstrap: identical resamples score both models.

    Returns per-model percentile CIs, the difference CI, and a two-sided
    p-value for the difference, 2*min(P(diff<=0), P(diff>=0)) with
    add-one smoothing.
    """
    if cohort_a.ids != cohort_b.ids or not np.array_equal(cohort_a.labels,
                                                          cohort_b.labels):
        raise ValueError("paired bootstrap needs identical patients and labels")
    if n_resamples < 100:
        raise ValueError("use at least 100 resamples")
    values_a = np.empty(n_resamples)
    values_b = np.empty(n_resamples)
    for i in range(n_resamples):
        idx = _stratified_indices(cohort_a.labels, seed, i)
        values_a[i] = metric(*cohort_a.take(idx))
        values_b[i] = metric(*cohort_b.take(idx))
    diffs = values_a - values_b
    lo_a, hi_a = np.percentile(values_a, [2.5, 97.5])
    lo_b, hi_b = np.percentile(values_b, [2.5, 97.5])
    lo_d, hi_d = np.percentile(diffs, [2.5, 97.5])
    le = float(np.sum(diffs <= 0.0))
    ge = float(np.sum(diffs >= 0.0))
    p = 2.0 * min((le + 1.0) / (n_resamples + 1.0),
                  (ge + 1.0) / (n_resamples + 1.0))
    return BootstrapResult(
        point_a=metric(cohort_a.labels, cohort_a.probabilities),
        point_b=metric(cohort_b.labels, cohort_b.probabilities),
        ci_a=(float(lo_a), float(hi_a)),
        ci_b=(float(lo_b), float(hi_b)),
        diff_ci=(float(lo_d), float(hi_d)),
        p_value=min(1.0, p),
        n_resamples=n_resamples, seed=seed)


# ---------------------------------------------------------------------------
# calibration, confidence buckets, attention export


@dataclass(frozen=True)
class CalibrationBin:
    low: float
    high: float
    count: int
    mean_predicted: float
    observed_positive_fraction: float


def reliability_bins(cohort: ScoredCohort, n_bins: int = 5) -> list[CalibrationBin]:
    """Equal-width bins over [0, 1]; empty bins are emitted with count 0."""
    if n_bins < 2:
        raise ValueError("need at least two calibration bins")
    probs, labels = cohort.probabilities, cohort.labels
    assignment = np.minimum((probs * n_bins).astype(int), n_bins - 1)
    bins = []
    for b in range(n_bins):
        members = assignment == b
        count = int(members.sum())
        bins.append(CalibrationBin(
            low=b / n_bins,
            high=(b + 1) / n_bins,
            count=count,
            mean_predicted=float(probs[members].mean()) if count else 0.0,
            observed_positive_fraction=float(labels[members].mean()) if count else 0.0,
        ))
    return bins


@dataclass
class ConfidenceBuckets:
    uncertain_correct: list[str] = field(default_factory=list)
    uncertain_wrong: list[str] = field(default_factory=list)
    confident_correct: list[str] = field(default_factory=list)
    confident_wrong: list[str] = field(default_factory=list)
    mid_band: list[str] = field(default_factory=list)

    def sizes(self) -> dict[str, int]:
        return {"uncertain_correct": len(self.uncertain_correct),
                "uncertain_wrong": len(self.uncertain_wrong),
                "confident_correct": len(self.confident_correct),
                "confident_wrong": len(self.confident_wrong),
                "mid_band": len(self.mid_band)}


def confidence_buckets(cohort: ScoredCohort, threshold: float,
                       low_band: float = 0.1,
                       high_band: float = 0.25) -> ConfidenceBuckets:
    """Partition patients by |p - threshold| and prediction correctness.

    Confidence below ``low_band`` is uncertain, at or above ``high_band``
    is confident; everything between lands in the mid band.
    """
    if not 0.0 <= low_band <= high_band:
        raise ValueError("bands must satisfy 0 <= low_band <= high_band")
    out = ConfidenceBuckets()
    for pid, prob, label in zip(cohort.ids, cohort.probabilities, cohort.labels):
        confidence = abs(prob - threshold)
        correct = (prob >= threshold) == bool(label)
        if confidence < low_band:
            (out.uncertain_correct if correct else out.uncertain_wrong).append(pid)
        elif confidence >= high_band:
            (out.confident_correct if correct else out.confident_wrong).append(pid)
        else:
            out.mid_band.append(pid)
    return out


def export_attention(records: Sequence[tuple[str, np.ndarray]]) -> list[dict]:
    """Serialize per-patient attention weights with entropy and peak slice.

    Weights are re-validated at export (non-negative, sum 1 within 1e-9).
    Entropy is natural-log; the peak index takes the lowest slice on ties.
    """
    out = []
    for pid, weights in records:
        w = np.asarray(weights, dtype=np.float64)
        if w.ndim != 1 or w.size == 0:
            raise ValueError(f"attention for {pid} must be a non-empty vector")
        if w.min() < -1e-12:
            raise ValueError(f"attention for {pid} has negative weights")
        if abs(w.sum() - 1.0) > 1e-9:
            raise ValueError(f"attention for {pid} sums to {w.sum()!r}, expected 1")
        positive = w[w > 0.0]
        entropy = float(-(positive * np.log(positive)).sum())
        out.append({"id": str(pid), "weights": [float(x) for x in w],
                    "entropy": entropy, "peak_slice": int(np.argmax(w))})
    return out


# ---------------------------------------------------------------------------
# report assembly and rendering


def _metric_functions(threshold: float) -> dict[str, MetricFn]:
    def from_cm(extract):
        def fn(labels: np.ndarray, probs: np.ndarray) -> float:
            cohort = ScoredCohort(ids=[str(i) for i in range(labels.size)],
                                  probabilities=probs, labels=labels)
            return extract(point_metrics(confusion(cohort, threshold)))
        return fn

    def auc(labels: np.ndarray, probs: np.ndarray) -> float:
        pos = probs[labels == 1]
        neg = probs[labels == 0]
        return _pairwise_auc(pos, neg)

    return {"accuracy": from_cm(lambda m: m.accuracy),
            "precision": from_cm(lambda m: m.precision),
            "recall": from_cm(lambda m: m.recall),
            "f1": from_cm(lambda m: m.f1),
            "roc_auc": auc}


def _round6(obj):
    """Recursively round floats to 6 significant digits for serialization."""
    if isinstance(obj, float):
        return float(f"{obj:.6g}")
    if isinstance(obj, dict):
        return {k: _round6(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round6(v) for v in obj]
    return obj


def build_report(cohort: ScoredCohort, threshold: float, *,
                 baseline: ScoredCohort | None = None,
                 attention: Sequence[tuple[str, np.ndarray]] | None = None,
                 split: str = "test", n_resamples: int = 2000, seed: int = 0,
                 n_bins: int = 5, low_band: float = 0.1,
                 high_band: float = 0.25) -> dict:
    """Assemble the full JSON metrics report for one scored cohort.

    When a baseline cohort is given, adds the paired comparison block
    (DeLong on AUC, paired bootstrap on the threshold metrics).  Floats
    are rounded to 6 significant digits at the end.
    """
    cm = confusion(cohort, threshold)
    pm = point_metrics(cm)
    metric_fns = _metric_functions(threshold)

    metric_block = {}
    for name, fn in metric_fns.items():
        boot = bootstrap_ci(cohort, fn, n_resamples=n_resamples, seed=seed)
        # Percentile intervals are widened, when necessary, to contain the
        # point estimate so every reported triple is internally ordered.
        lo = min(boot.ci_a[0], boot.point_a)
        hi = max(boot.ci_a[1], boot.point_a)
        metric_block[name] = {"point": boot.point_a, "ci_low": lo, "ci_high": hi}
    for name in pm.degenerate:
        if name in metric_block:
            metric_block[name]["degenerate"] = True

    report = {
        "format": "nactpred.report.v1",
        "split": split,
        "n_patients": len(cohort),
        "threshold": threshold,
        "confusion_matrix": {"tp": cm.tp, "fp": cm.fp, "tn": cm.tn, "fn": cm.fn},
        "metrics": metric_block,
        "calibration": {
            "n_bins": n_bins,
            "bins": [vars(b) for b in reliability_bins(cohort, n_bins)],
        },
        "confidence_buckets": {
            "low_band": low_band, "high_band": high_band,
            **vars(confidence_buckets(cohort, threshold, low_band, high_band)),
        },
        "bootstrap": {"n_resamples": n_resamples, "seed": seed},
    }

    if attention is not None:
        report["attention"] = export_attention(attention)

    if baseline is not None:
        delong = delong_test(cohort, baseline)
        comparison = {
            "delong": {"auc": delong.auc_a, "baseline_auc": delong.auc_b,
                       "delta": delong.delta, "z": delong.z,
                       "p_value": delong.p_value},
            "paired_bootstrap": {},
        }
        for name, fn in metric_fns.items():
            paired = paired_bootstrap(cohort, baseline, fn,
                                      n_resamples=n_resamples, seed=seed)
            comparison["paired_bootstrap"][name] = {
                "point": paired.point_a, "baseline_point": paired.point_b,
                "diff_ci_low": paired.diff_ci[0], "diff_ci_high": paired.diff_ci[1],
                "p_value": paired.p_value,
            }
        report["comparison"] = comparison

    return _round6(report)


def render_point_metrics(cm: ConfusionMatrix) -> str:
    """Two-decimal display row for a confusion matrix (table convention)."""
    pm = point_metrics(cm)
    lines = [
        f"confusion: TP={cm.tp} FP={cm.fp} TN={cm.tn} FN={cm.fn} (n={cm.total})",
        f"precision: {round(pm.precision, 2):.2f}",
        f"recall:    {round(pm.recall, 2):.2f}",
        f"f1:        {round(pm.f1, 2):.2f}",
        f"accuracy:  {round(pm.accuracy, 2):.2f}",
    ]
    if pm.degenerate:
        lines.append(f"degenerate: {', '.join(pm.degenerate)}")
    return "\n".join(lines)


def render_report(report: dict) -> str:
    """Human-readable summary of a report dict, 2-decimal rounding."""
    cm = report["confusion_matrix"]
    lines = [
        f"split: {report['split']}  (n={report['n_patients']})",
        f"threshold: {report['threshold']:.4f}",
        f"confusion: TP={cm['tp']} FP={cm['fp']} TN={cm['tn']} FN={cm['fn']}",
        "metric      point   95% CI",
    ]
    for name in ("precision", "recall", "f1", "accuracy", "roc_auc"):
        m = report["metrics"][name]
        lines.append(f"{name:<11} {round(m['point'], 2):<7.2f} "
                     f"[{round(m['ci_low'], 2):.2f}, {round(m['ci_high'], 2):.2f}]")
    if "comparison" in report:
        d = report["comparison"]["delong"]
        lines.append(f"vs baseline: delta AUC {d['delta']:+.4f}, "
                     f"z={d['z']:.3f}, p={d['p_value']:.4f}")
    buckets = report["confidence_buckets"]
    lines.append("confidence buckets: " + ", ".join(
        f"{k}={len(buckets[k])}" for k in ("uncertain_correct", "uncertain_wrong",
                                           "confident_correct", "confident_wrong",
                                           "mid_band")))
    return "\n".join(lines)
