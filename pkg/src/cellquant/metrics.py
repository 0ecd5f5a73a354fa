"""Quantification metrics: counts, R-squared, instance matching, PQ/SQ/DQ,
confusion matrices and percentile-bootstrap confidence intervals.

Instance matching is class-wise: a predicted and a ground-truth instance
can only match when they carry the same class and their IoU exceeds the
threshold.  With a threshold of at least 0.5 the matching is unique and
independent of enumeration order; below that, a greedy pass by
descending IoU decides.

Dataset-level PQ pools TP/FP/FN and the IoU sum over all images before
applying the formulas (it does not average per-image scores).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import UndefinedMetricError, ValidationError

REPORT_SCHEMA_VERSION = 1


@dataclass(slots=True)
class ClassMatch:
    """Matching outcome for one class: matched (pred, gt, iou) triples
    plus the counts of unmatched predictions and ground truths."""
    pairs: list[tuple[int, int, float]] = field(default_factory=list)
    fp: int = 0
    fn: int = 0

    @property
    def tp(self) -> int:
        return len(self.pairs)

    @property
    def iou_sum(self) -> float:
        return float(sum(iou for _, _, iou in self.pairs))


@dataclass(slots=True)
class MatchResult:
    classes: dict[int, ClassMatch] = field(default_factory=dict)

    def for_class(self, k: int) -> ClassMatch:
        return self.classes.get(k, ClassMatch())


@dataclass(slots=True)
class CountVector:
    """Per-image actual and predicted counts for each class."""
    image_ids: list[str]
    actual: dict[int, np.ndarray]
    predicted: dict[int, np.ndarray]

    def __post_init__(self):
        n = len(self.image_ids)
        for per_class in (self.actual, self.predicted):
            for k, arr in per_class.items():
                if len(arr) != n:
                    raise ValidationError(
                        f"class {k}: {len(arr)} counts for {n} images"
                    )
                if np.any(np.asarray(arr) < 0):
                    raise ValidationError(f"class {k}: negative count")

    @property
    def n(self) -> int:
        return len(self.image_ids)


@dataclass(slots=True)
class MetricValue:
    value: float
    ci_low: float | None = None
    ci_high: float | None = None
    flags: list[str] = field(default_factory=list)

    def check(self) -> None:
        if self.ci_low is not None and self.ci_high is not None:
            if not (self.ci_low <= self.value <= self.ci_high):
                raise ValidationError(
                    f"point estimate {self.value} outside CI "
                    f"[{self.ci_low}, {self.ci_high}]"
                )


@dataclass(slots=True)
class MetricReport:
    """Per-class metric values with optional confidence intervals.

    ``per_class`` maps class name -> metric kind ("R2", "PQ", "SQ",
    "DQ", "accuracy") -> MetricValue.
    """
    per_class: dict[str, dict[str, MetricValue]] = field(default_factory=dict)
    n_images: int = 0
    n_instances: int = 0
    seed: int | None = None

    def set(self, class_name: str, kind: str, mv: MetricValue) -> None:
        self.per_class.setdefault(class_name, {})[kind] = mv

    def check(self) -> None:
        for cls, kinds in self.per_class.items():
            for mv in kinds.values():
                mv.check()
            if "PQ" in kinds and "SQ" in kinds and "DQ" in kinds:
                pq = kinds["DQ"].value * kinds["SQ"].value
                if not math.isclose(kinds["PQ"].value, pq, abs_tol=1e-12):
                    raise ValidationError(f"{cls}: PQ != DQ*SQ")

    def to_json(self) -> str:
        def enc(mv: MetricValue) -> dict:
            out: dict = {"value": mv.value}
            if mv.ci_low is not None:
                out["ci_low"] = mv.ci_low
                out["ci_high"] = mv.ci_high
            if mv.flags:
                out["flags"] = mv.flags
            return out

        doc = {
            "schema_version": REPORT_SCHEMA_VERSION,
            "n_images": self.n_images,
            "n_instances": self.n_instances,
            "seed": self.seed,
            "per_class": {
                cls: {kind: enc(mv) for kind, mv in kinds.items()}
                for cls, kinds in self.per_class.items()
            },
        }
        return json.dumps(doc, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        doc = json.loads(text)
        report = cls(
            n_images=doc.get("n_images", 0),
            n_instances=doc.get("n_instances", 0),
            seed=doc.get("seed"),
        )
        for name, kinds in doc.get("per_class", {}).items():
            for kind, entry in kinds.items():
                report.set(name, kind, MetricValue(
                    value=entry["value"],
                    ci_low=entry.get("ci_low"),
                    ci_high=entry.get("ci_high"),
                    flags=entry.get("flags", []),
                ))
        return report

    def render_table(self) -> str:
        """Rows per class, one column per metric kind, cells as
        ``value (lo–hi)`` when an interval is present."""
        kinds: list[str] = []
        for per in self.per_class.values():
            for kind in per:
                if kind not in kinds:
                    kinds.append(kind)
        rows = [["class"] + kinds]
        for cls in sorted(self.per_class):
            row = [cls]
            for kind in kinds:
                mv = self.per_class[cls].get(kind)
                if mv is None:
                    row.append("-")
                elif mv.ci_low is not None:
                    row.append(f"{mv.value:.4f} ({mv.ci_low:.4f}-{mv.ci_high:.4f})")
                else:
                    row.append(f"{mv.value:.4f}")
            rows.append(row)
        widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
        lines = []
        for i, row in enumerate(rows):
            lines.append("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip())
            if i == 0:
                lines.append("  ".join("-" * w for w in widths))
        return "\n".join(lines)


def count_cells(inst: np.ndarray, instance_classes: list[int]) -> dict[int, int]:
    """Per-class instance counts; classes use the 1..C map convention."""
    k = int(inst.max()) if inst.size else 0
    if len(instance_classes) != k:
        raise ValidationError(
            f"{len(instance_classes)} classes for {k} instances"
        )
    counts: dict[int, int] = {}
    for c in instance_classes:
        counts[int(c)] = counts.get(int(c), 0) + 1
    return counts


def r_squared(y: np.ndarray, y_hat: np.ndarray) -> float:
    """Coefficient of determination 1 - SS_res / SS_tot.

    Returns exactly 1.0 for perfect predictions (checked first, so a
    constant series predicted perfectly still scores 1.0).  Otherwise
    all-equal actuals make the denominator vanish, which raises
    UndefinedMetricError rather than returning a silent nan.
    """
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape or y.ndim != 1:
        raise ValidationError("y and y_hat must be equal-length 1-D arrays")
    if y.size < 2:
        raise ValidationError("r_squared needs at least two observations")
    ss_res = float(np.sum((y - y_hat) ** 2))
    if ss_res == 0.0:
        return 1.0
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0.0:
        raise UndefinedMetricError("zero variance in actual counts")
    return 1.0 - ss_res / ss_tot


def r_squared_class(counts: CountVector, k: int) -> float:
    return r_squared(counts.actual[k], counts.predicted[k])


def _overlap_matrix(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    np_max = int(pred.max())
    ng_max = int(gt.max())
    flat = pred.astype(np.int64).ravel() * (ng_max + 1) + gt.astype(np.int64).ravel()
    counts = np.bincount(flat, minlength=(np_max + 1) * (ng_max + 1))
    return counts.reshape(np_max + 1, ng_max + 1)


def match_instances(pred: np.ndarray, pred_classes: list[int],
                    gt: np.ndarray, gt_classes: list[int],
                    iou_threshold: float = 0.5) -> MatchResult:
    """Class-wise one-to-one instance matching at IoU > iou_threshold."""
    if pred.shape != gt.shape:
        raise ValidationError(f"shape mismatch {pred.shape} vs {gt.shape}")
    overlap = _overlap_matrix(pred, gt)
    pred_area = overlap.sum(axis=1)
    gt_area = overlap.sum(axis=0)

    all_classes = set(pred_classes) | set(gt_classes)
    result = MatchResult()
    for k in sorted(all_classes):
        p_ids = [i + 1 for i, c in enumerate(pred_classes) if c == k]
        g_ids = [j + 1 for j, c in enumerate(gt_classes) if c == k]
        candidates = []
        for p in p_ids:
            for g in g_ids:
                inter = overlap[p, g]
                if inter == 0:
                    continue
                union = pred_area[p] + gt_area[g] - inter
                iou = float(inter) / float(union)
                if iou > iou_threshold:
                    candidates.append((p, g, iou))
        candidates.sort(key=lambda t: (-t[2], t[1], t[0]))
        taken_p: set[int] = set()
        taken_g: set[int] = set()
        pairs = []
        for p, g, iou in candidates:
            if p in taken_p or g in taken_g:
                continue
            taken_p.add(p)
            taken_g.add(g)
            pairs.append((p, g, iou))
        result.classes[k] = ClassMatch(
            pairs=pairs,
            fp=len(p_ids) - len(pairs),
            fn=len(g_ids) - len(pairs),
        )
    return result


def _pq_from_counts(tp: int, fp: int, fn: int, iou_sum: float) -> tuple[float, float, float]:
    denom = tp + 0.5 * fp + 0.5 * fn
    dq = tp / denom if denom > 0 else 0.0
    sq = iou_sum / tp if tp > 0 else 0.0
    return dq * sq, sq, dq


def pq_sq_dq(m: MatchResult, k: int) -> tuple[float, float, float]:
    """(PQ, SQ, DQ) for one class of one image's match result."""
    cm = m.for_class(k)
    return _pq_from_counts(cm.tp, cm.fp, cm.fn, cm.iou_sum)


def dataset_pq(matches: list[MatchResult], k: int) -> tuple[float, float, float]:
    """(PQ, SQ, DQ) with TP/FP/FN and IoU sums pooled over all images."""
    if not matches:
        raise ValidationError("dataset_pq needs at least one image")
    tp = fp = fn = 0
    iou_sum = 0.0
    for m in matches:
        cm = m.for_class(k)
        tp += cm.tp
        fp += cm.fp
        fn += cm.fn
        iou_sum += cm.iou_sum
    return _pq_from_counts(tp, fp, fn, iou_sum)


def confusion_matrix(true_labels, predicted_labels, n_classes: int):
    """C x C count matrix plus per-class (recall) and average accuracy.

    Labels are 0-based here because this feeds the cell-classifier
    evaluation, which never sees a background class.  Classes without
    true samples are excluded from the unweighted average.
    """
    t = np.asarray(true_labels, dtype=np.int64)
    p = np.asarray(predicted_labels, dtype=np.int64)
    if t.shape != p.shape or t.ndim != 1:
        raise ValidationError("label lists must be equal-length 1-D")
    if t.size and (t.max() >= n_classes or p.max() >= n_classes or
                   t.min() < 0 or p.min() < 0):
        raise ValidationError(f"labels outside [0, {n_classes})")
    matrix = np.bincount(t * n_classes + p, minlength=n_classes * n_classes)
    matrix = matrix.reshape(n_classes, n_classes)
    support = matrix.sum(axis=1)
    with np.errstate(invalid="ignore"):
        per_class = np.where(support > 0, np.diag(matrix) / support, np.nan)
    present = support > 0
    if not present.any():
        raise ValidationError("no samples")
    average = float(per_class[present].mean())
    return matrix, per_class, average


def bootstrap_ci(samples, statistic, n_replicates: int = 1000, seed: int = 0,
                 percentiles: tuple[float, float] = (2.5, 97.5)) -> tuple[float, float]:
    """Nonparametric percentile bootstrap interval for ``statistic``.

    Each replicate resamples ``samples`` with replacement using an RNG
    derived from (seed, replicate index), so results are deterministic
    and independent of evaluation order.  Replicates on which the
    statistic is undefined are skipped; more than half skipped is an
    error.
    """
    samples = list(samples)
    if not samples:
        raise ValidationError("bootstrap needs at least one sample")
    n = len(samples)
    values = []
    skipped = 0
    for rep in range(n_replicates):
        rng = np.random.default_rng((seed, rep))
        idx = rng.integers(0, n, size=n)
        try:
            values.append(float(statistic([samples[i] for i in idx])))
        except UndefinedMetricError:
            skipped += 1
    if skipped > n_replicates / 2:
        raise UndefinedMetricError(
            f"statistic undefined on {skipped}/{n_replicates} replicates"
        )
    lo, hi = np.percentile(values, percentiles)
    return float(lo), float(hi)
