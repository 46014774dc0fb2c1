"""Classification and segmentation metrics.

Rates come from one confusion table so TPR + FNR = 1 exactly. ROC AUC is
the Mann-Whitney statistic (ties count half); PR AUC is average precision
with step-wise interpolation. HD95 is the symmetric 95th-percentile
Hausdorff distance between mask boundaries, in pixels.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional, Sequence

import numpy as np
from scipy import ndimage
from scipy.stats import rankdata


class MetricError(ValueError):
    pass


class ConfusionRates(NamedTuple):
    tpr: float
    fpr: float
    fnr: float
    acc: float  # percent


def confusion_counts(labels, predictions, positive_class=1) -> tuple[int, int, int, int]:
    """(tp, fp, fn, tn) treating ``positive_class`` as positive, everything else negative."""
    y = np.asarray(labels).ravel() == positive_class
    p = np.asarray(predictions).ravel() == positive_class
    if y.shape != p.shape:
        raise MetricError(f"labels ({y.size}) and predictions ({p.size}) differ in length")
    tp = int(np.sum(y & p))
    fp = int(np.sum(~y & p))
    fn = int(np.sum(y & ~p))
    tn = int(np.sum(~y & ~p))
    return tp, fp, fn, tn


def confusion_rates(labels, predictions, positive_class=1) -> ConfusionRates:
    """TPR, FPR, FNR and accuracy (percent) for one class against the rest."""
    labels = np.asarray(labels).ravel()
    predictions = np.asarray(predictions).ravel()
    tp, fp, fn, tn = confusion_counts(labels, predictions, positive_class)
    pos, neg = tp + fn, fp + tn
    if pos == 0 or neg == 0:
        raise MetricError(f"class {positive_class!r}: ground truth needs both positives and negatives")
    acc = 100.0 * float(np.mean(labels == predictions))
    return ConfusionRates(tp / pos, fp / neg, fn / pos, acc)


def _binary_inputs(labels, scores):
    y = np.asarray(labels).ravel().astype(bool)
    s = np.asarray(scores, dtype=np.float64).ravel()
    if y.shape != s.shape:
        raise MetricError(f"labels ({y.size}) and scores ({s.size}) differ in length")
    return y, s


def roc_auc(labels, scores) -> float:
    """P(score of a random positive > score of a random negative), ties half."""
    y, s = _binary_inputs(labels, scores)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("ROC AUC needs both positive and negative samples")
    ranks = rankdata(s)  # average ranks for ties
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def pr_auc(labels, scores) -> float:
    """Average precision: sum over distinct thresholds of (R_k - R_{k-1}) * P_k."""
    y, s = _binary_inputs(labels, scores)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise MetricError("PR AUC needs at least one positive sample")
    order = np.argsort(-s, kind="mergesort")
    s_sorted = s[order]
    tp = np.cumsum(y[order])
    # last index of each run of tied scores
    ends = np.r_[np.nonzero(np.diff(s_sorted))[0], s_sorted.size - 1]
    tp_at = tp[ends].astype(np.float64)
    precision = tp_at / (ends + 1)
    recall = tp_at / n_pos
    d_recall = np.diff(np.r_[0.0, recall])
    return float(np.sum(d_recall * precision))


def dice(pred_mask, gt_mask) -> float:
    a, b = _binary_pair(pred_mask, gt_mask)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.sum(a & b)) / total


def iou(pred_mask, gt_mask) -> float:
    a, b = _binary_pair(pred_mask, gt_mask)
    union = int(np.sum(a | b))
    if union == 0:
        return 1.0
    return int(np.sum(a & b)) / union


def _binary_pair(a, b):
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise MetricError(f"mask shapes differ: {a.shape} vs {b.shape}")
    for m in (a, b):
        if not np.isin(m, (0, 1)).all():
            raise MetricError("masks must be binary (0/1)")
    return a.astype(bool), b.astype(bool)


_CROSS = ndimage.generate_binary_structure(2, 1)


def boundary(mask) -> np.ndarray:
    """Foreground pixels with a 4-neighbour outside the foreground (image edge counts as outside)."""
    m = np.asarray(mask).astype(bool)
    return m & ~ndimage.binary_erosion(m, structure=_CROSS, border_value=0)


def hd95(pred_mask, gt_mask) -> float:
    """Symmetric 95th-percentile Hausdorff distance between mask boundaries.

    Each directed distance is the 95th percentile (linear interpolation)
    of nearest-boundary distances; the result is the larger of the two.
    """
    a, b = _binary_pair(pred_mask, gt_mask)
    if not a.any() or not b.any():
        raise MetricError("HD95 is undefined when either mask is empty")
    ba, bb = boundary(a), boundary(b)
    dist_to_b = ndimage.distance_transform_edt(~bb)
    dist_to_a = ndimage.distance_transform_edt(~ba)
    d_ab = np.percentile(dist_to_b[ba], 95)
    d_ba = np.percentile(dist_to_a[bb], 95)
    return float(max(d_ab, d_ba))


def softmax(logits, axis: int = -1) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

CLS_FIELDS = ("tpr", "fpr", "fnr", "auc_pr", "auc_roc")


@dataclass
class MetricReport:
    task: str
    cohort: str
    n_samples: int
    values: dict = field(default_factory=dict)
    per_class: dict = field(default_factory=dict)
    notes: dict = field(default_factory=dict)

    def flat(self) -> dict:
        """Ordered flat key/value view used by both JSON and CSV output."""
        out = {"task": self.task, "cohort": self.cohort, "n_samples": self.n_samples}
        out.update(self.values)
        for cls in sorted(self.per_class):
            for k, v in self.per_class[cls].items():
                out[f"class_{cls}.{k}"] = v
        out.update(self.notes)
        return out

    def to_json(self) -> str:
        return json.dumps(self.flat(), indent=2) + "\n"

    def to_csv(self, header: bool = True) -> str:
        flat = self.flat()
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        if header:
            w.writerow(list(flat))
        w.writerow([_fmt(v) for v in flat.values()])
        return buf.getvalue()

    def write(self, out_dir, stem: Optional[str] = None) -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        stem = stem or f"report_{self.cohort}"
        jp = out_dir / f"{stem}.json"
        cp = out_dir / f"{stem}.csv"
        jp.write_text(self.to_json(), encoding="utf-8")
        cp.write_text(self.to_csv(), encoding="utf-8")
        return jp, cp


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    if v is None:
        return ""
    return str(v)


def classification_report(labels, probabilities, cohort: str = "default") -> MetricReport:
    """Per-class one-vs-rest TPR/FPR/FNR/AUC-PR/AUC-ROC plus accuracy.

    For two classes the headline rates and AUCs are those of class 1;
    otherwise they are macro averages over classes.
    """
    labels = np.asarray(labels).astype(np.int64).ravel()
    probs = np.asarray(probabilities, dtype=np.float64)
    if probs.ndim != 2 or probs.shape[0] != labels.size:
        raise MetricError(f"probabilities of shape {probs.shape} do not match {labels.size} labels")
    n_classes = probs.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise MetricError(f"labels outside [0, {n_classes})")
    preds = probs.argmax(axis=1)
    per_class = {}
    for c in range(n_classes):
        y = labels == c
        # a cohort missing class c (or containing only c) leaves its rates undefined
        if y.all() or not y.any():
            per_class[c] = dict.fromkeys(CLS_FIELDS)
            continue
        rates = confusion_rates(labels, preds, c)
        per_class[c] = {
            "tpr": rates.tpr,
            "fpr": rates.fpr,
            "fnr": rates.fnr,
            "auc_pr": pr_auc(y, probs[:, c]),
            "auc_roc": roc_auc(y, probs[:, c]),
        }
    acc = 100.0 * float(np.mean(preds == labels))
    if n_classes == 2:
        headline = dict(per_class[1])
    else:
        headline = {}
        for k in CLS_FIELDS:
            vals = [per_class[c][k] for c in per_class if per_class[c][k] is not None]
            headline[k] = float(np.mean(vals)) if vals else None
    values = {**headline, "acc": acc}
    return MetricReport("cls", cohort, int(labels.size), values, per_class)


def segmentation_report(pred_masks: Sequence, gt_masks: Sequence, cohort: str = "default") -> MetricReport:
    """Mean IoU, Dice and HD95 over samples.

    Samples where HD95 is undefined (an empty mask) are excluded from the
    HD95 mean and counted in ``hd95_excluded``.
    """
    if len(pred_masks) != len(gt_masks):
        raise MetricError("prediction and ground-truth mask counts differ")
    ious, dices, hds = [], [], []
    excluded = 0
    for p, g in zip(pred_masks, gt_masks):
        ious.append(iou(p, g))
        dices.append(dice(p, g))
        try:
            hds.append(hd95(p, g))
        except MetricError:
            excluded += 1
    values = {
        "iou": float(np.mean(ious)) if ious else None,
        "dice": float(np.mean(dices)) if dices else None,
        "hd95": float(np.mean(hds)) if hds else None,
    }
    return MetricReport("seg", cohort, len(pred_masks), values, notes={"hd95_excluded": excluded})


def write_predictions(paths: Sequence, labels: Sequence, probs: np.ndarray, path) -> Path:
    """Prediction CSV: ``path,label,prob_0,...,prob_{C-1}`` with a header row."""
    path = Path(path)
    probs = np.asarray(probs, dtype=np.float64)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path", "label", *[f"prob_{c}" for c in range(probs.shape[1])]])
        for p, y, row in zip(paths, labels, probs):
            w.writerow([str(p), "" if y is None else int(y), *[repr(float(v)) for v in row]])
    return path


def read_predictions(path) -> tuple[list[str], np.ndarray, np.ndarray]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:2] != ["path", "label"]:
        raise MetricError(f"{path}: not a prediction CSV")
    body = rows[1:]
    paths = [r[0] for r in body]
    labels = np.array([int(r[1]) for r in body], dtype=np.int64)
    probs = np.array([[float(v) for v in r[2:]] for r in body], dtype=np.float64)
    return paths, labels, probs


def report_from_predictions(path, cohort: str = "default") -> MetricReport:
    _, labels, probs = read_predictions(path)
    return classification_report(labels, probs, cohort)
