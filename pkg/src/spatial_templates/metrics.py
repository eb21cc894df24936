"""Evaluation metrics, the random-normal control baseline, and the CV harness.

Metric families: box overlap (IoU with the 0.5 correctness cut), regression
quality (coefficient of determination averaged over the four output
dimensions, per-axis Pearson correlation of centers), above/below sign
classification (macro accuracy and macro F1), and the pixel metric for
heatmaps (best macro-averaged per-class recall over 101 binarization
thresholds, reported as mIoU).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import models as m
from .corpus import Box, Instance, SplitPlan, cv_fold_split
from .embed import EmbeddingTable

logger = logging.getLogger(__name__)

REPORT_COLUMNS = ("r_squared", "acc_y", "f1_y", "r_x", "r_y", "iou_acc", "miou")


class MetricError(ValueError):
    """Raised when a metric's preconditions are violated."""


# ---------------------------------------------------------------------------
# (A) Box overlap
# ---------------------------------------------------------------------------

def iou(box_a: Box, box_b: Box) -> float:
    """Axis-aligned intersection over union; two zero-area boxes give 0."""
    if min(box_a.half_w, box_a.half_h, box_b.half_w, box_b.half_h) < 0:
        raise MetricError("boxes must have non-negative half-extents")
    ax0, ay0, ax1, ay1 = box_a.corners()
    bx0, by0, bx1, by1 = box_b.corners()
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    inter = max(iw, 0.0) * max(ih, 0.0)
    # areas from the same corner values as the intersection, so identical
    # boxes give exactly 1.0 despite rounding in center +- half
    area_a = (ax1 - ax0) * (ay1 - ay0)
    area_b = (bx1 - bx0) * (by1 - by0)
    union = area_a + area_b - inter
    if union <= 0.0:
        return 0.0
    return min(max(inter / union, 0.0), 1.0)


def iou_accuracy(pred_boxes: Sequence[Box], true_boxes: Sequence[Box]) -> float:
    """Fraction of pairs with IoU strictly larger than 0.5."""
    if len(pred_boxes) == 0:
        raise MetricError("empty prediction list")
    if len(pred_boxes) != len(true_boxes):
        raise MetricError("prediction/truth lists are not aligned")
    hits = sum(1 for p, t in zip(pred_boxes, true_boxes) if iou(p, t) > 0.5)
    return hits / len(pred_boxes)


# ---------------------------------------------------------------------------
# (B) Regression
# ---------------------------------------------------------------------------

def r_squared(predictions: np.ndarray, truths: np.ndarray) -> float:
    """1 - SS_res/SS_tot per output dimension, averaged uniformly.

    A dimension whose truths have zero variance is excluded with a warning.
    Constant predictions at the truth mean score exactly 0; the score is
    unbounded below.
    """
    predictions = np.atleast_2d(np.asarray(predictions, dtype=np.float64))
    truths = np.atleast_2d(np.asarray(truths, dtype=np.float64))
    if predictions.shape != truths.shape:
        raise MetricError("prediction/truth shapes differ")
    if predictions.shape[0] < 2:
        raise MetricError("need at least 2 examples")
    scores = []
    for d in range(truths.shape[1]):
        t = truths[:, d]
        ss_tot = float(np.sum((t - t.mean()) ** 2))
        if ss_tot == 0.0:
            logger.warning("truth dimension %d has zero variance; excluded", d)
            continue
        ss_res = float(np.sum((predictions[:, d] - t) ** 2))
        scores.append(1.0 - ss_res / ss_tot)
    if not scores:
        raise MetricError("all truth dimensions have zero variance")
    return float(np.mean(scores))


def pearson(xs: np.ndarray, ys: np.ndarray) -> float:
    """Sample Pearson correlation; zero variance in either input is an error."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.shape != ys.shape or xs.ndim != 1:
        raise MetricError("inputs must be aligned 1D arrays")
    if xs.size < 2:
        raise MetricError("need at least 2 points")
    xc = xs - xs.mean()
    yc = ys - ys.mean()
    sx = float(np.sqrt(np.sum(xc * xc)))
    sy = float(np.sqrt(np.sum(yc * yc)))
    if sx == 0.0 or sy == 0.0:
        raise MetricError("zero variance input to pearson")
    return float(np.sum(xc * yc) / (sx * sy))


# ---------------------------------------------------------------------------
# (C) Above/below classification
# ---------------------------------------------------------------------------

def _above_below_classes(center_y: np.ndarray, subject_y: np.ndarray) -> np.ndarray:
    # class 1 = "below" (object center lower in the image, y grows downward);
    # exact zero differences count as below.
    return (center_y - subject_y >= 0.0).astype(np.int64)


def above_below(pred_y: np.ndarray, true_y: np.ndarray,
                subject_y: np.ndarray, scheme: str = "recall",
                ) -> tuple[float, float]:
    """Macro accuracy and macro F1 of the above/below sign classification.

    The predicted and true classes come from sign(object_y - subject_y).
    scheme 'recall' (default) macro-averages per-class recall (balanced
    accuracy); 'ovr_accuracy' macro-averages per-class one-vs-rest accuracy.
    A class absent from the truths is excluded from the macro average with a
    warning.
    """
    pred_y = np.asarray(pred_y, dtype=np.float64)
    true_y = np.asarray(true_y, dtype=np.float64)
    subject_y = np.asarray(subject_y, dtype=np.float64)
    if not (pred_y.shape == true_y.shape == subject_y.shape) or pred_y.ndim != 1:
        raise MetricError("inputs must be aligned 1D arrays")
    if scheme not in ("recall", "ovr_accuracy"):
        raise MetricError(f"unknown macro-averaging scheme {scheme!r}")
    pred_cls = _above_below_classes(pred_y, subject_y)
    true_cls = _above_below_classes(true_y, subject_y)

    accs, f1s = [], []
    n = len(true_cls)
    for cls in (0, 1):
        truth_mask = true_cls == cls
        support = int(truth_mask.sum())
        if support == 0:
            logger.warning("class %s absent from truths; excluded from macros",
                           "above" if cls == 0 else "below")
            continue
        pred_mask = pred_cls == cls
        tp = int(np.sum(truth_mask & pred_mask))
        recall = tp / support
        if scheme == "recall":
            accs.append(recall)
        else:
            accs.append(float(np.sum(truth_mask == pred_mask)) / n)
        predicted = int(pred_mask.sum())
        precision = tp / predicted if predicted else 0.0
        f1s.append(0.0 if precision + recall == 0.0
                   else 2.0 * precision * recall / (precision + recall))
    if not accs:
        raise MetricError("no class present in truths")
    return float(np.mean(accs)), float(np.mean(f1s))


# ---------------------------------------------------------------------------
# (D) Pixel metric
# ---------------------------------------------------------------------------

MIOU_THRESHOLDS = np.round(np.linspace(0.0, 1.0, 101), 2)


def mean_iou_pixels(heatmaps: np.ndarray,
                    targets: np.ndarray) -> tuple[float, float]:
    """Best macro-averaged per-class pixel recall over the threshold sweep.

    Pixels are pooled across the whole evaluation set. At each threshold t
    the heatmaps binarize as activation > t; the score macro-averages the
    recall of the object class and of the background class. Returns
    (best score, threshold attaining it). Both classes must occur in the
    pooled targets.
    """
    acts = np.asarray(heatmaps, dtype=np.float64).reshape(-1)
    tgts = np.asarray(targets, dtype=np.float64).reshape(-1)
    if acts.shape != tgts.shape:
        raise MetricError("heatmap/target shapes differ")
    if not np.all((tgts == 0.0) | (tgts == 1.0)):
        raise MetricError("targets must be binary")
    pos = tgts == 1.0
    n_pos = int(pos.sum())
    n_neg = int(acts.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise MetricError("both pixel classes must appear in the targets")

    # bin activations once; cumulative counts give recalls for every threshold
    bins = np.searchsorted(MIOU_THRESHOLDS, acts, side="left")  # act > t for t < act
    pos_hist = np.bincount(bins[pos], minlength=MIOU_THRESHOLDS.size + 1)
    neg_hist = np.bincount(bins[~pos], minlength=MIOU_THRESHOLDS.size + 1)
    # activations strictly above threshold index k are those with bin > k
    pos_above = n_pos - np.cumsum(pos_hist)[:MIOU_THRESHOLDS.size]
    neg_above = n_neg - np.cumsum(neg_hist)[:MIOU_THRESHOLDS.size]
    recall_obj = pos_above / n_pos
    recall_bg = (n_neg - neg_above) / n_neg
    scores = (recall_obj + recall_bg) / 2.0
    best = int(np.argmax(scores))
    return float(scores[best]), float(MIOU_THRESHOLDS[best])


# ---------------------------------------------------------------------------
# Control baseline
# ---------------------------------------------------------------------------

def ctrl_baseline(train_targets: np.ndarray, n_test: int,
                  seed: int) -> np.ndarray:
    """Random normal predictions matched to the training-target statistics.

    Per output dimension the draws are i.i.d. Normal(mu_dim, sigma_dim) of
    the training targets (population sigma; degenerate dimensions collapse to
    constants).
    """
    targets = np.atleast_2d(np.asarray(train_targets, dtype=np.float64))
    if targets.size == 0:
        raise MetricError("training targets are empty")
    mu = targets.mean(axis=0)
    sigma = targets.std(axis=0)
    rng = np.random.default_rng(seed)
    return rng.normal(loc=mu, scale=sigma, size=(n_test, targets.shape[1]))


@dataclass
class CtrlBaseline:
    """Training-free control method; evaluate() accepts it in place of a model."""

    head: str
    train_targets: np.ndarray
    seed: int
    grid_size: int = 15
    provenance: dict = field(default_factory=dict)

    @classmethod
    def fit(cls, train_instances: Sequence[Instance], head: str, seed: int,
            grid_size: int = 15, provenance: dict | None = None) -> "CtrlBaseline":
        if head not in m.HEADS:
            raise MetricError(f"unknown head {head!r}")
        targets = m.build_reg_targets(train_instances)
        return cls(head=head, train_targets=targets, seed=seed,
                   grid_size=grid_size, provenance=dict(provenance or {}))

    def predict_outputs(self, n_test: int) -> np.ndarray:
        return ctrl_baseline(self.train_targets, n_test, self.seed)

    def predict_heatmaps(self, n_test: int) -> np.ndarray:
        rng = np.random.default_rng(self.seed + 1)
        return rng.uniform(0.0, 1.0,
                           size=(n_test, self.grid_size, self.grid_size))


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def _check_provenance(model_prov: dict, corpus_prov: dict | None) -> None:
    if corpus_prov is None:
        return
    for key in ("stoplist_sha256", "mirrored"):
        a, b = model_prov.get(key), corpus_prov.get(key)
        if a is not None and b is not None and a != b:
            raise MetricError(
                f"provenance mismatch on {key}: model has {a!r}, corpus has {b!r}")


def _center_metrics(result: dict, pred_centers: np.ndarray,
                    instances: Sequence[Instance]) -> None:
    true_x = np.asarray([i.object_box.center_x for i in instances])
    true_y = np.asarray([i.object_box.center_y for i in instances])
    subj_y = np.asarray([i.subject_box.center_y for i in instances])
    acc_y, f1_y = above_below(pred_centers[:, 1], true_y, subj_y)
    result["acc_y"] = acc_y
    result["f1_y"] = f1_y
    result["r_x"] = pearson(pred_centers[:, 0], true_x)
    result["r_y"] = pearson(pred_centers[:, 1], true_y)


def _clamped_boxes(outputs: np.ndarray) -> tuple[list[Box], int]:
    negatives = int(np.sum(np.any(outputs[:, 2:] < 0.0, axis=1)))
    boxes = [Box(float(o[0]), float(o[1]), max(float(o[2]), 0.0),
                 max(float(o[3]), 0.0)) for o in outputs]
    return boxes, negatives


def evaluate(model, test_instances: Sequence[Instance],
             corpus_provenance: dict | None = None) -> dict:
    """Run the head-appropriate metric set on one evaluation split.

    model is a TrainedModel or a CtrlBaseline. Metrics that do not apply to
    the head are reported as None, never zero. Raises on provenance mismatch
    between the model and the corpus metadata, when given.
    """
    if not test_instances:
        raise MetricError("empty test set")
    _check_provenance(getattr(model, "provenance", {}) or {}, corpus_provenance)

    result: dict = {key: None for key in REPORT_COLUMNS}
    result["n"] = len(test_instances)
    true_boxes = [i.object_box for i in test_instances]

    if isinstance(model, CtrlBaseline):
        if model.head == "reg":
            outputs = model.predict_outputs(len(test_instances))
            _reg_metrics(result, outputs, true_boxes, test_instances)
        else:
            centers = model.predict_outputs(len(test_instances))[:, :2]
            _center_metrics(result, centers, test_instances)
            heatmaps = model.predict_heatmaps(len(test_instances))
            targets = m.build_pix_targets(test_instances, model.grid_size)
            best, thr = mean_iou_pixels(heatmaps, targets)
            result["miou"] = best
            result["miou_threshold"] = thr
        return result

    if model.head == "reg":
        outputs = m.predict_reg_batch(model, test_instances)
        _reg_metrics(result, outputs, true_boxes, test_instances)
    else:
        heatmaps = m.predict_pix_batch(model, test_instances)
        centers = np.stack([m.heatmap_center(h) for h in heatmaps])
        _center_metrics(result, centers, test_instances)
        targets = m.build_pix_targets(test_instances, model.grid_size)
        best, thr = mean_iou_pixels(heatmaps, targets)
        result["miou"] = best
        result["miou_threshold"] = thr
    return result


def _reg_metrics(result: dict, outputs: np.ndarray, true_boxes: Sequence[Box],
                 instances: Sequence[Instance]) -> None:
    truths = m.build_reg_targets(instances)
    result["r_squared"] = r_squared(outputs, truths)
    _center_metrics(result, outputs[:, :2], instances)
    pred_boxes, negatives = _clamped_boxes(outputs)
    result["iou_acc"] = iou_accuracy(pred_boxes, true_boxes)
    result["negative_half_predictions"] = negatives


# ---------------------------------------------------------------------------
# Reports and the cross-validation harness
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    method: str
    split: str
    per_fold: list[dict]
    mean: dict
    config: dict = field(default_factory=dict)

    @classmethod
    def from_folds(cls, method: str, split: str, per_fold: list[dict],
                   config: dict | None = None) -> "EvalReport":
        mean: dict = {}
        keys = set().union(*(f.keys() for f in per_fold)) - {"fold"}
        for key in keys:
            values = [f.get(key) for f in per_fold]
            if any(v is None for v in values):
                mean[key] = None
            elif all(isinstance(v, (int, float)) for v in values):
                mean[key] = float(np.mean(values))
        return cls(method=method, split=split, per_fold=per_fold, mean=mean,
                   config=dict(config or {}))

    def to_json_dict(self) -> dict:
        return {"method": self.method, "split": self.split,
                "per_fold": self.per_fold, "mean": self.mean,
                "config": self.config}

    def to_table(self) -> str:
        """Aligned text table with the standard column order."""
        header = ["method"] + [
            {"r_squared": "R2", "acc_y": "acc_y", "f1_y": "F1_y",
             "r_x": "r_x", "r_y": "r_y", "iou_acc": "IoU",
             "miou": "mIoU"}[c] for c in REPORT_COLUMNS]
        row = [self.method]
        for col in REPORT_COLUMNS:
            value = self.mean.get(col)
            row.append("-" if value is None else f"{value:.3f}")
        widths = [max(len(h), len(r)) for h, r in zip(header, row)]
        fmt = "  ".join(f"{{:<{w}}}" for w in widths)
        return fmt.format(*header) + "\n" + fmt.format(*row)


def cross_validate(instances: Sequence[Instance], plan: SplitPlan, head: str,
                   tables: Sequence[EmbeddingTable],
                   config: "m.TrainConfig | None" = None, seed: int = 0,
                   ctrl: bool = False, method: str | None = None,
                   provenance: dict | None = None) -> EvalReport:
    """Train and evaluate once per CV fold, aggregating into an EvalReport."""
    if plan.kind != "cv" or plan.folds is None:
        raise MetricError("cross_validate requires a cv plan")
    config = config or m.TrainConfig()
    per_fold = []
    for fold in range(len(plan.folds)):
        train_set, test_set = cv_fold_split(instances, plan, fold)
        if ctrl:
            model = CtrlBaseline.fit(train_set, head, seed=seed + fold,
                                     grid_size=config.grid_size,
                                     provenance=provenance)
        else:
            model = m.train(train_set, head, tables, config=config,
                            seed=seed, provenance=provenance)
        fold_result = evaluate(model, test_set)
        fold_result["fold"] = fold
        per_fold.append(fold_result)
        logger.info("fold %d/%d done", fold + 1, len(plan.folds))
    label = method or (f"ctrl_{head}" if ctrl else head)
    return EvalReport.from_folds(label, plan.kind, per_fold,
                                 config=config.to_json_dict())
