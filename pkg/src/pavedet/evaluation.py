"""Detection metrics: matching, precision/recall, PR curves, AP, mAP50, F1.

All functions are pure. Predictions and ground truths are DetectionBox and
GroundTruthBox lists spanning any number of images; grouping happens here.
"""

import json
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

from .boxes import DetectionBox, GroundTruthBox, iou


# ---------------------------------------------------------------------------
# matching
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MatchResult:
    """Outcome of greedy matching, aligned with the prediction input order.

    tp_flags[i] says whether prediction i claimed a ground truth;
    matched_gt[i] is that ground truth's index in the input list, or None.
    fn_count maps (image_id, class_id) to the number of unclaimed GTs.
    """

    tp_flags: Tuple[bool, ...]
    matched_gt: Tuple[Optional[int], ...]
    fn_count: dict

    @property
    def tp(self) -> int:
        return sum(self.tp_flags)

    @property
    def fp(self) -> int:
        return len(self.tp_flags) - self.tp

    @property
    def fn(self) -> int:
        return sum(self.fn_count.values())


def match_detections(preds: Sequence[DetectionBox],
                     gts: Sequence[GroundTruthBox],
                     iou_threshold: float = 0.5) -> MatchResult:
    """Greedy per-image, per-class matching.

    Predictions are visited by descending confidence (ties by input index);
    each claims its best-IoU still-unclaimed same-class GT when that IoU
    meets the threshold. Each GT can be claimed once.
    """
    pred_groups: dict = {}
    gt_groups: dict = {}
    for i, p in enumerate(preds):
        pred_groups.setdefault((p.image_id, p.class_id), []).append(i)
    for j, g in enumerate(gts):
        gt_groups.setdefault((g.image_id, g.class_id), []).append(j)

    flags = [False] * len(preds)
    matched: list = [None] * len(preds)
    fn_count = {}
    for key in sorted(set(pred_groups) | set(gt_groups)):
        gt_idx = gt_groups.get(key, [])
        claimed = [False] * len(gt_idx)
        for i in sorted(pred_groups.get(key, []),
                        key=lambda i: (-preds[i].confidence, i)):
            best_pos = -1
            best_iou = -1.0
            for pos, j in enumerate(gt_idx):
                if claimed[pos]:
                    continue
                v = iou(preds[i], gts[j])
                if v > best_iou:
                    best_iou = v
                    best_pos = pos
            if best_pos >= 0 and best_iou >= iou_threshold:
                claimed[best_pos] = True
                flags[i] = True
                matched[i] = gt_idx[best_pos]
        fn_count[key] = sum(1 for c in claimed if not c)
    return MatchResult(tuple(flags), tuple(matched), fn_count)


# ---------------------------------------------------------------------------
# scalar metrics
# ---------------------------------------------------------------------------

def precision(tp: int, fp: int) -> float:
    """TP / (TP + FP); 0 when nothing was predicted."""
    if tp < 0 or fp < 0:
        raise ValueError(f"counts must be non-negative, got tp={tp} fp={fp}")
    return tp / (tp + fp) if tp + fp > 0 else 0.0


def recall(tp: int, fn: int) -> float:
    """TP / (TP + FN); 0 when there is nothing to find."""
    if tp < 0 or fn < 0:
        raise ValueError(f"counts must be non-negative, got tp={tp} fn={fn}")
    return tp / (tp + fn) if tp + fn > 0 else 0.0


def f1(p: float, r: float) -> float:
    """Harmonic mean of precision and recall; 0 when both are 0."""
    if not (0.0 <= p <= 1.0 and 0.0 <= r <= 1.0):
        raise ValueError(f"precision and recall must be in [0, 1], got {p}, {r}")
    return 2.0 * p * r / (p + r) if p + r > 0 else 0.0


# ---------------------------------------------------------------------------
# PR curve and AP
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PRCurve:
    """Cumulative (recall, precision) points in global ranking order."""

    class_id: int
    num_gt: int
    points: Tuple[Tuple[float, float], ...]


def pr_curve(preds: Sequence[DetectionBox], gts: Sequence[GroundTruthBox],
             class_id: int, iou_threshold: float = 0.5) -> PRCurve:
    """Rank one class's predictions across all images and accumulate TP/FP.

    The ranking key is (confidence descending, image id, input index); TP
    flags come from the same greedy matching used everywhere else.
    """
    num_gt = sum(1 for g in gts if g.class_id == class_id)
    if num_gt == 0:
        raise ValueError(f"no ground truth for class {class_id}")
    result = match_detections(preds, gts, iou_threshold)
    per_image_idx: dict = {}
    ranked = []
    for i, p in enumerate(preds):
        k = per_image_idx.get(p.image_id, 0)
        per_image_idx[p.image_id] = k + 1
        if p.class_id == class_id:
            ranked.append((-p.confidence, p.image_id, k, result.tp_flags[i]))
    ranked.sort()
    points = []
    tp = fp = 0
    for _, _, _, flag in ranked:
        if flag:
            tp += 1
        else:
            fp += 1
        points.append((tp / num_gt, tp / (tp + fp)))
    return PRCurve(class_id, num_gt, tuple(points))


def average_precision(curve: PRCurve) -> float:
    """Area under the monotone precision envelope of the curve.

    Precision at each recall is replaced by the maximum precision at any
    recall at least as large, then the step function is integrated exactly.
    An empty curve scores 0.
    """
    pts = curve.points
    if not pts:
        return 0.0
    env = [0.0] * len(pts)
    best = 0.0
    for i in range(len(pts) - 1, -1, -1):
        best = max(best, pts[i][1])
        env[i] = best
    ap = 0.0
    prev = 0.0
    for (r, _), e in zip(pts, env):
        ap += (r - prev) * e
        prev = r
    return ap


def map50(preds: Sequence[DetectionBox], gts: Sequence[GroundTruthBox],
          num_classes: int, iou_threshold: float = 0.5) -> float:
    """Mean AP at the given IoU threshold over classes with ground truth."""
    present = sorted(set(g.class_id for g in gts))
    if not present:
        raise ValueError("no ground truth in any class")
    for c in present:
        if c >= num_classes:
            raise ValueError(f"class {c} outside taxonomy of {num_classes}")
    aps = [average_precision(pr_curve(preds, gts, c, iou_threshold))
           for c in present]
    return sum(aps) / len(aps)


# ---------------------------------------------------------------------------
# full report
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ClassMetrics:
    name: str
    num_gt: int
    ap: Optional[float]
    precision: float
    recall: Optional[float]
    tp: int
    fp: int


@dataclass(frozen=True)
class EvalReport:
    per_class: Tuple[ClassMetrics, ...]
    map50: float
    precision: float
    recall: float
    f1: float
    iou_threshold: float
    conf_threshold: float


def eval_report(preds: Sequence[DetectionBox], gts: Sequence[GroundTruthBox],
                class_names: Sequence[str], iou_threshold: float = 0.5,
                conf_threshold: float = 0.25) -> EvalReport:
    """Per-class AP plus operating-point precision/recall and overall scores.

    AP ranks every prediction regardless of confidence; the operating point
    drops predictions below conf_threshold, rematches, and pools counts over
    classes (micro average). Classes with no ground truth carry ap=None and
    do not enter the mAP mean.
    """
    num_classes = len(class_names)
    for p in preds:
        if p.class_id >= num_classes:
            raise ValueError(f"prediction class {p.class_id} outside taxonomy")
    for g in gts:
        if g.class_id >= num_classes:
            raise ValueError(f"ground truth class {g.class_id} outside taxonomy")

    kept = [p for p in preds if p.confidence >= conf_threshold]
    thr_match = match_detections(kept, gts, iou_threshold)

    rows = []
    aps = []
    total_tp = total_fp = total_gt = 0
    for c in range(num_classes):
        gt_c = sum(1 for g in gts if g.class_id == c)
        tp_c = sum(1 for p, f in zip(kept, thr_match.tp_flags)
                   if f and p.class_id == c)
        fp_c = sum(1 for p, f in zip(kept, thr_match.tp_flags)
                   if not f and p.class_id == c)
        if gt_c > 0:
            ap_c = average_precision(pr_curve(preds, gts, c, iou_threshold))
            aps.append(ap_c)
            rec_c = recall(tp_c, gt_c - tp_c)
        else:
            ap_c = None
            rec_c = None
        rows.append(ClassMetrics(class_names[c], gt_c, ap_c,
                                 precision(tp_c, fp_c), rec_c, tp_c, fp_c))
        total_tp += tp_c
        total_fp += fp_c
        total_gt += gt_c

    p_all = precision(total_tp, total_fp)
    r_all = recall(total_tp, total_gt - total_tp)
    return EvalReport(
        per_class=tuple(rows),
        map50=sum(aps) / len(aps) if aps else 0.0,
        precision=p_all,
        recall=r_all,
        f1=f1(p_all, r_all),
        iou_threshold=iou_threshold,
        conf_threshold=conf_threshold,
    )


def report_to_json(report: EvalReport) -> str:
    """Serialize a report as one map keyed by class name plus 'overall'."""
    out: dict = {}
    for row in report.per_class:
        out[row.name] = {
            "num_gt": row.num_gt,
            "ap": row.ap,
            "precision": row.precision,
            "recall": row.recall,
            "tp": row.tp,
            "fp": row.fp,
        }
    out["overall"] = {
        "map50": report.map50,
        "precision": report.precision,
        "recall": report.recall,
        "f1": report.f1,
        "iou_threshold": report.iou_threshold,
        "conf_threshold": report.conf_threshold,
    }
    return json.dumps(out, indent=2) + "\n"


def report_to_text(report: EvalReport) -> str:
    """Aligned table with one row per class and an overall row."""
    def fmt(v) -> str:
        return "-" if v is None else f"{v:.4f}"

    header = f"{'Class':<10} {'mAP50':>8} {'P':>8} {'R':>8} {'GT':>6}"
    lines = [header, "-" * len(header)]
    for row in report.per_class:
        lines.append(f"{row.name:<10} {fmt(row.ap):>8} {fmt(row.precision):>8} "
                     f"{fmt(row.recall):>8} {row.num_gt:>6}")
    lines.append("-" * len(header))
    total_gt = sum(r.num_gt for r in report.per_class)
    lines.append(f"{'Overall':<10} {fmt(report.map50):>8} "
                 f"{fmt(report.precision):>8} {fmt(report.recall):>8} {total_gt:>6}")
    lines.append(f"F1: {report.f1:.4f}  (IoU {report.iou_threshold}, "
                 f"conf {report.conf_threshold})")
    return "\n".join(lines) + "\n"
