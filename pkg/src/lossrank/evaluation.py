"""Detection quality metrics: matching, PR curves, VOC-style AP and mAP.

The protocol is the classic one: confidence-descending greedy matching
against unmatched ground truth at an IoU threshold, 11-point interpolated
AP by default, with the area-under-envelope variant behind a flag. The
test-time NMS here is confidence-ranked and entirely separate from the
training-time loss-ranked suppression in the mining module.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .boxes import Box, iou
from .errors import ContractViolation, DatasetError
from .grid import FeatureMap, decode_all
from .loss import GroundTruth

RECALL_LEVELS = tuple(k / 10.0 for k in range(11))


@dataclass(frozen=True)
class Detection:
    box: Box
    class_id: int
    confidence: float
    image_id: str

    def __post_init__(self):
        if self.class_id < 0:
            raise ContractViolation("class_id must be non-negative")
        if not (0.0 <= self.confidence <= 1.0):
            raise ContractViolation(
                f"confidence {self.confidence} outside [0, 1]")


def detections_from_map(fm: FeatureMap, image_id: str) -> list[Detection]:
    """One detection per prediction: argmax class, objectness times score."""
    return [Detection(v.box, v.predicted_class,
                      v.objectness * v.class_scores[v.predicted_class],
                      image_id)
            for v in decode_all(fm)]


def inference_nms(detections, threshold: float,
                  confidence_floor: float) -> list[Detection]:
    """Greedy confidence-descent suppression per image and class.

    Detections below the floor are dropped before suppression. Survivors
    come back in their original input order.
    """
    if not (0.0 < threshold <= 1.0):
        raise ContractViolation("nms threshold must be in (0, 1]")
    alive = [(pos, d) for pos, d in enumerate(detections)
             if d.confidence >= confidence_floor]
    groups: dict[tuple, list] = {}
    for pos, d in alive:
        groups.setdefault((d.image_id, d.class_id), []).append((pos, d))
    kept_positions = set()
    for key in groups:
        pool = sorted(groups[key], key=lambda e: (-e[1].confidence, e[0]))
        chosen: list = []
        for pos, d in pool:
            if all(iou(d.box, other.box) < threshold for _, other in chosen):
                chosen.append((pos, d))
        kept_positions.update(pos for pos, _ in chosen)
    return [d for pos, d in enumerate(detections) if pos in kept_positions]


def _match(detections, truths, class_id, iou_threshold):
    """Greedy matching; returns (tp flags, fp flags, positive count).

    Each detection takes the highest-IoU unmatched ground truth of its
    class in its image; equal IoU goes to the lowest ground-truth index.
    """
    npos = sum(1 for gt in truths.values()
               for c in gt.classes if c == class_id)
    cands = [(pos, d) for pos, d in enumerate(detections)
             if d.class_id == class_id]
    cands.sort(key=lambda e: (-e[1].confidence, e[0]))
    taken: dict[str, set] = {}
    tp = np.zeros(len(cands))
    fp = np.zeros(len(cands))
    for row, (_, d) in enumerate(cands):
        gt = truths.get(d.image_id)
        best_iou = 0.0
        best_g = None
        if gt is not None:
            used = taken.setdefault(d.image_id, set())
            for g, (b, c) in enumerate(zip(gt.boxes, gt.classes)):
                if c != class_id or g in used:
                    continue
                overlap = iou(d.box, b)
                if overlap > best_iou:
                    best_iou = overlap
                    best_g = g
        if best_g is not None and best_iou >= iou_threshold:
            tp[row] = 1.0
            taken[d.image_id].add(best_g)
        else:
            fp[row] = 1.0
    return tp, fp, npos


def _pr_points(tp, fp, npos):
    cum_tp = np.cumsum(tp)
    cum_fp = np.cumsum(fp)
    recall = cum_tp / npos
    precision = cum_tp / np.maximum(cum_tp + cum_fp, 1.0)
    return recall, precision


def _ap_11point(recall, precision) -> float:
    total = 0.0
    for level in RECALL_LEVELS:
        above = precision[recall >= level]
        total += float(above.max()) if above.size else 0.0
    return total / 11.0


def _ap_area(recall, precision) -> float:
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    for k in range(mpre.size - 2, -1, -1):
        mpre[k] = max(mpre[k], mpre[k + 1])
    ap = 0.0
    for k in range(1, mrec.size):
        ap += (mrec[k] - mrec[k - 1]) * mpre[k]
    return ap


def average_precision(detections, truths: dict[str, GroundTruth],
                      class_id: int, iou_threshold: float = 0.5,
                      interpolation: str = "11point"):
    """AP for one class, or None when the class has no ground truth."""
    if not (0.0 < iou_threshold <= 1.0):
        raise ContractViolation("iou_threshold must be in (0, 1]")
    if interpolation not in ("11point", "area"):
        raise ContractViolation(
            f"unknown interpolation {interpolation!r}, want 11point or area")
    tp, fp, npos = _match(detections, truths, class_id, iou_threshold)
    if npos == 0:
        return None
    if tp.size == 0:
        return 0.0
    recall, precision = _pr_points(tp, fp, npos)
    if interpolation == "11point":
        return _ap_11point(recall, precision)
    return _ap_area(recall, precision)


@dataclass(frozen=True)
class EvalResult:
    per_class_ap: dict
    map: float
    pr_curves: dict
    notes: tuple


def evaluate(outputs: dict, truths: dict, class_count: int,
             iou_threshold: float = 0.5, nms_threshold: float = 0.45,
             confidence_floor: float = 0.005,
             interpolation: str = "11point") -> EvalResult:
    """NMS, then per-class AP, then mAP over classes present in the truth.

    outputs: image id -> list of Detection for that image.
    truths: image id -> GroundTruth, same id set.
    """
    missing = sorted(set(truths) - set(outputs))
    extra = sorted(set(outputs) - set(truths))
    if missing or extra:
        raise DatasetError(
            "output/ground-truth id mismatch: "
            f"missing from outputs {missing}, unmatched outputs {extra}")
    for image_id, dets in outputs.items():
        for d in dets:
            if d.image_id != image_id:
                raise ContractViolation(
                    f"detection under id {image_id!r} claims image "
                    f"{d.image_id!r}")

    flat = [d for image_id in sorted(outputs)
            for d in outputs[image_id]]
    survivors = inference_nms(flat, nms_threshold, confidence_floor)

    per_class_ap = {}
    pr_curves = {}
    notes = []
    for c in range(class_count):
        ap = average_precision(survivors, truths, c, iou_threshold,
                               interpolation)
        if ap is None:
            notes.append(f"class {c}: absent from ground truth, "
                         "AP undefined, excluded from mAP")
            continue
        per_class_ap[c] = ap
        tp, fp, npos = _match(survivors, truths, c, iou_threshold)
        recall, precision = _pr_points(tp, fp, npos)
        pr_curves[c] = tuple(zip(recall.tolist(), precision.tolist()))
    if per_class_ap:
        ordered = [per_class_ap[c] for c in sorted(per_class_ap)]
        mean_ap = sum(ordered) / len(ordered)
    else:
        mean_ap = 0.0
        notes.append("no class present in ground truth, mAP set to 0")
    return EvalResult(per_class_ap, mean_ap, pr_curves, tuple(notes))


def eval_result_csv(result: EvalResult, class_names) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\r\n")
    writer.writerow(["class", "ap"])
    for c in sorted(result.per_class_ap):
        writer.writerow([class_names[c], repr(result.per_class_ap[c])])
    writer.writerow(["mAP", repr(result.map)])
    return buf.getvalue()


def pr_curve_csv(result: EvalResult, class_id: int) -> str:
    if class_id not in result.pr_curves:
        raise ContractViolation(f"no PR curve for class {class_id}")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\r\n")
    writer.writerow(["recall", "precision"])
    for recall, precision in result.pr_curves[class_id]:
        writer.writerow([repr(recall), repr(precision)])
    return buf.getvalue()
