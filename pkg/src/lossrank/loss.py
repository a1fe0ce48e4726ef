"""Four-term detection loss, decomposed per prediction.

Every prediction owes exactly one kind of debt. A prediction assigned to a
ground-truth object pays regression, objectness, and classification terms;
a background prediction pays a no-object penalty on its objectness; a
prediction in the ignore set pays nothing. All terms are squared errors,
which keeps the gradients short enough to derive by hand and check against
finite differences.

The per-prediction decomposition is what makes ranking possible: the sum of
a prediction's own four terms is its loss value, and the grand total is the
sum over all predictions.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .boxes import Box, from_center, iou
from .errors import ContractViolation
from .grid import FeatureMap, GridSpec, PredictionIndex, decode_fields, ensure_finite


@dataclass(frozen=True)
class GroundTruth:
    """Target objects for one image: boxes plus integer class ids."""

    boxes: tuple[Box, ...]
    classes: tuple[int, ...]

    def __post_init__(self):
        boxes = tuple(self.boxes)
        classes = tuple(int(c) for c in self.classes)
        if len(boxes) != len(classes):
            raise ContractViolation(
                f"{len(boxes)} boxes but {len(classes)} class labels")
        for n, b in enumerate(boxes):
            if b.x_max <= b.x_min or b.y_max <= b.y_min:
                raise ContractViolation(f"object {n} has empty box {b}")
        if any(c < 0 for c in classes):
            raise ContractViolation("class ids must be non-negative")
        object.__setattr__(self, "boxes", boxes)
        object.__setattr__(self, "classes", classes)

    def __len__(self) -> int:
        return len(self.boxes)


@dataclass(frozen=True)
class LossWeights:
    lambda_coord: float = 5.0
    lambda_obj: float = 1.0
    lambda_noobj: float = 0.5
    lambda_cls: float = 1.0

    def __post_init__(self):
        vals = (self.lambda_coord, self.lambda_obj, self.lambda_noobj,
                self.lambda_cls)
        if not all(math.isfinite(v) and v >= 0.0 for v in vals):
            raise ContractViolation(f"loss weights must be finite and >= 0: {vals}")


@dataclass(frozen=True)
class Assignment:
    """Which prediction answers for each object, and which are exempt.

    responsible maps ground-truth object index to its prediction; values are
    distinct. ignore_set holds predictions excused from the no-object term
    because their prior overlaps some object too well to call background.
    """

    responsible: dict[int, PredictionIndex]
    ignore_set: frozenset[PredictionIndex]


def _validate_gt(gt: GroundTruth, spec: GridSpec) -> None:
    size = float(spec.image_size)
    for n, b in enumerate(gt.boxes):
        if b.x_min < 0 or b.y_min < 0 or b.x_max > size or b.y_max > size:
            raise ContractViolation(
                f"object {n} box {b} escapes the {size:g}px image")
    for n, c in enumerate(gt.classes):
        if c >= spec.class_count:
            raise ContractViolation(
                f"object {n} class {c} out of range for C={spec.class_count}")


def _prior_iou_at(cx: float, cy: float, anchor: tuple[float, float],
                  stride: int, target: Box) -> float:
    prior = from_center(cx, cy, anchor[0] * stride, anchor[1] * stride)
    return iou(prior, target)


def assign(gt: GroundTruth, spec: GridSpec, ignore_iou: float) -> Assignment:
    """Pick the responsible prediction for every object.

    The object's center cell owns it; within the cell, the anchor whose
    prior box (anchor shape centered on the object) overlaps the object
    best is responsible, ties going to the lower anchor index. When that
    anchor is already taken by an earlier object, the best free anchor in
    the cell steps in; with no anchor free the object is dropped and a
    warning is emitted.

    Any non-responsible prediction whose prior, decoded at its own cell
    center, overlaps some object above ignore_iou joins the ignore set.
    """
    if not 0.0 <= ignore_iou <= 1.0:
        raise ContractViolation(f"ignore_iou {ignore_iou} outside [0, 1]")
    _validate_gt(gt, spec)
    stride = spec.stride

    responsible: dict[int, PredictionIndex] = {}
    occupied: set[PredictionIndex] = set()
    for g, box in enumerate(gt.boxes):
        cx, cy = box.center()
        j = int(cx // stride)
        i = int(cy // stride)
        ranked = sorted(range(spec.anchor_count),
                        key=lambda a: (-_prior_iou_at(cx, cy, spec.anchors[a],
                                                      stride, box), a))
        chosen = None
        for a in ranked:
            cand = PredictionIndex(i, j, a)
            if cand not in occupied:
                chosen = cand
                break
        if chosen is None:
            warnings.warn(f"object {g} dropped: every anchor of cell "
                          f"({i}, {j}) is already assigned")
            continue
        responsible[g] = chosen
        occupied.add(chosen)

    ignore: frozenset[PredictionIndex] = frozenset()
    if gt.boxes:
        s, b = spec.grid_size, spec.anchor_count
        centers = (np.arange(s, dtype=np.float64) + 0.5) * stride
        half_w = np.array([w for w, _ in spec.anchors]) * stride / 2.0
        half_h = np.array([h for _, h in spec.anchors]) * stride / 2.0
        px0 = centers[None, :, None] - half_w[None, None, :]
        px1 = centers[None, :, None] + half_w[None, None, :]
        py0 = centers[:, None, None] - half_h[None, None, :]
        py1 = centers[:, None, None] + half_h[None, None, :]
        parea = (px1 - px0) * (py1 - py0)
        best = np.zeros((s, s, b))
        for box in gt.boxes:
            iw = np.minimum(px1, box.x_max) - np.maximum(px0, box.x_min)
            ih = np.minimum(py1, box.y_max) - np.maximum(py0, box.y_min)
            inter = np.maximum(iw, 0.0) * np.maximum(ih, 0.0)
            union = parea + (box.x_max - box.x_min) * (box.y_max - box.y_min) - inter
            overlap = np.divide(inter, union, out=np.zeros_like(inter),
                                where=union > 0)
            np.maximum(best, overlap, out=best)
        hits = np.argwhere(best > ignore_iou)
        ignore = frozenset(
            PredictionIndex(int(i), int(j), int(a)) for i, j, a in hits
        ) - occupied

    return Assignment(responsible, ignore)


@dataclass(frozen=True, eq=False)
class LossBreakdown:
    """Per-prediction loss terms in row-major (i, j, a) order."""

    obj: np.ndarray
    noobj: np.ndarray
    cls: np.ndarray
    reg: np.ndarray
    total: np.ndarray
    grand_total: float

    def record(self, flat: int) -> dict[str, float]:
        return {name: float(getattr(self, name)[flat])
                for name in ("obj", "noobj", "cls", "reg", "total")}


def _targets_for(box: Box, idx: PredictionIndex, spec: GridSpec):
    """Regression targets: in-cell center offsets and log size ratios."""
    stride = spec.stride
    cx, cy = box.center()
    w, h = box.size()
    aw, ah = spec.anchors[idx.a]
    return (cx / stride - idx.j,
            cy / stride - idx.i,
            math.log(w / (aw * stride)),
            math.log(h / (ah * stride)))


def objectness_targets(fm: FeatureMap, gt: GroundTruth,
                       asg: Assignment) -> dict[int, float]:
    """IoU between each responsible prediction's decoded box and its object.

    These are the (detached) objectness regression targets. Capturing them
    once and passing them back into per_prediction_loss freezes the targets,
    which is what a finite-difference probe of the loss needs in order to
    agree with the analytic gradient.
    """
    d = decode_fields(fm)
    out = {}
    for g, idx in asg.responsible.items():
        i, j, a = idx.i, idx.j, idx.a
        decoded = Box(float(d.x_min[i, j, a]), float(d.y_min[i, j, a]),
                      float(d.x_max[i, j, a]), float(d.y_max[i, j, a]))
        out[g] = iou(decoded, gt.boxes[g])
    return out


def per_prediction_loss(fm: FeatureMap, gt: GroundTruth, asg: Assignment,
                        w: LossWeights,
                        targets: dict[int, float] | None = None) -> LossBreakdown:
    """Loss of every prediction under the given assignment.

    The objectness target for a responsible prediction is the IoU between
    its decoded box and the object, treated as a constant: no gradient
    flows through the target. By default the targets are recomputed from
    fm; pass a captured objectness_targets() dict to hold them fixed while
    probing the loss.
    """
    spec = fm.spec
    ensure_finite(fm)
    d = decode_fields(fm)
    if targets is None:
        targets = objectness_targets(fm, gt, asg)

    noobj = w.lambda_noobj * d.objectness ** 2
    obj = np.zeros_like(noobj)
    cls = np.zeros_like(noobj)
    reg = np.zeros_like(noobj)

    for idx in asg.ignore_set:
        noobj[idx.i, idx.j, idx.a] = 0.0

    for g, idx in asg.responsible.items():
        i, j, a = idx.i, idx.j, idx.a
        noobj[i, j, a] = 0.0
        box = gt.boxes[g]
        tx_hat, ty_hat, tw_hat, th_hat = _targets_for(box, idx, spec)
        raw = d.raw[i, j, a]
        reg[i, j, a] = w.lambda_coord * (
            (d.sig_x[i, j, a] - tx_hat) ** 2
            + (d.sig_y[i, j, a] - ty_hat) ** 2
            + (raw[2] - tw_hat) ** 2
            + (raw[3] - th_hat) ** 2)
        obj[i, j, a] = w.lambda_obj * (d.objectness[i, j, a] - targets[g]) ** 2
        err = d.class_probs[i, j, a].copy()
        err[gt.classes[g]] -= 1.0
        cls[i, j, a] = w.lambda_cls * float(err @ err)

    obj = obj.reshape(-1)
    noobj = noobj.reshape(-1)
    cls = cls.reshape(-1)
    reg = reg.reshape(-1)
    total = obj + noobj + cls + reg
    return LossBreakdown(obj, noobj, cls, reg, total, float(total.sum()))


def loss_gradient(fm: FeatureMap, gt: GroundTruth, asg: Assignment,
                  w: LossWeights) -> np.ndarray:
    """Analytic gradient of grand_total with respect to every raw output.

    Returned with the feature map's [S, S, B*(5+C)] shape. Matches central
    finite differences; the test suite holds it to 1e-4 relative.
    """
    spec = fm.spec
    ensure_finite(fm)
    d = decode_fields(fm)
    targets = objectness_targets(fm, gt, asg)
    s, b = spec.grid_size, spec.anchor_count
    grad = np.zeros((s, s, b, spec.channels_per_prediction))

    so = d.objectness
    grad[..., 4] = 2.0 * w.lambda_noobj * so * so * (1.0 - so)
    for idx in asg.ignore_set:
        grad[idx.i, idx.j, idx.a, 4] = 0.0

    for g, idx in asg.responsible.items():
        i, j, a = idx.i, idx.j, idx.a
        box = gt.boxes[g]
        tx_hat, ty_hat, tw_hat, th_hat = _targets_for(box, idx, spec)
        raw = d.raw[i, j, a]
        sx, sy = d.sig_x[i, j, a], d.sig_y[i, j, a]
        grad[i, j, a, 0] = 2.0 * w.lambda_coord * (sx - tx_hat) * sx * (1.0 - sx)
        grad[i, j, a, 1] = 2.0 * w.lambda_coord * (sy - ty_hat) * sy * (1.0 - sy)
        grad[i, j, a, 2] = 2.0 * w.lambda_coord * (raw[2] - tw_hat)
        grad[i, j, a, 3] = 2.0 * w.lambda_coord * (raw[3] - th_hat)

        o = so[i, j, a]
        grad[i, j, a, 4] = 2.0 * w.lambda_obj * (o - targets[g]) * o * (1.0 - o)

        p = d.class_probs[i, j, a]
        err = p.copy()
        err[gt.classes[g]] -= 1.0
        grad[i, j, a, 5:] = 2.0 * w.lambda_cls * p * (err - float(err @ p))

    return grad.reshape(s, s, spec.total_channels)
