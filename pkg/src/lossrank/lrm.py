"""Hard-example mining by loss rank.

Per image and per iteration: decode all N predictions, compute each one's
loss, sort descending, drop same-class near-duplicates keeping the higher
loss, keep the top K survivors, and turn the kept set into a binary mask.
Multiplying the feature map by that mask before the loss (and, equivalently,
multiplying the loss gradient by it) confines the backward pass to the hard
examples.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation
from .grid import (
    FeatureMap,
    MaskMatrix,
    PredictionIndex,
    PredictionView,
    decode_all,
    is_prediction_atomic,
    mask_from_selection,
)
from .loss import (
    Assignment,
    GroundTruth,
    LossBreakdown,
    LossWeights,
    assign,
    loss_gradient,
    per_prediction_loss,
)


@dataclass(frozen=True)
class LrmConfig:
    """Mining knobs: how many predictions survive, and the dedup threshold.

    nms_threshold None disables deduplication entirely. enabled False turns
    the whole module into a pass-through that keeps every prediction.
    """

    hard_example_count: int = 128
    nms_threshold: float | None = 0.7
    enabled: bool = True
    force_keep_assigned: bool = False

    def __post_init__(self):
        if self.hard_example_count < 1:
            raise ContractViolation(
                f"hard_example_count must be >= 1, got {self.hard_example_count}")
        t = self.nms_threshold
        if t is not None and not 0.0 < t <= 1.0:
            raise ContractViolation(f"nms_threshold {t} outside (0, 1]")


@dataclass(frozen=True)
class RankedPrediction:
    view: PredictionView
    loss: float
    rank: int


@dataclass(frozen=True)
class SelectionReport:
    """What one mining pass did to one image's predictions."""

    image_id: str
    n_predictions: int
    n_suppressed: int
    n_kept: int
    fg_total: int
    fg_kept: int


def rank(breakdown: LossBreakdown, views: list[PredictionView]
         ) -> list[RankedPrediction]:
    """Sort predictions by loss, highest first; ties keep flat-index order."""
    n = len(views)
    if breakdown.total.shape != (n,):
        raise ContractViolation(
            f"{n} views but {breakdown.total.shape[0]} loss records")
    order = np.lexsort((np.arange(n), -breakdown.total))
    totals = breakdown.total.tolist()
    return [RankedPrediction(views[k], totals[k], r)
            for r, k in enumerate(order.tolist())]


def _require_ranked(ranked: list[RankedPrediction]) -> None:
    for r, rp in enumerate(ranked):
        if rp.rank != r:
            raise ContractViolation("input is not in ranked order")
        if r and ranked[r - 1].loss < rp.loss:
            raise ContractViolation("losses are not non-increasing")


def dedup_by_loss_nms(ranked: list[RankedPrediction],
                      threshold: float | None) -> list[RankedPrediction]:
    """Drop lower-loss near-duplicates.

    Walking in loss-descent order, a prediction is suppressed when some
    already-kept prediction has the same argmax class and overlaps it at
    IoU >= threshold. threshold None returns the input untouched.
    """
    if threshold is None:
        return list(ranked)
    _require_ranked(ranked)
    n = len(ranked)
    if n == 0:
        return []

    corners = np.empty((n, 4))
    for p, rp in enumerate(ranked):
        corners[p] = rp.view.box.corners()
    x0, y0, x1, y1 = corners.T
    aw = np.maximum(np.minimum(x1[:, None], x1[None, :])
                    - np.maximum(x0[:, None], x0[None, :]), 0.0)
    ah = np.maximum(np.minimum(y1[:, None], y1[None, :])
                    - np.maximum(y0[:, None], y0[None, :]), 0.0)
    inter = aw * ah
    areas = (x1 - x0) * (y1 - y0)
    union = areas[:, None] + areas[None, :] - inter
    overlap = np.divide(inter, union, out=np.zeros_like(inter),
                        where=union > 0)

    rows = overlap.tolist()
    kept_by_class: dict[int, list[int]] = {}
    survivors = []
    for p, rp in enumerate(ranked):
        mine = kept_by_class.setdefault(rp.view.predicted_class, [])
        row = rows[p]
        if any(row[q] >= threshold for q in mine):
            continue
        mine.append(p)
        survivors.append(rp)
    return survivors


def select_hard(ranked_deduped: list[RankedPrediction], cfg: LrmConfig,
                asg: Assignment) -> set[PredictionIndex]:
    """Indices of the predictions that stay in the mask.

    Disabled mining keeps everything it is shown; callers feed it the full
    undeduplicated ranking in that case. force_keep_assigned unions in the
    responsible predictions even past the K budget.
    """
    if not cfg.enabled:
        return {rp.view.index for rp in ranked_deduped}
    kept = {rp.view.index
            for rp in ranked_deduped[:cfg.hard_example_count]}
    if cfg.force_keep_assigned:
        kept.update(asg.responsible.values())
    return kept


def apply_mask(fm: FeatureMap, m: MaskMatrix) -> FeatureMap:
    """Elementwise gate of the raw outputs."""
    if fm.spec != m.spec:
        raise ContractViolation(
            f"feature map spec {fm.spec} does not match mask spec {m.spec}")
    return FeatureMap(fm.spec, fm.values * m.values)


def gated_feature_gradient(fm: FeatureMap, m: MaskMatrix, gt: GroundTruth,
                           w: LossWeights, *, ignore_iou: float = 0.6,
                           asg: Assignment | None = None) -> np.ndarray:
    """Gradient of the masked loss with respect to the raw outputs.

    Zero wherever the mask is zero; elsewhere equal to the gradient of the
    loss restricted to kept predictions. Both facts follow from the mask
    gating whole predictions, which is why a non-atomic mask is rejected
    here: a half-masked prediction has no meaning under this gate.
    """
    if fm.spec != m.spec:
        raise ContractViolation("feature map and mask specs differ")
    if not is_prediction_atomic(m):
        raise ContractViolation("mask is not prediction-atomic")
    if asg is None:
        asg = assign(gt, fm.spec, ignore_iou)
    return m.values * loss_gradient(fm, gt, asg, w)


def run_lrm_step(fm: FeatureMap, gt: GroundTruth, w: LossWeights,
                 cfg: LrmConfig, *, ignore_iou: float = 0.6,
                 image_id: str = "") -> tuple[MaskMatrix, LossBreakdown,
                                              SelectionReport]:
    """One full mining pass over one image's predictions.

    Composes decode, assignment, per-prediction loss, ranking, loss-descent
    deduplication, top-K selection, and mask construction. The returned
    breakdown is the ungated one the ranking was computed from.
    """
    spec = fm.spec
    views = decode_all(fm)
    asg = assign(gt, spec, ignore_iou)
    breakdown = per_prediction_loss(fm, gt, asg, w)
    ranked = rank(breakdown, views)
    deduped = dedup_by_loss_nms(ranked,
                                cfg.nms_threshold if cfg.enabled else None)
    kept = select_hard(deduped, cfg, asg)
    mask = mask_from_selection(spec, kept)

    fg = set(asg.responsible.values())
    report = SelectionReport(
        image_id=image_id,
        n_predictions=len(views),
        n_suppressed=len(ranked) - len(deduped),
        n_kept=len(kept),
        fg_total=len(fg),
        fg_kept=len(fg & kept),
    )
    return mask, breakdown, report
