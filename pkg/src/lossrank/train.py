"""Training loop: forward, mine hard examples, gated backward, update.

Batches are drawn with replacement from a dedicated RNG stream, gradients
are averaged in draw order, and the logged loss is the full ungated total
so runs with and without mining stay comparable on one axis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import RunConfig
from .errors import ContractViolation, NonFiniteGradientError, \
    TrainingAborted
from .lrm import gated_feature_gradient, run_lrm_step
from .net import (
    accumulate_gradients,
    backward,
    forward,
    init_params,
    init_sgd,
    sgd_step,
    zero_gradients,
)


@dataclass(frozen=True)
class StepInfo:
    """One training iteration's log row, averaged over the batch."""

    iteration: int
    grand_total: float
    kept_count: float
    fg_kept_fraction: float


def train_detector(samples, cfg: RunConfig):
    """Train on the given samples; returns (params, per-iteration log).

    Determinism contract: for a fixed config and sample list the whole
    trajectory, including every logged number, is bit-identical between
    runs on one machine.
    """
    spec = cfg.grid_spec()
    weights = cfg.loss_weights()
    lrm_cfg = cfg.lrm_config()
    params = init_params(spec, cfg.embed_dim, cfg.seed)
    opt = init_sgd(params, cfg.learning_rate, cfg.momentum)
    batch_rng = np.random.default_rng(
        np.random.SeedSequence(cfg.seed, spawn_key=(1,)))

    log: list[StepInfo] = []
    for iteration in range(cfg.iterations):
        picks = batch_rng.integers(0, len(samples), size=cfg.batch_size)
        grads = zero_gradients(params)
        loss_sum = 0.0
        kept_sum = 0
        fg_total = 0
        fg_kept = 0
        try:
            for idx in picks:
                sample = samples[int(idx)]
                fm, acts = forward(sample.image, params)
                mask, breakdown, report = run_lrm_step(
                    fm, sample.truth, weights, lrm_cfg,
                    ignore_iou=cfg.ignore_iou, image_id=sample.id)
                gated = gated_feature_gradient(fm, mask, sample.truth,
                                               weights,
                                               ignore_iou=cfg.ignore_iou)
                accumulate_gradients(grads, backward(gated, acts, params),
                                     scale=1.0 / cfg.batch_size)
                loss_sum += breakdown.grand_total
                kept_sum += report.n_kept
                fg_total += report.fg_total
                fg_kept += report.fg_kept
        except ContractViolation as e:
            # diverged parameters surface as overflow deep in decoding;
            # at this level that is a run failure, not a caller bug
            raise TrainingAborted(iteration, str(e)) from None
        if not np.isfinite(loss_sum):
            raise TrainingAborted(iteration, "loss is not finite")
        try:
            params, opt = sgd_step(params, grads, opt)
        except NonFiniteGradientError as e:
            raise TrainingAborted(iteration, str(e)) from None
        log.append(StepInfo(
            iteration=iteration,
            grand_total=loss_sum / cfg.batch_size,
            kept_count=kept_sum / cfg.batch_size,
            fg_kept_fraction=fg_kept / fg_total if fg_total else 1.0))
    return params, log
