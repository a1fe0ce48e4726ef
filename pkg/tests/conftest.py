"""Shared generators for randomized test instances."""

import numpy as np

from lossrank.boxes import Box
from lossrank.grid import FeatureMap, GridSpec
from lossrank.loss import GroundTruth


def random_feature_map(rng, spec, scale=2.0):
    shape = (spec.grid_size, spec.grid_size, spec.total_channels)
    return FeatureMap(spec, rng.normal(scale=scale, size=shape))


def random_truth(rng, spec, n_objects=None, max_objects=3,
                 distinct_cells=False):
    """Random in-bounds ground truth for a spec.

    distinct_cells forces object centers into different grid cells, which
    keeps assignment free of anchor conflicts.
    """
    size = spec.image_size
    if n_objects is None:
        n_objects = int(rng.integers(0, max_objects + 1))
    boxes = []
    classes = []
    used = set()
    attempts = 0
    while len(boxes) < n_objects:
        attempts += 1
        if attempts > 500:
            break
        w = float(rng.uniform(4.0, size / 2))
        h = float(rng.uniform(4.0, size / 2))
        cx = float(rng.uniform(w / 2, size - w / 2))
        cy = float(rng.uniform(h / 2, size - h / 2))
        if distinct_cells:
            cell = (int(cy // spec.stride), int(cx // spec.stride))
            if cell in used:
                continue
            used.add(cell)
        boxes.append(Box(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2))
        classes.append(int(rng.integers(0, spec.class_count)))
    return GroundTruth(tuple(boxes), tuple(classes))
