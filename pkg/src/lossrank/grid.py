"""Grid geometry of the detector head.

The detector emits one raw tensor of shape [S, S, B*(5+C)] per image. Each
(cell, anchor) pair owns a contiguous channel group laid out as
[tx, ty, tw, th, to, class_0 .. class_{C-1}]; that group is one prediction,
the unit that gets ranked, selected, and masked. The binary mask matrix has
the same shape as the feature map and keeps or drops whole predictions.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.special import expit

from .boxes import Box
from .errors import ContractViolation


@dataclass(frozen=True)
class GridSpec:
    """Static geometry: cells per side, anchors, classes, image size."""

    grid_size: int
    anchor_count: int
    class_count: int
    anchors: tuple[tuple[float, float], ...]
    image_size: int

    def __post_init__(self):
        if min(self.grid_size, self.anchor_count, self.class_count) <= 0:
            raise ContractViolation(
                "grid_size, anchor_count and class_count must be positive")
        anchors = tuple((float(w), float(h)) for w, h in self.anchors)
        if len(anchors) != self.anchor_count:
            raise ContractViolation(
                f"expected {self.anchor_count} anchor priors, got {len(anchors)}")
        if any(w <= 0.0 or h <= 0.0 for w, h in anchors):
            raise ContractViolation("anchor prior sides must be positive")
        if self.image_size <= 0 or self.image_size % self.grid_size != 0:
            raise ContractViolation(
                f"image_size {self.image_size} is not a positive multiple of "
                f"grid_size {self.grid_size}")
        object.__setattr__(self, "anchors", anchors)

    @property
    def stride(self) -> int:
        return self.image_size // self.grid_size

    @property
    def channels_per_prediction(self) -> int:
        return 5 + self.class_count

    @property
    def total_channels(self) -> int:
        return self.anchor_count * self.channels_per_prediction

    @property
    def prediction_count(self) -> int:
        return self.grid_size * self.grid_size * self.anchor_count


@dataclass(frozen=True, order=True)
class PredictionIndex:
    """Addresses one prediction by cell row, cell column, and anchor slot."""

    i: int
    j: int
    a: int


def flat_index(idx: PredictionIndex, spec: GridSpec) -> int:
    """Row-major position of a prediction: (i * S + j) * B + a."""
    return (idx.i * spec.grid_size + idx.j) * spec.anchor_count + idx.a


def index_of(flat: int, spec: GridSpec) -> PredictionIndex:
    if not 0 <= flat < spec.prediction_count:
        raise ContractViolation(f"flat prediction index {flat} out of range")
    cell, a = divmod(flat, spec.anchor_count)
    i, j = divmod(cell, spec.grid_size)
    return PredictionIndex(i, j, a)


def _check_index(idx: PredictionIndex, spec: GridSpec) -> None:
    if not (0 <= idx.i < spec.grid_size and 0 <= idx.j < spec.grid_size
            and 0 <= idx.a < spec.anchor_count):
        raise ContractViolation(f"prediction index {idx} out of range for "
                                f"S={spec.grid_size}, B={spec.anchor_count}")


def _as_tensor(spec: GridSpec, values, what: str) -> np.ndarray:
    vals = np.asarray(values, dtype=np.float64)
    expected = (spec.grid_size, spec.grid_size, spec.total_channels)
    if vals.shape != expected:
        raise ContractViolation(f"{what} shape {vals.shape}, expected {expected}")
    if vals is values and vals.flags.writeable:
        vals = vals.copy()
    vals.setflags(write=False)
    return vals


@dataclass(frozen=True, eq=False)
class FeatureMap:
    """Raw (pre-activation) detector outputs plus their grid spec."""

    spec: GridSpec
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values",
                           _as_tensor(self.spec, self.values, "feature map"))


@dataclass(frozen=True, eq=False)
class MaskMatrix:
    """Binary gate tensor congruent with a feature map.

    Construction enforces binary entries. Prediction-atomicity (all 5+C
    channels of a group equal) is guaranteed by the mask builders and
    re-checked by the gradient gate, which is the consumer that depends
    on it.
    """

    spec: GridSpec
    values: np.ndarray

    def __post_init__(self):
        vals = _as_tensor(self.spec, self.values, "mask")
        if not bool(np.all((vals == 0.0) | (vals == 1.0))):
            raise ContractViolation("mask entries must be exactly 0 or 1")
        object.__setattr__(self, "values", vals)


def is_prediction_atomic(m: MaskMatrix) -> bool:
    s = m.spec
    grouped = m.values.reshape(s.grid_size, s.grid_size, s.anchor_count,
                               s.channels_per_prediction)
    return bool(np.all(grouped == grouped[..., :1]))


@dataclass(frozen=True)
class PredictionView:
    """One decoded prediction: image-space box, objectness, class scores."""

    index: PredictionIndex
    box: Box
    objectness: float
    class_scores: tuple[float, ...]
    predicted_class: int


class DecodedFields(NamedTuple):
    """Vectorized decode of a whole feature map, in [S, S, B, ...] layout.

    Single source of truth for decoding: per-index decode, bulk decode, and
    the loss both read these arrays, so they agree bitwise by construction.
    """

    raw: np.ndarray         # [S, S, B, 5+C] view of the raw outputs
    sig_x: np.ndarray       # sigmoid of tx
    sig_y: np.ndarray
    width: np.ndarray       # decoded box width in pixels
    height: np.ndarray
    objectness: np.ndarray
    class_probs: np.ndarray  # softmax over the C class logits
    x_min: np.ndarray
    y_min: np.ndarray
    x_max: np.ndarray
    y_max: np.ndarray


def ensure_finite(fm: FeatureMap) -> None:
    """Reject NaN/Inf feature values, naming the first offending element."""
    vals = fm.values
    if np.isfinite(vals).all():
        return
    i, j, c = (int(v) for v in np.argwhere(~np.isfinite(vals))[0])
    raise ContractViolation(
        f"non-finite feature value {vals[i, j, c]} at cell ({i}, {j}), channel {c}")


def decode_fields(fm: FeatureMap) -> DecodedFields:
    spec = fm.spec
    ensure_finite(fm)
    s, b = spec.grid_size, spec.anchor_count
    raw = fm.values.reshape(s, s, b, spec.channels_per_prediction)
    stride = float(spec.stride)

    cols = np.arange(s, dtype=np.float64)[None, :, None]
    rows = np.arange(s, dtype=np.float64)[:, None, None]
    sig_x = expit(raw[..., 0])
    sig_y = expit(raw[..., 1])
    cx = (cols + sig_x) * stride
    cy = (rows + sig_y) * stride

    anchor_w = np.array([w for w, _ in spec.anchors])[None, None, :]
    anchor_h = np.array([h for _, h in spec.anchors])[None, None, :]
    with np.errstate(over="ignore"):
        width = anchor_w * np.exp(raw[..., 2]) * stride
        height = anchor_h * np.exp(raw[..., 3]) * stride
    if not (np.isfinite(width).all() and np.isfinite(height).all()):
        bad = np.argwhere(~(np.isfinite(width) & np.isfinite(height)))[0]
        raise ContractViolation(
            f"decoded box size overflowed at cell ({bad[0]}, {bad[1]}), "
            f"anchor {bad[2]}")

    objectness = expit(raw[..., 4])
    logits = raw[..., 5:]
    shifted = np.exp(logits - logits.max(axis=-1, keepdims=True))
    class_probs = shifted / shifted.sum(axis=-1, keepdims=True)

    return DecodedFields(raw, sig_x, sig_y, width, height, objectness,
                         class_probs,
                         cx - width / 2.0, cy - height / 2.0,
                         cx + width / 2.0, cy + height / 2.0)


def _view_from_lists(i: int, j: int, a: int, x0, y0, x1, y1, obj, probs,
                     argmax) -> PredictionView:
    return PredictionView(
        index=PredictionIndex(i, j, a),
        box=Box(x0[i][j][a], y0[i][j][a], x1[i][j][a], y1[i][j][a]),
        objectness=obj[i][j][a],
        class_scores=tuple(probs[i][j][a]),
        predicted_class=argmax[i][j][a],
    )


def decode(fm: FeatureMap, idx: PredictionIndex) -> PredictionView:
    """Decode a single prediction to image coordinates and scores."""
    _check_index(idx, fm.spec)
    d = decode_fields(fm)
    i, j, a = idx.i, idx.j, idx.a
    probs = d.class_probs[i, j, a]
    return PredictionView(
        index=idx,
        box=Box(float(d.x_min[i, j, a]), float(d.y_min[i, j, a]),
                float(d.x_max[i, j, a]), float(d.y_max[i, j, a])),
        objectness=float(d.objectness[i, j, a]),
        class_scores=tuple(probs.tolist()),
        predicted_class=int(probs.argmax()),
    )


def decode_all(fm: FeatureMap) -> list[PredictionView]:
    """All N predictions in row-major (i, j, a) order."""
    spec = fm.spec
    d = decode_fields(fm)
    x0, y0 = d.x_min.tolist(), d.y_min.tolist()
    x1, y1 = d.x_max.tolist(), d.y_max.tolist()
    obj = d.objectness.tolist()
    probs = d.class_probs.tolist()
    argmax = d.class_probs.argmax(axis=-1).tolist()
    return [
        _view_from_lists(i, j, a, x0, y0, x1, y1, obj, probs, argmax)
        for i in range(spec.grid_size)
        for j in range(spec.grid_size)
        for a in range(spec.anchor_count)
    ]


def mask_all_ones(spec: GridSpec) -> MaskMatrix:
    shape = (spec.grid_size, spec.grid_size, spec.total_channels)
    return MaskMatrix(spec, np.ones(shape))


def mask_from_selection(spec: GridSpec, kept) -> MaskMatrix:
    """Mask with ones on every channel of each kept prediction."""
    grouped = np.zeros((spec.grid_size, spec.grid_size, spec.anchor_count,
                        spec.channels_per_prediction))
    for idx in kept:
        _check_index(idx, spec)
        grouped[idx.i, idx.j, idx.a, :] = 1.0
    return MaskMatrix(
        spec, grouped.reshape(spec.grid_size, spec.grid_size, -1))
