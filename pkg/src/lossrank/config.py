"""Flat key = value run configuration.

One file drives every command: grid geometry, loss weights, mining knobs,
optimizer, dataset generation, and evaluation thresholds. Unknown keys are
rejected with their line number, every key has a default, and formatting a
config back out reproduces an equivalent file (floats are written with
repr, so values survive the round trip exactly).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

from .data import SceneConfig
from .errors import ConfigError, ContractViolation
from .grid import GridSpec
from .loss import LossWeights
from .lrm import LrmConfig


def parse_anchors(text: str) -> tuple:
    """'1.5x1.5,3.0x3.0' -> ((1.5, 1.5), (3.0, 3.0))."""
    pairs = []
    for part in text.split(","):
        part = part.strip()
        w, sep, h = part.partition("x")
        if not sep:
            raise ConfigError(
                f"anchor {part!r} is not of the form WxH")
        try:
            pairs.append((float(w), float(h)))
        except ValueError:
            raise ConfigError(f"anchor {part!r} has non-numeric sides") \
                from None
    return tuple(pairs)


def format_anchors(pairs) -> str:
    return ",".join(f"{w!r}x{h!r}" for w, h in pairs)


@dataclass(frozen=True)
class RunConfig:
    # grid geometry
    grid_size: int = 8
    anchor_count: int = 2
    class_count: int = 3
    anchors: str = "0.5x0.5,1.0x1.0"
    image_size: int = 64
    # loss
    lambda_coord: float = 5.0
    lambda_obj: float = 1.0
    lambda_noobj: float = 0.5
    lambda_cls: float = 1.0
    ignore_iou: float = 0.6
    # mining
    lrm_enabled: bool = True
    hard_example_count: int = 128
    nms_threshold: float | None = 0.7
    force_keep_assigned: bool = False
    # optimizer
    learning_rate: float = 0.001
    momentum: float = 0.9
    batch_size: int = 8
    iterations: int = 2000
    embed_dim: int = 32
    # data
    data_dir: str = ""
    dataset_count: int = 600
    objects_min: int = 1
    objects_max: int = 2
    object_size_min: float = 0.05
    object_size_max: float = 0.12
    noise_amplitude: float = 0.25
    cell_fraction_cap: float = 0.25
    split_ratio: float = 0.9
    data_seed: int | None = None
    # evaluation
    eval_iou_threshold: float = 0.5
    inference_nms_threshold: float = 0.45
    confidence_floor: float = 0.005
    ap_interpolation: str = "11point"
    # master seed
    seed: int = 0

    def __post_init__(self):
        try:
            self.grid_spec()
            self.loss_weights()
            self.lrm_config()
            self.scene_config()
        except ContractViolation as e:
            raise ConfigError(str(e)) from None
        if self.batch_size < 1 or self.iterations < 1:
            raise ConfigError("batch_size and iterations must be >= 1")
        if self.embed_dim < 1:
            raise ConfigError("embed_dim must be >= 1")
        if self.dataset_count < 2:
            raise ConfigError("dataset_count must be >= 2")
        if not (0.0 < self.learning_rate):
            raise ConfigError("learning_rate must be positive")
        if not (0.0 <= self.momentum < 1.0):
            raise ConfigError("momentum must be in [0, 1)")
        if not (0.0 < self.split_ratio < 1.0):
            raise ConfigError("split_ratio must be in (0, 1)")
        if not (0.0 < self.eval_iou_threshold <= 1.0):
            raise ConfigError("eval_iou_threshold must be in (0, 1]")
        if not (0.0 < self.inference_nms_threshold <= 1.0):
            raise ConfigError("inference_nms_threshold must be in (0, 1]")
        if not (0.0 <= self.confidence_floor < 1.0):
            raise ConfigError("confidence_floor must be in [0, 1)")
        if self.ap_interpolation not in ("11point", "area"):
            raise ConfigError(
                f"ap_interpolation must be 11point or area, got "
                f"{self.ap_interpolation!r}")

    def grid_spec(self) -> GridSpec:
        return GridSpec(grid_size=self.grid_size,
                        anchor_count=self.anchor_count,
                        class_count=self.class_count,
                        anchors=parse_anchors(self.anchors),
                        image_size=self.image_size)

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda_coord, self.lambda_obj,
                           self.lambda_noobj, self.lambda_cls)

    def lrm_config(self) -> LrmConfig:
        return LrmConfig(hard_example_count=self.hard_example_count,
                         nms_threshold=self.nms_threshold,
                         enabled=self.lrm_enabled,
                         force_keep_assigned=self.force_keep_assigned)

    def effective_data_seed(self) -> int:
        return self.seed if self.data_seed is None else self.data_seed

    def scene_config(self) -> SceneConfig:
        return SceneConfig(image_size=self.image_size,
                           grid_size=self.grid_size,
                           class_count=self.class_count,
                           objects_min=self.objects_min,
                           objects_max=self.objects_max,
                           size_min=self.object_size_min,
                           size_max=self.object_size_max,
                           noise_amplitude=self.noise_amplitude,
                           cell_fraction_cap=self.cell_fraction_cap,
                           seed=self.effective_data_seed())


_FIELD_KINDS = {
    "grid_size": "int", "anchor_count": "int", "class_count": "int",
    "anchors": "str", "image_size": "int",
    "lambda_coord": "float", "lambda_obj": "float",
    "lambda_noobj": "float", "lambda_cls": "float", "ignore_iou": "float",
    "lrm_enabled": "bool", "hard_example_count": "int",
    "nms_threshold": "opt_float", "force_keep_assigned": "bool",
    "learning_rate": "float", "momentum": "float", "batch_size": "int",
    "iterations": "int", "embed_dim": "int",
    "data_dir": "str", "dataset_count": "int",
    "objects_min": "int", "objects_max": "int",
    "object_size_min": "float", "object_size_max": "float",
    "noise_amplitude": "float", "cell_fraction_cap": "float",
    "split_ratio": "float", "data_seed": "opt_int",
    "eval_iou_threshold": "float", "inference_nms_threshold": "float",
    "confidence_floor": "float", "ap_interpolation": "str",
    "seed": "int",
}

assert set(_FIELD_KINDS) == {f.name for f in dataclasses.fields(RunConfig)}


def _parse_value(kind: str, value: str):
    if kind == "int":
        return int(value)
    if kind == "float":
        return float(value)
    if kind == "bool":
        if value not in ("true", "false"):
            raise ValueError(f"expected true or false, got {value!r}")
        return value == "true"
    if kind == "opt_float":
        return None if value == "none" else float(value)
    if kind == "opt_int":
        return None if value == "none" else int(value)
    return value


def _format_value(kind: str, value) -> str:
    if value is None:
        return "none"
    if kind == "bool":
        return "true" if value else "false"
    if kind in ("float", "opt_float"):
        return repr(value)
    return str(value)


def parse_config(text: str) -> RunConfig:
    """Parse key = value lines; '#' starts a comment, blank lines allowed."""
    overrides = {}
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {ln}: expected key = value")
        key = key.strip()
        value = value.strip()
        if key not in _FIELD_KINDS:
            raise ConfigError(f"line {ln}: unknown key {key!r}")
        if key in overrides:
            raise ConfigError(f"line {ln}: duplicate key {key!r}")
        try:
            overrides[key] = _parse_value(_FIELD_KINDS[key], value)
        except ValueError as e:
            raise ConfigError(
                f"line {ln}: bad value for {key!r}: {e}") from None
    return RunConfig(**overrides)


def format_config(cfg: RunConfig) -> str:
    """Every key on its own line, declaration order, parse-exact values."""
    lines = []
    for f in dataclasses.fields(RunConfig):
        lines.append(f"{f.name} = "
                     f"{_format_value(_FIELD_KINDS[f.name], getattr(cfg, f.name))}\n")
    return "".join(lines)
