"""Minimal differentiable grid detector.

The network maps an image to a raw prediction grid: non-overlapping
stride-sized patches are projected to per-cell embeddings, pushed through
two tanh layers, and an output affine stage emits B*(5+C) channels per
cell. Every gradient is hand-derived reverse mode, which keeps the whole
chain checkable against finite differences.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import ContractViolation, NonFiniteGradientError
from .grid import FeatureMap, GridSpec

PARAM_NAMES = ("w_embed", "b_embed", "w_h1", "b_h1", "w_h2", "b_h2",
               "w_out", "b_out")


@dataclass(frozen=True, eq=False)
class ImageTensor:
    """Square RGB image, values in [0, 1], double precision."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 3 or v.shape[0] != v.shape[1] or v.shape[2] != 3:
            raise ContractViolation(
                f"image must be [side, side, 3], got {v.shape}")
        if not np.isfinite(v).all():
            raise ContractViolation("image contains non-finite values")
        v = v.copy() if v is self.values else v
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def side(self) -> int:
        return self.values.shape[0]


def _param_shapes(spec: GridSpec, embed_dim: int) -> dict[str, tuple]:
    patch_dim = spec.stride * spec.stride * 3
    d = embed_dim
    return {
        "w_embed": (patch_dim, d), "b_embed": (d,),
        "w_h1": (d, d), "b_h1": (d,),
        "w_h2": (d, d), "b_h2": (d,),
        "w_out": (d, spec.total_channels), "b_out": (spec.total_channels,),
    }


@dataclass(frozen=True, eq=False)
class DetectorParams:
    spec: GridSpec
    embed_dim: int
    w_embed: np.ndarray
    b_embed: np.ndarray
    w_h1: np.ndarray
    b_h1: np.ndarray
    w_h2: np.ndarray
    b_h2: np.ndarray
    w_out: np.ndarray
    b_out: np.ndarray
    seed: int = 0

    def __post_init__(self):
        if self.embed_dim < 1:
            raise ContractViolation("embed_dim must be positive")
        shapes = _param_shapes(self.spec, self.embed_dim)
        for name in PARAM_NAMES:
            t = np.asarray(getattr(self, name), dtype=np.float64)
            if t.shape != shapes[name]:
                raise ContractViolation(
                    f"{name} must have shape {shapes[name]}, got {t.shape}")
            if not np.isfinite(t).all():
                raise ContractViolation(f"{name} contains non-finite values")
            object.__setattr__(self, name, t)

    def tensors(self) -> list[tuple[str, np.ndarray]]:
        return [(name, getattr(self, name)) for name in PARAM_NAMES]


def init_params(spec: GridSpec, embed_dim: int, seed: int) -> DetectorParams:
    """Uniform [-1/sqrt(fan_in), +1/sqrt(fan_in)] init from a fixed stream.

    Tensors are drawn in PARAM_NAMES order so the same seed always yields
    bit-identical parameters.
    """
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0,)))
    shapes = _param_shapes(spec, embed_dim)
    fan_in = {
        "w_embed": shapes["w_embed"][0], "b_embed": shapes["w_embed"][0],
        "w_h1": embed_dim, "b_h1": embed_dim,
        "w_h2": embed_dim, "b_h2": embed_dim,
        "w_out": embed_dim, "b_out": embed_dim,
    }
    drawn = {}
    for name in PARAM_NAMES:
        bound = 1.0 / np.sqrt(fan_in[name])
        drawn[name] = rng.uniform(-bound, bound, size=shapes[name])
    return DetectorParams(spec=spec, embed_dim=embed_dim, seed=seed, **drawn)


class Activations(NamedTuple):
    """Intermediates retained by forward for the backward pass."""

    patches: np.ndarray  # [S*S, patch_dim]
    embed: np.ndarray    # [S*S, D]
    h1: np.ndarray       # [S*S, D]
    h2: np.ndarray       # [S*S, D]


def _patchify(img: ImageTensor, spec: GridSpec) -> np.ndarray:
    if img.side != spec.image_size:
        raise ContractViolation(
            f"image side {img.side} does not match grid image_size "
            f"{spec.image_size}")
    s, stride = spec.grid_size, spec.stride
    cells = img.values.reshape(s, stride, s, stride, 3)
    return cells.transpose(0, 2, 1, 3, 4).reshape(s * s, stride * stride * 3)


def forward(img: ImageTensor, p: DetectorParams) -> tuple[FeatureMap,
                                                          Activations]:
    patches = _patchify(img, p.spec)
    embed = patches @ p.w_embed + p.b_embed
    h1 = np.tanh(embed @ p.w_h1 + p.b_h1)
    h2 = np.tanh(h1 @ p.w_h2 + p.b_h2)
    out = h2 @ p.w_out + p.b_out
    s = p.spec.grid_size
    fm = FeatureMap(p.spec, out.reshape(s, s, p.spec.total_channels))
    return fm, Activations(patches, embed, h1, h2)


def backward(grad_map: np.ndarray, acts: Activations,
             p: DetectorParams) -> dict[str, np.ndarray]:
    """Reverse-mode gradients of the forward map for an upstream gradient.

    `grad_map` is d(loss)/d(feature map), shape [S, S, total_channels].
    Returns one gradient tensor per parameter, keyed like PARAM_NAMES.
    """
    s = p.spec.grid_size
    want = (s, s, p.spec.total_channels)
    g = np.asarray(grad_map, dtype=np.float64)
    if g.shape != want:
        raise ContractViolation(
            f"upstream gradient must have shape {want}, got {g.shape}")
    g_out = g.reshape(s * s, p.spec.total_channels)

    d_w_out = acts.h2.T @ g_out
    d_b_out = g_out.sum(axis=0)
    g_h2 = g_out @ p.w_out.T

    g_a2 = g_h2 * (1.0 - acts.h2 ** 2)
    d_w_h2 = acts.h1.T @ g_a2
    d_b_h2 = g_a2.sum(axis=0)
    g_h1 = g_a2 @ p.w_h2.T

    g_a1 = g_h1 * (1.0 - acts.h1 ** 2)
    d_w_h1 = acts.embed.T @ g_a1
    d_b_h1 = g_a1.sum(axis=0)
    g_e = g_a1 @ p.w_h1.T

    d_w_embed = acts.patches.T @ g_e
    d_b_embed = g_e.sum(axis=0)

    return {
        "w_embed": d_w_embed, "b_embed": d_b_embed,
        "w_h1": d_w_h1, "b_h1": d_b_h1,
        "w_h2": d_w_h2, "b_h2": d_b_h2,
        "w_out": d_w_out, "b_out": d_b_out,
    }


def zero_gradients(p: DetectorParams) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(t) for name, t in p.tensors()}


def accumulate_gradients(into: dict[str, np.ndarray],
                         grads: dict[str, np.ndarray],
                         scale: float = 1.0) -> None:
    """In-place `into += scale * grads`; reduction order is the caller's."""
    for name in PARAM_NAMES:
        into[name] += scale * grads[name]


@dataclass(frozen=True, eq=False)
class SgdState:
    learning_rate: float
    momentum: float
    velocities: dict[str, np.ndarray]

    def __post_init__(self):
        if not (np.isfinite(self.learning_rate)
                and self.learning_rate > 0.0):
            raise ContractViolation("learning_rate must be positive")
        if not (0.0 <= self.momentum < 1.0):
            raise ContractViolation("momentum must be in [0, 1)")


def init_sgd(p: DetectorParams, learning_rate: float,
             momentum: float) -> SgdState:
    return SgdState(learning_rate, momentum,
                    {name: np.zeros_like(t) for name, t in p.tensors()})


def sgd_step(p: DetectorParams, grads: dict[str, np.ndarray],
             opt: SgdState) -> tuple[DetectorParams, SgdState]:
    """Classical momentum update: v' = mu*v + g, p' = p - lr*v'."""
    new_vel = {}
    new_tensors = {}
    for name in PARAM_NAMES:
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != getattr(p, name).shape:
            raise ContractViolation(
                f"gradient for {name} has shape {g.shape}, expected "
                f"{getattr(p, name).shape}")
        if not np.isfinite(g).all():
            raise NonFiniteGradientError(
                f"non-finite gradient in {name}")
        v = opt.momentum * opt.velocities[name] + g
        new_vel[name] = v
        new_tensors[name] = getattr(p, name) - opt.learning_rate * v
    new_params = dataclasses.replace(p, **new_tensors)
    return new_params, SgdState(opt.learning_rate, opt.momentum, new_vel)


CHECKPOINT_VERSION = 1


def save_checkpoint(path, p: DetectorParams) -> None:
    """Write params plus their GridSpec to an npz file, exactly."""
    arrays = {name: t for name, t in p.tensors()}
    np.savez(
        path,
        format_version=np.int64(CHECKPOINT_VERSION),
        grid_size=np.int64(p.spec.grid_size),
        anchor_count=np.int64(p.spec.anchor_count),
        class_count=np.int64(p.spec.class_count),
        anchors=np.asarray(p.spec.anchors, dtype=np.float64),
        image_size=np.int64(p.spec.image_size),
        embed_dim=np.int64(p.embed_dim),
        seed=np.int64(p.seed),
        **arrays,
    )


def load_checkpoint(path) -> DetectorParams:
    with np.load(path) as z:
        names = set(z.files)
        meta = {"format_version", "grid_size", "anchor_count", "class_count",
                "anchors", "image_size", "embed_dim", "seed"}
        missing = sorted((meta | set(PARAM_NAMES)) - names)
        if missing:
            raise ContractViolation(
                f"checkpoint is missing fields: {', '.join(missing)}")
        version = int(z["format_version"])
        if version != CHECKPOINT_VERSION:
            raise ContractViolation(
                f"unsupported checkpoint version {version}, expected "
                f"{CHECKPOINT_VERSION}")
        anchors = tuple((float(w), float(h)) for w, h in z["anchors"])
        spec = GridSpec(grid_size=int(z["grid_size"]),
                        anchor_count=int(z["anchor_count"]),
                        class_count=int(z["class_count"]),
                        anchors=anchors,
                        image_size=int(z["image_size"]))
        tensors = {name: z[name] for name in PARAM_NAMES}
        return DetectorParams(spec=spec, embed_dim=int(z["embed_dim"]),
                              seed=int(z["seed"]), **tensors)
