"""Synthetic detection datasets and their on-disk formats.

Scenes are noisy backgrounds with a handful of filled shapes, one shape
family per class, so foreground predictions stay a small fraction of the
grid. Labels are measured from the painted pixels, which makes them exact
by construction. Files use deliberately boring formats: binary P6 images,
whitespace-separated label lines, one class name per line.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .boxes import Box
from .errors import ContractViolation, DatasetError
from .loss import GroundTruth
from .net import ImageTensor

_PALETTE = (
    (0.95, 0.25, 0.20),
    (0.20, 0.90, 0.30),
    (0.25, 0.35, 0.95),
    (0.95, 0.85, 0.20),
    (0.85, 0.30, 0.90),
    (0.20, 0.85, 0.90),
)

_CLASS_NAMES = ("block", "disc", "spike", "slab", "ring", "wedge")

_PLACEMENT_ATTEMPTS = 60


def default_class_names(class_count: int) -> tuple[str, ...]:
    return tuple(_CLASS_NAMES[k] if k < len(_CLASS_NAMES) else f"class{k}"
                 for k in range(class_count))


def default_palette(class_count: int) -> tuple[tuple[float, float, float],
                                               ...]:
    return tuple(_PALETTE[k % len(_PALETTE)] for k in range(class_count))


@dataclass(frozen=True)
class SceneConfig:
    """Knobs for the scene generator.

    Object sizes are fractions of the image side. cell_fraction_cap bounds
    how many grid cells may hold object centers, which is the dataset's
    imbalance knob.
    """

    image_size: int = 64
    grid_size: int = 8
    class_count: int = 3
    objects_min: int = 1
    objects_max: int = 2
    size_min: float = 0.05
    size_max: float = 0.12
    noise_amplitude: float = 0.25
    cell_fraction_cap: float = 0.25
    colors: tuple = ()
    seed: int = 0

    def __post_init__(self):
        if self.image_size < 1 or self.grid_size < 1:
            raise ContractViolation("image_size and grid_size must be >= 1")
        if self.image_size % self.grid_size != 0:
            raise ContractViolation(
                f"image_size {self.image_size} not divisible by grid_size "
                f"{self.grid_size}")
        if self.class_count < 1:
            raise ContractViolation("class_count must be >= 1")
        if not (0 <= self.objects_min <= self.objects_max):
            raise ContractViolation("objects range must be non-empty")
        if not (0.0 < self.size_min <= self.size_max <= 1.0):
            raise ContractViolation("object size range must sit in (0, 1]")
        if not (0.0 <= self.noise_amplitude < 1.0):
            raise ContractViolation("noise_amplitude must be in [0, 1)")
        if not (0.0 < self.cell_fraction_cap <= 1.0):
            raise ContractViolation("cell_fraction_cap must be in (0, 1]")
        if not self.colors:
            object.__setattr__(self, "colors",
                               default_palette(self.class_count))
        if len(self.colors) != self.class_count:
            raise ContractViolation(
                f"need {self.class_count} colors, got {len(self.colors)}")

    @property
    def stride(self) -> int:
        return self.image_size // self.grid_size


@dataclass(frozen=True)
class Sample:
    image: ImageTensor
    truth: GroundTruth
    id: str

    def __post_init__(self):
        side = float(self.image.side)
        for k, b in enumerate(self.truth.boxes):
            if b.x_min < 0 or b.y_min < 0 or b.x_max > side or \
                    b.y_max > side:
                raise ContractViolation(
                    f"sample {self.id}: box {k} leaves the image bounds")


def _paint(mask_x, mask_y, shape_kind, box):
    """Boolean mask of pixel centers covered by the shape inside box."""
    cx = (box[0] + box[2]) / 2.0
    cy = (box[1] + box[3]) / 2.0
    rx = (box[2] - box[0]) / 2.0
    ry = (box[3] - box[1]) / 2.0
    if shape_kind == 0:  # rectangle
        return ((mask_x >= box[0]) & (mask_x <= box[2])
                & (mask_y >= box[1]) & (mask_y <= box[3]))
    if shape_kind == 1:  # ellipse
        return (((mask_x - cx) / rx) ** 2 + ((mask_y - cy) / ry) ** 2) <= 1.0
    # diamond
    return (np.abs(mask_x - cx) / rx + np.abs(mask_y - cy) / ry) <= 1.0


def _boxes_clear(candidate, placed, pad=1.0):
    x0, y0, x1, y1 = candidate
    for ox0, oy0, ox1, oy1 in placed:
        if x0 - pad < ox1 and x1 + pad > ox0 and \
                y0 - pad < oy1 and y1 + pad > oy0:
            return False
    return True


def _generate_one(cfg: SceneConfig, index: int) -> Sample:
    rng = np.random.default_rng(
        np.random.SeedSequence(cfg.seed, spawn_key=(2, index)))
    side = cfg.image_size
    image = cfg.noise_amplitude * rng.random((side, side, 3))

    n_objects = int(rng.integers(cfg.objects_min, cfg.objects_max + 1))
    max_cells = max(1, math.floor(cfg.cell_fraction_cap
                                  * cfg.grid_size * cfg.grid_size))
    if n_objects > max_cells:
        raise DatasetError(
            f"cell_fraction_cap {cfg.cell_fraction_cap} allows {max_cells} "
            f"occupied cells, cannot place {n_objects} objects")

    cols = (np.arange(side) + 0.5)[None, :] * np.ones((side, 1))
    rows = (np.arange(side) + 0.5)[:, None] * np.ones((1, side))

    used_cells: set[tuple[int, int]] = set()
    placed: list[tuple] = []
    boxes: list[Box] = []
    classes: list[int] = []
    for k in range(n_objects):
        free = [(i, j) for i in range(cfg.grid_size)
                for j in range(cfg.grid_size) if (i, j) not in used_cells]
        for attempt in range(_PLACEMENT_ATTEMPTS):
            ci, cj = free[int(rng.integers(len(free)))]
            cx = (cj + rng.random()) * cfg.stride
            cy = (ci + rng.random()) * cfg.stride
            w = max(2.0, rng.uniform(cfg.size_min, cfg.size_max) * side)
            h = max(2.0, rng.uniform(cfg.size_min, cfg.size_max) * side)
            nominal = (cx - w / 2.0, cy - h / 2.0,
                       cx + w / 2.0, cy + h / 2.0)
            if nominal[0] < 0 or nominal[1] < 0 or nominal[2] > side or \
                    nominal[3] > side:
                continue
            if not _boxes_clear(nominal, placed):
                continue
            cls = int(rng.integers(cfg.class_count))
            mask = _paint(cols, rows, cls % 3, nominal)
            if not mask.any():
                continue
            image[mask] = cfg.colors[cls]
            ys, xs = np.nonzero(mask)
            boxes.append(Box(float(xs.min()), float(ys.min()),
                             float(xs.max() + 1), float(ys.max() + 1)))
            classes.append(cls)
            placed.append(nominal)
            used_cells.add((ci, cj))
            break
        else:
            raise DatasetError(
                f"sample {index}: could not place object {k} after "
                f"{_PLACEMENT_ATTEMPTS} attempts")

    return Sample(ImageTensor(image), GroundTruth(tuple(boxes),
                                                  tuple(classes)),
                  f"{index:05d}")


def generate(cfg: SceneConfig, count: int) -> list[Sample]:
    """Render `count` seeded scenes.

    Each sample draws from its own RNG stream keyed by (seed, index), so
    any subset can be regenerated independently and identically.
    """
    if count < 1:
        raise ContractViolation("count must be >= 1")
    return [_generate_one(cfg, index) for index in range(count)]


def write_labels(gt: GroundTruth, class_names) -> str:
    lines = []
    for b, c in zip(gt.boxes, gt.classes):
        if c >= len(class_names):
            raise ContractViolation(
                f"class id {c} has no name in a {len(class_names)}-entry "
                f"class list")
        lines.append(f"{class_names[c]} {b.x_min!r} {b.y_min!r} "
                     f"{b.x_max!r} {b.y_max!r}\n")
    return "".join(lines)


def parse_labels(text: str, class_names) -> GroundTruth:
    """Parse label lines; errors carry 1-based line and column positions."""
    name_to_id = {name: k for k, name in enumerate(class_names)}
    boxes = []
    classes = []
    for ln, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        tokens = line.split()
        if len(tokens) != 5:
            raise DatasetError(
                f"line {ln}: expected 5 fields, got {len(tokens)}")
        if tokens[0] not in name_to_id:
            raise DatasetError(
                f"line {ln}, column 1: unknown class name {tokens[0]!r}")
        coords = []
        for col, tok in enumerate(tokens[1:], start=2):
            try:
                v = float(tok)
            except ValueError:
                raise DatasetError(
                    f"line {ln}, column {col}: not a number: {tok!r}") \
                    from None
            if not math.isfinite(v):
                raise DatasetError(
                    f"line {ln}, column {col}: non-finite coordinate")
            coords.append(v)
        if coords[0] > coords[2] or coords[1] > coords[3]:
            raise DatasetError(f"line {ln}: inverted box {coords}")
        boxes.append(Box(*coords))
        classes.append(name_to_id[tokens[0]])
    return GroundTruth(tuple(boxes), tuple(classes))


def split(samples, ratio: float, seed: int):
    """Seeded shuffle, then cut off round(ratio * n) for the first part."""
    if not (0.0 < ratio < 1.0):
        raise ContractViolation("split ratio must be in (0, 1)")
    order = np.random.default_rng(seed).permutation(len(samples))
    n_first = round(ratio * len(samples))
    first = [samples[i] for i in order[:n_first]]
    second = [samples[i] for i in order[n_first:]]
    return first, second


def write_ppm(path, values: np.ndarray) -> None:
    """Binary P6, 8 bits per channel, rows top to bottom."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    payload = np.round(v * 255.0).astype(np.uint8)
    h, w = payload.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(payload.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()
    # exactly one whitespace byte ends the header; a split() would swallow
    # a payload that happens to start with a whitespace-valued pixel byte
    pos = 0
    tokens = []
    while len(tokens) < 4 and pos < len(blob):
        while pos < len(blob) and blob[pos] in b" \t\n\r\x0b\x0c":
            pos += 1
        start = pos
        while pos < len(blob) and blob[pos] not in b" \t\n\r\x0b\x0c":
            pos += 1
        if pos > start:
            tokens.append(blob[start:pos])
    if len(tokens) < 4 or tokens[0] != b"P6":
        raise DatasetError(f"{path}: not a binary P6 file")
    try:
        w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    except ValueError:
        raise DatasetError(f"{path}: malformed P6 header") from None
    if maxval != 255:
        raise DatasetError(f"{path}: only maxval 255 is supported")
    pixels = blob[pos + 1:pos + 1 + w * h * 3]
    if len(pixels) != w * h * 3:
        raise DatasetError(
            f"{path}: expected {w * h * 3} pixel bytes, got {len(pixels)}")
    arr = np.frombuffer(pixels, dtype=np.uint8).reshape(h, w, 3)
    return arr.astype(np.float64) / 255.0


def save_dataset(root, samples, class_names) -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "labels").mkdir(parents=True, exist_ok=True)
    (root / "classes.txt").write_text(
        "".join(f"{name}\n" for name in class_names), encoding="ascii")
    for s in samples:
        write_ppm(root / "images" / f"{s.id}.ppm", s.image.values)
        (root / "labels" / f"{s.id}.txt").write_text(
            write_labels(s.truth, class_names), encoding="ascii")


def load_dataset(root):
    root = Path(root)
    classes_file = root / "classes.txt"
    if not classes_file.is_file():
        raise DatasetError(f"{root}: missing classes.txt")
    class_names = classes_file.read_text(encoding="ascii").split()
    image_dir = root / "images"
    label_dir = root / "labels"
    if not image_dir.is_dir() or not label_dir.is_dir():
        raise DatasetError(f"{root}: missing images/ or labels/ directory")
    samples = []
    for img_path in sorted(image_dir.glob("*.ppm")):
        sample_id = img_path.stem
        label_path = label_dir / f"{sample_id}.txt"
        if not label_path.is_file():
            raise DatasetError(f"{root}: no label file for {sample_id}")
        values = read_ppm(img_path)
        try:
            truth = parse_labels(label_path.read_text(encoding="ascii"),
                                 class_names)
        except DatasetError as e:
            raise DatasetError(f"{label_path}: {e}") from None
        samples.append(Sample(ImageTensor(values), truth, sample_id))
    if not samples:
        raise DatasetError(f"{root}: dataset is empty")
    return samples, class_names
