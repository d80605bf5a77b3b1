"""Domain types, dataset loading and box geometry.

Boxes are axis-aligned ``(x, y, w, h)`` in pixels with a 0-indexed top-left
origin. A pixel ``i`` covers the continuous interval ``[i, i + 1)``.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence as SequenceT

import numpy as np
from PIL import Image

# RGBT210 per-video challenge tags.
ATTRIBUTES = {
    "NO": "no occlusion",
    "PO": "partial occlusion",
    "HO": "heavy occlusion",
    "LI": "low illumination",
    "LR": "low resolution",
    "TC": "thermal crossover",
    "DEF": "deformation",
    "FM": "fast motion",
    "SV": "scale variation",
    "MB": "motion blur",
    "CM": "camera moving",
    "BC": "background clutter",
}

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp")


class DatasetError(ValueError):
    """Raised for malformed or inconsistent sequence directories."""


@dataclass(frozen=True)
class BoundingBox:
    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        for name in ("x", "y", "w", "h"):
            v = float(getattr(self, name))
            object.__setattr__(self, name, v)
            if not math.isfinite(v):
                raise ValueError(f"box coordinate {name}={v} is not finite")
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"box size must be positive, got w={self.w}, h={self.h}")

    @classmethod
    def from_center(cls, cx: float, cy: float, w: float, h: float) -> "BoundingBox":
        return cls(cx - w / 2.0, cy - h / 2.0, w, h)

    @classmethod
    def from_array(cls, a) -> "BoundingBox":
        a = [float(v) for v in a]
        return cls(*a)

    @property
    def center(self) -> tuple[float, float]:
        return (self.x + self.w / 2.0, self.y + self.h / 2.0)

    @property
    def area(self) -> float:
        return self.w * self.h

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.w, self.h], dtype=np.float64)

    def to_xyxy(self) -> tuple[float, float, float, float]:
        return (self.x, self.y, self.x + self.w, self.y + self.h)

    def inside(self, height: int, width: int) -> bool:
        return self.x >= 0 and self.y >= 0 and self.x + self.w <= width and self.y + self.h <= height


@dataclass(frozen=True)
class FramePair:
    """Aligned RGB (H x W x 3) and TIR (H x W x 1) images in [0, 1]."""

    rgb: np.ndarray
    tir: np.ndarray
    index: int = 0

    def __post_init__(self):
        rgb, tir = np.asarray(self.rgb), np.asarray(self.tir)
        if tir.ndim == 2:
            tir = tir[..., None]
        if rgb.ndim != 3 or rgb.shape[2] != 3:
            raise ValueError(f"rgb must be H x W x 3, got {rgb.shape}")
        if tir.ndim != 3 or tir.shape[2] != 1:
            raise ValueError(f"tir must be H x W x 1, got {tir.shape}")
        if rgb.shape[:2] != tir.shape[:2]:
            raise ValueError(f"rgb {rgb.shape[:2]} and tir {tir.shape[:2]} sizes differ")
        for name, a in (("rgb", rgb), ("tir", tir)):
            if a.size and (a.min() < 0.0 or a.max() > 1.0):
                raise ValueError(f"{name} values must lie in [0, 1]")
        rgb.setflags(write=False)
        tir.setflags(write=False)
        object.__setattr__(self, "rgb", rgb)
        object.__setattr__(self, "tir", tir)

    @property
    def shape(self) -> tuple[int, int]:
        return self.rgb.shape[:2]


@dataclass(frozen=True)
class Sequence:
    name: str
    frames: tuple
    groundtruth: tuple
    attributes: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        object.__setattr__(self, "frames", tuple(self.frames))
        object.__setattr__(self, "groundtruth", tuple(self.groundtruth))
        object.__setattr__(self, "attributes", frozenset(self.attributes))
        if len(self.frames) != len(self.groundtruth):
            raise ValueError(
                f"{self.name}: {len(self.frames)} frames but {len(self.groundtruth)} boxes")
        if len(self.frames) < 2:
            raise ValueError(f"{self.name}: a sequence needs at least 2 frames")
        unknown = set(self.attributes) - set(ATTRIBUTES)
        if unknown:
            raise ValueError(f"{self.name}: unknown attribute tags {sorted(unknown)}")

    def __len__(self):
        return len(self.frames)


@dataclass(frozen=True)
class SampleSet:
    """Ordered (FramePair, BoundingBox) items, e.g. one half of a training episode."""

    items: tuple

    def __post_init__(self):
        object.__setattr__(self, "items", tuple(self.items))
        if not self.items:
            raise ValueError("SampleSet must not be empty")
        sizes = {frame.shape for frame, _ in self.items}
        if len(sizes) != 1:
            raise ValueError(f"SampleSet frames differ in size: {sorted(sizes)}")

    def __len__(self):
        return len(self.items)

    @property
    def frames(self):
        return [f for f, _ in self.items]

    @property
    def boxes(self):
        return [b for _, b in self.items]


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union of two boxes; 0 when disjoint."""
    return float(iou_array(a.as_array(), b.as_array())[0])


def iou_array(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise IoU between two (N, 4) xywh arrays."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    a2, b2 = a[:, :2] + a[:, 2:], b[:, :2] + b[:, 2:]
    iw = np.minimum(a2[:, 0], b2[:, 0]) - np.maximum(a[:, 0], b[:, 0])
    ih = np.minimum(a2[:, 1], b2[:, 1]) - np.maximum(a[:, 1], b[:, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    # areas from the same corner differences, so identical boxes give exactly 1
    area_a = (a2[:, 0] - a[:, 0]) * (a2[:, 1] - a[:, 1])
    area_b = (b2[:, 0] - b[:, 0]) * (b2[:, 1] - b[:, 1])
    union = area_a + area_b - inter
    return np.clip(inter / union, 0.0, 1.0)


def center_error(a: BoundingBox, b: BoundingBox) -> float:
    (ax, ay), (bx, by) = a.center, b.center
    return math.hypot(ax - bx, ay - by)


def center_error_array(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    ca = a[:, :2] + a[:, 2:] / 2.0
    cb = b[:, :2] + b[:, 2:] / 2.0
    return np.hypot(*(ca - cb).T)


# --------------------------------------------------------------------- I/O

def _format_number(v: float) -> str:
    if float(v).is_integer():
        return str(int(v))
    return repr(float(v))


def format_box(box: BoundingBox) -> str:
    return ",".join(_format_number(v) for v in (box.x, box.y, box.w, box.h))


def parse_box_line(line: str, lineno: int = 0, source: str = "") -> BoundingBox:
    parts = [p for p in line.replace("\t", ",").replace(" ", ",").split(",") if p]
    where = f"{source}:{lineno}" if source else f"line {lineno}"
    if len(parts) != 4:
        raise DatasetError(f"{where}: expected 4 comma-separated values, got {line.strip()!r}")
    try:
        values = [float(p) for p in parts]
    except ValueError:
        raise DatasetError(f"{where}: non-numeric box value in {line.strip()!r}") from None
    try:
        return BoundingBox(*values)
    except ValueError as exc:
        raise DatasetError(f"{where}: {exc}") from None


def read_groundtruth(path: str | os.PathLike) -> list[BoundingBox]:
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"missing groundtruth file {path}")
    boxes = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        boxes.append(parse_box_line(line, lineno, str(path)))
    return boxes


def write_groundtruth(path: str | os.PathLike, boxes: Iterable[BoundingBox]) -> None:
    Path(path).write_text("".join(format_box(b) + "\n" for b in boxes))


def list_images(directory: str | os.PathLike) -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise DatasetError(f"missing image directory {directory}")
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_EXTENSIONS)


def read_image(path: str | os.PathLike, channels: int) -> np.ndarray:
    """Decode an 8-bit image to float32 in [0, 1] with ``channels`` channels."""
    try:
        with Image.open(path) as im:
            im = im.convert("RGB" if channels == 3 else "L")
            a = np.asarray(im, dtype=np.float32) / 255.0
    except OSError as exc:
        raise DatasetError(f"cannot read image {path}: {exc}") from None
    return a if channels == 3 else a[..., None]


def write_image(path: str | os.PathLike, a: np.ndarray) -> None:
    a = np.asarray(a)
    if a.ndim == 3 and a.shape[2] == 1:
        a = a[..., 0]
    Image.fromarray(np.round(np.clip(a, 0, 1) * 255.0).astype(np.uint8)).save(path)


def read_attributes(path: str | os.PathLike) -> frozenset:
    path = Path(path)
    if not path.is_file():
        return frozenset()
    tags = [line.strip() for line in path.read_text().splitlines() if line.strip()]
    unknown = sorted(set(tags) - set(ATTRIBUTES))
    if unknown:
        raise DatasetError(f"{path}: unknown attribute tags {unknown}")
    return frozenset(tags)


def load_sequence(root_path: str | os.PathLike) -> Sequence:
    """Load ``<seq>/color``, ``<seq>/ir``, ``groundtruth.txt`` and optional ``attributes.txt``."""
    root = Path(root_path)
    if not root.is_dir():
        raise DatasetError(f"missing sequence directory {root}")
    color = list_images(root / "color")
    ir = list_images(root / "ir")
    if len(color) != len(ir):
        raise DatasetError(
            f"{root}: frame-count mismatch, color/ has {len(color)} and ir/ has {len(ir)}")
    boxes = read_groundtruth(root / "groundtruth.txt")
    if len(boxes) != len(color):
        raise DatasetError(
            f"{root}: {len(color)} frames but groundtruth.txt has {len(boxes)} boxes")
    frames = []
    for i, (cp, ip) in enumerate(zip(color, ir)):
        rgb, tir = read_image(cp, 3), read_image(ip, 1)
        if rgb.shape[:2] != tir.shape[:2]:
            raise DatasetError(f"{cp.name}: color {rgb.shape[:2]} and ir {tir.shape[:2]} differ")
        frames.append(FramePair(rgb, tir, i))
    try:
        return Sequence(root.name, frames, boxes, read_attributes(root / "attributes.txt"))
    except ValueError as exc:
        raise DatasetError(str(exc)) from None


def write_sequence(seq: Sequence, root_path: str | os.PathLike) -> Path:
    """Write a sequence in the on-disk layout read by :func:`load_sequence`."""
    root = Path(root_path)
    (root / "color").mkdir(parents=True, exist_ok=True)
    (root / "ir").mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(seq.frames, start=1):
        write_image(root / "color" / f"{i:08d}.png", frame.rgb)
        write_image(root / "ir" / f"{i:08d}.png", frame.tir)
    write_groundtruth(root / "groundtruth.txt", seq.groundtruth)
    if seq.attributes:
        (root / "attributes.txt").write_text("".join(t + "\n" for t in sorted(seq.attributes)))
    return root


def list_sequence_dirs(root: str | os.PathLike) -> list[Path]:
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"missing dataset directory {root}")
    return sorted(p for p in root.iterdir() if (p / "groundtruth.txt").is_file())


def load_dataset(root: str | os.PathLike, names: SequenceT[str] | None = None) -> list[Sequence]:
    dirs = list_sequence_dirs(root)
    if names is not None:
        wanted = set(names)
        dirs = [d for d in dirs if d.name in wanted]
    return [load_sequence(d) for d in dirs]
