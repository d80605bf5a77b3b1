"""Paired RGB-T data: a deterministic pseudo-TIR translator and toy sequences.

The translator is a plain callable ``rgb (H, W, 3) -> tir (H, W, 1)``; any
learned image-to-image model with that signature can replace
:class:`PseudoTIR` in :func:`build_paired_dataset`.
"""
from __future__ import annotations

import json
import shutil
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
from scipy import ndimage

from .data_model import (BoundingBox, DatasetError, FramePair, Sequence, list_images,
                         read_image, write_image, write_sequence)

Translator = Callable[[np.ndarray], np.ndarray]

# Kernel radius in units of sigma; sigma=2 gives a 9 x 9 kernel.
BLUR_TRUNCATE = 2.0


@dataclass(frozen=True)
class SynthConfig:
    luminance_weights: tuple = (0.6, 0.3, 0.1)
    blur_sigma: float = 2.0
    contrast_stretch: bool = True
    seed: int = 0

    def __post_init__(self):
        w = tuple(float(v) for v in self.luminance_weights)
        if len(w) != 3 or min(w) < 0 or abs(sum(w) - 1.0) > 1e-9:
            raise ValueError(f"luminance_weights must be 3 non-negative values summing to 1, got {w}")
        if self.blur_sigma < 0:
            raise ValueError("blur_sigma must be >= 0")
        object.__setattr__(self, "luminance_weights", w)


def pseudo_tir(rgb: np.ndarray, config: SynthConfig = SynthConfig()) -> np.ndarray:
    """Weighted luminance, Gaussian blur and optional min-max stretch."""
    rgb = np.asarray(rgb, dtype=np.float64)
    lum = rgb @ np.asarray(config.luminance_weights)
    if config.blur_sigma > 0:
        lum = ndimage.gaussian_filter(lum, config.blur_sigma, mode="nearest",
                                      truncate=BLUR_TRUNCATE)
    if config.contrast_stretch:
        lo, hi = lum.min(), lum.max()
        if hi - lo > 1e-12:
            lum = (lum - lo) / (hi - lo)
    return np.clip(lum, 0.0, 1.0)[..., None]


class PseudoTIR:
    """Translator object wrapping :func:`pseudo_tir` for a fixed config."""

    def __init__(self, config: SynthConfig = SynthConfig()):
        self.config = config

    def __call__(self, rgb: np.ndarray) -> np.ndarray:
        return pseudo_tir(rgb, self.config)


def read_exclusion_list(path) -> set[str]:
    if path is None:
        return set()
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"missing exclusion list {path}")
    return {line.strip() for line in path.read_text().splitlines() if line.strip()}


def _translate_sequence(src: Path, dst: Path, translator: Translator) -> None:
    color = list_images(src / "color")
    if not (src / "groundtruth.txt").is_file():
        raise DatasetError(f"missing groundtruth file {src / 'groundtruth.txt'}")
    (dst / "color").mkdir(parents=True, exist_ok=True)
    (dst / "ir").mkdir(parents=True, exist_ok=True)
    for p in color:
        shutil.copyfile(p, dst / "color" / p.name)
        tir = translator(read_image(p, 3))
        write_image(dst / "ir" / (p.stem + ".png"), tir)
    for name in ("groundtruth.txt", "attributes.txt"):
        if (src / name).is_file():
            shutil.copyfile(src / name, dst / name)


def build_paired_dataset(rgb_root, out_root, config: SynthConfig = SynthConfig(),
                         exclude: Iterable[str] = (), translator: Translator | None = None,
                         jobs: int = 1) -> int:
    """Mirror RGB-only sequences under ``out_root`` with a synthesized ``ir/``.

    Annotation files are copied unchanged. Returns the number of sequences
    written; names in ``exclude`` are skipped.
    """
    rgb_root, out_root = Path(rgb_root), Path(out_root)
    if not rgb_root.is_dir():
        raise DatasetError(f"missing input directory {rgb_root}")
    excluded = set(exclude)
    sources = sorted(p for p in rgb_root.iterdir()
                     if p.is_dir() and (p / "color").is_dir() and p.name not in excluded)
    translator = translator or PseudoTIR(config)
    out_root.mkdir(parents=True, exist_ok=True)
    if jobs > 1 and len(sources) > 1:
        with ProcessPoolExecutor(jobs) as pool:
            list(pool.map(_translate_sequence, sources,
                          [out_root / s.name for s in sources], [translator] * len(sources)))
    else:
        for src in sources:
            _translate_sequence(src, out_root / src.name, translator)
    return len(sources)


# ------------------------------------------------------------------ toy data

class ToySpecError(ValueError):
    pass


@dataclass(frozen=True)
class ToySequenceSpec:
    num_frames: int = 60
    image_size: tuple = (128, 128)  # (H, W)
    target_size_range: tuple = (16, 24)
    start_box: tuple | None = None  # (x, y, w, h); drawn from seed when None
    velocity: tuple | None = None  # px/frame; drawn from seed when None
    jitter: float = 0.0
    rgb_corruption: tuple = ()  # inclusive (first, last) frame intervals
    tir_corruption: tuple = ()
    num_distractors: int = 2
    corruption_gain: float = 0.05
    corruption_noise: float = 0.25
    seed: int = 0
    name: str = "toy"

    def __post_init__(self):
        if self.num_frames < 2:
            raise ToySpecError("num_frames must be >= 2")
        lo, hi = self.target_size_range
        if not 0 < lo <= hi:
            raise ToySpecError(f"invalid target_size_range {self.target_size_range}")
        for iv in tuple(self.rgb_corruption) + tuple(self.tir_corruption):
            if len(iv) != 2 or iv[0] > iv[1]:
                raise ToySpecError(f"invalid corruption interval {iv}")


def _in_intervals(t: int, intervals) -> bool:
    return any(a <= t <= b for a, b in intervals)


def _coverage(lo: float, size: float, n: int) -> np.ndarray:
    """Fraction of each unit pixel ``[i, i+1)`` covered by ``[lo, lo+size)``."""
    i = np.arange(n)
    return np.clip(np.minimum(i + 1, lo + size) - np.maximum(i, lo), 0.0, 1.0)


def _render_square(img: np.ndarray, box, color, phase: float) -> None:
    x, y, w, h = box
    H, W = img.shape[:2]
    cov = np.outer(_coverage(y, h, H), _coverage(x, w, W))
    if not cov.any():
        return
    u = (np.arange(W) + 0.5 - x) / w
    v = (np.arange(H) + 0.5 - y) / h
    pattern = 0.5 + 0.5 * np.outer(np.sin(2 * np.pi * 2 * v + phase), np.sin(2 * np.pi * 2 * u))
    tex = np.asarray(color)[None, None, :] * (0.55 + 0.45 * pattern[..., None])
    img *= (1 - cov[..., None])
    img += cov[..., None] * tex


def _trajectory(spec: ToySequenceSpec, rng: np.random.Generator) -> list[BoundingBox]:
    H, W = spec.image_size
    if spec.start_box is not None:
        x0, y0, w, h = (float(v) for v in spec.start_box)
    else:
        w = h = float(rng.uniform(*spec.target_size_range))
        m = spec.jitter
        x0 = float(rng.uniform(m, W - w - m))
        y0 = float(rng.uniform(m, H - h - m))
    if spec.velocity is not None:
        vx, vy = (float(v) for v in spec.velocity)
    else:
        m = spec.jitter
        x1 = float(rng.uniform(m, W - w - m))
        y1 = float(rng.uniform(m, H - h - m))
        vx, vy = (x1 - x0) / (spec.num_frames - 1), (y1 - y0) / (spec.num_frames - 1)
    boxes = []
    for t in range(spec.num_frames):
        jx, jy = rng.uniform(-spec.jitter, spec.jitter, 2) if spec.jitter > 0 else (0.0, 0.0)
        box = BoundingBox(x0 + vx * t + jx, y0 + vy * t + jy, w, h)
        if not box.inside(H, W):
            raise ToySpecError(f"{spec.name}: target leaves the image at frame {t}: {box}")
        boxes.append(box)
    return boxes


def _quantize(a: np.ndarray) -> np.ndarray:
    # match the 8-bit on-disk representation so write/load round-trips exactly
    return (np.round(np.clip(a, 0, 1) * 255.0) / 255.0).astype(np.float32)


def generate_toy_sequence(spec: ToySequenceSpec) -> Sequence:
    """Render a textured moving square with distractors and scheduled corruption."""
    rng = np.random.default_rng(spec.seed)
    H, W = spec.image_size
    boxes = _trajectory(spec, rng)

    bg = np.stack([ndimage.gaussian_filter(rng.standard_normal((H, W)), 6.0) for _ in range(3)], -1)
    bg = 0.45 + 0.15 * bg / (np.abs(bg).max() + 1e-12)
    target_color = np.array([0.95, rng.uniform(0.2, 0.5), rng.uniform(0.1, 0.4)])
    distractors = []
    for _ in range(spec.num_distractors):
        s = float(rng.uniform(*spec.target_size_range))
        color = rng.uniform(0.1, 0.9, 3)
        color[0] = rng.uniform(0.1, 0.6)
        distractors.append(((float(rng.uniform(0, W - s)), float(rng.uniform(0, H - s)), s, s),
                            color, float(rng.uniform(0, 2 * np.pi))))
    translator = PseudoTIR(SynthConfig(contrast_stretch=False))

    frames = []
    for t, box in enumerate(boxes):
        rgb = bg.copy()
        for dbox, color, phase in distractors:
            _render_square(rgb, dbox, color, phase)
        _render_square(rgb, (box.x, box.y, box.w, box.h), target_color, 0.0)
        tir = translator(rgb)
        if _in_intervals(t, spec.rgb_corruption):
            rgb = spec.corruption_gain * rgb + rng.normal(0, spec.corruption_noise, rgb.shape)
        if _in_intervals(t, spec.tir_corruption):
            tir = spec.corruption_gain * tir + rng.normal(0, spec.corruption_noise, tir.shape)
        frames.append(FramePair(_quantize(rgb), _quantize(tir), t))

    attributes = set()
    if spec.rgb_corruption:
        attributes.add("LI")
    if spec.tir_corruption:
        attributes.add("TC")
    if spec.num_distractors:
        attributes.add("BC")
    speed = np.hypot(*(np.subtract(boxes[-1].center, boxes[0].center))) / (len(boxes) - 1)
    if speed > 0.1 * np.sqrt(boxes[0].area):
        attributes.add("FM")
    return Sequence(spec.name, frames, boxes, attributes)


def sequence_seed(seed: int, name: str) -> int:
    """Per-sequence RNG stream derived from (seed, name)."""
    return (int(seed) * 1_000_003 + zlib.crc32(name.encode())) % (2 ** 32)


def random_toy_spec(seed: int, name: str, num_frames: int = 60, image_size=(128, 128),
                    corruption_fraction: float = 0.25, **overrides) -> ToySequenceSpec:
    """A toy spec with one RGB and one disjoint TIR corruption interval."""
    rng = np.random.default_rng(sequence_seed(seed, name))
    n = num_frames
    span = max(1, int(round(corruption_fraction * n)))
    # one interval in each half of the sequence, order randomised
    first = int(rng.integers(n // 8, max(n // 8 + 1, n // 2 - span)))
    second = int(rng.integers(n // 2, max(n // 2 + 1, n - span)))
    a, b = (first, first + span - 1), (second, min(n - 1, second + span - 1))
    rgb_iv, tir_iv = (a, b) if rng.random() < 0.5 else (b, a)
    kwargs = dict(num_frames=n, image_size=tuple(image_size), jitter=1.0,
                  rgb_corruption=(rgb_iv,), tir_corruption=(tir_iv,),
                  seed=sequence_seed(seed + 1, name), name=name)
    kwargs.update(overrides)
    return ToySequenceSpec(**kwargs)


def generate_toy_dataset(num_sequences: int, seed: int, prefix: str = "toy",
                         **spec_kwargs) -> list[Sequence]:
    return [generate_toy_sequence(random_toy_spec(seed, f"{prefix}_{i:03d}", **spec_kwargs))
            for i in range(num_sequences)]


def write_toy_dataset(out_root, num_sequences: int, seed: int, prefix: str = "toy",
                      **spec_kwargs) -> list[Path]:
    out_root = Path(out_root)
    out_root.mkdir(parents=True, exist_ok=True)
    paths, specs = [], []
    for i in range(num_sequences):
        spec = random_toy_spec(seed, f"{prefix}_{i:03d}", **spec_kwargs)
        paths.append(write_sequence(generate_toy_sequence(spec), out_root / spec.name))
        specs.append(asdict(spec))
    manifest = {"generator": "toy", "seed": seed, "sequences": specs}
    (out_root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return paths
