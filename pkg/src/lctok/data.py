"""Synthetic captioned shape scenes and the quality filter.

Scenes are sampled from per-sample derived seeds, so sample ``i`` of a corpus
is the same regardless of corpus size, and the same scene can be rendered at
any resolution. Captions use a closed vocabulary and list objects left to
right, e.g. ``two large red circle at top left of small blue square at bottom``.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from PIL import Image

from .errors import ContractViolation

log = logging.getLogger(__name__)

COUNTS = ("one", "two", "three")
SIZES = ("small", "large")
COLORS = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
    "magenta": (1.0, 0.0, 1.0),
    "cyan": (0.0, 1.0, 1.0),
    "white": (1.0, 1.0, 1.0),
    "black": (0.0, 0.0, 0.0),
}
SHAPES = ("circle", "square", "triangle", "diamond")
VPOS = {"top": 0.27, "middle": 0.5, "bottom": 0.73}
RADIUS = {"small": 0.09, "large": 0.14}
BACKGROUND = 0.5

PAD = "<pad>"
VOCAB: tuple[str, ...] = (PAD, *COUNTS, *SIZES, *COLORS, *SHAPES, *VPOS, "at", "left", "of")
WORD_ID = {w: i for i, w in enumerate(VOCAB)}
MAX_CAPTION_LEN = 1 + 3 * 5 + 2 * 2


@dataclass(frozen=True)
class ShapeObject:
    shape: str
    color: str
    size: str
    vpos: str
    cx: float
    cy: float

    @property
    def radius(self) -> float:
        return RADIUS[self.size]


@dataclass
class SyntheticSample:
    image: np.ndarray          # (H, W, 3) float32 in [0, 1]
    caption: list[str]
    quality_score: float
    objects: tuple[ShapeObject, ...] = field(default=())

    @property
    def caption_text(self) -> str:
        return " ".join(self.caption)


def sample_scene(rng: np.random.Generator) -> tuple[ShapeObject, ...]:
    count = int(rng.integers(1, 4))
    width = 1.0 / count
    objs = []
    for i in range(count):
        size = SIZES[rng.integers(len(SIZES))]
        vpos = list(VPOS)[rng.integers(len(VPOS))]
        objs.append(ShapeObject(
            shape=SHAPES[rng.integers(len(SHAPES))],
            color=list(COLORS)[rng.integers(len(COLORS))],
            size=size,
            vpos=vpos,
            cx=(i + 0.5) * width + rng.uniform(-0.04, 0.04) * width,
            cy=VPOS[vpos] + rng.uniform(-0.03, 0.03),
        ))
    return tuple(objs)


def caption_for(objects: Sequence[ShapeObject]) -> list[str]:
    words = [COUNTS[len(objects) - 1]]
    for i, o in enumerate(objects):
        if i:
            words += ["left", "of"]
        words += [o.size, o.color, o.shape, "at", o.vpos]
    return words


def _sdf(obj: ShapeObject, px: np.ndarray, py: np.ndarray) -> np.ndarray:
    dx, dy = px - obj.cx, py - obj.cy
    r = obj.radius
    if obj.shape == "circle":
        return np.hypot(dx, dy) - r
    if obj.shape == "square":
        a = 0.85 * r
        qx, qy = np.abs(dx) - a, np.abs(dy) - a
        outside = np.hypot(np.maximum(qx, 0.0), np.maximum(qy, 0.0))
        return outside + np.minimum(np.maximum(qx, qy), 0.0)
    if obj.shape == "diamond":
        return (np.abs(dx) + np.abs(dy) - 1.15 * r) / math.sqrt(2.0)
    if obj.shape == "triangle":
        # equilateral, pointing up; image y grows downward
        h = 1.1 * r
        k = math.sqrt(3.0)
        x = np.abs(dx) - h
        y = -dy + h / k
        flip = x + k * y > 0.0
        x, y = np.where(flip, (x - k * y) / 2.0, x), np.where(flip, (-k * x - y) / 2.0, y)
        x = x - np.clip(x, -2.0 * h, 0.0)
        return -np.hypot(x, y) * np.sign(y)
    raise ValueError(obj.shape)


def coverage_masks(objects: Sequence[ShapeObject], resolution: int) -> list[np.ndarray]:
    """Per-object anti-aliased coverage in [0, 1] (one pixel of edge blur)."""
    u = (np.arange(resolution) + 0.5) / resolution
    px, py = np.meshgrid(u, u)
    return [np.clip(0.5 - _sdf(o, px, py) * resolution, 0.0, 1.0) for o in objects]


def render(objects: Sequence[ShapeObject], resolution: int) -> np.ndarray:
    img = np.full((resolution, resolution, 3), BACKGROUND, dtype=np.float64)
    for o, cov in zip(objects, coverage_masks(objects, resolution)):
        img = img * (1.0 - cov[..., None]) + np.asarray(COLORS[o.color]) * cov[..., None]
    return img.astype(np.float32)


def luminance(image: np.ndarray) -> np.ndarray:
    return image[..., 0] * 0.2126 + image[..., 1] * 0.7152 + image[..., 2] * 0.0722


def quality_score(image: np.ndarray, tol: float = 0.02) -> float:
    """Luminance contrast of the foreground times its coverage fraction."""
    lum = luminance(np.asarray(image, dtype=np.float64))
    dev = np.abs(lum - np.median(lum))
    fg = dev > tol
    if not fg.any():
        return 0.0
    return float(dev[fg].mean() * fg.mean())


def degrade_contrast(image: np.ndarray, factor: float = 0.03) -> np.ndarray:
    return (BACKGROUND + factor * (np.asarray(image) - BACKGROUND)).astype(np.float32)


def make_sample(seed: int, index: int, resolution: int) -> SyntheticSample:
    rng = np.random.default_rng([seed, index])
    objs = sample_scene(rng)
    img = render(objs, resolution)
    return SyntheticSample(img, caption_for(objs), quality_score(img), objs)


def gen_dataset(n: int, resolution: int = 32, seed: int = 0,
                corrupt_frac: float = 0.0) -> list[SyntheticSample]:
    """Render ``n`` captioned scenes.

    With ``corrupt_frac > 0`` a seeded subset is washed out toward the
    background, giving the quality filter something to remove.
    """
    if n < 1:
        raise ContractViolation("n must be >= 1")
    out = [make_sample(seed, i, resolution) for i in range(n)]
    if corrupt_frac > 0:
        bad = np.random.default_rng([seed, 0, 1]).random(n) < corrupt_frac
        for s, b in zip(out, bad):
            if b:
                s.image = degrade_contrast(s.image)
                s.quality_score = quality_score(s.image)
    return out


def filter_samples(samples: Sequence[SyntheticSample],
                   score_fn: Callable[[SyntheticSample], float],
                   threshold: float) -> list[SyntheticSample]:
    if math.isnan(threshold):
        raise ContractViolation("threshold must not be NaN")
    kept = [s for s in samples if score_fn(s) >= threshold]
    if not kept:
        log.warning("quality filter at threshold %g removed every sample", threshold)
    return kept


def sample_score(s: SyntheticSample) -> float:
    return quality_score(s.image)


def calibrate_threshold(clean_scores: Sequence[float], bad_scores: Sequence[float]) -> float:
    """Midpoint between the worst clean score and the best corrupted one."""
    lo, hi = max(bad_scores, default=0.0), min(clean_scores)
    if lo >= hi:
        raise ContractViolation(f"scores overlap: corrupted max {lo} >= clean min {hi}")
    return 0.5 * (lo + hi)


# -- tensors and captions ----------------------------------------------------

def to_tensor(samples: Sequence[SyntheticSample] | Sequence[np.ndarray]) -> torch.Tensor:
    arrs = [s.image if isinstance(s, SyntheticSample) else s for s in samples]
    return torch.from_numpy(np.stack(arrs)).permute(0, 3, 1, 2).contiguous().float()


def to_images(batch: torch.Tensor) -> np.ndarray:
    return batch.detach().clamp(0, 1).permute(0, 2, 3, 1).cpu().numpy().astype(np.float32)


def encode_caption(words: Sequence[str], max_len: int = MAX_CAPTION_LEN) -> list[int]:
    ids = []
    for w in words:
        if w not in WORD_ID or w == PAD:
            raise ContractViolation(f"unknown caption token {w!r}")
        ids.append(WORD_ID[w])
    if len(ids) > max_len:
        raise ContractViolation(f"caption longer than {max_len} words")
    return ids + [WORD_ID[PAD]] * (max_len - len(ids))


def caption_tensor(captions: Sequence[Sequence[str]]) -> torch.Tensor:
    return torch.tensor([encode_caption(c) for c in captions], dtype=torch.long)


# -- corpus directory ----------------------------------------------------------

MANIFEST = "manifest.tsv"


def save_png(path: Path | str, image: np.ndarray) -> None:
    arr = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def load_png(path: Path | str) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0


def write_corpus(directory: Path | str, samples: Sequence[SyntheticSample]) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    with open(d / MANIFEST, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        for i, s in enumerate(samples):
            name = f"{i:05d}.png"
            save_png(d / name, s.image)
            w.writerow([name, s.caption_text, repr(float(s.quality_score))])
    return d


def read_corpus(directory: Path | str) -> list[SyntheticSample]:
    d = Path(directory)
    out = []
    with open(d / MANIFEST, encoding="utf-8", newline="") as fh:
        for row in csv.reader(fh, delimiter="\t"):
            name, caption, score = row
            out.append(SyntheticSample(load_png(d / name), caption.split(), float(score)))
    return out
