"""Synthetic bi-temporal scene generator.

Paints rectangles and ellipses of semantic classes onto a background,
then rewrites each region's class for the second timestamp by sampling a
per-class transition table (identity row entries mean "no change").
Labels follow the same convention as real datasets: semantic ids are kept
only where the pixel changed.  The generator returns the exact realized
transition counts, tallied independently from the final label maps, so
they can cross-check the evaluation-side transition matrix.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import BiTemporalSample, DatasetSpec
from .errors import ConfigError
from .metrics import TransitionMatrix

# distinct, saturated base colors; index 0 is the background
_BASE_COLORS = np.array(
    [
        (0.35, 0.35, 0.35),
        (0.85, 0.20, 0.15),
        (0.15, 0.65, 0.20),
        (0.15, 0.30, 0.85),
        (0.90, 0.80, 0.15),
        (0.75, 0.20, 0.80),
        (0.10, 0.75, 0.80),
        (0.95, 0.55, 0.10),
        (0.55, 0.30, 0.10),
    ],
    dtype=np.float32,
)


@dataclass
class SynthConfig:
    n_samples: int = 8
    height: int = 64
    width: int = 64
    num_classes: int = 4  # including class 0
    shapes_per_image: tuple[int, int] = (3, 6)
    shape_fraction: tuple[float, float] = (0.15, 0.40)
    transition_table: np.ndarray | None = None
    noise_sigma: float = 0.02
    illumination_range: float = 0.08
    texture_amplitude: float = 0.06
    color_spread: float = 1.0
    seed: int = 0

    def validate(self) -> None:
        if self.n_samples < 1:
            raise ConfigError("n_samples must be positive")
        if self.height < 8 or self.width < 8:
            raise ConfigError("synthetic images must be at least 8x8")
        if not 2 <= self.num_classes <= len(_BASE_COLORS):
            raise ConfigError(f"num_classes must be in [2, {len(_BASE_COLORS)}]")
        lo, hi = self.shapes_per_image
        if not 1 <= lo <= hi:
            raise ConfigError("shapes_per_image must be an increasing positive range")
        lo, hi = self.shape_fraction
        if not 0.0 < lo <= hi <= 1.0:
            raise ConfigError("shape_fraction must lie in (0, 1]")
        if self.noise_sigma < 0 or self.illumination_range < 0:
            raise ConfigError("noise_sigma and illumination_range must be non-negative")
        if self.texture_amplitude < 0:
            raise ConfigError("texture_amplitude must be non-negative")
        if self.color_spread < 0:
            raise ConfigError("color_spread must be non-negative")
        if self.transition_table is not None:
            k = self.num_classes - 1
            t = np.asarray(self.transition_table, dtype=np.float64)
            if t.shape != (k, k):
                raise ConfigError(f"transition_table must be ({k}, {k}), got {t.shape}")
            if (t < 0).any() or np.abs(t.sum(axis=1) - 1.0).max() > 1e-9:
                raise ConfigError("transition_table rows must be probability distributions")


def default_transition_table(num_classes: int, stay_prob: float = 0.35) -> np.ndarray:
    """Uniform change mix: stay with stay_prob, else move to another class."""
    k = num_classes - 1
    if k == 1:
        return np.array([[1.0]])
    off = (1.0 - stay_prob) / (k - 1)
    table = np.full((k, k), off)
    np.fill_diagonal(table, stay_prob)
    return table


def _texture(cover: np.ndarray, num_ids: int, shifts: np.ndarray | None = None) -> np.ndarray:
    """Oriented grating per class id; the background stays flat.

    Each class gets its own orientation and spatial frequency so surfaces
    carry a spectral signature, the way cropland rows or roof patterns do.
    Optional per-class phase shifts decouple the pattern from absolute pixel
    coordinates; passing the same shifts for both timestamps keeps unchanged
    ground identical across them.
    """
    h, w = cover.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    out = np.zeros((h, w), dtype=np.float64)
    for cls in range(1, num_ids + 1):
        mask = cover == cls
        if not mask.any():
            continue
        angle = (cls - 1) * np.pi / max(num_ids, 1)
        # low spatial frequencies so the banding survives 4x downsampling
        freq = 0.05 + 0.03 * (cls - 1)
        shift = 0.0 if shifts is None else float(shifts[cls - 1])
        phase = 2.0 * np.pi * np.cos(angle) * xx + 2.0 * np.pi * np.sin(angle) * yy
        out[mask] = np.sin(freq * phase + shift)[mask]
    return out


def _paint(cover: np.ndarray, kind: str, geom: tuple, class_id: int) -> None:
    h, w = cover.shape
    cy, cx, ry, rx = geom
    if kind == "rect":
        y0, y1 = max(0, cy - ry), min(h, cy + ry + 1)
        x0, x1 = max(0, cx - rx), min(w, cx + rx + 1)
        cover[y0:y1, x0:x1] = class_id
    else:
        yy, xx = np.ogrid[:h, :w]
        mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        cover[mask] = class_id


def class_spec(config: SynthConfig, root) -> DatasetSpec:
    """Dataset spec (names, colors) matching the generator's classes."""
    colors = np.clip(np.round(_BASE_COLORS[: config.num_classes] * 255), 0, 255).astype(int)
    return DatasetSpec(
        root=root,
        class_names=["nochange"] + [f"class{i}" for i in range(1, config.num_classes)],
        palette=[tuple(int(v) for v in c) for c in colors],
        name="synthetic",
    )


def generate(config: SynthConfig) -> tuple[list[BiTemporalSample], TransitionMatrix]:
    """Produce samples plus exact realized transition counts.

    Counts tally (cover_t1, cover_t2) pairs over changed pixels straight
    from the final maps with a plain per-class loop.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    k = config.num_classes - 1
    table = (
        np.asarray(config.transition_table, dtype=np.float64)
        if config.transition_table is not None
        else default_transition_table(config.num_classes)
    )
    h, w = config.height, config.width
    base = _BASE_COLORS[: config.num_classes]
    if config.color_spread != 1.0:
        # shrink (or stretch) class colors about their mean; at 0 classes are
        # separable by texture alone
        mean = base.mean(axis=0, keepdims=True)
        base = mean + config.color_spread * (base - mean)
    min_side = min(h, w)

    samples: list[BiTemporalSample] = []
    realized = np.zeros((k, k), dtype=np.int64)
    for idx in range(config.n_samples):
        cover_t1 = np.zeros((h, w), dtype=np.int64)
        cover_t2 = np.zeros((h, w), dtype=np.int64)
        n_shapes = int(rng.integers(config.shapes_per_image[0], config.shapes_per_image[1] + 1))
        for _ in range(n_shapes):
            kind = "rect" if rng.random() < 0.5 else "ellipse"
            cls = int(rng.integers(1, k + 1))
            target = int(rng.choice(k, p=table[cls - 1])) + 1
            lo, hi = config.shape_fraction
            ry = max(2, int(rng.uniform(lo, hi) * min_side / 2))
            rx = max(2, int(rng.uniform(lo, hi) * min_side / 2))
            cy, cx = int(rng.integers(0, h)), int(rng.integers(0, w))
            geom = (cy, cx, ry, rx)
            _paint(cover_t1, kind, geom, cls)
            _paint(cover_t2, kind, geom, target)

        change = (cover_t1 != cover_t2).astype(np.int64)
        for a in range(1, k + 1):
            for b in range(1, k + 1):
                if a != b:
                    realized[a - 1, b - 1] += int(((cover_t1 == a) & (cover_t2 == b)).sum())

        shifts = rng.uniform(0.0, 2.0 * np.pi, size=k)

        def render(cover: np.ndarray) -> np.ndarray:
            img = base[cover].astype(np.float64)
            if config.texture_amplitude > 0:
                img += config.texture_amplitude * _texture(cover, k, shifts)[..., None]
            img += rng.uniform(-config.illumination_range, config.illumination_range)
            img += rng.normal(0.0, config.noise_sigma, img.shape)
            return np.clip(img, 0.0, 1.0).astype(np.float32)

        sample = BiTemporalSample(
            image_t1=render(cover_t1),
            image_t2=render(cover_t2),
            sem_t1=np.where(change > 0, cover_t1, 0),
            sem_t2=np.where(change > 0, cover_t2, 0),
            change=change,
            void=np.zeros((h, w), dtype=bool),
            name=f"synth_{idx:05d}.png",
        )
        sample.validate(config.num_classes)
        samples.append(sample)

    return samples, TransitionMatrix(realized)
