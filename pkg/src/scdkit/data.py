"""Bi-temporal dataset handling.

A sample bundles two registered RGB images, two semantic label maps, the
binary change mask and a void mask.  Semantic maps use id 0 for unchanged
ground; the change mask is derived as (sem_t1 != 0) | (sem_t2 != 0), the
labeling convention of the SECOND benchmark family.  Directory layout:

    root/[split/]{im1,im2,label1,label2}/<name>.png   (+ optional void/)

Label PNGs may be palette-indexed (ids stored directly) or RGB (colors
mapped through the dataset palette).  A dataset.json at the root names the
classes and their colors.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataError, ShapeError

log = logging.getLogger(__name__)


@dataclass
class BiTemporalSample:
    """One co-registered pair with labels; images float32 in [0, 1]."""

    image_t1: np.ndarray  # (H, W, 3)
    image_t2: np.ndarray  # (H, W, 3)
    sem_t1: np.ndarray  # (H, W) int64
    sem_t2: np.ndarray  # (H, W) int64
    change: np.ndarray  # (H, W) int64 in {0, 1}
    void: np.ndarray  # (H, W) bool, True = excluded
    name: str = ""

    def validate(self, num_classes: int | None = None) -> None:
        hw = self.sem_t1.shape
        if len(hw) != 2:
            raise ShapeError(f"sample '{self.name}': label maps must be 2-D, got {len(hw)}-D")
        for attr in ("sem_t2", "change"):
            if getattr(self, attr).shape != hw:
                raise ShapeError(f"sample '{self.name}': {attr} shape differs from sem_t1")
        if self.void.shape != hw:
            raise ShapeError(f"sample '{self.name}': void shape differs from labels")
        for attr in ("image_t1", "image_t2"):
            img = getattr(self, attr)
            if img.shape != (*hw, 3):
                raise ShapeError(f"sample '{self.name}': {attr} must be (H, W, 3) matching labels")
            if img.min() < 0.0 or img.max() > 1.0:
                raise DataError(f"sample '{self.name}': {attr} values outside [0, 1]")
        if not np.isin(self.change, (0, 1)).all():
            raise DataError(f"sample '{self.name}': change mask must be binary")
        if num_classes is not None:
            for attr in ("sem_t1", "sem_t2"):
                arr = getattr(self, attr)
                if arr.min() < 0 or arr.max() >= num_classes:
                    raise DataError(
                        f"sample '{self.name}': {attr} ids outside [0, {num_classes})"
                    )
        want = ((self.sem_t1 != 0) | (self.sem_t2 != 0)).astype(np.int64)
        if not np.array_equal(self.change, want):
            raise DataError(
                f"sample '{self.name}': change mask violates the labeling convention"
            )

    def one_sided_pixels(self) -> int:
        """Pixels labeled as changed in exactly one timestamp's map."""
        return int(((self.sem_t1 != 0) ^ (self.sem_t2 != 0)).sum())


@dataclass
class DatasetSpec:
    """Where a dataset lives and how its classes are named and colored."""

    root: Path
    class_names: list[str]
    palette: list[tuple[int, int, int]]
    split: str = ""
    name: str = "dataset"

    def __post_init__(self) -> None:
        self.root = Path(self.root)
        if len(self.class_names) != len(self.palette):
            raise DataError("class_names and palette must have equal length")
        if len(self.class_names) < 2:
            raise DataError("a dataset needs at least 2 classes (no-change plus one)")
        if len({tuple(c) for c in self.palette}) != len(self.palette):
            raise DataError("palette colors must be distinct")

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def base_dir(self) -> Path:
        return self.root / self.split if self.split else self.root

    @classmethod
    def from_file(cls, path: str | Path, split: str = "") -> "DatasetSpec":
        p = Path(path)
        if p.is_dir():
            p = p / "dataset.json"
        if not p.is_file():
            raise DataError(f"dataset spec not found: {p}")
        raw = json.loads(p.read_text())
        classes = raw.get("classes")
        if not classes:
            raise DataError(f"dataset spec {p} has no classes")
        classes = sorted(classes, key=lambda c: c["id"])
        ids = [c["id"] for c in classes]
        if ids != list(range(len(ids))):
            raise DataError(f"dataset spec {p}: class ids must be 0..N-1, got {ids}")
        return cls(
            root=p.parent,
            class_names=[c["name"] for c in classes],
            palette=[tuple(int(v) for v in c["color"]) for c in classes],
            split=split,
            name=raw.get("name", p.parent.name),
        )

    def to_file(self, path: str | Path | None = None) -> Path:
        p = Path(path) if path is not None else self.root / "dataset.json"
        payload = {
            "name": self.name,
            "classes": [
                {"id": i, "name": n, "color": list(c)}
                for i, (n, c) in enumerate(zip(self.class_names, self.palette))
            ],
        }
        p.write_text(json.dumps(payload, indent=2) + "\n")
        return p


def _load_image(path: Path) -> np.ndarray:
    img = Image.open(path).convert("RGB")
    return np.asarray(img, dtype=np.float32) / 255.0


def _load_label(path: Path, spec: DatasetSpec) -> np.ndarray:
    img = Image.open(path)
    if img.mode == "P":
        ids = np.asarray(img, dtype=np.int64)
        if ids.max() >= spec.num_classes:
            raise DataError(f"label file {path} holds id {int(ids.max())} >= {spec.num_classes}")
        return ids
    rgb = np.asarray(img.convert("RGB"), dtype=np.int64)
    ids = np.full(rgb.shape[:2], -1, dtype=np.int64)
    for i, color in enumerate(spec.palette):
        ids[(rgb == np.array(color)).all(axis=-1)] = i
    if (ids < 0).any():
        bad = rgb[ids < 0][0]
        raise DataError(f"label file {path} uses color {tuple(int(v) for v in bad)} not in the palette")
    return ids


class ChangeDataset:
    """Lazy directory-backed dataset; samples ordered by file name."""

    SUBDIRS = ("im1", "im2", "label1", "label2")

    def __init__(self, spec: DatasetSpec):
        self.spec = spec
        base = spec.base_dir
        if not base.is_dir():
            raise DataError(f"dataset directory not found: {base}")
        for sub in self.SUBDIRS:
            if not (base / sub).is_dir():
                raise DataError(f"dataset at {base} is missing the '{sub}' directory")
        self.names = sorted(p.name for p in (base / "im1").glob("*.png"))
        for name in self.names:
            for sub in self.SUBDIRS[1:]:
                if not (base / sub / name).is_file():
                    raise DataError(f"missing pair member: {base / sub / name}")
        self.has_void = (base / "void").is_dir()
        if not self.names:
            log.warning("dataset at %s contains no samples", base)
        else:
            log.info("dataset at %s: %d samples, %d classes", base, len(self.names), spec.num_classes)

    def __len__(self) -> int:
        return len(self.names)

    def __getitem__(self, index: int) -> BiTemporalSample:
        name = self.names[index]
        base = self.spec.base_dir
        sem_t1 = _load_label(base / "label1" / name, self.spec)
        sem_t2 = _load_label(base / "label2" / name, self.spec)
        change = ((sem_t1 != 0) | (sem_t2 != 0)).astype(np.int64)
        if self.has_void and (base / "void" / name).is_file():
            void = np.asarray(Image.open(base / "void" / name).convert("L")) > 0
        else:
            void = np.zeros(sem_t1.shape, dtype=bool)
        sample = BiTemporalSample(
            image_t1=_load_image(base / "im1" / name),
            image_t2=_load_image(base / "im2" / name),
            sem_t1=sem_t1,
            sem_t2=sem_t2,
            change=change,
            void=void,
            name=name,
        )
        sample.validate(self.spec.num_classes)
        return sample

    def qa_scan(self) -> dict:
        """Count label pairs marked changed in only one timestamp.

        Such pixels are dataset-defined, not repaired; this report only
        flags them.
        """
        report = {"samples": len(self), "one_sided_pixels": 0, "samples_with_one_sided": []}
        for i in range(len(self)):
            sample = self[i]
            n = sample.one_sided_pixels()
            if n:
                report["one_sided_pixels"] += n
                report["samples_with_one_sided"].append(sample.name)
        return report


def load_dataset(spec: DatasetSpec) -> ChangeDataset:
    return ChangeDataset(spec)


def write_dataset(samples: list[BiTemporalSample], spec: DatasetSpec) -> Path:
    """Write samples and the dataset spec under spec.base_dir.

    Images become 8-bit RGB PNGs; labels become palette-indexed PNGs so
    ids survive exactly.
    """
    base = spec.base_dir
    for sub in ChangeDataset.SUBDIRS:
        (base / sub).mkdir(parents=True, exist_ok=True)
    flat_palette = [v for color in spec.palette for v in color]
    for i, s in enumerate(samples):
        s.validate(spec.num_classes)
        name = s.name or f"{i:05d}.png"
        if not name.endswith(".png"):
            name += ".png"
        for sub, img in (("im1", s.image_t1), ("im2", s.image_t2)):
            arr = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
            Image.fromarray(arr, mode="RGB").save(base / sub / name)
        for sub, ids in (("label1", s.sem_t1), ("label2", s.sem_t2)):
            pimg = Image.fromarray(ids.astype(np.uint8), mode="P")
            pimg.putpalette(flat_palette)
            pimg.save(base / sub / name)
    spec.to_file(spec.root / "dataset.json")
    return base


def _rgb_to_gray(img: np.ndarray) -> np.ndarray:
    return img @ np.array([0.299, 0.587, 0.114], dtype=img.dtype)


def _adjust_photometric(img: np.ndarray, saturation: float, contrast: float, brightness: float) -> np.ndarray:
    gray = _rgb_to_gray(img)[..., None]
    out = gray + saturation * (img - gray)
    mean = _rgb_to_gray(out).mean()
    out = mean + contrast * (out - mean)
    out = brightness * out
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def apply_geometric(sample: BiTemporalSample, quarter_turns: int, flip_h: bool, flip_v: bool) -> BiTemporalSample:
    """Rotate by multiples of 90 degrees and flip; all maps move together."""

    def move(arr: np.ndarray) -> np.ndarray:
        out = np.rot90(arr, k=quarter_turns % 4, axes=(0, 1))
        if flip_h:
            out = out[:, ::-1]
        if flip_v:
            out = out[::-1, :]
        return np.ascontiguousarray(out)

    return BiTemporalSample(
        image_t1=move(sample.image_t1),
        image_t2=move(sample.image_t2),
        sem_t1=move(sample.sem_t1),
        sem_t2=move(sample.sem_t2),
        change=move(sample.change),
        void=move(sample.void),
        name=sample.name,
    )


def augment(sample: BiTemporalSample, seed: int) -> BiTemporalSample:
    """Seeded augmentation: shared geometry, independent photometry.

    Geometry (right-angle rotation, horizontal/vertical flips) applies to
    images and all label maps identically.  Saturation, contrast and
    brightness jitter (factors uniform in [0.8, 1.2], applied in that
    order) draws independently per timestamp and touches only the images.
    """
    rng = np.random.default_rng(seed)
    out = apply_geometric(
        sample,
        quarter_turns=int(rng.integers(0, 4)),
        flip_h=bool(rng.random() < 0.5),
        flip_v=bool(rng.random() < 0.5),
    )
    factors = rng.uniform(0.8, 1.2, size=6)
    out.image_t1 = _adjust_photometric(out.image_t1, *factors[:3])
    out.image_t2 = _adjust_photometric(out.image_t2, *factors[3:])
    return out
