"""Evaluation metrics and report files.

Predictions and ground truth are compared as effective labels: class 0
where no change is marked, the semantic class id elsewhere.  One N x N
integer confusion matrix per timestamp feeds overall accuracy, binary
mIoU, separated kappa (same core as the training loss) and the F-score
over changed classes.  Transition matrices tabulate from-class to
to-class counts over changed pixels.  emit_report writes everything as
JSON, CSV and binary PPM heatmaps with byte-deterministic output.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import DataError, ShapeError
from .losses import sek_from_confusion


def _as_int_array(x, name: str) -> np.ndarray:
    arr = np.asarray(x)
    if not np.issubdtype(arr.dtype, np.integer):
        if np.issubdtype(arr.dtype, np.bool_):
            arr = arr.astype(np.int64)
        else:
            raise DataError(f"{name} must be an integer array, got dtype {arr.dtype}")
    return arr.astype(np.int64, copy=False)


@dataclass
class ConfusionMatrix:
    """Integer counts; rows index predictions, columns ground truth."""

    counts: np.ndarray

    def __post_init__(self) -> None:
        self.counts = _as_int_array(self.counts, "confusion counts")
        if self.counts.ndim != 2 or self.counts.shape[0] != self.counts.shape[1]:
            raise ShapeError(f"confusion matrix must be square, got {self.counts.shape}")
        if (self.counts < 0).any():
            raise DataError("confusion counts must be non-negative")

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ShapeError(
                f"cannot merge confusion matrices of sizes {self.num_classes} and {other.num_classes}"
            )
        return ConfusionMatrix(self.counts + other.counts)


def accumulate_confusion(
    pred_sem,
    pred_change,
    gt_sem,
    gt_change,
    num_classes: int,
    void_mask=None,
    into: ConfusionMatrix | None = None,
) -> ConfusionMatrix:
    """Count effective-label agreement over non-void pixels.

    Effective label = semantic id where the change mask is set, else 0.
    Pass ``into`` to add onto an existing matrix.
    """
    pred_sem = _as_int_array(pred_sem, "pred_sem")
    pred_change = _as_int_array(pred_change, "pred_change")
    gt_sem = _as_int_array(gt_sem, "gt_sem")
    gt_change = _as_int_array(gt_change, "gt_change")
    if not (pred_sem.shape == pred_change.shape == gt_sem.shape == gt_change.shape):
        raise ShapeError("prediction and ground-truth maps must share one shape")
    valid = np.ones(pred_sem.shape, dtype=bool)
    if void_mask is not None:
        void = np.asarray(void_mask).astype(bool)
        if void.shape != pred_sem.shape:
            raise ShapeError(f"void mask shape {void.shape} does not match maps {pred_sem.shape}")
        valid = ~void
    for name, arr in (("pred_sem", pred_sem), ("gt_sem", gt_sem)):
        vals = arr[valid]
        if vals.size and (vals.min() < 0 or vals.max() >= num_classes):
            raise DataError(f"{name} has ids outside [0, {num_classes}) at non-void pixels")
    eff_pred = np.where(pred_change > 0, pred_sem, 0)[valid]
    eff_gt = np.where(gt_change > 0, gt_sem, 0)[valid]
    counts = np.bincount(eff_pred * num_classes + eff_gt, minlength=num_classes * num_classes)
    cm = ConfusionMatrix(counts.reshape(num_classes, num_classes))
    return into.merge(cm) if into is not None else cm


def _require_mass(cm: ConfusionMatrix) -> np.ndarray:
    if cm.counts.sum() == 0:
        raise DataError("confusion matrix is empty (zero total count)")
    return cm.counts.astype(np.float64)


def overall_accuracy(cm: ConfusionMatrix) -> float:
    q = _require_mass(cm)
    return float(np.trace(q) / q.sum())


def collapse_to_binary(cm: ConfusionMatrix) -> ConfusionMatrix:
    """Pool all change classes (id >= 1) into one, keeping class 0 apart."""
    q = cm.counts
    b = np.array(
        [
            [q[0, 0], q[0, 1:].sum()],
            [q[1:, 0].sum(), q[1:, 1:].sum()],
        ],
        dtype=np.int64,
    )
    return ConfusionMatrix(b)


def miou_binary(cm: ConfusionMatrix) -> float:
    """Mean IoU of a 2x2 matrix (collapse first for multi-class input)."""
    if cm.num_classes != 2:
        raise ShapeError(f"miou_binary expects a 2x2 matrix, got {cm.num_classes}x{cm.num_classes}")
    q = _require_mass(cm)
    iou_nc = q[0, 0] / (q[0, :].sum() + q[:, 0].sum() - q[0, 0])
    iou_c = q[1, 1] / (q.sum() - q[0, 0])
    return float(0.5 * (iou_nc + iou_c))


def sek(cm: ConfusionMatrix) -> float:
    """Separated kappa; 0.0 for degenerate matrices (no change mass)."""
    q = _require_mass(cm)
    value, _degenerate = sek_from_confusion(torch.from_numpy(q))
    return float(value)


def fscd(cm: ConfusionMatrix) -> tuple[float, float, float]:
    """Precision, recall and F-score over the change classes (ids >= 1)."""
    q = _require_mass(cm)
    hits = np.trace(q) - q[0, 0]
    pred_mass = q[1:, :].sum()
    gt_mass = q[:, 1:].sum()
    p = float(hits / pred_mass) if pred_mass > 0 else 0.0
    r = float(hits / gt_mass) if gt_mass > 0 else 0.0
    f = 2 * p * r / (p + r) if (p + r) > 0 else 0.0
    return p, r, f


@dataclass
class TransitionMatrix:
    """From-class x to-class counts over changed pixels (ids 1..K).

    Row r, column c counts pixels transitioning from semantic class r+1 to
    class c+1.  ``empty`` is set when no pixel qualifies.
    """

    counts: np.ndarray
    class_names: list[str] | None = field(default=None)

    def __post_init__(self) -> None:
        self.counts = _as_int_array(self.counts, "transition counts")
        if self.counts.ndim != 2 or self.counts.shape[0] != self.counts.shape[1]:
            raise ShapeError(f"transition matrix must be square, got {self.counts.shape}")
        if self.class_names is not None and len(self.class_names) != self.counts.shape[0]:
            raise ShapeError("class_names length must match the matrix size")

    @property
    def empty(self) -> bool:
        return int(self.counts.sum()) == 0

    @property
    def percent(self) -> np.ndarray:
        total = self.counts.sum()
        if total == 0:
            return np.zeros_like(self.counts, dtype=np.float64)
        return 100.0 * self.counts / total


def transition_matrix(
    sem_t1,
    sem_t2,
    change,
    num_classes: int,
    void_mask=None,
    class_names: list[str] | None = None,
) -> TransitionMatrix:
    """Tabulate class transitions over changed, non-void pixels.

    Only pixels whose semantic id is >= 1 in both timestamps count; under
    the change-labeling convention every changed pixel qualifies.
    """
    sem_t1 = _as_int_array(sem_t1, "sem_t1")
    sem_t2 = _as_int_array(sem_t2, "sem_t2")
    change = _as_int_array(change, "change")
    if not (sem_t1.shape == sem_t2.shape == change.shape):
        raise ShapeError("transition inputs must share one shape")
    k = num_classes - 1
    if k < 1:
        raise ShapeError("transition matrix needs at least 2 classes")
    mask = change > 0
    if void_mask is not None:
        mask &= ~np.asarray(void_mask).astype(bool)
    mask &= (sem_t1 >= 1) & (sem_t2 >= 1)
    a, b = sem_t1[mask], sem_t2[mask]
    if a.size and (a.max() > k or b.max() > k):
        raise DataError(f"semantic ids exceed num_classes - 1 = {k}")
    counts = np.bincount((a - 1) * k + (b - 1), minlength=k * k).reshape(k, k)
    return TransitionMatrix(counts, class_names)


def _matrix_to_csv(matrix: np.ndarray, row_names: list[str], col_names: list[str], corner: str) -> str:
    lines = [",".join([corner] + col_names)]
    for name, row in zip(row_names, matrix):
        if np.issubdtype(matrix.dtype, np.integer):
            cells = [str(int(v)) for v in row]
        else:
            cells = [f"{v:.2f}" for v in row]
        lines.append(",".join([name] + cells))
    return "\n".join(lines) + "\n"


def read_matrix_csv(path: str | Path) -> tuple[np.ndarray, list[str], list[str]]:
    """Inverse of the CSV writer: (values, row_names, col_names)."""
    lines = Path(path).read_text().strip().splitlines()
    if not lines:
        raise DataError(f"empty matrix csv: {path}")
    col_names = lines[0].split(",")[1:]
    row_names, rows = [], []
    for line in lines[1:]:
        cells = line.split(",")
        row_names.append(cells[0])
        rows.append([float(v) for v in cells[1:]])
    values = np.array(rows)
    if values.shape != (len(row_names), len(col_names)):
        raise DataError(f"ragged matrix csv: {path}")
    if np.all(values == np.round(values)):
        values = values.astype(np.int64)
    return values, row_names, col_names


def write_heatmap_ppm(matrix: np.ndarray, path: str | Path, cell: int = 24) -> None:
    """Render a matrix as a binary P6 image, one cell x cell block per entry.

    Linear white-to-blue ramp against the matrix maximum; an all-zero
    matrix renders all white.  Output bytes depend only on the values.
    """
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"heatmap needs a 2-D matrix, got {m.ndim}-D")
    vmax = m.max()
    t = m / vmax if vmax > 0 else np.zeros_like(m)
    level = (255.0 * t + 0.5).astype(np.uint8)
    rg = (255 - level).astype(np.uint8)
    cells = np.stack([rg, rg, np.full_like(rg, 255)], axis=-1)
    img = np.repeat(np.repeat(cells, cell, axis=0), cell, axis=1)
    h, w = img.shape[:2]
    header = f"P6\n{w} {h}\n255\n".encode("ascii")
    Path(path).write_bytes(header + img.tobytes())


def emit_report(
    metrics: dict[str, float],
    confusions: dict[str, ConfusionMatrix],
    transitions: dict[str, TransitionMatrix],
    out_dir: str | Path,
    class_names: list[str] | None = None,
) -> list[Path]:
    """Write metrics.json plus CSVs and heatmaps for every matrix.

    Metric values are rounded to 2 decimals in the JSON.  File contents
    are deterministic functions of the inputs.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    payload = {k: round(float(v), 2) for k, v in metrics.items()}
    mpath = out / "metrics.json"
    mpath.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    written.append(mpath)

    for name in sorted(confusions):
        cm = confusions[name]
        names = class_names if class_names and len(class_names) == cm.num_classes else [
            f"class{i}" for i in range(cm.num_classes)
        ]
        csv_path = out / f"{name}_confusion.csv"
        csv_path.write_text(_matrix_to_csv(cm.counts, names, names, "pred\\gt"))
        ppm_path = out / f"{name}_confusion.ppm"
        write_heatmap_ppm(cm.counts, ppm_path)
        written += [csv_path, ppm_path]

    for name in sorted(transitions):
        tm = transitions[name]
        k = tm.counts.shape[0]
        names = tm.class_names if tm.class_names else [f"class{i + 1}" for i in range(k)]
        counts_path = out / f"{name}_transitions.csv"
        counts_path.write_text(_matrix_to_csv(tm.counts, names, names, "from\\to"))
        pct_path = out / f"{name}_transitions_percent.csv"
        pct_path.write_text(_matrix_to_csv(tm.percent, names, names, "from\\to"))
        ppm_path = out / f"{name}_transitions.ppm"
        write_heatmap_ppm(tm.percent, ppm_path)
        written += [counts_path, pct_path, ppm_path]

    return written
