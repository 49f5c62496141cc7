"""Training loop, checkpointing and evaluation."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from torch import Tensor

from .config import RunConfig, config_from_text, config_to_text
from .data import BiTemporalSample, DatasetSpec, augment, load_dataset
from .errors import ConfigError, DataError, NumericsError
from .losses import total_loss
from .metrics import (
    ConfusionMatrix,
    TransitionMatrix,
    accumulate_confusion,
    collapse_to_binary,
    emit_report,
    fscd,
    miou_binary,
    overall_accuracy,
    sek,
    transition_matrix,
)
from .model import ChangeDetectionModel, build_model

log = logging.getLogger(__name__)

LOG_COLUMNS = ("iteration", "ce_bcd", "ce_t1", "ce_t2", "miou_loss", "sek_loss", "total")


def batch_to_tensors(samples: Sequence[BiTemporalSample]) -> dict[str, Tensor]:
    """Stack samples: images to (B, 3, H, W) float32, labels to int64."""
    if not samples:
        raise DataError("empty batch")
    return {
        "image_t1": torch.stack([torch.from_numpy(s.image_t1).permute(2, 0, 1) for s in samples]),
        "image_t2": torch.stack([torch.from_numpy(s.image_t2).permute(2, 0, 1) for s in samples]),
        "sem_t1": torch.stack([torch.from_numpy(s.sem_t1) for s in samples]),
        "sem_t2": torch.stack([torch.from_numpy(s.sem_t2) for s in samples]),
        "change": torch.stack([torch.from_numpy(s.change) for s in samples]),
        "void": torch.stack([torch.from_numpy(s.void) for s in samples]),
    }


def save_checkpoint(path: str | Path, model: ChangeDetectionModel, optimizer, run: RunConfig, iteration: int) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "version": 1,
            "iteration": iteration,
            "model_state": model.state_dict(),
            "optimizer_state": optimizer.state_dict() if optimizer is not None else None,
            "config_text": config_to_text(run),
        },
        p,
    )
    return p


def load_checkpoint(path: str | Path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise DataError(f"checkpoint not found: {p}")
    payload = torch.load(p, map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or payload.get("version") != 1:
        raise DataError(f"unrecognized checkpoint format: {p}")
    payload["run"] = config_from_text(payload["config_text"])
    return payload


def restore_model(path: str | Path) -> tuple[ChangeDetectionModel, RunConfig, int]:
    payload = load_checkpoint(path)
    run: RunConfig = payload["run"]
    model = build_model(run.model)
    model.load_state_dict(payload["model_state"])
    return model, run, int(payload["iteration"])


@dataclass
class TrainResult:
    checkpoint_path: Path
    log_path: Path
    config_echo_path: Path
    iterations_run: int
    final_breakdown: dict[str, float]


def make_optimizer(model: ChangeDetectionModel, run: RunConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(
        model.parameters(), lr=run.optim.learning_rate, weight_decay=run.optim.weight_decay
    )


def train(
    run: RunConfig,
    dataset=None,
    should_stop: Callable[[int, ChangeDetectionModel, dict[str, float]], bool] | None = None,
) -> TrainResult:
    """Run the optimization loop described by ``run``.

    Each iteration samples a batch with replacement, augments it (when
    enabled), and takes one AdamW step on the composite loss.  Every term
    is appended to ``train_log.csv``; the fully resolved config is echoed
    next to the outputs before the first step.  ``should_stop`` is
    consulted every ``eval_interval`` iterations (a checkpoint is written
    first), letting callers evaluate and stop early.  A non-finite total
    loss aborts with the iteration index and the last finite breakdown.
    """
    run.validate()
    if dataset is None:
        if not run.data_root:
            raise ConfigError("no dataset: set data_root in the config or pass one explicitly")
        dataset = load_dataset(DatasetSpec.from_file(run.data_root))
    if len(dataset) == 0:
        raise DataError("cannot train on an empty dataset")

    out = Path(run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    echo_path = out / "config_echo.cfg"
    echo_path.write_text(config_to_text(run))

    torch.manual_seed(run.seed)
    model = build_model(run.model)
    model.train()
    optimizer = make_optimizer(model, run)
    sampler = np.random.default_rng(run.seed)

    log_path = out / "train_log.csv"
    ckpt_path = out / "checkpoint.pt"
    last_finite: dict[str, float] | None = None
    iterations_run = 0
    breakdown: dict[str, float] = {}

    with log_path.open("w") as fh:
        fh.write(",".join(LOG_COLUMNS) + "\n")
        for iteration in range(1, run.optim.iterations + 1):
            idxs = sampler.integers(0, len(dataset), size=run.optim.batch_size)
            samples = [dataset[int(i)] for i in idxs]
            if run.augment:
                samples = [augment(s, seed=int(sampler.integers(0, 2**31))) for s in samples]
            batch = batch_to_tensors(samples)

            out_model = model(batch["image_t1"], batch["image_t2"])
            void = batch["void"] if bool(batch["void"].any()) else None
            loss, breakdown = total_loss(
                out_model.change_logits,
                out_model.sem_logits_t1,
                out_model.sem_logits_t2,
                batch["change"],
                batch["sem_t1"],
                batch["sem_t2"],
                weights=run.loss,
                void_mask=void,
            )
            if not math.isfinite(breakdown["total"]):
                raise NumericsError(
                    f"non-finite loss at iteration {iteration}; last finite breakdown: {last_finite}"
                )
            last_finite = breakdown

            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            if run.optim.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), run.optim.grad_clip)
            optimizer.step()

            fh.write(",".join([str(iteration)] + [repr(breakdown[c]) for c in LOG_COLUMNS[1:]]) + "\n")
            iterations_run = iteration

            if iteration % run.eval_interval == 0 or iteration == run.optim.iterations:
                fh.flush()
                save_checkpoint(ckpt_path, model, optimizer, run, iteration)
                if should_stop is not None:
                    stop = should_stop(iteration, model, breakdown)
                    model.train()
                    if stop:
                        log.info("early stop requested at iteration %d", iteration)
                        break

    save_checkpoint(ckpt_path, model, optimizer, run, iterations_run)
    return TrainResult(
        checkpoint_path=ckpt_path,
        log_path=log_path,
        config_echo_path=echo_path,
        iterations_run=iterations_run,
        final_breakdown=breakdown,
    )


def predict(model: ChangeDetectionModel, sample: BiTemporalSample) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Hard (change, sem_t1, sem_t2) maps for one sample."""
    model.eval()
    with torch.no_grad():
        batch = batch_to_tensors([sample])
        out = model(batch["image_t1"], batch["image_t2"])
        change = out.change_logits.argmax(dim=1)[0].numpy()
        sem_t1 = out.sem_logits_t1.argmax(dim=1)[0].numpy()
        sem_t2 = out.sem_logits_t2.argmax(dim=1)[0].numpy()
    return change, sem_t1, sem_t2


def evaluate(
    model: ChangeDetectionModel | None,
    dataset,
    num_classes: int,
    out_dir: str | Path | None = None,
    class_names: list[str] | None = None,
    predict_fn: Callable[[BiTemporalSample], tuple[np.ndarray, np.ndarray, np.ndarray]] | None = None,
) -> dict[str, float]:
    """Accumulate confusion and transition matrices over a dataset.

    ``predict_fn`` overrides the model (used to inject reference
    predictions in tests); otherwise the model's argmax maps are scored.
    Writes metrics.json, CSVs and heatmaps when ``out_dir`` is given.
    """
    if predict_fn is None:
        if model is None:
            raise ConfigError("evaluate needs a model or a predict_fn")
        if model.config.num_classes != num_classes:
            raise ConfigError(
                f"model has {model.config.num_classes} classes but the dataset has {num_classes}"
            )
        predict_fn = lambda s: predict(model, s)  # noqa: E731
    if len(dataset) == 0:
        raise DataError("cannot evaluate on an empty dataset")

    cm_t1: ConfusionMatrix | None = None
    cm_t2: ConfusionMatrix | None = None
    trans_gt = None
    trans_pred = None
    changed_correct = 0
    changed_total = 0
    for i in range(len(dataset)):
        sample = dataset[i]
        pred_change, pred_sem_t1, pred_sem_t2 = predict_fn(sample)
        cm_t1 = accumulate_confusion(
            pred_sem_t1, pred_change, sample.sem_t1, sample.change, num_classes, sample.void, into=cm_t1
        )
        cm_t2 = accumulate_confusion(
            pred_sem_t2, pred_change, sample.sem_t2, sample.change, num_classes, sample.void, into=cm_t2
        )
        sem_names = class_names[1:] if class_names else None
        tg = transition_matrix(sample.sem_t1, sample.sem_t2, sample.change, num_classes, sample.void, sem_names)
        tp = transition_matrix(pred_sem_t1, pred_sem_t2, pred_change, num_classes, sample.void, sem_names)
        trans_gt = tg if trans_gt is None else TransitionMatrix(trans_gt.counts + tg.counts, sem_names)
        trans_pred = tp if trans_pred is None else TransitionMatrix(trans_pred.counts + tp.counts, sem_names)
        valid = ~sample.void
        changed = (sample.change > 0) & valid
        changed_total += 2 * int(changed.sum())
        changed_correct += int((pred_sem_t1[changed] == sample.sem_t1[changed]).sum())
        changed_correct += int((pred_sem_t2[changed] == sample.sem_t2[changed]).sum())

    total = cm_t1.merge(cm_t2)
    p, r, f = fscd(total)
    sek_avg = 0.5 * (sek(cm_t1) + sek(cm_t2))
    metrics = {
        "oa": overall_accuracy(total),
        "miou": miou_binary(collapse_to_binary(total)),
        "sek": sek_avg,
        "fscd": f,
        "p_scd": p,
        "r_scd": r,
        "changed_sem_acc": changed_correct / changed_total if changed_total else 0.0,
        "n_samples": float(len(dataset)),
    }
    if out_dir is not None:
        pct = {f"{k}_percent": v * 100.0 for k, v in metrics.items() if k not in ("n_samples",)}
        pct["n_samples"] = metrics["n_samples"]
        emit_report(
            pct,
            {"t1": cm_t1, "t2": cm_t2, "total": total},
            {"gt": trans_gt, "pred": trans_pred},
            out_dir,
            class_names=class_names,
        )
    return metrics
