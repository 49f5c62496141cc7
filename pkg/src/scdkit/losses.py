"""Composite training objective.

Cross-entropy supervises the change mask and both semantic masks.  Two
regularizers act on soft confusion matrices built from predicted
probability mass: a negative-log binary mIoU on the change head, and a
negative-log separated-kappa (SeK) score on the effective semantic
predictions of both timestamps.  The SeK core here is also what the hard
evaluation metrics call, so the relaxed loss and the reported metric agree
exactly on one-hot inputs.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import Tensor

from .config import LossWeights
from .errors import DataError, NumericsError, ShapeError

_ROW_SUM_TOL = 1e-4


def _valid_mask(labels: Tensor, void_mask: Tensor | None) -> Tensor:
    if void_mask is None:
        return torch.ones_like(labels, dtype=torch.bool)
    if void_mask.shape != labels.shape:
        raise ShapeError(f"void mask shape {tuple(void_mask.shape)} != labels {tuple(labels.shape)}")
    return ~void_mask.bool()


def masked_cross_entropy(logits: Tensor, labels: Tensor, void_mask: Tensor | None = None) -> Tensor:
    """Mean NLL over non-void pixels; labels at void pixels may be anything."""
    if logits.dim() != 4 or labels.dim() != 3 or logits.shape[0] != labels.shape[0] or logits.shape[2:] != labels.shape[1:]:
        raise ShapeError(
            f"cross entropy expects logits (B, K, H, W) with labels (B, H, W), got {tuple(logits.shape)} and {tuple(labels.shape)}"
        )
    k = logits.shape[1]
    valid = _valid_mask(labels, void_mask)
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise DataError("cross entropy has zero valid pixels (entire batch is void)")
    if bool((((labels < 0) | (labels >= k)) & valid).any()):
        raise DataError(f"labels outside [0, {k}) at non-void pixels")
    logp = F.log_softmax(logits, dim=1)
    nll = -logp.gather(1, labels.clamp(0, k - 1).unsqueeze(1)).squeeze(1)
    return (nll * valid).sum() / valid.sum()


def soft_confusion(probs: Tensor, labels: Tensor, num_classes: int, void_mask: Tensor | None = None) -> Tensor:
    """Probability-mass confusion matrix q[i, j] = sum p_i over pixels with label j.

    Rows index predictions, columns ground truth.  One-hot rows reduce this
    to the integer count matrix.  Per-pixel probabilities must sum to 1
    within 1e-4.
    """
    if probs.dim() != 4 or probs.shape[1] != num_classes:
        raise ShapeError(f"probs must be (B, {num_classes}, H, W), got {tuple(probs.shape)}")
    if labels.shape != (probs.shape[0], probs.shape[2], probs.shape[3]):
        raise ShapeError(f"labels shape {tuple(labels.shape)} does not match probs {tuple(probs.shape)}")
    valid = _valid_mask(labels, void_mask)
    if bool((((labels < 0) | (labels >= num_classes)) & valid).any()):
        raise DataError(f"labels outside [0, {num_classes}) at non-void pixels")
    sums = probs.sum(dim=1)
    if bool((((sums - 1).abs() > _ROW_SUM_TOL) & valid).any()):
        raise NumericsError("per-pixel probabilities do not sum to 1 within 1e-4")
    onehot = F.one_hot(labels.clamp(0, num_classes - 1), num_classes).permute(0, 3, 1, 2).to(probs.dtype)
    onehot = onehot * valid.unsqueeze(1)
    return torch.einsum("bihw,bjhw->ij", probs, onehot)


def binary_miou_from_confusion(q: Tensor) -> Tensor:
    """Mean of the no-change and change IoU of a 2x2 confusion matrix."""
    if q.shape != (2, 2):
        raise ShapeError(f"expected a 2x2 confusion matrix, got {tuple(q.shape)}")
    iou_nc = q[0, 0] / (q[0, :].sum() + q[:, 0].sum() - q[0, 0])
    iou_c = q[1, 1] / (q.sum() - q[0, 0])
    return 0.5 * (iou_nc + iou_c)


def miou_loss(
    change_probs: Tensor,
    change_labels: Tensor,
    epsilon: float = 1e-6,
    void_mask: Tensor | None = None,
) -> Tensor:
    """-log(soft binary mIoU + epsilon) of the change head."""
    q = soft_confusion(change_probs, change_labels, 2, void_mask)
    return -torch.log(binary_miou_from_confusion(q) + epsilon)


def sek_from_confusion(q: Tensor) -> tuple[Tensor, bool]:
    """Separated kappa of an N x N confusion matrix (class 0 = no change).

    The (0, 0) cell is zeroed before agreement and chance-agreement
    marginals; the change IoU rescales the kappa by exp(IoU_change - 1).
    Degenerate inputs (no mass outside (0, 0), or chance agreement 1)
    return 0 with the flag set.
    """
    if q.dim() != 2 or q.shape[0] != q.shape[1] or q.shape[0] < 2:
        raise ShapeError(f"expected a square confusion matrix of size >= 2, got {tuple(q.shape)}")
    mask = torch.ones_like(q)
    mask[0, 0] = 0
    qz = q * mask
    total = qz.sum()
    if float(total.detach()) <= 0.0:
        return q.new_zeros(()), True
    rho = torch.diagonal(qz).sum() / total
    eta = (qz.sum(dim=0) * qz.sum(dim=1)).sum() / total**2
    if float((1 - eta).detach()) <= 1e-12:
        return q.new_zeros(()), True
    iou_change = q[1:, 1:].sum() / total
    sek = torch.exp(iou_change - 1) * (rho - eta) / (1 - eta)
    return sek, False


def effective_probs(change_probs: Tensor, sem_probs: Tensor) -> Tensor:
    """Combine change and semantic heads into one N-way distribution.

    P(0) = P(no change) + P(change) * P(sem 0); P(c>=1) = P(change) * P(sem c).
    Columns still sum to 1.
    """
    if change_probs.shape[1] != 2:
        raise ShapeError(f"change_probs must have 2 channels, got {change_probs.shape[1]}")
    if sem_probs.shape[0] != change_probs.shape[0] or sem_probs.shape[2:] != change_probs.shape[2:]:
        raise ShapeError("change_probs and sem_probs disagree on batch or spatial shape")
    p_change = change_probs[:, 1:2]
    scaled = p_change * sem_probs
    head = change_probs[:, 0:1] + scaled[:, 0:1]
    return torch.cat([head, scaled[:, 1:]], dim=1)


def sek_loss(
    change_probs: Tensor,
    sem_probs_t1: Tensor,
    sem_probs_t2: Tensor,
    change_labels: Tensor,
    sem_labels_t1: Tensor,
    sem_labels_t2: Tensor,
    epsilon: float = 1e-6,
    void_mask: Tensor | None = None,
) -> Tensor:
    """-log(max(mean SeK over both timestamps, 0) + epsilon).

    Ground-truth effective labels are the semantic ids where change is
    marked and 0 elsewhere; predictions use the combined distribution of
    effective_probs.
    """
    n = sem_probs_t1.shape[1]
    losses = []
    for sem_probs, sem_labels in ((sem_probs_t1, sem_labels_t1), (sem_probs_t2, sem_labels_t2)):
        eff_p = effective_probs(change_probs, sem_probs)
        eff_l = torch.where(change_labels > 0, sem_labels, torch.zeros_like(sem_labels))
        q = soft_confusion(eff_p, eff_l, n, void_mask)
        sek, _degenerate = sek_from_confusion(q)
        losses.append(sek)
    sek_avg = 0.5 * (losses[0] + losses[1])
    return -torch.log(sek_avg.clamp_min(0.0) + epsilon)


def total_loss(
    change_logits: Tensor,
    sem_logits_t1: Tensor,
    sem_logits_t2: Tensor,
    change_labels: Tensor,
    sem_labels_t1: Tensor,
    sem_labels_t2: Tensor,
    weights: LossWeights | None = None,
    void_mask: Tensor | None = None,
) -> tuple[Tensor, dict[str, float]]:
    """Composite objective and its per-term breakdown.

    total = CE_change + (CE_sem_t1 + CE_sem_t2) / 2
            + lambda_miou * miou_loss + lambda_sek * sek_loss

    The breakdown dict carries plain floats under the same names as the
    training log columns.  With weights.sek_loss False the SeK term is
    skipped entirely and logged as 0.
    """
    w = weights if weights is not None else LossWeights()
    ce_bcd = masked_cross_entropy(change_logits, change_labels, void_mask)
    ce_t1 = masked_cross_entropy(sem_logits_t1, sem_labels_t1, void_mask)
    ce_t2 = masked_cross_entropy(sem_logits_t2, sem_labels_t2, void_mask)
    change_probs = F.softmax(change_logits, dim=1)
    l_miou = miou_loss(change_probs, change_labels, w.epsilon, void_mask)
    if w.sek_loss:
        l_sek = sek_loss(
            change_probs,
            F.softmax(sem_logits_t1, dim=1),
            F.softmax(sem_logits_t2, dim=1),
            change_labels,
            sem_labels_t1,
            sem_labels_t2,
            w.epsilon,
            void_mask,
        )
    else:
        l_sek = change_logits.new_zeros(())
    total = ce_bcd + 0.5 * (ce_t1 + ce_t2) + w.lambda_miou * l_miou + w.lambda_sek * l_sek
    breakdown = {
        "ce_bcd": float(ce_bcd.detach()),
        "ce_t1": float(ce_t1.detach()),
        "ce_t2": float(ce_t2.detach()),
        "miou_loss": float(l_miou.detach()),
        "sek_loss": float(l_sek.detach()),
        "total": float(total.detach()),
    }
    return total, breakdown
