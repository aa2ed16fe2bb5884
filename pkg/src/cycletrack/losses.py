"""Training losses: adaptive anchor assignment (top-k by center distance,
IoU mean+std threshold), focal classification loss, L1 regression loss on
anchor deltas, and the mask-guided per-sample loss weight."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import TrainConfig
from .net import AnchorGrid, Prediction, encode_deltas
from .region_mask import RegionMask


@dataclass
class AssignedTargets:
    labels: np.ndarray  # (K,) 1 positive / 0 negative
    positive_idx: np.ndarray  # (n_pos,)
    target_deltas: np.ndarray  # (n_pos, 4)
    quality: np.ndarray | None = None  # (n_pos,) relative anchor quality in (0, 1]


def iou_with_box(corners: np.ndarray, box: np.ndarray) -> np.ndarray:
    """IoU of each corner-format row with one box."""
    ix1 = np.maximum(corners[:, 0], box[0])
    iy1 = np.maximum(corners[:, 1], box[1])
    ix2 = np.minimum(corners[:, 2], box[2])
    iy2 = np.minimum(corners[:, 3], box[3])
    inter = np.clip(ix2 - ix1, 0, None) * np.clip(iy2 - iy1, 0, None)
    area_a = (corners[:, 2] - corners[:, 0]) * (corners[:, 3] - corners[:, 1])
    area_b = (box[2] - box[0]) * (box[3] - box[1])
    return inter / (area_a + area_b - inter)


def atss_assign(anchors: AnchorGrid, label_box: np.ndarray, topk: int = 15) -> AssignedTargets:
    """Candidates are the top-k anchors by center distance; positives are
    candidates with IoU >= mean+std of candidate IoUs and center inside the
    box. If that leaves nothing but some anchor overlaps the box, the
    best-IoU anchor becomes positive so a valid label always trains
    regression."""
    label_box = np.asarray(label_box, dtype=np.float64)
    bcx = (label_box[0] + label_box[2]) / 2
    bcy = (label_box[1] + label_box[3]) / 2
    dist = np.hypot(anchors.cx - bcx, anchors.cy - bcy)
    k = min(topk, anchors.count)
    candidates = np.argsort(dist, kind="stable")[:k]

    ious_all = iou_with_box(anchors.corners, label_box)
    cand_ious = ious_all[candidates]
    thr = cand_ious.mean() + cand_ious.std()
    inside = ((anchors.cx[candidates] >= label_box[0])
              & (anchors.cx[candidates] <= label_box[2])
              & (anchors.cy[candidates] >= label_box[1])
              & (anchors.cy[candidates] <= label_box[3]))
    positive_idx = candidates[(cand_ious >= thr) & inside & (cand_ious > 0)]

    if positive_idx.size == 0 and ious_all.max() > 0:
        positive_idx = np.array([int(np.argmax(ious_all))])

    labels = np.zeros(anchors.count)
    labels[positive_idx] = 1.0
    deltas = encode_deltas(np.broadcast_to(label_box, (positive_idx.size, 4)),
                           anchors, positive_idx) if positive_idx.size else \
        np.zeros((0, 4))
    if positive_idx.size:
        q = ious_all[positive_idx] / ious_all[positive_idx].max()
        quality = q**2  # sharpen so the best-fitting anchor dominates ranking
    else:
        quality = np.zeros(0)
    return AssignedTargets(labels=labels, positive_idx=positive_idx,
                           target_deltas=deltas, quality=quality)


def focal_loss(logits: Tensor, targets: AssignedTargets,
               gamma: float = 2.0, alpha: float = 0.25) -> Tensor:
    """Binary focal loss over all anchors, normalized by max(n_pos, 1).
    When the assignment carries per-positive quality, the positive terms are
    weighted by it so the head learns to rank its positives."""
    pos = targets.positive_idx
    neg = np.nonzero(targets.labels == 0)[0]
    n_pos = max(pos.size, 1)
    total = Tensor(0.0)
    if pos.size:
        lp = logits[pos]
        p = ad.sigmoid(lp)
        per_anchor = alpha * ad.power(1.0 + (-1.0) * p, gamma) * ad.softplus(-lp)
        if targets.quality is not None and targets.quality.size == pos.size:
            per_anchor = per_anchor * Tensor(targets.quality)
        total = total + per_anchor.sum()
    if neg.size:
        ln = logits[neg]
        p = ad.sigmoid(ln)
        total = total + ((1.0 - alpha) * ad.power(p, gamma) * ad.softplus(ln)).sum()
    return total * (1.0 / n_pos)


def l1_reg_loss(pred_deltas: Tensor, targets: AssignedTargets) -> Tensor:
    """Mean absolute delta error over positive anchors (0 without positives)."""
    if targets.positive_idx.size == 0:
        return Tensor(0.0)
    pred = pred_deltas[targets.positive_idx]
    return ad.absolute(pred - Tensor(targets.target_deltas)).mean()


def base_loss(pred: Prediction, label_box: np.ndarray, anchors: AnchorGrid,
              cfg: TrainConfig) -> Tensor:
    targets = atss_assign(anchors, label_box, cfg.atss_topk)
    cls = focal_loss(pred.logits, targets, cfg.focal_gamma, cfg.focal_alpha)
    reg = l1_reg_loss(pred.deltas, targets)
    return cfg.lambda1 * cls + cfg.lambda2 * reg


def reweight(m_hat: RegionMask, m_bar: RegionMask, cfg: TrainConfig) -> float:
    """Label-quality weight: compare the sizes of the high-response regions
    of the predicted mask and the label mask at beta = beta_factor * s_max.
    w = log_gamma(alpha - N_hat/N_bar), floored at 0; the log argument is
    floored at 1e-3 so the weight is always defined."""
    if m_hat.grid.shape != m_bar.grid.shape:
        raise ValueError("masks must share a grid")
    beta = cfg.beta_factor * m_hat.s_max
    n_hat = float(np.count_nonzero(m_hat.grid.data >= beta))
    n_bar = max(1.0, float(np.count_nonzero(m_bar.grid.data >= beta)))
    return reweight_from_ratio(n_hat / n_bar, cfg.reweight_gamma, cfg.reweight_alpha)


def reweight_from_ratio(ratio: float, gamma: float, alpha: float) -> float:
    arg = max(alpha - ratio, 1e-3)
    return max(math.log(arg) / math.log(gamma), 0.0)
