"""Differentiable region mask: per-box cell-overlap maps, highest-score
duplicate suppression, and score-weighted aggregation into a single-channel
grid. Gradients reach both box corners (through the intersection min/max) and
confidence scores (multiplicatively); the winner selection and the threshold
gate are constants in backward."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tensor


@dataclass(frozen=True)
class GridSpec:
    """h x w cells of size `cell` covering [0, w*cell] x [0, h*cell]."""

    h: int
    w: int
    cell: float

    def cell_corners(self):
        xs = np.arange(self.w) * self.cell
        ys = np.arange(self.h) * self.cell
        x1 = np.broadcast_to(xs[None, :], (self.h, self.w))
        y1 = np.broadcast_to(ys[:, None], (self.h, self.w))
        return x1, y1, x1 + self.cell, y1 + self.cell


@dataclass
class RegionMask:
    grid: Tensor  # (h, w), values in [0, max score]
    threshold_used: float
    provenance: np.ndarray  # (h, w) winning box index, -1 where empty
    s_max: float


def _overlap_batch(boxes: Tensor, spec: GridSpec) -> Tensor:
    """(K, 4) corner boxes -> (K, h, w) per-cell covered fraction."""
    if boxes.ndim != 2 or boxes.shape[1] != 4:
        raise ContractError(f"boxes must be (K, 4), got {boxes.shape}")
    k = boxes.shape[0]
    cx1, cy1, cx2, cy2 = (Tensor(a) for a in spec.cell_corners())
    bx1 = boxes[:, 0].reshape(k, 1, 1)
    by1 = boxes[:, 1].reshape(k, 1, 1)
    bx2 = boxes[:, 2].reshape(k, 1, 1)
    by2 = boxes[:, 3].reshape(k, 1, 1)

    ix1 = ad.maximum(bx1, cx1)
    iy1 = ad.maximum(by1, cy1)
    ix2 = ad.minimum(bx2, cx2)
    iy2 = ad.minimum(by2, cy2)
    wlen = ad.maximum(ix2 - ix1, Tensor(0.0))
    hlen = ad.maximum(iy2 - iy1, Tensor(0.0))
    return (wlen * hlen) * (1.0 / (spec.cell * spec.cell))


def grid_overlap(box, spec: GridSpec) -> Tensor:
    """Single-box overlap map; the grid must cover the search patch."""
    t = box if isinstance(box, Tensor) else Tensor(box)
    if t.shape != (4,):
        raise ContractError(f"box must have 4 coordinates, got shape {t.shape}")
    if not (t.data[2] > t.data[0] and t.data[3] > t.data[1]):
        raise ContractError(f"degenerate box {t.data}")
    return _overlap_batch(t.reshape(1, 4), spec).reshape(spec.h, spec.w)


def suppress_duplicates(maps: Tensor, scores: np.ndarray) -> tuple[Tensor, np.ndarray]:
    """Zero every cell value except the one from the highest-score box with
    positive coverage there (ties: lowest box index). Selection is a constant
    in backward. Returns (suppressed maps, winner index per cell or -1)."""
    scores = np.asarray(scores, dtype=np.float64)
    if maps.ndim != 3 or maps.shape[0] != scores.shape[0]:
        raise ContractError(f"got {maps.shape[0]} maps for {scores.shape[0]} scores")
    vals = maps.data
    pos = vals > 0.0
    cand = np.where(pos, scores[:, None, None], -np.inf)
    winner = np.argmax(cand, axis=0)
    any_pos = pos.any(axis=0)
    keep = np.zeros_like(pos)
    np.put_along_axis(keep, winner[None], any_pos[None], axis=0)
    provenance = np.where(any_pos, winner, -1)
    return maps * Tensor(keep.astype(np.float64)), provenance


def aggregate_mask(maps: Tensor, scores: Tensor, threshold: float,
                   provenance: np.ndarray | None = None) -> RegionMask:
    """M = sum_k gate(s_k >= TH) * s_k * map_k; the gate is non-differentiable,
    the score factor is."""
    k = maps.shape[0]
    if scores.shape != (k,):
        raise ContractError(f"need {k} scores, got shape {scores.shape}")
    gate = (scores.data >= threshold).astype(np.float64)
    weighted = maps * (scores * Tensor(gate)).reshape(k, 1, 1)
    grid = weighted.sum(axis=0)
    if provenance is None:
        provenance = np.where(maps.data.max(axis=0) > 0, maps.data.argmax(axis=0), -1)
    hidden = (gate == 0.0)
    if hidden.any():
        provenance = np.where(np.isin(provenance, np.nonzero(hidden)[0]), -1, provenance)
    return RegionMask(grid=grid, threshold_used=float(threshold), provenance=provenance,
                      s_max=float(scores.data.max()) if k else 0.0)


def build_region_mask(boxes: Tensor, scores: Tensor, spec: GridSpec, threshold: float,
                      detach_boxes: bool = False) -> RegionMask:
    """Full pipeline from K predicted boxes + scores, optionally cutting the
    gradient path through the box coordinates (scores stay attached)."""
    if detach_boxes:
        boxes = boxes.detach()
    maps = _overlap_batch(boxes, spec)
    suppressed, provenance = suppress_duplicates(maps, scores.data)
    return aggregate_mask(suppressed, scores, threshold, provenance)


def mask_from_single_box(box, spec: GridSpec) -> RegionMask:
    """One box with score 1 and no gating (label-side mask)."""
    t = box if isinstance(box, Tensor) else Tensor(box)
    if not (t.data[2] > t.data[0] and t.data[3] > t.data[1]):
        raise ContractError(f"degenerate box {t.data}")
    return build_region_mask(t.reshape(1, 4), Tensor(np.ones(1)), spec, 0.0)


def export_mask(mask: RegionMask, path: str | Path) -> None:
    lines = [" ".join(f"{v:.4f}" for v in row) for row in mask.grid.data]
    Path(path).write_text("\n".join(lines) + "\n")
