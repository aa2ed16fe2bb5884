"""Online tracking: per-frame inference with an optional memory queue of
high-confidence search features + masks, periodic hidden-kernel refresh, and
legacy/memory score fusion. Offline mode (memory disabled) is a pure Siamese
forward pass with no template propagation at all."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tensor
from .config import NetConfig, RuntimeConfig
from .net import TrackerModel
from .region_mask import GridSpec, RegionMask, build_region_mask, mask_from_single_box
from .template_update import propagate_template, retrieve, mask_search, update_hidden


def feature_grid_spec(cfg: NetConfig) -> GridSpec:
    return GridSpec(cfg.search_feat, cfg.search_feat, float(cfg.stride))


@dataclass
class MemoryEntry:
    feature: Tensor
    mask: RegionMask
    score: float
    frame: int


@dataclass
class MemoryQueue:
    """Fixed-capacity store; entry 0 is pinned to the initial frame, the rest
    are the highest-score frames seen so far (ties kept with older frames)."""

    capacity: int
    entries: list[MemoryEntry] = field(default_factory=list)

    def seed(self, entry: MemoryEntry) -> None:
        self.entries = [entry]

    def offer(self, entry: MemoryEntry) -> bool:
        """Insert if below capacity or strictly better than the worst
        non-pinned entry; returns True when the queue changed."""
        if not self.entries:
            raise ContractError("queue must be seeded with the initial frame first")
        if len(self.entries) < self.capacity:
            self.entries.append(entry)
            return True
        tail = self.entries[1:]
        if not tail:
            return False
        worst = min(e.score for e in tail)
        if entry.score <= worst:
            return False
        # evict the newest among the minimum-score entries, keeping older ones
        evict = max((e for e in tail if e.score == worst), key=lambda e: e.frame)
        self.entries.remove(evict)
        self.entries.append(entry)
        return True


class Tracker:
    """Single-target tracker state machine; one instance per sequence."""

    def __init__(self, model: TrackerModel, runtime_cfg: RuntimeConfig | None = None):
        self.model = model
        self.cfg = model.cfg
        self.rt = runtime_cfg or RuntimeConfig()
        self.rt.validate()
        self.spec = feature_grid_spec(self.cfg)
        self.state: dict | None = None
        self._window = self._make_window()
        self.propagate_calls = 0

    def _make_window(self) -> np.ndarray:
        n = self.cfg.response_size
        han = np.hanning(n + 2)[1:-1]
        win = np.outer(han, han)
        return np.repeat(win.ravel(), len(self.cfg.anchor_ratios))

    # ------------------------------------------------------------------
    def init(self, frame: np.ndarray, box: np.ndarray) -> None:
        from .scenes import crop_patch

        box = np.asarray(box, dtype=np.float64)
        h_img, w_img = frame.shape[1], frame.shape[2]
        if not (0 <= box[0] < box[2] <= w_img and 0 <= box[1] < box[3] <= h_img):
            raise ContractError(f"init box {box} outside frame")
        w, h = box[2] - box[0], box[3] - box[1]
        if w < 2 or h < 2:
            raise ContractError("degenerate init box")
        cx, cy = (box[0] + box[2]) / 2, (box[1] + box[3]) / 2

        ctx = self.cfg.context_factor * np.sqrt(w * h)
        with ad.no_grad():
            tmpl = crop_patch(frame, (cx, cy), self.cfg.template_size, ctx)
            kernel = self.model.encode(tmpl.image)
        self.state = {
            "legacy_kernel": kernel,
            "hidden": kernel,
            "memory_kernel": None,
            "center": (cx, cy),
            "size": (w, h),
            "score": 1.0,
            "frame": 0,
            "queue": MemoryQueue(self.rt.queue_len),
            "interval_best": None,
        }
        if self.rt.memory_enabled:
            with ad.no_grad():
                patch = crop_patch(frame, (cx, cy), self.cfg.search_size, 2 * ctx)
                feat = self.model.encode(patch.image)
                grid_box = patch.box_to_patch(box)
                mask = mask_from_single_box(grid_box, self.spec)
            self.state["queue"].seed(MemoryEntry(feat, mask, 1.0, 0))
            self._refresh_memory_kernel()

    def _refresh_memory_kernel(self) -> None:
        queue: MemoryQueue = self.state["queue"]
        kernels = []
        with ad.no_grad():
            for e in queue.entries:
                k, _ = propagate_template(e.feature, e.mask,
                                          self.state["legacy_kernel"],
                                          self.state["hidden"], self.model)
                self.propagate_calls += 1
                kernels.append(k.data)
        self.state["memory_kernel"] = Tensor(np.mean(kernels, axis=0))

    # ------------------------------------------------------------------
    def track(self, frame: np.ndarray) -> tuple[np.ndarray, float]:
        from .scenes import crop_patch

        if self.state is None:
            raise ContractError("tracker not initialized")
        st = self.state
        st["frame"] += 1
        w, h = st["size"]
        ctx = 2.0 * self.cfg.context_factor * np.sqrt(w * h)
        with ad.no_grad():
            patch = crop_patch(frame, st["center"], self.cfg.search_size, ctx)
            feat = self.model.encode(patch.image)
            pred = self.model.rpn_forward(st["legacy_kernel"], feat)
            legacy_cls = pred.cls.data
            lam = self.rt.lambda_memory
            if self.rt.memory_enabled and lam > 0.0 and st["memory_kernel"] is not None:
                mem_pred = self.model.rpn_forward(st["memory_kernel"], feat)
                fused = (1.0 - lam) * legacy_cls + lam * mem_pred.cls.data
            else:
                fused = legacy_cls

        ranked = fused
        if self.rt.size_penalty > 0:
            ranked = ranked * self._size_change_penalty(pred.reg.data, patch.spacing, w, h)
        ranked = ranked * (1.0 - self.rt.window_weight) + self._window * self.rt.window_weight
        best = int(np.argmax(ranked))
        score = float(fused[best])
        box_patch = pred.reg.data[best]

        bcx, bcy = (box_patch[0] + box_patch[2]) / 2, (box_patch[1] + box_patch[3]) / 2
        fcx, fcy = patch.point_to_frame(bcx, bcy)
        bw = (box_patch[2] - box_patch[0]) * patch.spacing
        bh = (box_patch[3] - box_patch[1]) * patch.spacing
        d = self.rt.scale_damping
        h_img, w_img = frame.shape[1], frame.shape[2]
        new_w = float(np.clip((1 - d) * w + d * bw, 4.0, w_img))
        new_h = float(np.clip((1 - d) * h + d * bh, 4.0, h_img))
        fcx = float(np.clip(fcx, new_w / 2, w_img - new_w / 2))
        fcy = float(np.clip(fcy, new_h / 2, h_img - new_h / 2))
        st["center"] = (fcx, fcy)
        st["size"] = (new_w, new_h)
        st["score"] = score

        if self.rt.memory_enabled:
            self._memory_bookkeeping(feat, pred, score)

        out_box = np.array([fcx - new_w / 2, fcy - new_h / 2,
                            fcx + new_w / 2, fcy + new_h / 2])
        return out_box, score

    def _size_change_penalty(self, boxes: np.ndarray, spacing: float,
                             last_w: float, last_h: float) -> np.ndarray:
        """Down-rank candidates whose size or aspect jumps relative to the
        last estimate (steadies the scale feedback loop)."""
        bw = np.maximum((boxes[:, 2] - boxes[:, 0]) * spacing, 1e-6)
        bh = np.maximum((boxes[:, 3] - boxes[:, 1]) * spacing, 1e-6)

        def ratio(a, b):
            return np.maximum(a / b, b / a)

        s_change = ratio(np.sqrt(bw * bh), np.sqrt(last_w * last_h))
        r_change = ratio(bw / bh, last_w / last_h)
        return np.exp(-self.rt.size_penalty * (s_change * r_change - 1.0))

    def _memory_bookkeeping(self, feat: Tensor, pred, score: float) -> None:
        st = self.state
        best = st["interval_best"]
        if best is None or score > best.score:
            with ad.no_grad():
                th = self.rt.online_threshold_factor * float(pred.cls.data.max())
                mask = build_region_mask(pred.reg.detach(), pred.cls.detach(),
                                         self.spec, th)
            st["interval_best"] = MemoryEntry(feat, mask, score, st["frame"])

        if st["frame"] % self.rt.hidden_interval == 0 and st["interval_best"] is not None:
            entry = st["interval_best"]
            with ad.no_grad():
                x_long = retrieve(mask_search(entry.feature, entry.mask),
                                  st["legacy_kernel"], self.model, "long")
                st["hidden"] = update_hidden(x_long, st["legacy_kernel"], self.model)
            self.update_memory(entry.feature, entry.mask, entry.score, entry.frame)
            st["interval_best"] = None

    def update_memory(self, feature: Tensor, mask: RegionMask, score: float,
                      frame: int | None = None) -> bool:
        """Offer an entry to the queue; on change the memory kernel is the
        mean template propagated from every stored (feature, mask)."""
        st = self.state
        frame = st["frame"] if frame is None else frame
        changed = st["queue"].offer(MemoryEntry(feature, mask, score, frame))
        if changed:
            self._refresh_memory_kernel()
        return changed


# ---------------------------------------------------------------------------
# metrics


def iou(a: np.ndarray, b: np.ndarray) -> float:
    ix1, iy1 = max(a[0], b[0]), max(a[1], b[1])
    ix2, iy2 = min(a[2], b[2]), min(a[3], b[3])
    inter = max(ix2 - ix1, 0.0) * max(iy2 - iy1, 0.0)
    ua = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / ua if ua > 0 else 0.0


def evaluate(results: np.ndarray, gt: np.ndarray) -> dict:
    """Per-frame IoU summary: mean IoU, success AUC over thresholds
    0.00:0.05:1.00, and precision = fraction of frames with center error
    <= 5 px."""
    results = np.asarray(results, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if results.shape != gt.shape or results.ndim != 2 or results.shape[0] == 0:
        raise ContractError(f"results {results.shape} and gt {gt.shape} must match and be non-empty")
    ious = np.array([iou(r, g) for r, g in zip(results, gt)])
    thresholds = np.arange(0.0, 1.0 + 1e-9, 0.05)
    auc = float(np.mean([(ious >= t).mean() for t in thresholds]))
    rc = (results[:, :2] + results[:, 2:]) / 2
    gc = (gt[:, :2] + gt[:, 2:]) / 2
    err = np.hypot(rc[:, 0] - gc[:, 0], rc[:, 1] - gc[:, 1])
    return {
        "mean_iou": float(ious.mean()),
        "success_auc": auc,
        "precision": float((err <= 5.0).mean()),
    }


def track_sequence(model: TrackerModel, seq, runtime_cfg: RuntimeConfig | None = None):
    """Run a tracker over one synthetic sequence from its frame-0 box;
    returns (boxes, scores) for frames 1..n-1."""
    tracker = Tracker(model, runtime_cfg)
    tracker.init(seq.frames[0], seq.gt_boxes[0])
    boxes, scores = [], []
    for frame in seq.frames[1:]:
        box, score = tracker.track(frame)
        boxes.append(box)
        scores.append(score)
    return np.array(boxes), np.array(scores)


def evaluate_model(model: TrackerModel, sequences, runtime_cfg: RuntimeConfig | None = None) -> dict:
    """Track every sequence and pool per-frame metrics."""
    all_results, all_gt = [], []
    for seq in sequences:
        boxes, _ = track_sequence(model, seq, runtime_cfg)
        all_results.append(boxes)
        all_gt.append(seq.gt_boxes[1:])
    return evaluate(np.vstack(all_results), np.vstack(all_gt))


def write_results(path: str | Path, seq_id: str, boxes: np.ndarray,
                  scores: np.ndarray, append: bool = False) -> None:
    """JSON-lines result records."""
    mode = "a" if append else "w"
    with open(path, mode) as f:
        for i, (box, score) in enumerate(zip(boxes, scores)):
            rec = {"seq": seq_id, "frame": i + 1,
                   "box": [round(float(v), 4) for v in box], "score": float(score)}
            f.write(json.dumps(rec) + "\n")
