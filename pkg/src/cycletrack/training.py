"""Two-stage training: self-tracking on single frames (stage 1), then
forward-backward cycle training through palindrome-ordered search frames
(stage 2). Per-sample losses are weighted by the mask-guided label-quality
weight; batch gradients are reduced in index order."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, backward, sgd_step
from .config import FullConfig, NetConfig, TrainConfig
from .losses import base_loss, reweight
from .net import TrackerModel
from .region_mask import build_region_mask, mask_from_single_box
from .runtime import evaluate_model, feature_grid_spec
from .scenes import CycleSample, SyntheticSequence, crop_patch, generate_sequence, \
    jitter_box, sample_palindrome
from .template_update import propagate_template


class TrainingError(RuntimeError):
    """Non-finite loss or otherwise unrecoverable training state."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


def lr_schedule(step: int, total_steps: int, lr_start: float, lr_end: float) -> float:
    """Log-space decay; step 0 gives lr_start, the final step gives lr_end."""
    if total_steps <= 1:
        return lr_start
    t = step / (total_steps - 1)
    return float(np.exp((1 - t) * np.log(lr_start) + t * np.log(lr_end)))


def _box_center(box) -> tuple[float, float]:
    return (box[0] + box[2]) / 2.0, (box[1] + box[3]) / 2.0


def _box_size(box) -> tuple[float, float]:
    return box[2] - box[0], box[3] - box[1]


@dataclass
class LegacyOutcome:
    loss: Tensor  # unweighted base loss
    weight: float
    template_kernel: Tensor
    template_patch: object


def legacy_forward(model: TrackerModel, frame: np.ndarray, pseudo_box: np.ndarray,
                   cfg: TrainConfig, rng: np.random.Generator) -> LegacyOutcome:
    """Template/search pair from a single frame: the search crop is a
    shifted + rescaled view of the pseudo box region; the pseudo box is the
    label. The label-quality weight compares the predicted mask against the
    single-box mask of the label (both constants for the gradient)."""
    net = model.cfg
    spec = feature_grid_spec(net)
    w, h = _box_size(pseudo_box)
    cx, cy = _box_center(pseudo_box)
    ctx = net.context_factor * np.sqrt(w * h)

    tmpl = crop_patch(frame, (cx, cy), net.template_size, ctx)
    shift = rng.uniform(-cfg.shift_aug, cfg.shift_aug, 2) * 2 * ctx
    scale = rng.uniform(cfg.scale_aug_low, cfg.scale_aug_high)
    search = crop_patch(frame, (cx + shift[0], cy + shift[1]),
                        net.search_size, 2 * ctx * scale)
    label = search.box_to_patch(pseudo_box)

    kernel = model.encode(tmpl.image)
    feat = model.encode(search.image)
    pred = model.rpn_forward(kernel, feat)
    loss = base_loss(pred, label, model.anchors, cfg)

    weight = 1.0
    if cfg.reweight_enabled:
        with ad.no_grad():
            m_hat = build_region_mask(pred.reg.detach(), pred.cls.detach(),
                                      spec, cfg.mask_threshold)
            lw, lh = _box_size(label)
            if lw > 1e-3 and lh > 1e-3:
                m_bar = mask_from_single_box(label, spec)
                weight = reweight(m_hat, m_bar, cfg)
    return LegacyOutcome(loss=loss, weight=weight, template_kernel=kernel,
                         template_patch=tmpl)


def legacy_step(model: TrackerModel, batch: list[tuple[np.ndarray, np.ndarray]],
                cfg: TrainConfig, rng: np.random.Generator,
                accumulate: bool = True) -> tuple[float, list[float]]:
    """Mean weighted single-frame loss over a batch of (frame, pseudo_box);
    gradients are accumulated into the model when `accumulate`."""
    total = 0.0
    weights = []
    b = len(batch)
    for frame, box in batch:
        out = legacy_forward(model, frame, box, cfg, rng)
        weighted = out.loss * (out.weight / b)
        if accumulate:
            backward(weighted)
        total += weighted.item()
        weights.append(out.weight)
    return total, weights


@dataclass
class CycleOutcome:
    total: Tensor
    l_legacy: float
    l_cycle: float
    weight: float
    box_tensors: list[Tensor]  # intermediate-frame box predictions, tape-attached
    kernel_count: int
    visited: list[int]


def cycle_step(model: TrackerModel, sample: CycleSample, cfg: TrainConfig,
               rng: np.random.Generator, detach_boxes: bool | None = None) -> CycleOutcome:
    """Track the palindrome-ordered search frames, propagating the template
    kernel through (mask, attention-retrieval) at each visit, then score the
    return to frame 0 against its pseudo label. Total is the lambda_cycle mix
    of the single-frame term and the cycle term, both weighted by the frame-0
    label-quality weight."""
    net = model.cfg
    spec = feature_grid_spec(net)
    detach = cfg.detach_boxes if detach_boxes is None else detach_boxes
    pseudo_box = sample.pseudo_label.box

    legacy = legacy_forward(model, sample.template_frame, pseudo_box, cfg, rng)
    t1 = legacy.template_kernel
    hidden = t1
    kernel = t1
    kernel_count = 1

    w, h = _box_size(pseudo_box)
    center = tuple(sample.pseudo_centers[0])
    box_tensors: list[Tensor] = []
    for i, frame in enumerate(sample.search_frames):
        ctx = 2.0 * net.context_factor * np.sqrt(w * h)
        patch = crop_patch(frame, center, net.search_size, ctx)
        feat = model.encode(patch.image)
        pred = model.rpn_forward(kernel, feat)
        box_tensors.append(pred.reg)

        best = int(np.argmax(pred.cls.data))
        bb = pred.reg.data[best]
        fx, fy = patch.point_to_frame(*_box_center(bb))
        bw, bh = (bb[2] - bb[0]) * patch.spacing, (bb[3] - bb[1]) * patch.spacing
        size_hi = frame.shape[1]
        w = float(np.clip(0.5 * w + 0.5 * bw, 4.0, size_hi))
        h = float(np.clip(0.5 * h + 0.5 * bh, 4.0, size_hi))
        center = (float(np.clip(fx, 0, frame.shape[2])), float(np.clip(fy, 0, size_hi)))

        mask = build_region_mask(pred.reg, pred.cls, spec, cfg.mask_threshold,
                                 detach_boxes=detach)
        kernel, hidden = propagate_template(
            feat, mask, t1, hidden, model,
            long_term=cfg.long_term, short_term=cfg.short_term,
            residual=cfg.residual, attention_axis=cfg.attention_axis)
        kernel_count += 1

    # the return to frame 0 is cropped at the known pseudo center (the one
    # piece of first-frame information the pipeline is allowed), with the
    # tracked scale; the propagated kernel must still localize the target
    ctx = 2.0 * net.context_factor * np.sqrt(w * h)
    final_patch = crop_patch(sample.template_frame, _box_center(pseudo_box),
                             net.search_size, ctx)
    final_feat = model.encode(final_patch.image)
    final_pred = model.rpn_forward(kernel, final_feat)
    label = final_patch.box_to_patch(pseudo_box)
    cycle_loss = base_loss(final_pred, label, model.anchors, cfg)

    lam = cfg.lambda_cycle
    total = (legacy.loss * ((1.0 - lam) * legacy.weight)
             + cycle_loss * (lam * legacy.weight))
    if not np.isfinite(total.data):
        raise TrainingError(
            "non-finite cycle loss",
            {"l_legacy": legacy.loss.item(), "l_cycle": cycle_loss.item(),
             "weight": legacy.weight, "visited": sample.search_indices})
    return CycleOutcome(total=total, l_legacy=legacy.loss.item(),
                        l_cycle=cycle_loss.item(), weight=legacy.weight,
                        box_tensors=box_tensors, kernel_count=kernel_count,
                        visited=sample.search_indices)


# ---------------------------------------------------------------------------
# full training loop


@dataclass
class TrainResult:
    model: TrackerModel
    metrics: list[dict]
    steps: int
    aborted: bool = False


def heldout_sequences(cfg: FullConfig) -> list[SyntheticSequence]:
    base = np.random.SeedSequence([cfg.train.seed, 0xE0A1]).generate_state(cfg.train.eval_sequences)
    return [generate_sequence(cfg.scene, int(s)) for s in base]


def _live_params(model: TrackerModel):
    return [p for p in model.params() if p.tensor.grad is not None]


def clip_gradients(params, max_norm: float) -> float:
    """Scale gradients so their global L2 norm is at most max_norm;
    returns the pre-clip norm."""
    total = np.sqrt(sum(float((p.tensor.grad**2).sum()) for p in params))
    if max_norm > 0 and total > max_norm:
        factor = max_norm / total
        for p in params:
            p.tensor.grad *= factor
    return total


class MomentumState:
    """Heavy-ball gradient conditioning: replaces each gradient with its
    running velocity before the plain descent step."""

    def __init__(self, coefficient: float):
        self.coefficient = coefficient
        self.velocity: dict[str, np.ndarray] = {}

    def condition(self, params) -> None:
        if self.coefficient <= 0:
            return
        for p in params:
            v = self.velocity.get(p.name)
            v = p.tensor.grad if v is None else self.coefficient * v + p.tensor.grad
            self.velocity[p.name] = v
            p.tensor.grad = v.copy()


def train(cfg: FullConfig, out_dir: str | Path | None = None,
          model: TrackerModel | None = None, quiet: bool = True) -> TrainResult:
    """Run stage 1 (single-frame) then stage 2 (cycle) training with the
    log-decayed learning rate, logging one line per step and one metrics
    record per epoch. A non-finite loss aborts after writing diagnostics and
    the last good checkpoint."""
    from .checkpoint import save_checkpoint

    cfg.validate()
    tc = cfg.train
    model = model or TrackerModel(cfg.net, seed=tc.seed)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    data_rng = np.random.default_rng(np.random.SeedSequence([tc.seed, 0xDA7A]))
    aug_rng = np.random.default_rng(np.random.SeedSequence([tc.seed, 0xA261]))
    legacy_scene = dataclasses.replace(cfg.scene, n_frames=4)

    total_steps = (tc.legacy_epochs + tc.cycle_epochs) * tc.steps_per_epoch
    legacy_steps = tc.legacy_epochs * tc.steps_per_epoch
    eval_seqs = heldout_sequences(cfg)

    log_lines: list[str] = []
    metrics: list[dict] = []
    step = 0
    last_good = 0.0
    momentum = MomentumState(tc.momentum)

    def run_eval(epoch: int) -> dict:
        rec = evaluate_model(model, eval_seqs)
        rec = {"epoch": epoch, "mean_iou": rec["mean_iou"],
               "success_auc": rec["success_auc"]}
        metrics.append(rec)
        if out is not None:
            with open(out / "metrics.jsonl", "a") as f:
                f.write(json.dumps(rec) + "\n")
        return rec

    def flush_logs():
        if out is not None and log_lines:
            with open(out / "train_log.txt", "a") as f:
                f.write("\n".join(log_lines) + "\n")
            log_lines.clear()

    try:
        for epoch in range(tc.legacy_epochs + tc.cycle_epochs):
            for _ in range(tc.steps_per_epoch):
                lr = lr_schedule(step, total_steps, tc.lr_start, tc.lr_end)
                if step < legacy_steps:
                    batch = []
                    for _ in range(tc.batch_size):
                        seq = generate_sequence(legacy_scene, int(data_rng.integers(2**31)))
                        pbox = jitter_box(seq.gt_boxes[0], tc.jitter_level,
                                          int(data_rng.integers(2**31)),
                                          bounds=(cfg.scene.image_size, cfg.scene.image_size))
                        batch.append((seq.frames[0], pbox))
                    loss, weights = legacy_step(model, batch, tc, aug_rng)
                    l_legacy, l_cycle = loss, 0.0
                else:
                    losses, weights = [], []
                    l_leg_acc, l_cyc_acc = 0.0, 0.0
                    for _ in range(tc.batch_size):
                        seq = generate_sequence(cfg.scene, int(data_rng.integers(2**31)))
                        sample = sample_palindrome(seq, tc.n_search, tc.frame_gap,
                                                   int(data_rng.integers(2**31)),
                                                   jitter_level=tc.jitter_level)
                        outcome = cycle_step(model, sample, tc, aug_rng)
                        backward(outcome.total * (1.0 / tc.batch_size))
                        losses.append(outcome.total.item() / tc.batch_size)
                        weights.append(outcome.weight)
                        l_leg_acc += outcome.l_legacy / tc.batch_size
                        l_cyc_acc += outcome.l_cycle / tc.batch_size
                    loss = float(sum(losses))
                    l_legacy, l_cycle = l_leg_acc, l_cyc_acc
                if not np.isfinite(loss):
                    raise TrainingError("non-finite step loss", {"step": step})
                live = _live_params(model)
                clip_gradients(live, tc.grad_clip)
                momentum.condition(live)
                sgd_step(live, lr)
                last_good = loss
                log_lines.append(
                    f"{step} {loss:.6f} {l_legacy:.6f} {l_cycle:.6f} "
                    f"{lr:.6e} {float(np.mean(weights)):.4f}")
                step += 1
            flush_logs()
            rec = run_eval(epoch)
            if out is not None:
                save_checkpoint(model, out / "checkpoint.bin", step=step,
                                config=cfg.to_flat())
            if not quiet:
                print(f"epoch {epoch}: step {step} loss {last_good:.4f} "
                      f"mean_iou {rec['mean_iou']:.4f}")
    except TrainingError as e:
        flush_logs()
        if out is not None:
            (out / "failure.json").write_text(json.dumps(
                {"error": str(e), "diagnostics": e.diagnostics, "step": step}, indent=2))
            save_checkpoint(model, out / "checkpoint.bin", step=step,
                            config=cfg.to_flat())
        raise

    flush_logs()
    if out is not None:
        save_checkpoint(model, out / "checkpoint.bin", step=step, config=cfg.to_flat())
    if not metrics:
        run_eval(-1)
    return TrainResult(model=model, metrics=metrics, steps=step)
