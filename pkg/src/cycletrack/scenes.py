"""Synthetic tracking videos: textured rectangles over cluttered backgrounds,
palindrome frame sampling, patch cropping with recorded affine maps, and the
uniform box-jitter noise model for pseudo labels.

Everything is a pure function of (config, seed).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ConfigError, SceneConfig


class FrameRangeError(ValueError):
    """Not enough frames for the requested sampling pattern."""


@dataclass
class SyntheticSequence:
    frames: list[np.ndarray]  # each (3, H, W), values in [0, 1]
    gt_boxes: np.ndarray  # (n_frames, 4) as x1, y1, x2, y2
    seq_id: str
    seed: int


@dataclass
class PseudoLabel:
    box: np.ndarray  # (4,)
    center_only: bool
    noise_level: float


@dataclass
class Patch:
    """Square resampled crop plus the affine patch->frame map:
    frame = origin + spacing * patch."""

    image: np.ndarray  # (C, size, size)
    spacing: float
    origin: tuple[float, float]

    def box_to_frame(self, box: np.ndarray) -> np.ndarray:
        ox, oy = self.origin
        b = np.asarray(box, dtype=np.float64)
        return np.array(
            [ox + self.spacing * b[0], oy + self.spacing * b[1],
             ox + self.spacing * b[2], oy + self.spacing * b[3]])

    def box_to_patch(self, box: np.ndarray) -> np.ndarray:
        ox, oy = self.origin
        b = np.asarray(box, dtype=np.float64)
        return np.array(
            [(b[0] - ox) / self.spacing, (b[1] - oy) / self.spacing,
             (b[2] - ox) / self.spacing, (b[3] - oy) / self.spacing])

    def point_to_frame(self, x: float, y: float) -> tuple[float, float]:
        return self.origin[0] + self.spacing * x, self.origin[1] + self.spacing * y


@dataclass
class CycleSample:
    template_frame: np.ndarray
    search_frames: list[np.ndarray]
    search_indices: list[int]  # palindrome order; the cycle then returns to frame 0
    pseudo_label: PseudoLabel
    pseudo_centers: np.ndarray  # (len(search_indices), 2), centers only
    gt_boxes: np.ndarray  # held out, evaluation only: rows for [0] + search_indices


def _render_rect(img: np.ndarray, box: np.ndarray, tex: np.ndarray) -> None:
    """Alpha-composite a textured axis-aligned rectangle with exact
    per-pixel coverage (separable clipping)."""
    _, h, w = img.shape
    x1, y1, x2, y2 = box
    js = np.arange(w)
    cov_x = np.clip(np.minimum(x2, js + 1.0) - np.maximum(x1, js.astype(float)), 0.0, 1.0)
    is_ = np.arange(h)
    cov_y = np.clip(np.minimum(y2, is_ + 1.0) - np.maximum(y1, is_.astype(float)), 0.0, 1.0)
    cov = np.outer(cov_y, cov_x)
    img *= 1.0 - cov
    img += tex * cov


def _texture(rng: np.random.Generator, h: int, w: int,
             contrast: float = 1.0) -> np.ndarray:
    """Random two-color pattern in normalized box coordinates, so the
    appearance is covariant with box scale. `contrast` < 1 pulls the two
    colors together (used for distractors)."""
    c1 = rng.uniform(0.1, 0.9, 3)
    c2 = c1 + contrast * ((1.0 - c1) - c1)
    u = (np.arange(w) + 0.5) / max(w, 1)
    v = (np.arange(h) + 0.5) / max(h, 1)
    kind = rng.integers(0, 4)
    freq = rng.integers(2, 5)
    phase = rng.uniform(0, 1)
    if kind == 0:  # vertical stripes
        m = ((u * freq + phase) % 1.0 < 0.5).astype(float)[None, :] * np.ones((h, 1))
    elif kind == 1:  # horizontal stripes
        m = ((v * freq + phase) % 1.0 < 0.5).astype(float)[:, None] * np.ones((1, w))
    elif kind == 2:  # checker
        mu = ((u * freq + phase) % 1.0 < 0.5)
        mv = ((v * freq + phase) % 1.0 < 0.5)
        m = (mu[None, :] ^ mv[:, None]).astype(float)
    else:  # solid core with border
        m = np.zeros((h, w))
        bu = (u > 0.15) & (u < 0.85)
        bv = (v > 0.15) & (v < 0.85)
        m[np.ix_(bv, bu)] = 1.0
    return c1[:, None, None] * m[None] + c2[:, None, None] * (1.0 - m[None])


def generate_sequence(cfg: SceneConfig, seed: int) -> SyntheticSequence:
    """Deterministic moving, scaling, textured rectangle over clutter."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    size = cfg.image_size

    cells = cfg.background_cells
    rep = -(-size // cells)  # ceil
    base = rng.uniform(0.15, 0.85, (3, cells, cells))
    background = np.repeat(np.repeat(base, rep, axis=1), rep, axis=2)[:, :size, :size].copy()

    for _ in range(cfg.n_distractors):
        dw = rng.uniform(cfg.min_target_size * 0.6, cfg.max_target_size)
        dh = rng.uniform(cfg.min_target_size * 0.6, cfg.max_target_size)
        dx = rng.uniform(0, size - dw)
        dy = rng.uniform(0, size - dh)
        tex = _texture(rng, int(np.ceil(dh)) + 1, int(np.ceil(dw)) + 1,
                       contrast=rng.uniform(0.25, 0.6))
        ih, iw = background.shape[1], background.shape[2]
        _render_rect(background, np.array([dx, dy, dx + dw, dy + dh]),
                     _resize_tex(tex, ih, iw, dx, dy))

    base_side = rng.uniform(cfg.min_target_size, cfg.max_target_size)
    aspect = rng.uniform(cfg.min_aspect, cfg.max_aspect)
    w = base_side * np.sqrt(aspect)
    h = base_side / np.sqrt(aspect)
    margin = 2.0
    cx = rng.uniform(w / 2 + margin, size - w / 2 - margin)
    cy = rng.uniform(h / 2 + margin, size - h / 2 - margin)
    vx = rng.uniform(-cfg.max_speed, cfg.max_speed)
    vy = rng.uniform(-cfg.max_speed, cfg.max_speed)

    tex_h = int(np.ceil(cfg.max_target_size * np.sqrt(1.0 / cfg.min_aspect))) + 2
    tex_w = int(np.ceil(cfg.max_target_size * np.sqrt(cfg.max_aspect))) + 2
    target_tex = _texture(rng, tex_h, tex_w)

    frames: list[np.ndarray] = []
    boxes = np.zeros((cfg.n_frames, 4))
    for t in range(cfg.n_frames):
        if t > 0:
            vx = np.clip(vx + rng.uniform(-0.3, 0.3) * cfg.max_speed, -cfg.max_speed, cfg.max_speed)
            vy = np.clip(vy + rng.uniform(-0.3, 0.3) * cfg.max_speed, -cfg.max_speed, cfg.max_speed)
            cx, cy = cx + vx, cy + vy
            sw = 1.0 + rng.uniform(-cfg.max_scale_step, cfg.max_scale_step)
            sh = 1.0 + rng.uniform(-cfg.max_scale_step, cfg.max_scale_step)
            w = np.clip(w * sw, cfg.min_target_size * 0.7, cfg.max_target_size * 1.3)
            h = np.clip(h * sh, cfg.min_target_size * 0.7, cfg.max_target_size * 1.3)
            # reflect off the walls, keeping the box strictly inside
            if cx - w / 2 < margin:
                cx = margin + w / 2
                vx = abs(vx)
            if cx + w / 2 > size - margin:
                cx = size - margin - w / 2
                vx = -abs(vx)
            if cy - h / 2 < margin:
                cy = margin + h / 2
                vy = abs(vy)
            if cy + h / 2 > size - margin:
                cy = size - margin - h / 2
                vy = -abs(vy)
        box = np.array([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2])
        frame = background.copy()
        x1, y1 = box[0], box[1]
        tex_now = _patch_tex(target_tex, box)
        _render_rect(frame, box, _resize_tex(tex_now, size, size, x1, y1))
        if cfg.pixel_noise > 0:
            frame += rng.normal(0.0, cfg.pixel_noise, frame.shape)
        np.clip(frame, 0.0, 1.0, out=frame)
        frames.append(frame)
        boxes[t] = box

    return SyntheticSequence(frames=frames, gt_boxes=boxes, seq_id=f"seq{seed}", seed=seed)


def _patch_tex(tex: np.ndarray, box: np.ndarray) -> np.ndarray:
    """Stretch the canonical texture to the current box extent."""
    bh = max(int(np.ceil(box[3])) - int(np.floor(box[1])), 1)
    bw = max(int(np.ceil(box[2])) - int(np.floor(box[0])), 1)
    ys = np.linspace(0, tex.shape[1] - 1, bh).round().astype(int)
    xs = np.linspace(0, tex.shape[2] - 1, bw).round().astype(int)
    return tex[:, ys][:, :, xs]


def _resize_tex(tex: np.ndarray, img_h: int, img_w: int, x1: float, y1: float) -> np.ndarray:
    """Place a box-sized texture on the full image canvas (nearest fill)."""
    canvas = np.zeros((3, img_h, img_w))
    ox, oy = int(np.floor(x1)), int(np.floor(y1))
    th, tw = tex.shape[1], tex.shape[2]
    ys = slice(max(oy, 0), min(oy + th, img_h))
    xs = slice(max(ox, 0), min(ox + tw, img_w))
    tys = slice(ys.start - oy, ys.stop - oy)
    txs = slice(xs.start - ox, xs.stop - ox)
    canvas[:, ys, xs] = tex[:, tys, txs]
    return canvas


def jitter_box(box: np.ndarray, level: float, seed: int,
               bounds: tuple[float, float] | None = None) -> np.ndarray:
    """Uniform noise on center and size: (cx + s1*w, cy + s2*h,
    (1+s3)*w, (1+s4)*h), each s ~ U(-level/2, level/2)."""
    if not 0.0 <= level <= 1.0:
        raise ConfigError("jitter level must be in [0, 1]")
    box = np.asarray(box, dtype=np.float64)
    if level == 0.0:
        return box.copy()
    rng = np.random.default_rng(seed)
    s = rng.uniform(-0.5 * level, 0.5 * level, 4)
    w, h = box[2] - box[0], box[3] - box[1]
    cx = (box[0] + box[2]) / 2 + s[0] * w
    cy = (box[1] + box[3]) / 2 + s[1] * h
    w = max((1.0 + s[2]) * w, 2.0)
    h = max((1.0 + s[3]) * h, 2.0)
    if bounds is not None:
        bw, bh = bounds
        w, h = min(w, bw), min(h, bh)
        cx = np.clip(cx, w / 2, bw - w / 2)
        cy = np.clip(cy, h / 2, bh - h / 2)
    return np.array([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2])


def sample_palindrome(seq: SyntheticSequence, n_search: int, gap: int, seed: int,
                      jitter_level: float = 0.0) -> CycleSample:
    """Template frame 0, then search frames forward and back: g, 2g, ..., ng,
    ..., 2g, g; the cycle ends with a return to frame 0."""
    if n_search < 1:
        raise FrameRangeError("n_search must be >= 1")
    if 1 + n_search * gap > len(seq.frames):
        raise FrameRangeError(
            f"need {1 + n_search * gap} frames, sequence has {len(seq.frames)}")
    forward = [gap * (i + 1) for i in range(n_search)]
    indices = forward + forward[-2::-1]

    rng = np.random.default_rng(seed)
    size_hint = seq.frames[0].shape[1]
    label_box = jitter_box(seq.gt_boxes[0], jitter_level, int(rng.integers(2**31)),
                           bounds=(size_hint, size_hint))
    centers = np.zeros((len(indices), 2))
    for i, idx in enumerate(indices):
        jb = jitter_box(seq.gt_boxes[idx], jitter_level, int(rng.integers(2**31)),
                        bounds=(size_hint, size_hint))
        centers[i] = [(jb[0] + jb[2]) / 2, (jb[1] + jb[3]) / 2]

    gt = np.vstack([seq.gt_boxes[0:1], seq.gt_boxes[indices]])
    return CycleSample(
        template_frame=seq.frames[0],
        search_frames=[seq.frames[i] for i in indices],
        search_indices=indices,
        pseudo_label=PseudoLabel(box=label_box, center_only=False, noise_level=jitter_level),
        pseudo_centers=centers,
        gt_boxes=gt,
    )


def crop_patch(frame: np.ndarray, center: tuple[float, float], size: int,
               scale_context: float) -> Patch:
    """Bilinear square crop of side `scale_context` (frame px) centred at
    `center`, resampled to size x size; out-of-frame area is channel mean."""
    if size <= 0:
        raise ConfigError("patch size must be positive")
    c, fh, fw = frame.shape
    spacing = scale_context / size
    ox = center[0] - scale_context / 2.0
    oy = center[1] - scale_context / 2.0

    px = ox + (np.arange(size) + 0.5) * spacing
    py = oy + (np.arange(size) + 0.5) * spacing
    mean = frame.mean(axis=(1, 2))

    def sample_axis(coords, n):
        t = coords - 0.5
        i0 = np.floor(t).astype(int)
        frac = t - i0
        return np.clip(i0, 0, n - 1), np.clip(i0 + 1, 0, n - 1), frac

    x0, x1, fx = sample_axis(px, fw)
    y0, y1, fy = sample_axis(py, fh)
    top = frame[:, y0][:, :, x0] * (1 - fx) + frame[:, y0][:, :, x1] * fx
    bot = frame[:, y1][:, :, x0] * (1 - fx) + frame[:, y1][:, :, x1] * fx
    img = top * (1 - fy)[None, :, None] + bot * fy[None, :, None]

    outside = ((px < 0) | (px > fw))[None, :] | ((py < 0) | (py > fh))[:, None]
    img = np.where(outside[None], mean[:, None, None], img)
    return Patch(image=img, spacing=spacing, origin=(ox, oy))


def export_sequence(seq: SyntheticSequence, out_dir: str | Path) -> None:
    """Write 8-bit PPM frames plus a plain-text box file
    ("frame_idx x1 y1 x2 y2", 2-decimal fixed point)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(seq.frames):
        rgb = np.clip(np.round(frame * 255.0), 0, 255).astype(np.uint8)
        h, w = rgb.shape[1], rgb.shape[2]
        with open(out / f"frame_{i:04d}.ppm", "wb") as f:
            f.write(f"P6\n{w} {h}\n255\n".encode())
            f.write(rgb.transpose(1, 2, 0).tobytes())
    with open(out / "boxes.txt", "w") as f:
        for i, b in enumerate(seq.gt_boxes):
            f.write(f"{i} {b[0]:.2f} {b[1]:.2f} {b[2]:.2f} {b[3]:.2f}\n")
