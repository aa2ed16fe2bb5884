"""Siamese tracker network: a small shared conv encoder, anchor grid, and an
anchor-based proposal head (classification scores + regressed boxes) driven by
depthwise cross-correlation of a template kernel over the search feature."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, ShapeError, Tensor
from .config import NetConfig


@dataclass
class AnchorGrid:
    grid_h: int
    grid_w: int
    scale: float
    ratios: tuple[float, ...]
    stride: int
    corners: np.ndarray  # (K, 4) x1, y1, x2, y2 in search-patch pixels
    cx: np.ndarray
    cy: np.ndarray
    w: np.ndarray
    h: np.ndarray

    @property
    def count(self) -> int:
        return self.corners.shape[0]


@dataclass
class Prediction:
    cls: Tensor  # (K,) confidence in (0, 1)
    reg: Tensor  # (K, 4) decoded corners, clamped to the patch
    logits: Tensor  # (K,) raw head outputs
    deltas: Tensor  # (K, 4) raw anchor offsets


def build_anchors(grid_h: int, grid_w: int, scale: float, ratios, stride: int,
                  patch_size: int) -> AnchorGrid:
    """One anchor per (cell, ratio); ratio r gives height/width = r with
    area (stride*scale)^2. Cell centers sit on the stride lattice, centred
    in the patch."""
    ratios = tuple(float(r) for r in ratios)
    if not ratios or any(r <= 0 for r in ratios):
        raise ShapeError("ratios must be positive and non-empty")
    off_y = (patch_size - stride * (grid_h - 1)) / 2.0
    off_x = (patch_size - stride * (grid_w - 1)) / 2.0
    widths = np.array([stride * scale / np.sqrt(r) for r in ratios])
    heights = np.array([stride * scale * np.sqrt(r) for r in ratios])

    r = len(ratios)
    ii, jj = np.meshgrid(np.arange(grid_h), np.arange(grid_w), indexing="ij")
    cy = np.repeat((off_y + stride * ii).ravel(), r)
    cx = np.repeat((off_x + stride * jj).ravel(), r)
    w = np.tile(widths, grid_h * grid_w)
    h = np.tile(heights, grid_h * grid_w)
    corners = np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=1)
    return AnchorGrid(grid_h=grid_h, grid_w=grid_w, scale=scale, ratios=ratios,
                      stride=stride, corners=corners, cx=cx, cy=cy, w=w, h=h)


DELTA_CLAMP = 4.0
MIN_BOX_SIDE = 1e-3


def decode_boxes(deltas: Tensor, anchors: AnchorGrid, patch_size: float) -> Tensor:
    """Anchor-relative decode: center shifts scale with anchor size, log-size
    offsets are clamped to +-4; corners are clamped to the patch with a
    minimum side of 1e-3 px."""
    k = anchors.count
    if deltas.shape != (k, 4):
        raise ShapeError(f"deltas must be ({k}, 4), got {deltas.shape}")
    acx, acy = Tensor(anchors.cx), Tensor(anchors.cy)
    aw, ah = Tensor(anchors.w), Tensor(anchors.h)

    dx, dy = deltas[:, 0], deltas[:, 1]
    dw, dh = deltas[:, 2], deltas[:, 3]
    cx = acx + dx * aw
    cy = acy + dy * ah
    w = aw * ad.exp(ad.clamp(dw, -DELTA_CLAMP, DELTA_CLAMP))
    h = ah * ad.exp(ad.clamp(dh, -DELTA_CLAMP, DELTA_CLAMP))

    x1 = ad.clamp(cx - 0.5 * w, 0.0, patch_size - MIN_BOX_SIDE)
    y1 = ad.clamp(cy - 0.5 * h, 0.0, patch_size - MIN_BOX_SIDE)
    x2 = ad.maximum(ad.clamp(cx + 0.5 * w, MIN_BOX_SIDE, patch_size), x1 + MIN_BOX_SIDE)
    y2 = ad.maximum(ad.clamp(cy + 0.5 * h, MIN_BOX_SIDE, patch_size), y1 + MIN_BOX_SIDE)
    parts = [t.reshape(k, 1) for t in (x1, y1, x2, y2)]
    return ad.concat(parts, axis=1)


def encode_deltas(boxes: np.ndarray, anchors: AnchorGrid,
                  index: np.ndarray | None = None) -> np.ndarray:
    """Inverse of decode_boxes for label construction (plain numpy)."""
    boxes = np.atleast_2d(np.asarray(boxes, dtype=np.float64))
    cx = (boxes[:, 0] + boxes[:, 2]) / 2
    cy = (boxes[:, 1] + boxes[:, 3]) / 2
    w = boxes[:, 2] - boxes[:, 0]
    h = boxes[:, 3] - boxes[:, 1]
    acx, acy = anchors.cx, anchors.cy
    aw, ah = anchors.w, anchors.h
    if index is not None:
        acx, acy, aw, ah = acx[index], acy[index], aw[index], ah[index]
    return np.stack([(cx - acx) / aw, (cy - acy) / ah,
                     np.log(w / aw), np.log(h / ah)], axis=1)


def _he_conv(rng: np.random.Generator, c_out: int, c_in: int, k: int,
             gain: float = 1.0) -> np.ndarray:
    std = gain * np.sqrt(2.0 / (c_in * k * k))
    return rng.standard_normal((c_out, c_in, k, k)) * std


def _near_identity(rng: np.random.Generator, c_out: int, c_in: int,
                   noise: float = 0.05) -> np.ndarray:
    """1x1 conv initialized near an (averaged) identity channel map, so the
    layer starts as a feature-space-preserving mixer."""
    w = np.zeros((c_out, c_in, 1, 1))
    copies = c_in // c_out
    for i in range(c_out):
        for j in range(i, c_in, c_out):
            w[i, j, 0, 0] = 1.0 / copies
    return w + rng.standard_normal(w.shape) * noise


class TrackerModel:
    """Owns every learnable parameter: the shared encoder, the proposal
    heads, and the attention-based template-update projections."""

    def __init__(self, cfg: NetConfig, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC0DE]))
        c = cfg.channels
        ci = cfg.image_channels
        r = len(cfg.anchor_ratios)

        def norm_params(prefix, n):
            return (Parameter(f"{prefix}.gain", np.ones(n)),
                    Parameter(f"{prefix}.bias", np.zeros(n)))

        mid = max(c // 2, 4)
        self._params: list[Parameter] = []
        p = self._params.append

        self.enc_conv1 = Parameter("enc.conv1.w", _he_conv(rng, mid, ci, 3))
        self.enc_norm1 = norm_params("enc.norm1", mid)
        self.enc_conv2 = Parameter("enc.conv2.w", _he_conv(rng, c, mid, 3))
        self.enc_norm2 = norm_params("enc.norm2", c)
        self.enc_conv3 = Parameter("enc.conv3.w", _he_conv(rng, c, c, 3))
        self.enc_norm3 = norm_params("enc.norm3", c)
        for t in (self.enc_conv1, *self.enc_norm1, self.enc_conv2, *self.enc_norm2,
                  self.enc_conv3, *self.enc_norm3):
            p(t)

        cw = 2 * c  # widened correlation space inside the head
        self.corr_proj = Parameter("rpn.corr_proj.w", _he_conv(rng, cw, c, 1))
        self.cls_hidden = Parameter("rpn.cls_hidden.w", _he_conv(rng, cw, cw, 3))
        self.cls_out = Parameter("rpn.cls_out.w", _he_conv(rng, r, cw, 1, gain=0.1))
        self.reg_hidden = Parameter("rpn.reg_hidden.w", _he_conv(rng, cw, cw, 3))
        self.reg_out = Parameter("rpn.reg_out.w", _he_conv(rng, 4 * r, cw, 1, gain=0.1))
        for t in (self.corr_proj, self.cls_hidden, self.cls_out, self.reg_hidden,
                  self.reg_out):
            p(t)

        # near-identity starts keep retrieved kernels inside the encoder
        # feature space, so propagated templates localize from the first step
        self.query_long = Parameter("upd.query_long.w", _near_identity(rng, c, c))
        self.query_short = Parameter("upd.query_short.w", _near_identity(rng, c, c))
        self.key_proj = Parameter("upd.key.w", _near_identity(rng, c, c))
        self.value_proj = Parameter("upd.value.w", _near_identity(rng, c, c))
        self.hidden_conv = Parameter("upd.hidden.conv.w", _near_identity(rng, c, 2 * c))
        self.hidden_norm = norm_params("upd.hidden.norm", c)
        self.fuse_conv = Parameter("upd.fuse.conv.w", _near_identity(rng, c, 2 * c))
        self.fuse_norm = norm_params("upd.fuse.norm", c)
        for t in (self.query_long, self.query_short, self.key_proj, self.value_proj,
                  self.hidden_conv, *self.hidden_norm, self.fuse_conv, *self.fuse_norm):
            p(t)

        names = [q.name for q in self._params]
        assert len(names) == len(set(names))

        self.anchors = build_anchors(cfg.response_size, cfg.response_size,
                                     cfg.anchor_scale, cfg.anchor_ratios, cfg.stride,
                                     cfg.search_size)
        self._corr_scale = 1.0 / (cfg.template_feat * cfg.template_feat)
        # fixed center-heavy window over template cells: border cells of the
        # kernel are mostly context, and the 1x1 heads cannot re-weight
        # template positions themselves
        t = cfg.template_feat
        han = np.hanning(t + 2)[1:-1]
        self._kernel_window = Tensor((0.25 + 0.75 * np.outer(han, han))[None, :, :])

    def params(self) -> list[Parameter]:
        return list(self._params)

    def param_dict(self) -> dict[str, Parameter]:
        return {q.name: q for q in self._params}

    def siamese_params(self) -> list[Parameter]:
        return [q for q in self._params if q.name.startswith(("enc.", "rpn."))]

    def updater_params(self) -> list[Parameter]:
        return [q for q in self._params if q.name.startswith("upd.")]

    # ------------------------------------------------------------------
    def encode(self, image) -> Tensor:
        """Shared feature extractor; stride 4, C feature channels."""
        x = image if isinstance(image, Tensor) else Tensor(image)
        if x.ndim != 3 or x.shape[0] != self.cfg.image_channels:
            raise ShapeError(f"expected ({self.cfg.image_channels}, H, W) input, got {x.shape}")
        if x.shape[1] % self.cfg.stride or x.shape[2] % self.cfg.stride:
            raise ShapeError("patch side must be divisible by the encoder stride")
        x = ad.conv2d(x, self.enc_conv1.tensor, stride=2, pad=1)
        x = ad.relu(ad.norm_affine(x, *(t.tensor for t in self.enc_norm1)))
        x = ad.conv2d(x, self.enc_conv2.tensor, stride=2, pad=1)
        x = ad.relu(ad.norm_affine(x, *(t.tensor for t in self.enc_norm2)))
        x = ad.conv2d(x, self.enc_conv3.tensor, stride=1, pad=1)
        x = ad.norm_affine(x, *(t.tensor for t in self.enc_norm3))
        return x

    def rpn_forward(self, kernel: Tensor, search_feat: Tensor) -> Prediction:
        """Depthwise correlation then two 1x1-conv heads (no biases, so a
        zero kernel propagates to equal logits and anchor-identical boxes)."""
        if kernel.shape[0] != search_feat.shape[0]:
            raise ShapeError("kernel/search channel mismatch")
        k_proj = ad.conv2d(kernel * self._kernel_window, self.corr_proj.tensor)
        s_proj = ad.conv2d(search_feat, self.corr_proj.tensor)
        corr = depthwise_response(k_proj, s_proj, self._corr_scale)
        r = len(self.cfg.anchor_ratios)
        gh, gw = corr.shape[1], corr.shape[2]
        k = gh * gw * r

        cls_map = ad.conv2d(ad.relu(ad.conv2d(corr, self.cls_hidden.tensor, pad=1)),
                            self.cls_out.tensor)
        logits = cls_map.transpose((1, 2, 0)).reshape(k)

        reg_map = ad.conv2d(ad.relu(ad.conv2d(corr, self.reg_hidden.tensor, pad=1)),
                            self.reg_out.tensor)
        deltas = reg_map.reshape(r, 4, gh, gw).transpose((2, 3, 0, 1)).reshape(k, 4)

        boxes = decode_boxes(deltas, self.anchors, float(self.cfg.search_size))
        return Prediction(cls=ad.sigmoid(logits), reg=boxes, logits=logits, deltas=deltas)


def depthwise_response(kernel: Tensor, search_feat: Tensor, scale: float) -> Tensor:
    return ad.depthwise_xcorr(kernel, search_feat) * scale
