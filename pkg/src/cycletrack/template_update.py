"""Template propagation: retrieve the next template kernel from the masked
search feature with attention queried by the initial kernel (long-term) and a
recurrent hidden kernel (short-term). Key/value projections are shared; the
two retrievals differ only in their query projection. All projections are
bias-free 1x1 convolutions, so an all-zero mask yields all-zero retrievals."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, ShapeError, Tensor
from .region_mask import RegionMask


def mask_search(search_feat: Tensor, mask) -> Tensor:
    """Channel-broadcast elementwise product of the feature with the mask."""
    grid = mask.grid if isinstance(mask, RegionMask) else mask
    if grid.shape != search_feat.shape[1:]:
        raise ShapeError(f"mask {grid.shape} does not match feature {search_feat.shape}")
    return search_feat * grid.reshape(1, *grid.shape)


def retrieve(masked_search: Tensor, query_source: Tensor, model, which: str,
             attention_axis: str = "search", return_attention: bool = False):
    """Attention readout: each template position takes a normalized mixture
    of projected search features. `attention_axis` picks which dimension the
    softmax normalizes (default: over search positions)."""
    if which == "long":
        w_q = model.query_long.tensor
    elif which == "short":
        w_q = model.query_short.tensor
    else:
        raise ContractError(f"unknown retrieval kind {which!r}")
    c, h, w = query_source.shape
    if masked_search.shape[0] != c:
        raise ShapeError("query/search channel mismatch")
    n_z = h * w
    n_x = masked_search.shape[1] * masked_search.shape[2]

    q = ad.conv2d(query_source, w_q).reshape(c, n_z)
    k = ad.conv2d(masked_search, model.key_proj.tensor).reshape(c, n_x)
    v = ad.conv2d(masked_search, model.value_proj.tensor).reshape(c, n_x)

    logits = ad.matmul(q.transpose(), k)  # (n_z, n_x)
    axis = 1 if attention_axis == "search" else 0
    attn = ad.softmax_axis(logits, axis)
    out = ad.matmul(attn, v.transpose()).transpose().reshape(c, h, w)
    if return_attention:
        return out, attn
    return out


def update_hidden(x_long_prev: Tensor, initial_kernel: Tensor, model) -> Tensor:
    """Aggregate the previous long-term retrieval with the initial kernel
    (channel concat -> 1x1 conv -> per-channel norm)."""
    if x_long_prev.shape != initial_kernel.shape:
        raise ShapeError(
            f"shape mismatch {x_long_prev.shape} vs {initial_kernel.shape}")
    joined = ad.concat([x_long_prev, initial_kernel], axis=0)
    out = ad.conv2d(joined, model.hidden_conv.tensor)
    return ad.norm_affine(out, *(t.tensor for t in model.hidden_norm))


def propagate_template(search_feat: Tensor, mask, initial_kernel: Tensor,
                       hidden: Tensor, model, *, long_term: bool = True,
                       short_term: bool = True, residual: bool = False,
                       attention_axis: str = "search") -> tuple[Tensor, Tensor]:
    """One propagation step: returns (next template kernel, next hidden
    kernel). Disabled long/short terms contribute zeros; the residual switch
    adds the initial kernel to the output."""
    if hidden is None:
        raise ContractError("hidden kernel missing; seed it with the initial kernel")
    masked = mask_search(search_feat, mask)
    zeros = Tensor(np.zeros(initial_kernel.shape))
    x_long = retrieve(masked, initial_kernel, model, "long", attention_axis) \
        if long_term else zeros
    x_short = retrieve(masked, hidden, model, "short", attention_axis) \
        if short_term else zeros

    fused = ad.conv2d(ad.concat([x_short, x_long], axis=0), model.fuse_conv.tensor)
    kernel = ad.norm_affine(fused, *(t.tensor for t in model.fuse_norm))
    if residual:
        kernel = kernel + initial_kernel
    new_hidden = update_hidden(x_long, initial_kernel, model)
    return kernel, new_hidden


def export_attention(attn: Tensor, path) -> None:
    from pathlib import Path

    lines = [" ".join(f"{v:.4f}" for v in row) for row in attn.data]
    Path(path).write_text("\n".join(lines) + "\n")
