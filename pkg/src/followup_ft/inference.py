"""Slice-wise inference over whole volumes, optionally tiled."""

from __future__ import annotations

from typing import Optional

import numpy as np
import torch

from .errors import ConfigError
from .network import NetworkConfig, NetworkParams, compute_receptive_field, forward
from .volume import MultiSequenceExam


def tile_starts(length: int, tile: int, margin: int) -> list:
    """Tile origins along one axis so that every kept pixel is ``margin`` away from a cut edge."""
    if length <= tile:
        return [0]
    core = tile - 2 * margin
    if core < 1:
        raise ConfigError(f"tile {tile} too small for receptive-field margin {margin}")
    starts = list(range(0, length - tile, core))
    starts.append(length - tile)
    return starts


def _kept(start: int, tile: int, length: int, margin: int) -> tuple:
    lo = 0 if start == 0 else start + margin
    hi = length if start + tile >= length else start + tile - margin
    return lo, hi


@torch.no_grad()
def predict_slices(params: NetworkParams, cfg: NetworkConfig, a: np.ndarray, b: np.ndarray,
                   tile: Optional[int] = None, batch: int = 8) -> np.ndarray:
    """Lesion probabilities for stacked slices ``a`` (N, Ca, H, W) and ``b`` (N, Cb, H, W).

    Without ``tile`` whole slices go through the network at once. With ``tile``
    the slice is cut into overlapping tiles whose centres are stitched; the
    overlap equals the receptive-field radius, so the result matches whole-slice
    inference.
    """
    n, _, H, W = a.shape
    out = np.zeros((n, H, W), dtype=np.float32)
    margin = (compute_receptive_field(cfg.dilation_schedule) - 1) // 2
    for i in range(0, n, batch):
        sa = torch.from_numpy(np.ascontiguousarray(a[i: i + batch], dtype=np.float32))
        sb = torch.from_numpy(np.ascontiguousarray(b[i: i + batch], dtype=np.float32))
        if tile is None:
            out[i: i + batch] = forward(params, cfg, sa, sb)[:, 1].numpy()
            continue
        for y in tile_starts(H, tile, margin):
            for x in tile_starts(W, tile, margin):
                ty, tx = min(tile, H), min(tile, W)
                p = forward(params, cfg, sa[..., y: y + ty, x: x + tx], sb[..., y: y + ty, x: x + tx])[:, 1]
                y0, y1 = _kept(y, ty, H, margin)
                x0, x1 = _kept(x, tx, W, margin)
                out[i: i + batch, y0:y1, x0:x1] = p[:, y0 - y: y1 - y, x0 - x: x1 - x].numpy()
    return out


def predict_volume(params: NetworkParams, cfg: NetworkConfig, exam: MultiSequenceExam,
                   tile: Optional[int] = None) -> np.ndarray:
    """Unmasked lesion-probability volume (Z, Y, X) for a normalised exam."""
    a = exam.seq_a.array.transpose(1, 0, 2, 3)
    b = exam.seq_b.array.transpose(1, 0, 2, 3)
    return predict_slices(params, cfg, a, b, tile=tile)
