"""Single-level spatial pyramid pooling over a bounding-box region.

The box region of each feature map is split into a fixed ``out_h x out_w``
grid and max-pooled, so boxes of any size map to the same output shape.
Bin ``b`` of ``out`` bins over a length-``L`` axis spans
``[floor(b*L/out), ceil((b+1)*L/out))``; bins overlap or repeat when
``L < out`` but are never empty.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import InvalidArgumentError


@dataclass(frozen=True)
class BoundingBox:
    x0: int
    y0: int
    width: int
    height: int

    def __post_init__(self) -> None:
        if self.x0 < 0 or self.y0 < 0:
            raise InvalidArgumentError(f"bounding box origin must be non-negative: {self}")
        if self.width < 1 or self.height < 1:
            raise InvalidArgumentError(f"bounding box must be at least 1x1: {self}")

    def validate_for(self, height: int, width: int) -> None:
        if self.x0 + self.width > width or self.y0 + self.height > height:
            raise InvalidArgumentError(f"{self} does not fit a {height}x{width} image")

    def shifted(self, dx: int, dy: int) -> "BoundingBox":
        return BoundingBox(self.x0 + dx, self.y0 + dy, self.width, self.height)

    def as_list(self) -> list[int]:
        return [self.x0, self.y0, self.width, self.height]

    @property
    def area(self) -> int:
        return self.width * self.height


@dataclass(frozen=True)
class SppConfig:
    out_h: int = 8
    out_w: int = 8

    def __post_init__(self) -> None:
        if self.out_h < 1 or self.out_w < 1:
            raise InvalidArgumentError("SPP output size must be positive")


@dataclass
class SppCache:
    """Argmax positions (flat ``y*W + x`` per channel) from a forward call."""

    indices: np.ndarray
    feature_shape: tuple[int, ...]


def bin_edges(length: int, bins: int) -> tuple[np.ndarray, np.ndarray]:
    b = np.arange(bins)
    starts = (b * length) // bins
    ends = -((-(b + 1) * length) // bins)
    return starts, ends


def _bin_index_table(length: int, bins: int, width: int) -> np.ndarray:
    """``[bins, width]`` offsets per bin, padded by repeating the last offset."""
    starts, ends = bin_edges(length, bins)
    table = np.empty((bins, width), dtype=np.intp)
    for b in range(bins):
        idx = np.arange(starts[b], ends[b])
        table[b, : idx.size] = idx
        table[b, idx.size :] = idx[-1]
    return table


def _max_bin_len(length: int, bins: int) -> int:
    s, e = bin_edges(length, bins)
    return int((e - s).max())


def _gather_indices(
    bboxes: Sequence[BoundingBox], width: int, cfg: SppConfig
) -> np.ndarray:
    """Flat pixel indices ``[N, out_h, out_w, Lr*Lc]`` ordered by linear index."""
    lr = max(_max_bin_len(b.height, cfg.out_h) for b in bboxes)
    lc = max(_max_bin_len(b.width, cfg.out_w) for b in bboxes)
    out = np.empty((len(bboxes), cfg.out_h, cfg.out_w, lr * lc), dtype=np.intp)
    for n, box in enumerate(bboxes):
        rows = _bin_index_table(box.height, cfg.out_h, lr) + box.y0
        cols = _bin_index_table(box.width, cfg.out_w, lc) + box.x0
        flat = rows[:, None, :, None] * width + cols[None, :, None, :]
        out[n] = flat.reshape(cfg.out_h, cfg.out_w, lr * lc)
    return out


def spp_forward_batch(
    features: np.ndarray, bboxes: Sequence[BoundingBox], cfg: SppConfig
) -> tuple[np.ndarray, SppCache]:
    """Pool ``[N, C, H, W]`` features with one box per sample.

    Ties resolve to the lowest linear index: candidates within a bin are
    laid out in row-major order and ``argmax`` returns the first maximum.
    """
    if features.ndim != 4:
        raise InvalidArgumentError(f"expected [N,C,H,W] features, got {features.shape}")
    n, c, h, w = features.shape
    if len(bboxes) != n:
        raise InvalidArgumentError("one bounding box per sample required")
    for box in bboxes:
        box.validate_for(h, w)
    gather = _gather_indices(bboxes, w, cfg)
    flat = features.reshape(n, c, h * w)
    cand = flat[np.arange(n)[:, None, None, None, None], np.arange(c)[None, :, None, None, None], gather[:, None]]
    pos = cand.argmax(axis=-1)[..., None]
    out = np.take_along_axis(cand, pos, axis=-1)[..., 0]
    idx = np.take_along_axis(np.broadcast_to(gather[:, None], cand.shape), pos, axis=-1)[..., 0]
    return out, SppCache(idx, features.shape)


def spp_backward_batch(cache: SppCache, grad_out: np.ndarray) -> np.ndarray:
    n, c, h, w = cache.feature_shape
    if grad_out.shape != cache.indices.shape:
        raise InvalidArgumentError("grad_out shape does not match SPP output")
    offsets = (np.arange(n * c) * (h * w)).reshape(n, c, 1, 1)
    lin = (cache.indices + offsets).ravel()
    grad = np.bincount(lin, weights=grad_out.ravel().astype(np.float64), minlength=n * c * h * w)
    return grad.astype(grad_out.dtype).reshape(n, c, h, w)


def spp_forward(
    features: np.ndarray, bbox: BoundingBox, cfg: SppConfig = SppConfig()
) -> tuple[np.ndarray, SppCache]:
    """Pool one ``[C, H, W]`` feature map to ``[C, out_h, out_w]``."""
    features = np.asarray(features)
    if features.ndim != 3:
        raise InvalidArgumentError(f"expected [C,H,W] features, got {features.shape}")
    out, cache = spp_forward_batch(features[None], [bbox], cfg)
    return out[0], SppCache(cache.indices[0], features.shape)


def spp_backward(cache: SppCache, grad_out: np.ndarray) -> np.ndarray:
    """Route ``grad_out`` to the argmax pixels; shared pixels accumulate."""
    batched = SppCache(cache.indices[None], (1,) + tuple(cache.feature_shape))
    return spp_backward_batch(batched, np.asarray(grad_out)[None])[0]
