"""Training-set augmentation by bounding-box shifts and survival-time jitter.

Each copy moves the bbox ``shift_pixels`` along one of the 8 axis/diagonal
directions, so the SPP layer sees a re-framed crop of unchanged pixels. The
copy's time is drawn from ``Normal(t, frac * t)`` truncated at zero. Optional
rotations and zooms add further copies with transformed pixels.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy import ndimage

from .cox import SurvivalRecord
from .errors import InvalidArgumentError
from .simdata import Image2D, SimulatedSample, derive_seed, tight_bbox
from .spp import BoundingBox

log = logging.getLogger(__name__)

DIRECTIONS_2D: tuple[tuple[int, int], ...] = tuple(
    (dx, dy) for dy in (-1, 0, 1) for dx in (-1, 0, 1) if (dx, dy) != (0, 0)
)


@dataclass
class AugmentConfig:
    shift_pixels: int = 2
    directions: tuple[tuple[int, int], ...] = DIRECTIONS_2D
    time_jitter_frac: float = 0.05
    rotations: tuple[float, ...] = ()
    zooms: tuple[float, ...] = ()
    seed: int = 0

    def __post_init__(self) -> None:
        if self.shift_pixels < 1:
            raise InvalidArgumentError("shift_pixels must be positive")
        if self.time_jitter_frac < 0:
            raise InvalidArgumentError("time_jitter_frac must be non-negative")
        if any(z <= 0 for z in self.zooms):
            raise InvalidArgumentError("zoom factors must be positive")
        self.directions = tuple((int(dx), int(dy)) for dx, dy in self.directions)


def jitter_time(t_original: float, frac: float, rng: np.random.Generator) -> float:
    """One draw from ``Normal(t, frac*t)``, redrawn until positive."""
    if not t_original > 0:
        raise InvalidArgumentError("time must be positive")
    if frac < 0:
        raise InvalidArgumentError("jitter fraction must be non-negative")
    if frac == 0:
        return float(t_original)
    while True:
        t = rng.normal(t_original, frac * t_original)
        if t > 0:
            return float(t)


def _transformed(image: Image2D, angle: float = 0.0, zoom: float = 1.0) -> Image2D | None:
    """Rotate/zoom about the image centre, keeping the canvas size."""
    px = image.pixels.astype(np.float64)
    out = np.empty_like(px)
    h, w = image.height, image.width
    c = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    th = np.deg2rad(angle)
    # output -> input coordinate map for affine_transform
    rot = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]]) / zoom
    offset = c - rot @ c
    for ch in range(px.shape[0]):
        out[ch] = ndimage.affine_transform(px[ch], rot, offset=offset, order=1, mode="constant")
    out[np.abs(out) < 1e-6] = 0.0
    box = tight_bbox(out)
    if box is None:
        return None
    return Image2D(out.astype(np.float32), box, image.standardized)


def augment_sample(
    sample: SimulatedSample, cfg: AugmentConfig, rng: np.random.Generator
) -> list[SimulatedSample]:
    """Shifted (and optionally rotated/zoomed) copies of one sample.

    Shifts that would push the bbox outside the image are dropped. The
    original sample is not included in the returned list.
    """
    img = sample.image
    box = img.bbox
    copies: list[Image2D] = []
    s = cfg.shift_pixels
    for dx, dy in cfg.directions:
        x0, y0 = box.x0 + dx * s, box.y0 + dy * s
        if x0 < 0 or y0 < 0 or x0 + box.width > img.width or y0 + box.height > img.height:
            continue
        copies.append(Image2D(img.pixels, BoundingBox(x0, y0, box.width, box.height), img.standardized))
    for angle in cfg.rotations:
        t = _transformed(img, angle=angle)
        if t is not None:
            copies.append(t)
    for zoom in cfg.zooms:
        t = _transformed(img, zoom=zoom)
        if t is not None:
            copies.append(t)
    if not copies:
        log.warning("sample %s: no valid augmentation direction", sample.id)
        return []
    out = []
    for image in copies:
        t = jitter_time(sample.record.time, cfg.time_jitter_frac, rng)
        # true_risk no longer matches transformed pixels/time, so it is dropped
        out.append(replace(sample, image=image, record=SurvivalRecord(t, sample.record.event), true_risk=None))
    return out


def augment_dataset(
    samples: Sequence[SimulatedSample], cfg: AugmentConfig
) -> list[SimulatedSample]:
    """Originals followed by their copies; each sample gets its own derived stream."""
    out = list(samples)
    for k, s in enumerate(samples):
        rng = np.random.default_rng(derive_seed(cfg.seed, k))
        out.extend(augment_sample(s, cfg, rng))
    return out
