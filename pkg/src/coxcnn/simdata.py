"""Simulated imaging survival data.

Each digit image ``I`` is multiplied pixel-wise with one shared random weight
mask ``M``. Its risk is ``exp(-sum((I * M)**2))`` and its survival time is
``lambda0 * exp(-risk)``. A fixed fraction of samples keeps the event flag and
the rest are right-censored.

Digits come from MNIST IDX files or from :func:`synth_digits`, an offline
renderer of ring-like zeros and hooked sixes. Risks are always computed on
raw intensities in [0, 1]. Network input standardisation happens later.
"""

from __future__ import annotations

import gzip
import json
import logging
import os
import struct
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .cox import SurvivalRecord
from .errors import CorruptionError, FormatError, InvalidArgumentError
from .spp import BoundingBox

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Image2D:
    """``[C, H, W]`` float32 pixels plus the region of interest."""

    pixels: np.ndarray
    bbox: BoundingBox
    standardized: bool = False

    def __post_init__(self) -> None:
        px = np.asarray(self.pixels, dtype=np.float32)
        if px.ndim == 2:
            px = px[None]
        if px.ndim != 3 or 0 in px.shape:
            raise InvalidArgumentError(f"image pixels must be [C,H,W], got {px.shape}")
        self.pixels = px
        self.bbox.validate_for(self.height, self.width)

    @property
    def channels(self) -> int:
        return self.pixels.shape[0]

    @property
    def height(self) -> int:
        return self.pixels.shape[1]

    @property
    def width(self) -> int:
        return self.pixels.shape[2]


@dataclass
class WeightMask:
    values: np.ndarray
    seed: int
    distribution: str = "uniform"

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 2:
            raise InvalidArgumentError("mask must be a 2D array")

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass
class SimulatedSample:
    id: int
    image: Image2D
    record: SurvivalRecord
    true_risk: float | None = None


@dataclass
class SimulatedDataset:
    samples: list[SimulatedSample]
    mask: WeightMask | None = None
    lambda0: float = 5.0
    seed: int = 0
    non_censored_fraction: float = 0.5
    extra: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.samples)

    def times(self) -> np.ndarray:
        return np.array([s.record.time for s in self.samples], dtype=np.float64)

    def events(self) -> np.ndarray:
        return np.array([s.record.event for s in self.samples], dtype=bool)

    def subset(self, indices: Iterable[int]) -> "SimulatedDataset":
        return replace(self, samples=[self.samples[i] for i in indices])


def derive_seed(seed: int, *keys: int) -> int:
    """Deterministic child seed for a ``(seed, key...)`` path."""
    return int(np.random.SeedSequence([seed, *keys]).generate_state(1, dtype=np.uint64)[0])


def tight_bbox(pixels: np.ndarray) -> BoundingBox | None:
    """Smallest box covering every nonzero pixel in any channel."""
    px = np.asarray(pixels)
    if px.ndim == 3:
        px = np.abs(px).max(axis=0)
    rows = np.flatnonzero(px.any(axis=1))
    cols = np.flatnonzero(px.any(axis=0))
    if rows.size == 0:
        return None
    return BoundingBox(
        int(cols[0]), int(rows[0]), int(cols[-1] - cols[0] + 1), int(rows[-1] - rows[0] + 1)
    )


def standardize(image: Image2D) -> Image2D:
    """Per-channel zero mean and unit variance over the whole image."""
    px = image.pixels.astype(np.float64)
    mean = px.mean(axis=(1, 2), keepdims=True)
    std = px.std(axis=(1, 2), keepdims=True)
    std[std == 0] = 1.0
    return Image2D(((px - mean) / std).astype(np.float32), image.bbox, standardized=True)


# ---------------------------------------------------------------------------
# generative model


def generate_mask(
    width: int,
    height: int,
    seed: int,
    distribution: str = "uniform",
    sigma: float = 1.0,
    scale: float = 1.0,
) -> WeightMask:
    """Shared pixel weights: ``scale * U[0, 1)`` or ``N(0, sigma)`` draws."""
    if width < 1 or height < 1:
        raise InvalidArgumentError("mask dimensions must be positive")
    rng = np.random.default_rng(seed)
    if distribution == "uniform":
        m = scale * rng.random((height, width))
    elif distribution == "gaussian":
        m = rng.normal(0.0, sigma, size=(height, width))
    else:
        raise InvalidArgumentError(f"unknown mask distribution {distribution!r}")
    return WeightMask(m.astype(np.float32), seed, distribution)


def risk_of(image: Image2D | np.ndarray, mask: WeightMask | np.ndarray) -> float:
    """``exp(-sum_ij (I_ij * M_ij)**2)`` on raw intensities."""
    if isinstance(image, Image2D):
        if image.standardized:
            raise InvalidArgumentError("risk is defined on raw intensities, not standardized pixels")
        px = image.pixels
    else:
        px = np.asarray(image)
    m = mask.values if isinstance(mask, WeightMask) else np.asarray(mask)
    if px.ndim == 3:
        if px.shape[0] != 1:
            raise InvalidArgumentError("risk_of expects a single-channel image")
        px = px[0]
    if px.shape != m.shape:
        raise InvalidArgumentError(f"image shape {px.shape} does not match mask {m.shape}")
    prod = px.astype(np.float64) * m.astype(np.float64)
    return float(np.exp(-np.sum(prod * prod)))


def survival_time(risk: float, lambda0: float = 5.0) -> float:
    return float(lambda0 * np.exp(-risk))


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def apply_censoring(
    samples: Sequence[SimulatedSample], non_censored_fraction: float = 0.5, seed: int = 0
) -> list[SimulatedSample]:
    """Keep exactly ``round(fraction * n)`` events; censor the rest.

    A censored sample is observed at ``u * t`` with ``u ~ U(0.1, 1)``, where
    ``t`` is its uncensored time.
    """
    n = len(samples)
    if n == 0:
        raise InvalidArgumentError("cannot censor an empty sample list")
    if not 0 < non_censored_fraction <= 1:
        raise InvalidArgumentError("non_censored_fraction must lie in (0, 1]")
    rng = np.random.default_rng(seed)
    n_events = _round_half_up(non_censored_fraction * n)
    order = rng.permutation(n)
    is_event = np.zeros(n, dtype=bool)
    is_event[order[:n_events]] = True
    u = rng.uniform(0.1, 1.0, size=n)
    out = []
    for k, s in enumerate(samples):
        t = s.record.time
        rec = SurvivalRecord(t, True) if is_event[k] else SurvivalRecord(float(u[k] * t), False)
        out.append(replace(s, record=rec))
    return out


def simulate(
    images: Sequence[Image2D],
    seed: int = 0,
    lambda0: float = 5.0,
    non_censored_fraction: float = 0.5,
    mask: WeightMask | None = None,
    mask_distribution: str = "uniform",
    mask_sigma: float = 1.0,
    mask_scale: float = 1.0,
) -> SimulatedDataset:
    """Turn raw digit images into a censored survival dataset."""
    if not images:
        raise InvalidArgumentError("no images to simulate from")
    h, w = images[0].height, images[0].width
    if mask is None:
        mask = generate_mask(
            w, h, derive_seed(seed, 1), mask_distribution, sigma=mask_sigma, scale=mask_scale
        )
    samples = []
    for i, img in enumerate(images):
        r = risk_of(img, mask)
        samples.append(SimulatedSample(i, img, SurvivalRecord(survival_time(r, lambda0), True), r))
    samples = apply_censoring(samples, non_censored_fraction, derive_seed(seed, 2))
    return SimulatedDataset(samples, mask, lambda0, seed, non_censored_fraction)


# ---------------------------------------------------------------------------
# image sources


def _read_idx(path: str | os.PathLike, magic: int) -> np.ndarray:
    p = Path(path)
    opener = gzip.open if p.suffix == ".gz" else open
    with opener(p, "rb") as fh:
        data = fh.read()
    if len(data) < 4:
        raise FormatError(f"{p}: truncated IDX header")
    (found,) = struct.unpack(">I", data[:4])
    if found != magic:
        raise FormatError(f"{p}: bad IDX magic 0x{found:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(data) < header:
        raise FormatError(f"{p}: truncated IDX dimensions")
    dims = struct.unpack(f">{ndim}I", data[4:header])
    count = int(np.prod(dims))
    if len(data) - header < count:
        raise FormatError(f"{p}: expected {count} bytes of data, found {len(data) - header}")
    return np.frombuffer(data, dtype=np.uint8, count=count, offset=header).reshape(dims)


def read_idx_images(path: str | os.PathLike) -> np.ndarray:
    return _read_idx(path, IDX_IMAGES_MAGIC)


def read_idx_labels(path: str | os.PathLike) -> np.ndarray:
    return _read_idx(path, IDX_LABELS_MAGIC)


def write_idx(path: str | os.PathLike, array: np.ndarray) -> None:
    arr = np.asarray(array, dtype=np.uint8)
    magic = 0x00000800 | arr.ndim
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(f">{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())


def load_idx(
    images_path: str | os.PathLike,
    labels_path: str | os.PathLike,
    keep_labels: Iterable[int] = (0, 6),
    return_labels: bool = False,
):
    """MNIST-style images scaled to [0, 1], filtered by label.

    Each kept image gets its tight nonzero bounding box; all-black images
    are skipped with a warning.
    """
    raw = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if raw.shape[0] != labels.shape[0]:
        raise FormatError(f"{raw.shape[0]} images but {labels.shape[0]} labels")
    keep = set(int(k) for k in keep_labels)
    images, kept_labels, skipped = [], [], 0
    for px, lab in zip(raw, labels):
        if int(lab) not in keep:
            continue
        box = tight_bbox(px)
        if box is None:
            skipped += 1
            continue
        images.append(Image2D((px.astype(np.float32) / 255.0)[None], box))
        kept_labels.append(int(lab))
    if skipped:
        log.warning("skipped %d empty images with no bounding box", skipped)
    return (images, kept_labels) if return_labels else images


def _bezier(p0, p1, p2, k: int) -> np.ndarray:
    t = np.linspace(0.0, 1.0, k)[:, None]
    return (1 - t) ** 2 * p0 + 2 * (1 - t) * t * p1 + t**2 * p2


def _ellipse(cx, cy, rx, ry, theta, k: int, start=0.0, stop=2 * np.pi) -> np.ndarray:
    t = np.linspace(start, stop, k)
    x, y = rx * np.cos(t), ry * np.sin(t)
    c, s = np.cos(theta), np.sin(theta)
    return np.stack([cx + c * x - s * y, cy + s * x + c * y], axis=1)


def _render(points: np.ndarray, size: int, width: float, ink: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    grid = np.stack([xx.ravel(), yy.ravel()], axis=1).astype(np.float64)
    d2 = ((grid[:, None, :] - points[None, :, :]) ** 2).sum(axis=2).min(axis=1)
    img = ink * np.exp(-d2 / (2.0 * width**2))
    img[img < 0.05 * ink] = 0.0
    return img.reshape(size, size)


def _ring_points(rng: np.random.Generator, c: float) -> np.ndarray:
    cx, cy = c + rng.uniform(-1.5, 1.5), c + rng.uniform(-1.5, 1.5)
    return _ellipse(cx, cy, rng.uniform(3.5, 7.0), rng.uniform(6.0, 9.0), rng.uniform(-0.35, 0.35), 160)


def _six_points(rng: np.random.Generator, c: float) -> np.ndarray:
    r = rng.uniform(3.0, 5.0)
    cx = c + rng.uniform(-1.5, 1.5)
    cy = c + rng.uniform(2.0, 4.0)
    loop = _ellipse(cx, cy, r * rng.uniform(0.9, 1.2), r, rng.uniform(-0.3, 0.3), 120)
    top = cy - r - rng.uniform(5.0, 9.0)
    p0 = np.array([cx - r, cy])
    p1 = np.array([cx - r - rng.uniform(0.0, 2.5), top + rng.uniform(0.0, 3.0)])
    p2 = np.array([cx + rng.uniform(0.0, 1.0) * r, top])
    return np.vstack([loop, _bezier(p0, p1, p2, 80)])


_SHAPES = {0: _ring_points, 6: _six_points}


def synth_digits(
    n: int,
    classes: Iterable[int] = (0, 6),
    seed: int = 0,
    size: int = 28,
    ink: float = 0.3,
    return_labels: bool = False,
):
    """Render ``n`` class-balanced digit-like images.

    Class 0 is an ellipse ("ring"), class 6 a small loop with a hooked
    stroke above it. Centre, size, tilt and stroke width are jittered. Peak
    intensity is ``ink``; keeping it well below 1 stops the squared-sum risk
    from collapsing towards zero on 28x28 images.
    """
    if n <= 0:
        raise InvalidArgumentError("n must be positive")
    classes = sorted(int(c) for c in classes)
    unknown = [c for c in classes if c not in _SHAPES]
    if unknown or not classes:
        raise InvalidArgumentError(f"synthetic classes must be drawn from {sorted(_SHAPES)}")
    rng = np.random.default_rng(seed)
    centre = (size - 1) / 2.0
    images, labels = [], []
    for i in range(n):
        label = classes[i % len(classes)]
        pts = _SHAPES[label](rng, centre)
        px = _render(pts, size, rng.uniform(0.6, 1.3), ink)
        box = tight_bbox(px)
        if box is None:  # pragma: no cover - shapes always land on the canvas
            raise RuntimeError("synthetic digit rendered empty")
        images.append(Image2D(px[None].astype(np.float32), box))
        labels.append(label)
    return (images, labels) if return_labels else images


# ---------------------------------------------------------------------------
# dataset directory format


def _write_bin(path: Path, arr: np.ndarray) -> int:
    data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
    path.write_bytes(data)
    return zlib.crc32(data)


def _read_bin(path: Path, shape: tuple[int, ...], crc: int, what: str) -> np.ndarray:
    if not path.exists():
        raise CorruptionError(f"{what}: missing file {path.name}")
    data = path.read_bytes()
    if zlib.crc32(data) != crc:
        raise CorruptionError(f"{what}: checksum mismatch in {path.name}")
    expected = int(np.prod(shape)) * 4
    if len(data) != expected:
        raise CorruptionError(f"{what}: {path.name} has {len(data)} bytes, expected {expected}")
    return np.frombuffer(data, dtype="<f4").reshape(shape).astype(np.float32)


def write_dataset(dataset: SimulatedDataset, directory: str | os.PathLike) -> Path:
    """Write ``manifest.json`` plus one little-endian float32 file per image."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    manifest: dict = {
        "format_version": FORMAT_VERSION,
        "n": len(dataset.samples),
        "lambda0": dataset.lambda0,
        "seed": dataset.seed,
        "non_censored_fraction": dataset.non_censored_fraction,
        "mask_file": None,
        "samples": [],
    }
    if dataset.extra:
        manifest["extra"] = dataset.extra
    if dataset.mask is not None:
        manifest["mask_file"] = "mask.bin"
        manifest["mask"] = {
            "height": dataset.mask.shape[0],
            "width": dataset.mask.shape[1],
            "seed": dataset.mask.seed,
            "distribution": dataset.mask.distribution,
            "crc32": _write_bin(d / "mask.bin", dataset.mask.values),
        }
    for s in dataset.samples:
        name = f"img_{s.id:06d}.bin"
        crc = _write_bin(d / name, s.image.pixels)
        manifest["samples"].append(
            {
                "id": s.id,
                "image_file": name,
                "width": s.image.width,
                "height": s.image.height,
                "channels": s.image.channels,
                "bbox": s.image.bbox.as_list(),
                "time": s.record.time,
                "event": bool(s.record.event),
                "true_risk": s.true_risk,
                "crc32": crc,
            }
        )
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return d


def read_dataset(directory: str | os.PathLike) -> SimulatedDataset:
    d = Path(directory)
    path = d / "manifest.json"
    if not path.exists():
        raise FormatError(f"{d}: no manifest.json")
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise FormatError(
            f"{path}: format_version {manifest.get('format_version')!r}, expected {FORMAT_VERSION}"
        )
    mask = None
    if manifest.get("mask_file"):
        meta = manifest["mask"]
        values = _read_bin(d / manifest["mask_file"], (meta["height"], meta["width"]), meta["crc32"], "mask")
        mask = WeightMask(values, meta["seed"], meta["distribution"])
    samples = []
    for entry in manifest["samples"]:
        what = f"sample {entry['id']}"
        shape = (entry["channels"], entry["height"], entry["width"])
        px = _read_bin(d / entry["image_file"], shape, entry["crc32"], what)
        x0, y0, bw, bh = entry["bbox"]
        samples.append(
            SimulatedSample(
                entry["id"],
                Image2D(px, BoundingBox(x0, y0, bw, bh)),
                SurvivalRecord(float(entry["time"]), bool(entry["event"])),
                entry["true_risk"],
            )
        )
    if len(samples) != manifest["n"]:
        raise CorruptionError(f"{path}: n={manifest['n']} but {len(samples)} samples listed")
    return SimulatedDataset(
        samples,
        mask,
        float(manifest["lambda0"]),
        int(manifest["seed"]),
        float(manifest.get("non_censored_fraction", 0.5)),
        manifest.get("extra", {}),
    )
