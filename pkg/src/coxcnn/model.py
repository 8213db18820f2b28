"""Convolutional Cox model: conv x3 -> SPP -> FC x2 -> scalar risk.

The network is trained end to end on the negative log partial likelihood
computed over the risk sets inside each mini-batch.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import tensor_nn as nn
from .cox import cox_loss_gradient, neg_log_partial_likelihood
from .errors import FormatError, InvalidArgumentError, TrainingDivergedError
from .simdata import Image2D, SimulatedSample, derive_seed, standardize
from .spp import BoundingBox, SppConfig, spp_backward_batch, spp_forward_batch

log = logging.getLogger(__name__)

MODEL_MAGIC = b"CXNN"
MODEL_FORMAT_VERSION = 1


@dataclass
class CoxCnnConfig:
    conv_filters: tuple[int, ...] = (16, 36, 64)
    conv_kernels: tuple[tuple[int, int], ...] = ((3, 3), (5, 5), (5, 5))
    spp_out: tuple[int, int] = (8, 8)
    fc_sizes: tuple[int, ...] = (500, 100)
    dropout_rate: float = 0.5
    # "both" applies dropout after each FC layer, "last" only after the second
    dropout_on: str = "both"
    standardize: bool = True
    strict_risk_set: bool = False
    sgd: nn.SgdConfig = field(default_factory=nn.SgdConfig)

    def __post_init__(self) -> None:
        self.conv_filters = tuple(int(f) for f in self.conv_filters)
        self.conv_kernels = tuple(
            (int(k), int(k)) if np.isscalar(k) else (int(k[0]), int(k[1])) for k in self.conv_kernels
        )
        self.spp_out = (int(self.spp_out[0]), int(self.spp_out[1]))
        self.fc_sizes = tuple(int(f) for f in self.fc_sizes)
        if isinstance(self.sgd, dict):
            self.sgd = nn.SgdConfig(**self.sgd)
        self.validate()

    def validate(self) -> None:
        if len(self.conv_filters) != 3 or len(self.conv_kernels) != 3:
            raise InvalidArgumentError("the network has exactly three convolutional layers")
        if len(self.fc_sizes) != 2:
            raise InvalidArgumentError("the network has exactly two fully connected layers")
        if min(self.conv_filters) < 1 or min(self.fc_sizes) < 1:
            raise InvalidArgumentError("layer widths must be positive")
        for kh, kw in self.conv_kernels:
            if kh < 1 or kw < 1 or kh % 2 == 0 or kw % 2 == 0:
                raise InvalidArgumentError(f"kernel {kh}x{kw} must be odd and positive")
        SppConfig(*self.spp_out)
        if not 0 <= self.dropout_rate < 1:
            raise InvalidArgumentError("dropout_rate must lie in [0, 1)")
        if self.dropout_on not in ("both", "last"):
            raise InvalidArgumentError("dropout_on must be 'both' or 'last'")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv_filters"] = list(self.conv_filters)
        d["conv_kernels"] = [list(k) for k in self.conv_kernels]
        d["spp_out"] = list(self.spp_out)
        d["fc_sizes"] = list(self.fc_sizes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CoxCnnConfig":
        return cls(**d)


@dataclass
class CoxCnnModel:
    layers: list[nn.LayerParams]
    config: CoxCnnConfig
    input_channels: int
    metadata: dict = field(default_factory=dict)

    @property
    def spp(self) -> SppConfig:
        return SppConfig(*self.config.spp_out)

    def tensors(self) -> list[nn.Tensor]:
        return [t for layer in self.layers for t in layer.tensors()]

    def parameter_count(self) -> int:
        return sum(t.values.size for t in self.tensors())


def layer_kinds(config: CoxCnnConfig, input_channels: int) -> list[nn.Conv2D | nn.Dense]:
    kinds: list[nn.Conv2D | nn.Dense] = []
    ch = input_channels
    for f, (kh, kw) in zip(config.conv_filters, config.conv_kernels):
        kinds.append(nn.Conv2D(kh, kw, ch, f))
        ch = f
    dim = ch * config.spp_out[0] * config.spp_out[1]
    for size in config.fc_sizes:
        kinds.append(nn.Dense(dim, size))
        dim = size
    kinds.append(nn.Dense(dim, 1))
    return kinds


def build(config: CoxCnnConfig, input_channels: int = 1, seed: int = 0) -> CoxCnnModel:
    if input_channels < 1:
        raise InvalidArgumentError("input_channels must be positive")
    config.validate()
    rng = np.random.default_rng(seed)
    layers = [nn.init_layer(kind, rng) for kind in layer_kinds(config, input_channels)]
    return CoxCnnModel(layers, config, input_channels, {"seed": seed, "epochs_run": 0})


# ---------------------------------------------------------------------------
# forward / backward


@dataclass
class _Cache:
    x_shape: tuple
    acts: list
    cols: list
    pre: list
    spp: object
    pooled_shape: tuple
    fc_in: list
    masks: list


def _prepare_images(model: CoxCnnModel, images: Sequence[Image2D]) -> tuple[np.ndarray, list[BoundingBox]]:
    if not images:
        raise InvalidArgumentError("no images given")
    shape = images[0].pixels.shape
    if shape[0] != model.input_channels:
        raise InvalidArgumentError(
            f"image has {shape[0]} channels, model expects {model.input_channels}"
        )
    dtype = nn.get_dtype()
    x = np.empty((len(images),) + shape, dtype=dtype)
    boxes = []
    for i, img in enumerate(images):
        if img.pixels.shape != shape:
            raise InvalidArgumentError("all images in a batch must share one shape")
        img.bbox.validate_for(img.height, img.width)
        if model.config.standardize and not img.standardized:
            img = standardize(img)
        x[i] = img.pixels
        boxes.append(img.bbox)
    return x, boxes


def forward(
    model: CoxCnnModel,
    x: np.ndarray,
    bboxes: Sequence[BoundingBox],
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, _Cache]:
    """Risk scores ``[N]`` for a ``[N, C, H, W]`` batch of prepared pixels."""
    cfg = model.config
    conv, fcs, head = model.layers[:3], model.layers[3:5], model.layers[5]
    dtype = conv[0].weights.values.dtype
    a = np.ascontiguousarray(np.asarray(x, dtype=dtype).transpose(1, 0, 2, 3))
    acts, cols, pre = [a], [], []
    for layer in conv:
        z, c = nn.conv_cnhw(a, layer)
        a = nn.relu(z)
        cols.append(c)
        pre.append(z)
        acts.append(a)
    feat = np.ascontiguousarray(a.transpose(1, 0, 2, 3))
    pooled, spp_cache = spp_forward_batch(feat, bboxes, model.spp)
    h = pooled.reshape(pooled.shape[0], -1)
    fc_in, masks = [], []
    rate = cfg.dropout_rate
    for k, layer in enumerate(fcs):
        fc_in.append(h)
        z = nn.dense_forward(h, layer)
        pre.append(z)
        h = nn.relu(z)
        layer_rate = rate if (cfg.dropout_on == "both" or k == len(fcs) - 1) else 0.0
        h, mask = nn.dropout(h, layer_rate, rng, training)
        masks.append(mask)
    fc_in.append(h)
    out = nn.dense_forward(h, head)[:, 0]
    return out, _Cache(x.shape, acts, cols, pre, spp_cache, pooled.shape, fc_in, masks)


def backward(model: CoxCnnModel, cache: _Cache, grad_risk: np.ndarray) -> list[np.ndarray]:
    """Gradients for every parameter tensor, in :meth:`CoxCnnModel.tensors` order."""
    conv, fcs, head = model.layers[:3], model.layers[3:5], model.layers[5]
    dtype = conv[0].weights.values.dtype
    grads: list[tuple[np.ndarray, np.ndarray]] = [None] * 6  # type: ignore[list-item]
    g = np.asarray(grad_risk, dtype=dtype)[:, None]
    g, grads[5] = nn.dense_backward(cache.fc_in[2], head, g)
    for k in (1, 0):
        g = nn.dropout_backward(g, cache.masks[k])
        g = nn.relu_backward(cache.pre[3 + k], g)
        g, grads[3 + k] = nn.dense_backward(cache.fc_in[k], fcs[k], g)
    g = spp_backward_batch(cache.spp, g.reshape(cache.pooled_shape))
    g = np.ascontiguousarray(g.transpose(1, 0, 2, 3))
    for k in (2, 1, 0):
        g = nn.relu_backward(cache.pre[k], g)
        g, gw, gb = nn.conv_cnhw_backward(
            g, cache.cols[k], conv[k], cache.acts[k].shape, need_input_grad=k > 0
        )
        grads[k] = (gw, gb)
    return [t for pair in grads for t in pair]


def predict_risks(
    model: CoxCnnModel, images: Sequence[Image2D], batch_size: int = 128
) -> np.ndarray:
    """Inference-mode risks; images of different sizes are batched separately."""
    out = np.empty(len(images), dtype=np.float64)
    groups: dict[tuple, list[int]] = {}
    for i, img in enumerate(images):
        groups.setdefault(img.pixels.shape, []).append(i)
    for idx in groups.values():
        for s in range(0, len(idx), batch_size):
            chunk = idx[s : s + batch_size]
            x, boxes = _prepare_images(model, [images[i] for i in chunk])
            r, _ = forward(model, x, boxes, training=False)
            out[chunk] = r
    return out


def predict_risk(model: CoxCnnModel, image: Image2D) -> float:
    return float(predict_risks(model, [image])[0])


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    model: CoxCnnModel
    loss_history: list[float]
    skipped_batches: int = 0
    stopped_early: bool = False


EpochCallback = Callable[[int, float, CoxCnnModel], None]


def make_batches(
    events: np.ndarray, batch_size: int, rng: np.random.Generator
) -> list[np.ndarray]:
    """Shuffled mini-batches; stratified by event status when events are rare."""
    n = events.size
    n_batches = max(1, math.ceil(n / batch_size))
    if events.mean() < 0.2 and n_batches > 1:
        ev = rng.permutation(np.flatnonzero(events))
        ce = rng.permutation(np.flatnonzero(~events))
        dealt = np.concatenate([ev, ce])
        batches = [rng.permutation(dealt[b::n_batches]) for b in range(n_batches)]
    else:
        perm = rng.permutation(n)
        batches = [perm[s : s + batch_size] for s in range(0, n, batch_size)]
    if len(batches) > 1 and batches[-1].size < 2:
        batches[-2] = np.concatenate([batches[-2], batches[-1]])
        batches.pop()
    return batches


def train(
    model: CoxCnnModel,
    samples: Sequence[SimulatedSample],
    config: nn.SgdConfig | None = None,
    callbacks: Iterable[EpochCallback] = (),
    validation: Sequence[SimulatedSample] | None = None,
    patience: int | None = None,
) -> TrainResult:
    """Mini-batch SGD on the within-batch Cox loss.

    ``model`` is updated in place. With ``validation`` and ``patience`` set,
    training stops once the validation c-index has not improved for
    ``patience`` epochs and the best parameters are restored.
    """
    sgd = config or model.config.sgd
    if not samples:
        raise InvalidArgumentError("no training samples")
    if sgd.learning_rate == 0:
        log.warning("learning rate is 0; parameters will not change")
    x, boxes = _prepare_images(model, [s.image for s in samples])
    times = np.array([s.record.time for s in samples], dtype=np.float64)
    events = np.array([s.record.event for s in samples], dtype=bool)
    strict = model.config.strict_risk_set
    params = model.tensors()
    velocity: list[np.ndarray] = []
    history: list[float] = []
    skipped = 0
    best_c, best_params, since_best, stopped = -np.inf, None, 0, False
    callbacks = list(callbacks)
    for epoch in range(sgd.epochs):
        rng = np.random.default_rng(derive_seed(sgd.seed, epoch))
        losses = []
        for batch in make_batches(events, sgd.batch_size, rng):
            ev = events[batch]
            if not ev.any():
                skipped += 1
                continue
            bx = x[batch]
            bb = [boxes[i] for i in batch]
            h, cache = forward(model, bx, bb, training=True, rng=rng)
            rec = (times[batch], ev)
            loss = neg_log_partial_likelihood(h, rec, strict)
            if not math.isfinite(loss):
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch + 1}")
            grads = backward(model, cache, cox_loss_gradient(h, rec, strict))
            nn.sgd_step(params, grads, velocity, sgd)
            losses.append(loss)
        epoch_loss = float(np.mean(losses)) if losses else float("nan")
        history.append(epoch_loss)
        model.metadata["epochs_run"] = model.metadata.get("epochs_run", 0) + 1
        for cb in callbacks:
            cb(epoch, epoch_loss, model)
        if validation is not None and patience is not None:
            from .evaluation import c_index

            val_risk = predict_risks(model, [s.image for s in validation])
            c = c_index(val_risk, [s.record for s in validation]).c_index
            if c > best_c:
                best_c, since_best = c, 0
                best_params = [t.values.copy() for t in params]
            else:
                since_best += 1
                if since_best >= patience:
                    stopped = True
                    break
    if stopped and best_params is not None:
        for t, v in zip(params, best_params):
            t.values[...] = v
    if skipped:
        log.warning("skipped %d batches without events", skipped)
    model.metadata["final_loss"] = history[-1] if history else None
    model.metadata["train_seed"] = sgd.seed
    model.metadata["skipped_batches"] = model.metadata.get("skipped_batches", 0) + skipped
    return TrainResult(model, history, skipped, stopped)


# ---------------------------------------------------------------------------
# model container


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")


def save_model(model: CoxCnnModel, path: str | Path) -> None:
    """Write the ``CXNN`` container: header, canonical JSON, float32 tensors."""
    header = {
        "config": model.config.to_dict(),
        "input_channels": model.input_channels,
        "metadata": _jsonable(model.metadata),
    }
    blob = _canonical_json(header)
    tensors = model.tensors()
    parts = [MODEL_MAGIC, struct.pack("<H", MODEL_FORMAT_VERSION), struct.pack("<I", len(blob)), blob]
    parts.append(struct.pack("<I", len(tensors)))
    for t in tensors:
        v = t.values
        parts.append(struct.pack("<B", v.ndim))
        parts.append(struct.pack(f"<{v.ndim}I", *v.shape))
        parts.append(np.ascontiguousarray(v, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_model(path: str | Path) -> CoxCnnModel:
    data = Path(path).read_bytes()
    if data[:4] != MODEL_MAGIC:
        raise FormatError(f"{path}: not a CXNN model file")
    try:
        (version,) = struct.unpack_from("<H", data, 4)
        if version != MODEL_FORMAT_VERSION:
            raise FormatError(f"{path}: model format version {version} is not supported")
        (n_json,) = struct.unpack_from("<I", data, 6)
        pos = 10
        header = json.loads(data[pos : pos + n_json].decode("utf-8"))
        pos += n_json
        (n_tensors,) = struct.unpack_from("<I", data, pos)
        pos += 4
        arrays = []
        for _ in range(n_tensors):
            (rank,) = struct.unpack_from("<B", data, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
            count = int(np.prod(dims))
            if pos + 4 * count > len(data):
                raise FormatError(f"{path}: truncated tensor data")
            arrays.append(np.frombuffer(data, dtype="<f4", count=count, offset=pos).reshape(dims))
            pos += 4 * count
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt model container ({exc})") from exc
    if pos != len(data):
        raise FormatError(f"{path}: {len(data) - pos} trailing bytes")
    config = CoxCnnConfig.from_dict(header["config"])
    kinds = layer_kinds(config, header["input_channels"])
    if len(arrays) != 2 * len(kinds):
        raise FormatError(f"{path}: expected {2 * len(kinds)} tensors, found {len(arrays)}")
    dtype = nn.get_dtype()
    layers = [
        nn.LayerParams(
            nn.Tensor(arrays[2 * i].astype(dtype)), nn.Tensor(arrays[2 * i + 1].astype(dtype)), kind
        )
        for i, kind in enumerate(kinds)
    ]
    return CoxCnnModel(layers, config, header["input_channels"], header.get("metadata", {}))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        return float(obj) if math.isfinite(obj) else None
    return obj
