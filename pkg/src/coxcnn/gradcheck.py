"""Finite-difference checks for every layer, the Cox loss and a tiny model.

Each check ``fn(seed, tol)`` builds a small random problem from a seed,
computes analytic gradients with the engine's backward functions and
compares them with central differences. Single-layer inputs are kept away
from non-differentiable points (ReLU inputs have ``|x| >= 0.05``, max-pooled
maps hold values 0.1 apart). End-to-end checks instead skip coordinates
whose perturbation flips a ReLU sign or an SPP winner.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from . import model as model_mod
from . import spp as spp_mod
from . import tensor_nn as nn
from .cox import cox_loss_gradient, neg_log_partial_likelihood
from .spp import BoundingBox, SppConfig


@dataclass(frozen=True)
class Tolerances:
    epsilon: float
    tolerance: float
    # relative-error floor as a fraction of the largest checked gradient;
    # float32 loss noise is about ulp(L) / (2 * epsilon) in absolute terms
    floor: float


SETTINGS = {64: Tolerances(1e-5, 1e-5, 1e-3), 32: Tolerances(1e-2, 1e-2, 1e-2)}


@dataclass
class CheckResult:
    name: str
    seed: int
    bits: int
    report: nn.GradCheckReport

    @property
    def passed(self) -> bool:
        return self.report.passed


def _arr(rng: np.random.Generator, *shape: int, away_from_zero: float = 0.0) -> np.ndarray:
    x = rng.standard_normal(shape)
    if away_from_zero:
        x = np.sign(x) * (np.abs(x) + away_from_zero)
    return np.ascontiguousarray(x.astype(nn.get_dtype()))


def _fd(loss_fn, params, grads, tol: Tolerances, **kw) -> nn.GradCheckReport:
    return nn.finite_diff_check(loss_fn, params, grads, tol.epsilon, tol.tolerance, floor=tol.floor, **kw)


def _projection_loss(out: np.ndarray, r: np.ndarray) -> float:
    return float(np.sum(out.astype(np.float64) * r))


def check_conv2d(seed: int, tol: Tolerances) -> nn.GradCheckReport:
    rng = np.random.default_rng(seed)
    k = int(rng.choice([1, 3, 5]))
    layer = nn.init_layer(nn.Conv2D(k, k, 2, 3), rng)
    layer.bias.values[:] = _arr(rng, 3)
    x = _arr(rng, 2, 2, 6, 7)
    r = rng.standard_normal((2, 3, 6, 7))
    gx, (gw, gb) = nn.conv2d_backward(x, layer, r.astype(x.dtype))
    loss = lambda: _projection_loss(nn.conv2d_forward(x, layer), r)
    return _fd(loss, [x, layer.weights.values, layer.bias.values], [gx, gw, gb], tol)


def check_dense(seed: int, tol: Tolerances) -> nn.GradCheckReport:
    rng = np.random.default_rng(seed)
    layer = nn.init_layer(nn.Dense(6, 4), rng)
    layer.bias.values[:] = _arr(rng, 4)
    x = _arr(rng, 3, 6)
    r = rng.standard_normal((3, 4))
    gx, (gw, gb) = nn.dense_backward(x, layer, r.astype(x.dtype))
    loss = lambda: _projection_loss(nn.dense_forward(x, layer), r)
    return _fd(loss, [x, layer.weights.values, layer.bias.values], [gx, gw, gb], tol)


def check_relu(seed: int, tol: Tolerances) -> nn.GradCheckReport:
    rng = np.random.default_rng(seed)
    x = _arr(rng, 4, 5, away_from_zero=0.05)
    r = rng.standard_normal(x.shape)
    g = nn.relu_backward(x, r.astype(x.dtype))
    return _fd(lambda: _projection_loss(nn.relu(x), r), [x], [g], tol)


def check_spp(seed: int, tol: Tolerances) -> nn.GradCheckReport:
    rng = np.random.default_rng(seed)
    c, h, w = 2, 9, 11
    # distinct values 0.1 apart: no near-ties inside any bin
    x = (rng.permutation(c * h * w).reshape(c, h, w) * 0.1 - c * h * w * 0.05).astype(nn.get_dtype())
    bh, bw = int(rng.integers(1, h + 1)), int(rng.integers(1, w + 1))
    box = BoundingBox(int(rng.integers(0, w - bw + 1)), int(rng.integers(0, h - bh + 1)), bw, bh)
    cfg = SppConfig(int(rng.integers(2, 6)), int(rng.integers(2, 6)))
    out, cache = spp_mod.spp_forward(x, box, cfg)
    r = rng.standard_normal(out.shape)
    g = spp_mod.spp_backward(cache, r.astype(x.dtype))
    loss = lambda: _projection_loss(spp_mod.spp_forward(x, box, cfg)[0], r)
    return _fd(loss, [x], [g], tol)


def check_dropout(seed: int, tol: Tolerances) -> nn.GradCheckReport:
    rng = np.random.default_rng(seed)
    x = _arr(rng, 5, 6)
    r = rng.standard_normal(x.shape)
    mask_seed = int(rng.integers(2**32))
    out, mask = nn.dropout(x, 0.4, np.random.default_rng(mask_seed), training=True)
    g = nn.dropout_backward(r.astype(x.dtype), mask)
    loss = lambda: _projection_loss(nn.dropout(x, 0.4, np.random.default_rng(mask_seed), True)[0], r)
    return _fd(loss, [x], [g], tol)


def _random_records(rng: np.random.Generator, n: int) -> tuple[np.ndarray, np.ndarray]:
    times = rng.integers(1, max(2, n // 2), size=n).astype(np.float64)
    events = rng.random(n) < 0.6
    events[rng.integers(n)] = True
    return times, events


def check_cox(seed: int, tol: Tolerances) -> nn.GradCheckReport:
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 31))
    rec = _random_records(rng, n)
    h = _arr(rng, n)
    g = cox_loss_gradient(h, rec)
    return _fd(lambda: neg_log_partial_likelihood(h, rec), [h], [g], tol)


def region_signature(cache) -> bytes:
    """ReLU sign pattern plus SPP winners of one forward pass."""
    parts = [np.packbits(z > 0).tobytes() for z in cache.pre]
    parts.append(np.ascontiguousarray(cache.spp.indices).tobytes())
    return b"".join(parts)


def _model_check(m, x, boxes, rec, mask_seed: int, tol: Tolerances,
                 max_per_block: int | None, seed: int) -> nn.GradCheckReport:
    state = {}

    def loss_fn() -> float:
        h, cache = model_mod.forward(m, x, boxes, True, np.random.default_rng(mask_seed))
        state["region"] = region_signature(cache)
        return neg_log_partial_likelihood(h, rec)

    h, cache = model_mod.forward(m, x, boxes, True, np.random.default_rng(mask_seed))
    grads = model_mod.backward(m, cache, cox_loss_gradient(h, rec))
    return _fd(
        loss_fn, [t.values for t in m.tensors()], grads, tol,
        max_per_block=max_per_block, seed=seed, region_fn=lambda: state["region"],
    )


def tiny_model_problem(seed: int, n: int = 8, fc: int = 4, filters: int = 2):
    """A 2-filter, 4-unit model with 8 random 9x9 images, bboxes and records.

    Returns ``(model, x, boxes, records, mask_seed)``; ``mask_seed`` fixes
    the dropout masks of a training-mode forward pass.
    """
    rng = np.random.default_rng(seed)
    cfg = model_mod.CoxCnnConfig(
        conv_filters=(filters,) * 3, spp_out=(3, 3), fc_sizes=(fc, fc), dropout_rate=0.25
    )
    m = model_mod.build(cfg, 1, seed=seed)
    for layer in m.layers:
        layer.bias.values[:] = 0.1 * _arr(rng, *layer.bias.shape)
    x = _arr(rng, n, 1, 9, 9)
    boxes = []
    for _ in range(n):
        bw, bh = int(rng.integers(2, 10)), int(rng.integers(2, 10))
        boxes.append(BoundingBox(int(rng.integers(0, 10 - bw)), int(rng.integers(0, 10 - bh)), bw, bh))
    rec = _random_records(rng, n)
    return m, x, boxes, rec, int(rng.integers(2**32))


def check_model(seed: int, tol: Tolerances, max_per_block: int | None = 12) -> nn.GradCheckReport:
    m, x, boxes, rec, mask_seed = tiny_model_problem(seed)
    return _model_check(m, x, boxes, rec, mask_seed, tol, max_per_block, seed)


def check_full_model(seed: int, tol: Tolerances, n: int = 8) -> nn.GradCheckReport:
    """Default-size network (16/36/64 filters, 8x8 SPP, 500/100 FC) on ``n`` images."""
    rng = np.random.default_rng(seed)
    m = model_mod.build(model_mod.CoxCnnConfig(), 1, seed=seed)
    for layer in m.layers:
        layer.bias.values[:] = 0.05 * _arr(rng, *layer.bias.shape)
    x = _arr(rng, n, 1, 20, 20)
    boxes = [BoundingBox(int(rng.integers(0, 6)), int(rng.integers(0, 6)), 14, 13) for _ in range(n)]
    rec = _random_records(rng, n)
    return _model_check(m, x, boxes, rec, int(rng.integers(2**32)), tol, 6, seed)


CHECKS: dict[str, Callable[[int, Tolerances], nn.GradCheckReport]] = {
    "conv2d": check_conv2d,
    "dense": check_dense,
    "relu": check_relu,
    "spp": check_spp,
    "dropout": check_dropout,
    "cox_loss": check_cox,
    "model": check_model,
}


def run_suite(
    seeds: Iterable[int], bits: int = 64, names: Iterable[str] | None = None, full_model: bool = False
) -> list[CheckResult]:
    tol = SETTINGS[bits]
    selected = list(names) if names is not None else list(CHECKS)
    checks = {k: CHECKS[k] for k in selected}
    if full_model:
        checks["full_model"] = check_full_model
    results = []
    with nn.precision(bits):
        for seed in seeds:
            for name, fn in checks.items():
                results.append(CheckResult(name, seed, bits, fn(seed, tol)))
    return results
