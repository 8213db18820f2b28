"""Minimal reverse-mode engine for the fixed layer set of the survival CNN.

Only the pieces the network needs are here: "same" 2D convolution, ReLU,
dense layers, inverted dropout and momentum SGD. Every forward op has a
matching backward that takes the upstream gradient and returns gradients for
its inputs and parameters.

Storage precision is float32. ``precision(64)`` switches the whole engine to
float64, which is what the finite-difference checks use to separate
truncation error from real bugs. The switch is process-global.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import InvalidArgumentError, TrainingDivergedError

_DTYPE: type = np.float32


def get_dtype() -> type:
    return _DTYPE


def set_precision(bits: int) -> None:
    global _DTYPE
    if bits == 32:
        _DTYPE = np.float32
    elif bits == 64:
        _DTYPE = np.float64
    else:
        raise InvalidArgumentError(f"precision must be 32 or 64, got {bits}")


@contextlib.contextmanager
def precision(bits: int) -> Iterator[None]:
    """Temporarily run the engine at ``bits`` precision."""
    previous = _DTYPE
    set_precision(bits)
    try:
        yield
    finally:
        globals()["_DTYPE"] = previous


@dataclass
class Tensor:
    """Dense value buffer with an optional same-shape gradient."""

    values: np.ndarray
    grad: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values)
        if self.values.ndim == 0 or 0 in self.values.shape:
            raise InvalidArgumentError(f"tensor shape must be positive, got {self.values.shape}")
        if self.grad is not None and self.grad.shape != self.values.shape:
            raise InvalidArgumentError("gradient shape differs from value shape")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.values)


@dataclass(frozen=True)
class Conv2D:
    kernel_h: int
    kernel_w: int
    in_ch: int
    out_ch: int

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.out_ch, self.in_ch, self.kernel_h, self.kernel_w)

    @property
    def fan_in(self) -> int:
        return self.in_ch * self.kernel_h * self.kernel_w


@dataclass(frozen=True)
class Dense:
    in_dim: int
    out_dim: int

    @property
    def weight_shape(self) -> tuple[int, int]:
        return (self.out_dim, self.in_dim)

    @property
    def fan_in(self) -> int:
        return self.in_dim


@dataclass
class LayerParams:
    weights: Tensor
    bias: Tensor
    kind: Conv2D | Dense

    def __post_init__(self) -> None:
        if tuple(self.weights.shape) != tuple(self.kind.weight_shape):
            raise InvalidArgumentError(
                f"weight shape {self.weights.shape} does not match {self.kind}"
            )
        n_out = self.kind.out_ch if isinstance(self.kind, Conv2D) else self.kind.out_dim
        if tuple(self.bias.shape) != (n_out,):
            raise InvalidArgumentError(f"bias shape {self.bias.shape} does not match {self.kind}")

    def tensors(self) -> tuple[Tensor, Tensor]:
        return self.weights, self.bias


@dataclass
class SgdConfig:
    learning_rate: float = 1e-4
    momentum: float = 0.9
    epochs: int = 100
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self) -> None:
        if not self.learning_rate >= 0:
            # zero is allowed so a run can provably leave parameters untouched
            raise InvalidArgumentError("learning_rate must be non-negative")
        if not 0 <= self.momentum < 1:
            raise InvalidArgumentError("momentum must lie in [0, 1)")
        if self.epochs < 1:
            raise InvalidArgumentError("epochs must be positive")
        if self.batch_size < 2:
            raise InvalidArgumentError("batch_size must be at least 2 for within-batch risk sets")
        if not 0 <= self.seed < 2**64:
            raise InvalidArgumentError("seed must be an unsigned 64-bit integer")


def init_layer(kind: Conv2D | Dense, rng: np.random.Generator) -> LayerParams:
    """He-normal weights with std sqrt(2 / fan_in) and zero bias."""
    scale = np.sqrt(2.0 / kind.fan_in)
    w = rng.standard_normal(kind.weight_shape) * scale
    n_out = kind.out_ch if isinstance(kind, Conv2D) else kind.out_dim
    return LayerParams(
        weights=Tensor(w.astype(_DTYPE)),
        bias=Tensor(np.zeros(n_out, dtype=_DTYPE)),
        kind=kind,
    )


# ---------------------------------------------------------------------------
# convolution


def _check_conv(x: np.ndarray, params: LayerParams, channel_axis: int) -> Conv2D:
    kind = params.kind
    if not isinstance(kind, Conv2D):
        raise InvalidArgumentError("conv2d requires Conv2D parameters")
    if kind.kernel_h % 2 == 0 or kind.kernel_w % 2 == 0:
        raise InvalidArgumentError("same padding needs odd kernel sizes")
    if x.shape[channel_axis] != kind.in_ch:
        raise InvalidArgumentError(
            f"input has {x.shape[channel_axis]} channels, layer expects {kind.in_ch}"
        )
    return kind


def _im2col(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """[C, N, H, W] -> [C*kh*kw, N*H*W] with zero "same" padding."""
    c, n, h, w = x.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    cols = np.empty((c, kh, kw, n, h, w), dtype=x.dtype)
    for dy in range(kh):
        for dx in range(kw):
            cols[:, dy, dx] = xp[:, :, dy : dy + h, dx : dx + w]
    return cols.reshape(c * kh * kw, n * h * w)


def _col2im(dcols: np.ndarray, shape: tuple[int, int, int, int], kh: int, kw: int) -> np.ndarray:
    c, n, h, w = shape
    ph, pw = kh // 2, kw // 2
    dxp = np.zeros((c, n, h + 2 * ph, w + 2 * pw), dtype=dcols.dtype)
    d = dcols.reshape(c, kh, kw, n, h, w)
    for dy in range(kh):
        for dx in range(kw):
            dxp[:, :, dy : dy + h, dx : dx + w] += d[:, dy, dx]
    return dxp[:, :, ph : ph + h, pw : pw + w]


def conv_cnhw(x: np.ndarray, params: LayerParams) -> tuple[np.ndarray, np.ndarray]:
    """Batched convolution on channel-major ``[C, N, H, W]`` input.

    Returns the ``[O, N, H, W]`` output and the im2col buffer for reuse in
    :func:`conv_cnhw_backward`.
    """
    kind = _check_conv(x, params, 0)
    cols = _im2col(x, kind.kernel_h, kind.kernel_w)
    w = params.weights.values.reshape(kind.out_ch, -1)
    out = w @ cols
    out += params.bias.values[:, None]
    _, n, h, wd = x.shape
    return out.reshape(kind.out_ch, n, h, wd), cols


def conv_cnhw_backward(
    grad_out: np.ndarray,
    cols: np.ndarray,
    params: LayerParams,
    input_shape: tuple[int, int, int, int],
    need_input_grad: bool = True,
) -> tuple[np.ndarray | None, np.ndarray, np.ndarray]:
    kind = params.kind
    g = grad_out.reshape(kind.out_ch, -1)
    grad_w = (g @ cols.T).reshape(kind.weight_shape)
    grad_b = g.sum(axis=1)
    grad_in = None
    if need_input_grad:
        dcols = params.weights.values.reshape(kind.out_ch, -1).T @ g
        grad_in = _col2im(dcols, input_shape, kind.kernel_h, kind.kernel_w)
    return grad_in, grad_w, grad_b


def _to_cnhw(x: np.ndarray) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[:, None], True
    if x.ndim == 4:
        return x.transpose(1, 0, 2, 3), False
    raise InvalidArgumentError(f"conv2d expects [C,H,W] or [N,C,H,W], got shape {x.shape}")


def _from_cnhw(y: np.ndarray, single: bool) -> np.ndarray:
    return y[:, 0] if single else y.transpose(1, 0, 2, 3)


def conv2d_forward(x: np.ndarray | Tensor, params: LayerParams) -> np.ndarray:
    """Stride-1 convolution with zero "same" padding.

    ``x`` is ``[C, H, W]`` or ``[N, C, H, W]``; spatial size is preserved.
    """
    x = _values(x)
    xc, single = _to_cnhw(x)
    _check_conv(xc, params, 0)
    out, _ = conv_cnhw(np.ascontiguousarray(xc, dtype=params.weights.values.dtype), params)
    return np.ascontiguousarray(_from_cnhw(out, single))


def conv2d_backward(
    x: np.ndarray | Tensor, params: LayerParams, grad_out: np.ndarray
) -> tuple[np.ndarray, tuple[np.ndarray, np.ndarray]]:
    """Gradients of :func:`conv2d_forward` w.r.t. input, weights and bias."""
    x = _values(x)
    xc, single = _to_cnhw(x)
    kind = _check_conv(xc, params, 0)
    expected = (kind.out_ch,) + x.shape[1:] if single else (x.shape[0], kind.out_ch) + x.shape[2:]
    if tuple(grad_out.shape) != expected:
        raise InvalidArgumentError(f"grad_out shape {grad_out.shape}, expected {expected}")
    gc, _ = _to_cnhw(grad_out)
    dtype = params.weights.values.dtype
    cols = _im2col(np.ascontiguousarray(xc, dtype=dtype), kind.kernel_h, kind.kernel_w)
    grad_in, grad_w, grad_b = conv_cnhw_backward(
        np.ascontiguousarray(gc, dtype=dtype), cols, params, xc.shape
    )
    return np.ascontiguousarray(_from_cnhw(grad_in, single)), (grad_w, grad_b)


# ---------------------------------------------------------------------------
# elementwise and dense


def relu(x: np.ndarray | Tensor) -> np.ndarray:
    return np.maximum(_values(x), 0)


def relu_backward(x: np.ndarray | Tensor, grad_out: np.ndarray) -> np.ndarray:
    # subgradient at exactly zero is 0
    return np.where(_values(x) > 0, grad_out, 0).astype(grad_out.dtype, copy=False)


def _check_dense(x: np.ndarray, params: LayerParams) -> Dense:
    kind = params.kind
    if not isinstance(kind, Dense):
        raise InvalidArgumentError("dense layer requires Dense parameters")
    if x.ndim not in (1, 2) or x.shape[-1] != kind.in_dim:
        raise InvalidArgumentError(f"dense input shape {x.shape}, expected [..., {kind.in_dim}]")
    return kind


def dense_forward(x: np.ndarray | Tensor, params: LayerParams) -> np.ndarray:
    """``W @ x + b`` for a vector or a ``[N, in_dim]`` batch."""
    x = _values(x)
    _check_dense(x, params)
    return x @ params.weights.values.T + params.bias.values


def dense_backward(
    x: np.ndarray | Tensor, params: LayerParams, grad_out: np.ndarray
) -> tuple[np.ndarray, tuple[np.ndarray, np.ndarray]]:
    x = _values(x)
    kind = _check_dense(x, params)
    if grad_out.shape != x.shape[:-1] + (kind.out_dim,):
        raise InvalidArgumentError("grad_out shape does not match dense output")
    w = params.weights.values
    grad_in = grad_out @ w
    if x.ndim == 1:
        grad_w = np.outer(grad_out, x)
        grad_b = grad_out.copy()
    else:
        grad_w = grad_out.T @ x
        grad_b = grad_out.sum(axis=0)
    return grad_in, (grad_w, grad_b)


def dropout(
    x: np.ndarray | Tensor, rate: float, rng: np.random.Generator | None, training: bool
) -> tuple[np.ndarray, np.ndarray | None]:
    """Inverted dropout. The returned mask already carries the 1/(1-rate) scale."""
    if not 0 <= rate < 1:
        raise InvalidArgumentError(f"dropout rate must lie in [0, 1), got {rate}")
    x = _values(x)
    if not training or rate == 0:
        return x, None
    if rng is None:
        raise InvalidArgumentError("training-mode dropout needs a random generator")
    keep = rng.random(x.shape) >= rate
    mask = keep.astype(x.dtype) * x.dtype.type(1.0 / (1.0 - rate))
    return x * mask, mask


def dropout_backward(grad_out: np.ndarray, mask: np.ndarray | None) -> np.ndarray:
    return grad_out if mask is None else grad_out * mask


# ---------------------------------------------------------------------------
# optimisation


def sgd_step(
    params: Sequence[Tensor],
    grads: Sequence[np.ndarray],
    velocity: list[np.ndarray],
    config: SgdConfig,
) -> Sequence[Tensor]:
    """Classical momentum: ``v <- mu*v - lr*g``; ``p <- p + v``.

    ``velocity`` is updated in place; pass an empty list on the first call.
    """
    if len(params) != len(grads):
        raise InvalidArgumentError("one gradient per parameter tensor required")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise TrainingDivergedError("non-finite gradient")
    if not velocity:
        velocity.extend(np.zeros_like(p.values) for p in params)
    lr = config.learning_rate
    mu = config.momentum
    for p, g, v in zip(params, grads, velocity):
        if g.shape != p.values.shape:
            raise InvalidArgumentError(f"gradient shape {g.shape} vs parameter {p.values.shape}")
        v *= mu
        v -= lr * g
        p.values += v.astype(p.values.dtype, copy=False)
    return params


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    max_rel_error: float
    n_checked: int
    tolerance: float
    worst: tuple[int, int] | None = None
    per_block: list[float] = field(default_factory=list)
    n_skipped: int = 0

    @property
    def passed(self) -> bool:
        return (
            self.n_checked > 0
            and bool(np.isfinite(self.max_rel_error))
            and self.max_rel_error < self.tolerance
        )


def relative_error(
    analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-3, scale: float | None = None
) -> np.ndarray:
    """Entrywise ``|a - n| / max(|a|, |n|, floor * scale)``.

    ``scale`` defaults to the largest magnitude in the inputs. The floor
    keeps gradients that are tiny compared with the rest of the model (such
    as the exactly-zero bias gradient of a shift-invariant loss) from turning
    finite-difference noise into huge ratios.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    mag = np.maximum(np.abs(a), np.abs(n))
    if scale is None:
        scale = float(mag.max()) if mag.size else 0.0
    denom = np.maximum(mag, floor * scale)
    safe = np.where(denom > 0, denom, 1.0)
    return np.where(denom > 0, np.abs(a - n) / safe, 0.0)


def finite_diff_check(
    loss_fn: Callable[[], float],
    params: Sequence[np.ndarray],
    analytic: Sequence[np.ndarray],
    epsilon: float = 1e-6,
    tolerance: float = 1e-5,
    max_per_block: int | None = None,
    seed: int = 0,
    region_fn: Callable[[], bytes] | None = None,
    floor: float = 1e-3,
) -> GradCheckReport:
    """Compare ``analytic`` gradients with central differences of ``loss_fn``.

    ``params`` are perturbed in place and restored. ``loss_fn`` must be
    deterministic (fixed dropout masks, no fresh randomness per call).
    Blocks with more than ``max_per_block`` entries are spot-checked on a
    seeded random subset. Errors use :func:`relative_error` with the scale
    taken over every checked entry of every block and the given ``floor``.
    Blocks where nothing could be checked report NaN in ``per_block``.

    ``region_fn``, if given, is called right after each ``loss_fn`` call and
    returns a signature of the piecewise-linear region of that evaluation
    (ReLU signs, max-pool winners). Coordinates whose +/- perturbation leaves
    the unperturbed region straddle a kink; they are skipped, counted in
    ``n_skipped``, and replaced by other coordinates when sampling.
    """
    if epsilon <= 0:
        raise InvalidArgumentError("epsilon must be positive")
    rng = np.random.default_rng(seed)
    base_region = None
    if region_fn is not None:
        loss_fn()
        base_region = region_fn()
    checked = []
    skipped = 0
    for p, g in zip(params, analytic):
        if not p.flags.c_contiguous:
            raise InvalidArgumentError("parameters must be C-contiguous arrays")
        flat = p.reshape(-1)
        want = flat.size if max_per_block is None else min(max_per_block, flat.size)
        order = np.arange(flat.size) if want == flat.size else rng.permutation(flat.size)
        idx, numeric = [], []
        for i in order:
            if len(idx) == want:
                break
            orig = flat[i]
            flat[i] = orig + epsilon
            up = float(loss_fn())
            same = region_fn is None or region_fn() == base_region
            flat[i] = orig - epsilon
            down = float(loss_fn())
            same = same and (region_fn is None or region_fn() == base_region)
            flat[i] = orig
            if not same:
                skipped += 1
                continue
            idx.append(int(i))
            numeric.append((up - down) / (2 * epsilon))
        idx_arr = np.array(idx, dtype=np.int64)
        order_idx = np.argsort(idx_arr)
        idx_arr = idx_arr[order_idx]
        num_arr = np.array(numeric, dtype=np.float64)[order_idx]
        checked.append((idx_arr, np.asarray(g, dtype=np.float64).reshape(-1)[idx_arr], num_arr))
    mags = [np.maximum(np.abs(a), np.abs(n)) for _, a, n in checked if n.size]
    scale = float(max(m.max() for m in mags)) if mags else 0.0
    worst_err, worst_at, per_block = 0.0, None, []
    for b, (idx, a, n) in enumerate(checked):
        if not idx.size:
            per_block.append(float("nan"))
            continue
        if not np.all(np.isfinite(n)) or not np.all(np.isfinite(a)):
            errs = np.full(idx.size, np.inf)
        else:
            errs = relative_error(a, n, floor=floor, scale=scale)
        block_err = float(errs.max())
        per_block.append(block_err)
        if worst_at is None or block_err > worst_err:
            worst_err = block_err
            worst_at = (b, int(idx[int(np.argmax(errs))]))
    n_checked = sum(idx.size for idx, _, _ in checked)
    return GradCheckReport(worst_err, n_checked, tolerance, worst_at, per_block, skipped)


def _values(x: np.ndarray | Tensor) -> np.ndarray:
    return x.values if isinstance(x, Tensor) else np.asarray(x)
