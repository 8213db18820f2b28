"""Linear Cox baseline: hand-made image features -> PCA -> Newton-Raphson CPH."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .cox import Records, as_arrays, cox_loss_gradient, log_risk_denominators, neg_log_partial_likelihood
from .errors import IllConditionedError, InvalidArgumentError
from .simdata import Image2D, SimulatedSample
from .spp import bin_edges

log = logging.getLogger(__name__)

FEATURE_VERSION = "intensity-87/v1"
HIST_BINS = 16
GRID = 8


# ---------------------------------------------------------------------------
# features


def _grid_means(crop: np.ndarray) -> np.ndarray:
    """Mean of each cell of an 8x8 floor/ceil grid over ``crop`` (via an integral image)."""
    h, w = crop.shape
    integ = np.zeros((h + 1, w + 1))
    integ[1:, 1:] = crop.cumsum(0).cumsum(1)
    ys, ye = bin_edges(h, GRID)
    xs, xe = bin_edges(w, GRID)
    total = (
        integ[ye[:, None], xe[None, :]]
        - integ[ys[:, None], xe[None, :]]
        - integ[ye[:, None], xs[None, :]]
        + integ[ys[:, None], xs[None, :]]
    )
    area = (ye - ys)[:, None] * (xe - xs)[None, :]
    return (total / area).ravel()


def _channel_features(crop: np.ndarray) -> np.ndarray:
    v = crop.astype(np.float64).ravel()
    mean = v.mean()
    d = v - mean
    var = np.mean(d * d)
    if var > 0:
        skew = np.mean(d**3) / var**1.5
        kurt = np.mean(d**4) / var**2 - 3.0
    else:
        skew = kurt = 0.0
    hist, _ = np.histogram(np.clip(v, 0.0, 1.0), bins=HIST_BINS, range=(0.0, 1.0))
    stats = [mean, var, skew, kurt, v.min(), v.max()]
    return np.concatenate([stats, hist / v.size, _grid_means(crop.astype(np.float64))])


def extract_features(image: Image2D) -> np.ndarray:
    """Per channel over the bbox crop: mean, variance, skewness, excess
    kurtosis, min, max, a 16-bin histogram on [0, 1] and 8x8 cell means;
    then the bbox area fraction. One channel gives 87 values.
    """
    b = image.bbox
    b.validate_for(image.height, image.width)
    crop = image.pixels[:, b.y0 : b.y0 + b.height, b.x0 : b.x0 + b.width]
    parts = [_channel_features(c) for c in crop]
    parts.append(np.array([b.area / (image.width * image.height)]))
    return np.concatenate(parts)


def feature_matrix(images: Sequence[Image2D]) -> np.ndarray:
    return np.stack([extract_features(img) for img in images])


# ---------------------------------------------------------------------------
# PCA


@dataclass
class PcaProjection:
    mean: np.ndarray
    components: np.ndarray
    explained_variance: np.ndarray

    @property
    def k(self) -> int:
        return self.components.shape[0]


def pca_fit(features: np.ndarray, k: int) -> PcaProjection:
    """Top-``k`` eigenvectors of the sample covariance, largest variance first.

    Each component is sign-normalised so its largest-magnitude entry is positive.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise InvalidArgumentError("features must be an [n, d] matrix")
    n, d = x.shape
    if n < 2:
        raise InvalidArgumentError("PCA needs at least two samples")
    if not 1 <= k <= min(n, d):
        raise InvalidArgumentError(f"k={k} must lie in [1, min(n, d)={min(n, d)}]")
    mean = x.mean(axis=0)
    cov = np.cov(x - mean, rowvar=False, ddof=1).reshape(d, d)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1][:k]
    comps = vecs[:, order].T
    flip = np.sign(comps[np.arange(k), np.abs(comps).argmax(axis=1)])
    comps *= np.where(flip == 0, 1.0, flip)[:, None]
    return PcaProjection(mean, comps, np.maximum(vals[order], 0.0))


def pca_apply(proj: PcaProjection, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != proj.mean.size:
        raise InvalidArgumentError(f"vector dimension {x.shape[-1]} != {proj.mean.size}")
    return (x - proj.mean) @ proj.components.T


# ---------------------------------------------------------------------------
# Newton-Raphson Cox fit


@dataclass
class LinearCoxModel:
    beta: np.ndarray
    iterations: int = 0
    grad_norm: float = 0.0
    converged: bool = True
    loss_history: list[float] = field(default_factory=list)


def _risk_set_means(h: np.ndarray, z: np.ndarray, times: np.ndarray, log_den: np.ndarray) -> np.ndarray:
    """Risk-set weighted mean of ``z`` for each sample, in log space per sign."""
    order = np.argsort(-times, kind="stable")
    hs, zs = h[order][:, None], z[order]
    with np.errstate(divide="ignore"):
        lpos = np.logaddexp.accumulate(hs + np.log(np.maximum(zs, 0.0)), axis=0)
        lneg = np.logaddexp.accumulate(hs + np.log(np.maximum(-zs, 0.0)), axis=0)
    ts = times[order]
    last = np.searchsorted(-ts, -ts, side="right") - 1
    ld = log_den[order][:, None]
    means = np.exp(lpos[last] - ld) - np.exp(lneg[last] - ld)
    out = np.empty_like(means)
    out[order] = means
    return out


def cox_hessian(z: np.ndarray, h: np.ndarray, records: Records) -> np.ndarray:
    """Hessian of the Breslow negative log partial likelihood in ``beta``."""
    times, events = as_arrays(records)
    log_den = log_risk_denominators(h, (times, events))
    a = cox_loss_gradient(h, (times, events)) + events
    zbar = _risk_set_means(h, z, times, log_den)[events]
    return (z * a[:, None]).T @ z - zbar.T @ zbar


def cph_fit(
    features: np.ndarray,
    records: Records,
    tolerance: float = 1e-8,
    max_iter: int = 100,
    standardize: bool = True,
) -> LinearCoxModel:
    """Maximise the partial likelihood of ``h = X beta`` by Newton-Raphson.

    Columns are z-scored first and the solution is mapped back, so the
    returned ``beta`` applies to raw ``features`` (the additive offset is
    dropped; Cox risks are shift invariant). A step that does not lower the
    loss is halved until it does.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise InvalidArgumentError("features must be an [n, d] matrix")
    if not np.all(np.isfinite(x)):
        raise InvalidArgumentError("features must be finite")
    times, events = as_arrays(records)
    if times.size != x.shape[0]:
        raise InvalidArgumentError(f"{x.shape[0]} feature rows for {times.size} records")
    rec = (times, events)
    d = x.shape[1]
    if standardize:
        mu = x.mean(axis=0)
        sd = x.std(axis=0)
        sd[sd == 0] = 1.0
        z = (x - mu) / sd
    else:
        sd = np.ones(d)
        z = x
    beta = np.zeros(d)
    loss = neg_log_partial_likelihood(z @ beta, rec)
    history = [loss]
    grad = z.T @ cox_loss_gradient(z @ beta, rec)
    gnorm = float(np.abs(grad).max()) if d else 0.0
    it = 0
    while gnorm >= tolerance and it < max_iter:
        it += 1
        h = z @ beta
        hess = cox_hessian(z, h, rec)
        step = _solve(hess, -grad)
        t = 1.0
        for _ in range(60):
            cand = beta + t * step
            cand_loss = neg_log_partial_likelihood(z @ cand, rec)
            if cand_loss <= loss:
                break
            t *= 0.5
        else:
            log.warning("step halving failed to decrease the loss at iteration %d", it)
            break
        if np.array_equal(cand, beta):
            break
        beta, loss = cand, cand_loss
        history.append(loss)
        grad = z.T @ cox_loss_gradient(z @ beta, rec)
        gnorm = float(np.abs(grad).max())
    converged = gnorm < tolerance
    if not converged:
        log.warning("Newton-Raphson stopped after %d iterations, |grad|=%.3g", it, gnorm)
    return LinearCoxModel(beta / sd, it, gnorm, converged, history)


def _solve(hess: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    for ridge in (0.0, 1e-6):
        try:
            step = np.linalg.solve(hess + ridge * np.eye(hess.shape[0]), rhs)
        except np.linalg.LinAlgError:
            continue
        if np.all(np.isfinite(step)):
            return step
    raise IllConditionedError("Hessian is singular even with 1e-6 ridge")


def cph_predict(model: LinearCoxModel, x: np.ndarray) -> float | np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != model.beta.size:
        raise InvalidArgumentError(f"feature dimension {x.shape[-1]} != {model.beta.size}")
    out = x @ model.beta
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# full baseline


@dataclass
class BaselinePipeline:
    """Feature z-scoring, PCA projection and a fitted linear Cox model."""

    feature_mean: np.ndarray
    feature_scale: np.ndarray
    pca: PcaProjection
    cph: LinearCoxModel
    feature_version: str = FEATURE_VERSION

    def predict(self, images: Sequence[Image2D]) -> np.ndarray:
        f = (feature_matrix(images) - self.feature_mean) / self.feature_scale
        return np.asarray(cph_predict(self.cph, pca_apply(self.pca, f)), dtype=np.float64).reshape(-1)

    def to_dict(self) -> dict:
        return {
            "feature_version": self.feature_version,
            "standardization": {"mean": self.feature_mean.tolist(), "scale": self.feature_scale.tolist()},
            "pca": {
                "mean": self.pca.mean.tolist(),
                "components": self.pca.components.tolist(),
                "explained_variance": self.pca.explained_variance.tolist(),
            },
            "beta": self.cph.beta.tolist(),
            "convergence": {
                "iterations": self.cph.iterations,
                "grad_norm": self.cph.grad_norm,
                "converged": self.cph.converged,
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BaselinePipeline":
        if d.get("feature_version") != FEATURE_VERSION:
            raise InvalidArgumentError(f"unsupported feature version {d.get('feature_version')!r}")
        p = d["pca"]
        conv = d.get("convergence", {})
        return cls(
            np.asarray(d["standardization"]["mean"]),
            np.asarray(d["standardization"]["scale"]),
            PcaProjection(np.asarray(p["mean"]), np.asarray(p["components"]), np.asarray(p["explained_variance"])),
            LinearCoxModel(
                np.asarray(d["beta"]),
                conv.get("iterations", 0),
                conv.get("grad_norm", 0.0),
                conv.get("converged", True),
            ),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "BaselinePipeline":
        return cls.from_dict(json.loads(Path(path).read_text()))


def fit_baseline(
    samples: Sequence[SimulatedSample], pca_dim: int = 20, tolerance: float = 1e-8, max_iter: int = 100
) -> BaselinePipeline:
    feats = feature_matrix([s.image for s in samples])
    mean = feats.mean(axis=0)
    scale = feats.std(axis=0)
    scale[scale == 0] = 1.0
    fz = (feats - mean) / scale
    k = min(pca_dim, fz.shape[1], fz.shape[0])
    pca = pca_fit(fz, k)
    model = cph_fit(pca_apply(pca, fz), [s.record for s in samples], tolerance, max_iter)
    return BaselinePipeline(mean, scale, pca, model)
