"""Losses and metrics: MSE, PCK, Spearman (exact and soft), relational loss.

Batches of targets are ``(N, 6)`` arrays laid out ``(x, y, z, vx, vy, vz)``.
Predictions may be a :class:`~fjl.tensor.Tensor` when gradients are needed.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from . import tensor as T
from .tensor import Tensor, ShapeError

log = logging.getLogger(__name__)

DISTANCE_MODES = ("position_only", "full_6d")


class UndefinedCorrelation(ValueError):
    """Spearman correlation is undefined (a constant input)."""


@dataclass(frozen=True)
class PckConfig:
    threshold_tk: float = 0.1
    d_def: float = 1.0
    distance_mode: str = "position_only"

    def __post_init__(self):
        if self.threshold_tk <= 0 or self.d_def <= 0:
            raise ValueError("threshold_tk and d_def must be positive")
        if self.distance_mode not in DISTANCE_MODES:
            raise ValueError(f"distance_mode must be one of {DISTANCE_MODES}")


@dataclass(frozen=True)
class RelationalConfig:
    beta: float = 1.0
    soft_temperature: float = 0.1
    min_batch: int = 4

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.soft_temperature <= 0:
            raise ValueError("soft_temperature must be > 0")
        if self.min_batch < 4:
            raise ValueError("min_batch must be >= 4")


def _values(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _pair(pred, truth):
    p, t = _values(pred), np.asarray(truth, dtype=np.float64)
    if p.ndim == 1:
        p = p[None]
    if t.ndim == 1:
        t = t[None]
    if p.shape != t.shape:
        raise ShapeError(f"prediction shape {p.shape} != truth shape {t.shape}")
    if len(p) == 0:
        raise ValueError("empty batch")
    return p, t


def mse_loss(pred, truth):
    """Mean over samples and components of the squared difference."""
    _pair(pred, truth)
    diff = T.sub(pred, np.asarray(truth, dtype=np.float64))
    return T.mean(T.square(diff))


def per_sample_squared_error(pred, truth):
    """Per-sample loss: squared error averaged over the 6 components."""
    _pair(pred, truth)
    diff = T.sub(pred, np.asarray(truth, dtype=np.float64))
    if diff.ndim == 1:
        diff = T.reshape(diff, (1, -1))
    return T.mean(T.square(diff), axis=1)


def per_sample_errors(pred, truth, cfg=PckConfig()):
    """Normalized Euclidean distances ``d / d_def``, one per sample."""
    p, t = _pair(pred, truth)
    diff = p - t
    if cfg.distance_mode == "position_only":
        diff = diff[:, :3]
    return np.sqrt((diff * diff).sum(axis=1)) / cfg.d_def


def pck(pred, truth, cfg=PckConfig()):
    """Fraction of samples with normalized distance <= threshold."""
    d = per_sample_errors(pred, truth, cfg)
    return float(np.count_nonzero(d <= cfg.threshold_tk)) / len(d)


def pck_from_errors(errors, threshold):
    errors = np.asarray(errors)
    if errors.size == 0:
        raise ValueError("empty batch")
    return float(np.count_nonzero(errors <= threshold)) / errors.size


def _pearson(x, y):
    xc = x - x.mean()
    yc = y - y.mean()
    sx = np.sqrt((xc * xc).mean())
    sy = np.sqrt((yc * yc).mean())
    if sx == 0 or sy == 0:
        raise UndefinedCorrelation("correlation undefined for a constant input")
    r = (xc * yc).mean() / (sx * sy)
    return float(min(1.0, max(-1.0, r)))


def spearman_exact(a, b):
    """Spearman's rho with average ranks for ties."""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise ShapeError(f"spearman: length mismatch {a.size} vs {b.size}")
    if a.size < 2:
        raise ValueError("spearman needs at least 2 samples")
    return _pearson(rankdata(a), rankdata(b))


def soft_rank(a, temperature):
    """Differentiable rank: 1 + sum_{j != i} sigmoid((a_i - a_j) / temperature)."""
    n = a.shape[0]
    col = T.reshape(a, (n, 1))
    row = T.reshape(a, (1, n))
    pairwise = T.sigmoid(T.scale(T.sub(col, row), 1.0 / temperature))
    # The diagonal contributes sigmoid(0) = 0.5 per row.
    return T.add(T.sum(pairwise, axis=1), 0.5)


def soft_spearman(a, b, cfg=RelationalConfig()):
    """Pearson correlation between soft ranks of ``a`` and exact ranks of ``b``.

    Gradients flow into ``a`` only; ``b`` is treated as a constant.
    """
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.ndim != 1 or a.shape[0] != b.size:
        raise ShapeError(f"soft_spearman: shapes {a.shape} and {b.shape} differ")
    n = b.size
    if n < cfg.min_batch:
        raise ValueError(f"soft_spearman needs at least {cfg.min_batch} samples, got {n}")
    rb = rankdata(b)
    rb = rb - rb.mean()
    sb = np.sqrt((rb * rb).mean())
    if sb == 0:
        raise UndefinedCorrelation("metric side is constant")
    ra = soft_rank(a, cfg.soft_temperature)
    rc = T.sub(ra, T.mean(ra))
    var = T.mean(T.square(rc))
    if var.item() <= 1e-300:
        raise UndefinedCorrelation("soft ranks have zero variance")
    cov = T.mean(T.mul(rc, rb))
    return T.div(cov, T.scale(T.sqrt(var), sb))


def relational_objective(pred, truth, cfg=RelationalConfig(), pck_cfg=PckConfig()):
    """MSE plus ``beta`` times the soft Spearman between per-sample loss and metric.

    The metric side is the negative normalized distance, so minimizing the
    correlation term pushes loss and metric towards a negative relation.
    """
    truth = np.asarray(truth, dtype=np.float64)
    base = mse_loss(pred, truth)
    if cfg.beta == 0:
        return base
    n = len(truth)
    if n < cfg.min_batch:
        raise ValueError(f"relational objective needs a batch of at least {cfg.min_batch}")
    metric = -per_sample_errors(pred, truth, pck_cfg)
    if np.ptp(metric) == 0:
        log.warning("metric proxy constant across batch; using MSE only")
        return base
    losses = per_sample_squared_error(pred, truth)
    # Ranks ignore positive scaling, so dividing by the batch mean keeps the
    # target correlation while making the temperature unit-free. The mean is
    # a constant here (no gradient flows through it).
    scale = float(losses.data.mean())
    if scale > 0:
        losses = T.scale(losses, 1.0 / scale)
    return T.add(base, T.scale(soft_spearman(losses, metric, cfg), cfg.beta))


def attention_divergence(theta_i, theta_j, sigma):
    """``1 - exp(-d^2 / sigma^2)`` for the Euclidean distance d between vectors."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    theta_i = theta_i if isinstance(theta_i, Tensor) else Tensor(theta_i)
    theta_j = _values(theta_j)
    if theta_i.shape != theta_j.shape:
        raise ShapeError(f"parameter vectors differ in length: {theta_i.shape} vs {theta_j.shape}")
    d2 = T.sum(T.square(T.sub(theta_i, theta_j)))
    return T.sub(1.0, T.exp(T.scale(d2, -1.0 / sigma**2)))
