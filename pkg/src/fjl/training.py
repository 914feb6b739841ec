"""Loss/gradient evaluation, local optimizers and held-out evaluation."""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .model import ModelParams, forward, predict_batched
from .objectives import (
    PckConfig,
    RelationalConfig,
    UndefinedCorrelation,
    attention_divergence,
    mse_loss,
    pck_from_errors,
    per_sample_errors,
    relational_objective,
    spearman_exact,
)

OBJECTIVES = ("mse", "relational")
OPTIMIZERS = ("sgd", "adam")


def flat_tensor(weights, names):
    """All parameter tensors flattened into one differentiable vector."""
    return T.concat([T.reshape(weights[n], (-1,)) for n in names], axis=0)


def loss_and_grad(
    params,
    x,
    y,
    objective="mse",
    rel_cfg=RelationalConfig(),
    pck_cfg=PckConfig(),
    peers=(),
    lam=0.0,
    sigma=1.0,
):
    """Objective value and flat gradient at ``params`` for one batch.

    With ``peers`` and ``lam > 0`` the personalization penalty
    ``lam * sum_j A(||theta - theta_j||)`` is added.
    """
    w = params.tensors(requires_grad=True)
    pred = forward(x, params, w)
    if objective == "mse":
        loss = mse_loss(pred, y)
    elif objective == "relational":
        if len(y) < rel_cfg.min_batch:
            loss = mse_loss(pred, y)
        else:
            loss = relational_objective(pred, y, rel_cfg, pck_cfg)
    else:
        raise ValueError(f"unknown objective {objective!r}")
    if lam > 0 and len(peers):
        theta = flat_tensor(w, params.names())
        penalty = None
        for peer in peers:
            term = attention_divergence(theta, peer, sigma)
            penalty = term if penalty is None else T.add(penalty, term)
        loss = T.add(loss, T.scale(penalty, lam))
    T.backward(loss)
    grad = np.concatenate([w[n].grad.reshape(-1) for n in params.names()])
    return loss.item(), grad


class Sgd:
    def __init__(self, lr):
        self.lr = lr

    def step(self, theta, grad):
        return theta - self.lr * grad


class Adam:
    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = None
        self.v = None
        self.t = 0

    def step(self, theta, grad):
        if self.m is None:
            self.m = np.zeros_like(theta)
            self.v = np.zeros_like(theta)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1**self.t)
        v_hat = self.v / (1 - self.beta2**self.t)
        return theta - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(name, lr):
    if name == "sgd":
        return Sgd(lr)
    if name == "adam":
        return Adam(lr)
    raise ValueError(f"unknown optimizer {name!r}")


def minibatches(n, batch_size, rng, cap=0):
    """Shuffled index batches of near-equal size covering ``n`` (or ``cap``) samples."""
    order = rng.permutation(n)
    if cap and cap < n:
        order = order[:cap]
    n_batches = max(1, math.ceil(len(order) / batch_size))
    return np.array_split(order, n_batches)


def train_local(
    params,
    data,
    epochs,
    batch_size,
    lr,
    rng,
    objective="mse",
    optimizer="adam",
    rel_cfg=RelationalConfig(),
    pck_cfg=PckConfig(),
    samples_per_epoch=0,
    peers=(),
    lam=0.0,
    sigma=1.0,
):
    """Minibatch descent from ``params``; returns (final params, mean batch loss)."""
    if len(data) == 0:
        raise ValueError("no local data")
    opt = make_optimizer(optimizer, lr)
    theta = params.flatten()
    current = params
    losses = []
    for _ in range(epochs):
        for batch in minibatches(len(data), batch_size, rng, samples_per_epoch):
            x, y = data.inputs(batch), data.targets(batch)
            loss, grad = loss_and_grad(current, x, y, objective, rel_cfg, pck_cfg, peers, lam, sigma)
            if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
                raise T.NumericError("non-finite loss or gradient during local training")
            theta = opt.step(theta, grad)
            current = ModelParams.unflatten(params.config, theta, params.version)
            losses.append(loss)
    return current, float(np.mean(losses))


def evaluate(params, data, pck_cfg=PckConfig(), thresholds=None, max_windows=0):
    """Held-out metrics.

    Returns a dict with ``loss`` (MSE), ``pck`` at ``pck_cfg.threshold_tk``,
    ``pck_at`` for extra thresholds, ``mean_position_error`` (metres),
    ``spearman`` between per-sample loss and metric, and the per-sample
    arrays themselves.
    """
    n = len(data)
    if n == 0:
        raise ValueError("empty evaluation set")
    sel = None
    if max_windows and max_windows < n:
        sel = np.linspace(0, n - 1, max_windows).round().astype(np.int64)
    x, y = data.inputs(sel), data.targets(sel)
    pred = predict_batched(x, params)
    sq = ((pred - y) ** 2).mean(axis=1)
    dist = per_sample_errors(pred, y, pck_cfg)
    pos_err = np.linalg.norm(pred[:, :3] - y[:, :3], axis=1)
    try:
        rho = spearman_exact(sq, -dist)
    except (UndefinedCorrelation, ValueError):
        rho = float("nan")
    out = {
        "n": len(y),
        "loss": float(sq.mean()),
        "pck": pck_from_errors(dist, pck_cfg.threshold_tk),
        "mean_position_error": float(pos_err.mean()),
        "spearman": rho,
        "per_sample_loss": sq,
        "per_sample_distance": dist,
        "predictions": pred,
        "targets": y,
    }
    if thresholds:
        out["pck_at"] = {float(t): pck_from_errors(dist, t) for t in thresholds}
    return out
