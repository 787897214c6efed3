"""Losses, exact gradients, and deterministic training for the reward heads.

The preference loss is the binary cross-entropy of the reward margin under
the Bradley-Terry link, evaluated in the numerically stable softplus form.
Ensembles add two quadratic regularizers per member: an anchor that pulls
parameters toward their random initialization and a centering term that
shrinks the sum of paired rewards toward zero (the margin loss is invariant
to additive constants, which would otherwise inflate the member spread).

Model objects are duck-typed: they expose ``arch``, ``member_rewards``,
``member_grads``, ``trainable_params`` and, for ensembles, the frozen init
snapshot used by the anchor term.  This module never mutates its inputs;
``train`` returns a new model.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.special import expit


class TrainingDivergedError(RuntimeError):
    """Raised when the training loss becomes non-finite."""

    def __init__(self, step: int, loss: float):
        super().__init__(f"non-finite loss {loss!r} at step {step}")
        self.step = step


class ConvergenceError(RuntimeError):
    """Raised when an iterative solver exhausts its budget."""


@dataclass(frozen=True)
class LossConfig:
    """Regularizer strengths: anchor-to-init, reward centering, and the
    l2 prior precision of the Bayesian linear head."""

    lambda_anchor: float = 0.0
    gamma_center: float = 0.0
    lambda_l2: float = 0.01

    def __post_init__(self):
        for name in ("lambda_anchor", "gamma_center", "lambda_l2"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v!r}")


@dataclass(frozen=True)
class TrainSchedule:
    """Optimization schedule: AdamW moments plus cosine decay with warmup.

    ``total_steps`` may be left unset and is then derived from the epoch
    count and batch size when training starts.
    """

    base_lr: float = 1e-3
    total_steps: int | None = None
    warmup_fraction: float = 0.05
    batch_size: int = 64
    epochs: int = 1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ValueError(f"base_lr must be positive, got {self.base_lr}")
        if not (0.0 <= self.warmup_fraction < 1.0):
            raise ValueError(f"warmup_fraction must be in [0, 1), got {self.warmup_fraction}")
        if self.batch_size <= 0 or self.epochs <= 0:
            raise ValueError("batch_size and epochs must be positive")
        if self.total_steps is not None and self.total_steps <= 0:
            raise ValueError("total_steps must be positive when given")

    def resolve_steps(self, n_examples: int) -> int:
        if self.total_steps is not None:
            return self.total_steps
        return self.epochs * max(1, math.ceil(n_examples / self.batch_size))


def learning_rate(schedule: TrainSchedule, step: int, total_steps: int) -> float:
    """Linear warmup to ``base_lr`` followed by cosine decay to zero."""
    warmup = int(math.floor(schedule.warmup_fraction * total_steps))
    if warmup > 0 and step < warmup:
        return schedule.base_lr * step / warmup
    span = max(total_steps - warmup, 1)
    progress = (step - warmup) / span
    return schedule.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def bce_preference_loss(rewards_chosen, rewards_rejected) -> float:
    """Mean negative log-likelihood of the observed preferences.

    Computed as softplus of the negated reward margin, which neither
    overflows for large negative margins nor loses the tiny losses of
    large positive ones.
    """
    rc = np.asarray(rewards_chosen, dtype=np.float64)
    rr = np.asarray(rewards_rejected, dtype=np.float64)
    if rc.shape != rr.shape:
        raise ValueError(f"shape mismatch: {rc.shape} vs {rr.shape}")
    if rc.size == 0:
        raise ValueError("empty batch")
    return float(np.logaddexp(0.0, -(rc - rr)).mean())


def _flatten(params: dict[str, np.ndarray]) -> np.ndarray:
    return np.concatenate([params[k].ravel() for k in sorted(params)])


def _member_param_count(params: dict[str, np.ndarray]) -> int:
    return sum(v.size for v in params.values())


def ensemble_loss(model, batch, config: LossConfig) -> float:
    """Per-member average of margin BCE, anchor, and centering terms.

    The anchor term is normalized by the member's parameter count and the
    centering term by the batch size, matching the gradients below.
    """
    zc, zr = batch
    rc = model.member_rewards(zc)
    rr = model.member_rewards(zr)
    n = rc.shape[0]
    base = np.logaddexp(0.0, -(rc - rr)).mean(axis=0)
    center = config.gamma_center * np.mean((rc + rr) ** 2, axis=0)
    anchor = np.zeros(model.n_members)
    if config.lambda_anchor > 0:
        for k, (cur, init) in enumerate(zip(model.members, model.init_members)):
            disp = _flatten(cur) - _flatten(init)
            anchor[k] = config.lambda_anchor / _member_param_count(cur) * float(disp @ disp)
    return float(np.mean(base + anchor + center))


def ensemble_loss_gradient(model, batch, config: LossConfig) -> list[dict[str, np.ndarray]]:
    """Exact gradient of ``ensemble_loss`` for every member's parameters."""
    zc, zr = batch
    rc = model.member_rewards(zc)
    rr = model.member_rewards(zr)
    n, n_members = rc.shape
    dmargin = -expit(-(rc - rr)) / n
    dcenter = 2.0 * config.gamma_center * (rc + rr) / n
    d_rc = (dmargin + dcenter) / n_members
    d_rr = (-dmargin + dcenter) / n_members
    grads = model.member_grads(zc, d_rc)
    grads_r = model.member_grads(zr, d_rr)
    for g, gr in zip(grads, grads_r):
        for key in g:
            g[key] += gr[key]
    if config.lambda_anchor > 0:
        for k, (g, cur, init) in enumerate(zip(grads, model.members, model.init_members)):
            scale = 2.0 * config.lambda_anchor / _member_param_count(cur) / n_members
            for key in g:
                g[key] += scale * (cur[key] - init[key])
    return grads


def dropout_loss(model, batch, masks: np.ndarray) -> float:
    """Margin BCE under one freshly sampled dropout mask per example.

    The same mask is applied to both completions of a pair, mirroring
    per-sample mask draws during training.
    """
    zc, zr = batch
    rc = model.masked_rewards(zc, masks)
    rr = model.masked_rewards(zr, masks)
    return bce_preference_loss(rc, rr)


def dropout_loss_gradient(model, batch, masks: np.ndarray) -> list[dict[str, np.ndarray]]:
    """Exact gradient of ``dropout_loss`` with the masks held fixed."""
    zc, zr = batch
    rc = model.masked_rewards(zc, masks)
    rr = model.masked_rewards(zr, masks)
    n = rc.shape[0]
    dmargin = -expit(-(rc - rr)) / n
    g = model.masked_grads(zc, masks, dmargin)
    g_r = model.masked_grads(zr, masks, -dmargin)
    for key in g:
        g[key] += g_r[key]
    return [g]


def loss_gradient(model, batch, config: LossConfig, masks: np.ndarray | None = None):
    """Gradient of the configured training loss for any gradient-trained head.

    Ensembles differentiate :func:`ensemble_loss`; the dropout head
    differentiates the per-sample-mask BCE and therefore requires the
    ``masks`` that define the loss being checked.
    """
    arch = getattr(model, "arch", None)
    if arch in ("ens-mlp", "ens-lora"):
        return ensemble_loss_gradient(model, batch, config)
    if arch == "mcd":
        if masks is None:
            raise ValueError("the dropout head's loss is defined by its masks; pass them")
        return dropout_loss_gradient(model, batch, masks)
    raise ValueError(f"no gradient-trained loss for architecture {arch!r}")


def linear_map_objective(theta: np.ndarray, deltas: np.ndarray, lam: float) -> float:
    """Negative log-posterior of the Bayesian linear head.

    The likelihood term is the summed (not averaged) margin BCE, so the
    analytic Hessian of this objective is exactly the weighted feature
    covariance plus ``lam`` times the identity.
    """
    margins = deltas @ theta
    return float(np.logaddexp(0.0, -margins).sum() + 0.5 * lam * theta @ theta)


def linear_map_gradient(theta: np.ndarray, deltas: np.ndarray, lam: float) -> np.ndarray:
    """Exact gradient of :func:`linear_map_objective`."""
    return -deltas.T @ expit(-(deltas @ theta)) + lam * theta


def fit_linear_map(
    deltas: np.ndarray,
    lam: float,
    tol: float = 1e-10,
    max_iter: int = 100,
) -> tuple[np.ndarray, list[float]]:
    """Damped Newton minimization of :func:`linear_map_objective`.

    The objective is strictly convex for ``lam > 0``, so Newton steps with
    Armijo backtracking converge to machine precision in a handful of
    iterations.  Returns the minimizer and the per-iteration objective
    trace; raises :class:`ConvergenceError` with the final gradient norm if
    the tolerance is not reached within ``max_iter`` iterations.
    """
    deltas = np.asarray(deltas, dtype=np.float64)
    if deltas.ndim != 2 or deltas.shape[0] == 0:
        raise ValueError(f"deltas must be a non-empty (n, d) array, got shape {deltas.shape}")
    if lam <= 0:
        raise ValueError(f"prior precision must be positive, got {lam}")
    d = deltas.shape[1]
    theta = np.zeros(d)
    eye = np.eye(d)
    trace = []
    for _ in range(max_iter):
        margins = deltas @ theta
        grad = linear_map_gradient(theta, deltas, lam)
        grad_norm = float(np.abs(grad).max())
        trace.append(linear_map_objective(theta, deltas, lam))
        if grad_norm <= tol:
            return theta, trace
        weights = expit(margins) * expit(-margins)
        hess = (deltas * weights[:, None]).T @ deltas + lam * eye
        direction = -cho_solve(cho_factor(hess), grad)
        slope = float(grad @ direction)
        step, value = 1.0, trace[-1]
        # Once the predicted decrease drops below objective rounding the
        # Armijo test is meaningless; the full Newton step is safe there.
        if -slope <= 8.0 * np.finfo(np.float64).eps * max(1.0, abs(value)):
            theta = theta + direction
            continue
        while step > 1e-12:
            candidate = linear_map_objective(theta + step * direction, deltas, lam)
            if candidate <= value + 1e-4 * step * slope:
                break
            step *= 0.5
        else:
            # Expected decrease is below objective rounding: we are inside
            # the quadratic basin, where the full Newton step is safe.
            step = 1.0
        theta = theta + step * direction
    grad = linear_map_gradient(theta, deltas, lam)
    raise ConvergenceError(
        f"MAP solver did not reach tolerance {tol:g} within {max_iter} iterations "
        f"(final gradient max-norm {np.abs(grad).max():.3e})"
    )


# ---------------------------------------------------------------------------
# AdamW
# ---------------------------------------------------------------------------


class AdamW:
    """Moment-based update with decoupled weight decay over parameter dicts."""

    def __init__(self, params: Sequence[dict[str, np.ndarray]], schedule: TrainSchedule):
        self.schedule = schedule
        self.t = 0
        self.m = [{k: np.zeros_like(v) for k, v in p.items()} for p in params]
        self.v = [{k: np.zeros_like(v) for k, v in p.items()} for p in params]

    def step(
        self,
        params: Sequence[dict[str, np.ndarray]],
        grads: Sequence[dict[str, np.ndarray]],
        lr: float,
    ) -> None:
        s = self.schedule
        self.t += 1
        bias1 = 1.0 - s.beta1**self.t
        bias2 = 1.0 - s.beta2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            for key in p:
                m[key] = s.beta1 * m[key] + (1.0 - s.beta1) * g[key]
                v[key] = s.beta2 * v[key] + (1.0 - s.beta2) * g[key] ** 2
                update = (m[key] / bias1) / (np.sqrt(v[key] / bias2) + s.eps)
                if s.weight_decay > 0:
                    update = update + s.weight_decay * p[key]
                p[key] -= lr * update


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


def train(model, dataset, schedule: TrainSchedule, config: LossConfig | None = None):
    """Mini-batch AdamW training with the cosine/warmup schedule.

    Batch order is shuffled from ``schedule.seed`` (and, for the dropout
    head, per-example masks are drawn from the same Philox stream), so runs
    with equal seeds are bit-identical.  Returns ``(trained_model, trace)``
    where ``trace`` holds the loss of every step's batch before the update.
    Raises :class:`TrainingDivergedError` as soon as a loss is non-finite.
    """
    from .corpus import dataset_arrays

    config = config or LossConfig()
    arch = getattr(model, "arch", None)
    if arch not in ("ens-mlp", "ens-lora", "mcd"):
        raise ValueError(f"train() supports the gradient-trained heads, not {arch!r}")
    examples = list(dataset)
    if not examples:
        raise ValueError("cannot train on an empty dataset")
    zc_all, zr_all = dataset_arrays(examples)
    n = len(examples)
    total_steps = schedule.resolve_steps(n)
    model = copy.deepcopy(model)
    params = model.trainable_params()
    opt = AdamW(params, schedule)
    rng = np.random.Generator(np.random.Philox(schedule.seed))
    keep = 1.0 - model.dropout_rate if arch == "mcd" else None

    trace: list[float] = []
    step = 0
    for _ in range(schedule.epochs):
        order = rng.permutation(n)
        for start in range(0, n, schedule.batch_size):
            idx = order[start : start + schedule.batch_size]
            batch = (zc_all[idx], zr_all[idx])
            if arch == "mcd":
                masks = (rng.random((idx.size, model.dim)) < keep).astype(np.float64)
                loss = dropout_loss(model, batch, masks)
                grads = dropout_loss_gradient(model, batch, masks)
            else:
                loss = ensemble_loss(model, batch, config)
                grads = ensemble_loss_gradient(model, batch, config)
            if not np.isfinite(loss):
                raise TrainingDivergedError(step, loss)
            trace.append(loss)
            opt.step(params, grads, learning_rate(schedule, step, total_steps))
            step += 1
    return model, trace
