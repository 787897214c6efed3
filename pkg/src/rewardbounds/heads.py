"""Uncertainty-aware reward heads over fixed embeddings.

Four families are implemented:

* ``ens-mlp``: an ensemble of independently initialized two-layer
  perceptron heads; uncertainty is the sample standard deviation of the
  member rewards.
* ``ens-lora``: low-rank adapters over a frozen random linear backbone,
  one adapter plus linear head per member, aggregated like the MLP
  ensemble.
* ``mcd``: a single perceptron head queried under a fixed set of dropout
  masks applied to the embedding with inverted scaling.
* ``bay-lin``: a Bayesian linear head whose posterior is a Laplace
  approximation around the MAP weights; uncertainty is the predictive
  standard deviation ``sqrt(z' H^-1 z)``.

Every head turns ``(reward, uncertainty)`` into the symmetric interval
``[reward - beta * uncertainty, reward + beta * uncertainty]``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from typing import ClassVar

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.special import expit

from .corpus import PreferenceDataset, PreferenceExample, dataset_arrays
from .optim import fit_linear_map

CHECKPOINT_SCHEMA = "checkpoint/1"

DEFAULT_BETA = {"ens-mlp": 2.0, "ens-lora": 2.0, "mcd": 2.0, "bay-lin": 0.5}

ARCHITECTURES = tuple(DEFAULT_BETA)


class ModelError(ValueError):
    """Invalid model configuration or input."""


@dataclass(frozen=True)
class RewardEstimate:
    """Pointwise reward with a symmetric beta-scaled confidence interval."""

    reward: float
    uncertainty: float
    beta: float

    def __post_init__(self):
        if not np.isfinite(self.reward):
            raise ModelError(f"reward must be finite, got {self.reward!r}")
        if not np.isfinite(self.uncertainty) or self.uncertainty < 0:
            raise ModelError(f"uncertainty must be finite and >= 0, got {self.uncertainty!r}")
        if not np.isfinite(self.beta) or self.beta <= 0:
            raise ModelError(f"beta must be finite and positive, got {self.beta!r}")

    @property
    def lower(self) -> float:
        return self.reward - self.beta * self.uncertainty

    @property
    def upper(self) -> float:
        return self.reward + self.beta * self.uncertainty


def ensemble_aggregate(member_rewards) -> tuple[float, float]:
    """Mean and unbiased (K-1 denominator) standard deviation of member rewards.

    Identical members yield an exact zero spread rather than accumulated
    rounding noise.
    """
    rewards = np.asarray(member_rewards, dtype=np.float64).ravel()
    if rewards.size < 2:
        raise ModelError(f"need at least 2 member rewards, got {rewards.size}")
    mean, std = _aggregate_matrix(rewards[None, :])
    return float(mean[0]), float(std[0])


def _aggregate_matrix(rewards: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = rewards.mean(axis=1)
    dev = rewards - mean[:, None]
    std = np.sqrt((dev**2).sum(axis=1) / (rewards.shape[1] - 1))
    degenerate = np.ptp(rewards, axis=1) == 0.0
    if degenerate.any():
        mean = np.where(degenerate, rewards[:, 0], mean)
        std = np.where(degenerate, 0.0, std)
    return mean, std


# ---------------------------------------------------------------------------
# Two-layer perceptron primitives (shared by ens-mlp and mcd)
# ---------------------------------------------------------------------------


def _xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def _init_mlp_params(rng: np.random.Generator, dim: int, hidden: int) -> dict[str, np.ndarray]:
    return {
        "w1": _xavier_uniform(rng, dim, hidden, (hidden, dim)),
        "b1": np.zeros(hidden),
        "w2": _xavier_uniform(rng, hidden, hidden, (hidden, hidden)),
        "b2": np.zeros(hidden),
        "w3": _xavier_uniform(rng, hidden, 1, hidden),
        "b3": np.zeros(1),
    }


def _mlp_forward(params: dict[str, np.ndarray], z: np.ndarray) -> np.ndarray:
    a1 = z @ params["w1"].T + params["b1"]
    h1 = np.maximum(a1, 0.0)
    a2 = h1 @ params["w2"].T + params["b2"]
    h2 = np.maximum(a2, 0.0)
    return h2 @ params["w3"] + params["b3"][0]


def _mlp_backward(
    params: dict[str, np.ndarray], z: np.ndarray, d_reward: np.ndarray
) -> dict[str, np.ndarray]:
    a1 = z @ params["w1"].T + params["b1"]
    h1 = np.maximum(a1, 0.0)
    a2 = h1 @ params["w2"].T + params["b2"]
    h2 = np.maximum(a2, 0.0)
    grad = {
        "w3": h2.T @ d_reward,
        "b3": np.array([d_reward.sum()]),
    }
    da2 = np.outer(d_reward, params["w3"]) * (a2 > 0)
    grad["w2"] = da2.T @ h1
    grad["b2"] = da2.sum(axis=0)
    da1 = (da2 @ params["w2"]) * (a1 > 0)
    grad["w1"] = da1.T @ z
    grad["b1"] = da1.sum(axis=0)
    return grad


def _copy_params(params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: v.copy() for k, v in params.items()}


# ---------------------------------------------------------------------------
# Model families
# ---------------------------------------------------------------------------


@dataclass
class MlpEnsemble:
    arch: ClassVar[str] = "ens-mlp"

    dim: int
    hidden: int
    members: list[dict[str, np.ndarray]]
    init_members: list[dict[str, np.ndarray]]

    @property
    def n_members(self) -> int:
        return len(self.members)

    def member_rewards(self, z: np.ndarray) -> np.ndarray:
        """Rewards of every member for a batch of embeddings, shape (n, K)."""
        return np.stack([_mlp_forward(p, z) for p in self.members], axis=1)

    def member_grads(self, z: np.ndarray, d_rewards: np.ndarray) -> list[dict[str, np.ndarray]]:
        return [_mlp_backward(p, z, d_rewards[:, k]) for k, p in enumerate(self.members)]

    def trainable_params(self) -> list[dict[str, np.ndarray]]:
        return self.members


@dataclass
class LowRankEnsemble:
    arch: ClassVar[str] = "ens-lora"

    dim: int
    rank: int
    scaling: float
    backbone: np.ndarray
    members: list[dict[str, np.ndarray]]
    init_members: list[dict[str, np.ndarray]]

    @property
    def n_members(self) -> int:
        return len(self.members)

    def _features(self, z: np.ndarray, member: dict[str, np.ndarray]) -> np.ndarray:
        adapted = (z @ member["lora_b"].T) @ member["lora_a"].T
        return z @ self.backbone.T + (self.scaling / self.rank) * adapted

    def member_rewards(self, z: np.ndarray) -> np.ndarray:
        cols = []
        for member in self.members:
            feats = self._features(z, member)
            cols.append(feats @ member["head_w"] + member["head_b"][0])
        return np.stack(cols, axis=1)

    def member_grads(self, z: np.ndarray, d_rewards: np.ndarray) -> list[dict[str, np.ndarray]]:
        """Gradients for adapters and heads; the backbone stays frozen."""
        scale = self.scaling / self.rank
        grads = []
        for k, member in enumerate(self.members):
            dr = d_rewards[:, k]
            feats = self._features(z, member)
            d_feats = np.outer(dr, member["head_w"])
            grads.append(
                {
                    "lora_a": scale * d_feats.T @ (z @ member["lora_b"].T),
                    "lora_b": scale * (d_feats @ member["lora_a"]).T @ z,
                    "head_w": feats.T @ dr,
                    "head_b": np.array([dr.sum()]),
                }
            )
        return grads

    def trainable_params(self) -> list[dict[str, np.ndarray]]:
        return self.members


@dataclass
class McDropoutHead:
    arch: ClassVar[str] = "mcd"

    dim: int
    hidden: int
    params: dict[str, np.ndarray]
    dropout_rate: float
    n_masks: int
    mask_seed: int

    @property
    def n_members(self) -> int:
        return self.n_masks

    def inference_masks(self) -> np.ndarray:
        """The fixed (K, d) mask set derived from ``mask_seed``."""
        rng = np.random.Generator(np.random.Philox(self.mask_seed))
        keep = 1.0 - self.dropout_rate
        return (rng.random((self.n_masks, self.dim)) < keep).astype(np.float64)

    def masked_rewards(self, z: np.ndarray, masks: np.ndarray) -> np.ndarray:
        keep = 1.0 - self.dropout_rate
        return _mlp_forward(self.params, z * masks / keep)

    def masked_grads(
        self, z: np.ndarray, masks: np.ndarray, d_rewards: np.ndarray
    ) -> dict[str, np.ndarray]:
        keep = 1.0 - self.dropout_rate
        return _mlp_backward(self.params, z * masks / keep, d_rewards)

    def member_rewards(self, z: np.ndarray) -> np.ndarray:
        masks = self.inference_masks()
        return np.stack([self.masked_rewards(z, masks[k]) for k in range(self.n_masks)], axis=1)

    def trainable_params(self) -> list[dict[str, np.ndarray]]:
        return [self.params]


@dataclass
class LaplacePosterior:
    """Gaussian posterior of the linear head: N(theta_map, H^-1)."""

    arch: ClassVar[str] = "bay-lin"

    theta_map: np.ndarray
    hessian: np.ndarray
    prior_precision: float
    weighted: bool = False

    @property
    def dim(self) -> int:
        return self.theta_map.size

    def __post_init__(self):
        self.theta_map = np.asarray(self.theta_map, dtype=np.float64)
        self.hessian = np.asarray(self.hessian, dtype=np.float64)
        d = self.theta_map.size
        if self.hessian.shape != (d, d):
            raise ModelError(
                f"Hessian shape {self.hessian.shape} does not match dimension {d}"
            )
        if not np.allclose(self.hessian, self.hessian.T, rtol=0.0, atol=1e-8):
            raise ModelError("Hessian must be symmetric")
        if self.prior_precision <= 0:
            raise ModelError(f"prior precision must be positive, got {self.prior_precision}")


def mc_dropout_forward(model: McDropoutHead, embedding: np.ndarray) -> np.ndarray:
    """Member rewards of one embedding under the fixed inference masks."""
    z = np.asarray(embedding, dtype=np.float64)
    if z.shape != (model.dim,):
        raise ModelError(f"embedding shape {z.shape} does not match model dimension {model.dim}")
    return model.member_rewards(z[None, :])[0]


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------


def _init_lora_member(rng: np.random.Generator, dim: int, rank: int) -> dict[str, np.ndarray]:
    # Zero-initialized lora_b makes every adapter start as the plain backbone.
    return {
        "lora_a": _xavier_uniform(rng, rank, dim, (dim, rank)),
        "lora_b": np.zeros((rank, dim)),
        "head_w": _xavier_uniform(rng, dim, 1, dim),
        "head_b": np.zeros(1),
    }


def model_init(arch: str, dim: int, seed: int, **hyper):
    """Deterministically initialize a head model.

    Ensemble members draw from distinct streams spawned off ``seed``, and
    the initialization snapshot kept for the anchor regularizer is frozen
    at construction.  Defaults: 20 members with 128 hidden nodes (ens-mlp
    and mcd), 8 members at rank 16 with scaling 32 (ens-lora).
    """
    if dim <= 0:
        raise ModelError(f"dim must be positive, got {dim}")
    seq = np.random.SeedSequence(seed)
    if arch == "ens-mlp":
        hidden = int(hyper.pop("hidden", 128))
        n_members = int(hyper.pop("members", 20))
        _reject_extras(arch, hyper)
        if hidden <= 0:
            raise ModelError(f"hidden width must be positive, got {hidden}")
        if n_members < 2:
            raise ModelError(f"ensembles need at least 2 members, got {n_members}")
        members = [
            _init_mlp_params(np.random.Generator(np.random.Philox(child)), dim, hidden)
            for child in seq.spawn(n_members)
        ]
        return MlpEnsemble(
            dim=dim,
            hidden=hidden,
            members=members,
            init_members=[_copy_params(p) for p in members],
        )
    if arch == "ens-lora":
        n_members = int(hyper.pop("members", 8))
        rank = int(hyper.pop("rank", 16))
        scaling = float(hyper.pop("scaling", 32.0))
        _reject_extras(arch, hyper)
        if n_members < 2:
            raise ModelError(f"ensembles need at least 2 members, got {n_members}")
        if rank <= 0:
            raise ModelError(f"rank must be positive, got {rank}")
        if scaling <= 0:
            raise ModelError(f"scaling must be positive, got {scaling}")
        children = seq.spawn(n_members + 1)
        backbone_rng = np.random.Generator(np.random.Philox(children[0]))
        backbone = backbone_rng.standard_normal((dim, dim)) / np.sqrt(dim)
        members = [
            _init_lora_member(np.random.Generator(np.random.Philox(child)), dim, rank)
            for child in children[1:]
        ]
        return LowRankEnsemble(
            dim=dim,
            rank=rank,
            scaling=scaling,
            backbone=backbone,
            members=members,
            init_members=[_copy_params(p) for p in members],
        )
    if arch == "mcd":
        hidden = int(hyper.pop("hidden", 128))
        dropout = float(hyper.pop("dropout", 0.05))
        n_masks = int(hyper.pop("masks", 20))
        mask_seed = hyper.pop("mask_seed", None)
        _reject_extras(arch, hyper)
        if hidden <= 0:
            raise ModelError(f"hidden width must be positive, got {hidden}")
        if not (0.0 < dropout < 1.0):
            raise ModelError(f"dropout rate must be in (0, 1), got {dropout}")
        if n_masks < 2:
            raise ModelError(f"need at least 2 inference masks, got {n_masks}")
        param_child, mask_child = seq.spawn(2)
        params = _init_mlp_params(np.random.Generator(np.random.Philox(param_child)), dim, hidden)
        if mask_seed is None:
            mask_seed = int(mask_child.generate_state(1, np.uint64)[0])
        return McDropoutHead(
            dim=dim,
            hidden=hidden,
            params=params,
            dropout_rate=dropout,
            n_masks=n_masks,
            mask_seed=int(mask_seed),
        )
    raise ModelError(
        f"unknown architecture {arch!r}; gradient-trained heads are "
        "'ens-mlp', 'ens-lora', 'mcd' (the Bayesian head is built by laplace_fit)"
    )


def _reject_extras(arch: str, hyper: dict) -> None:
    if hyper:
        raise ModelError(f"unknown hyperparameters for {arch}: {sorted(hyper)}")


# ---------------------------------------------------------------------------
# Prediction
# ---------------------------------------------------------------------------


def predict_batch(model, z: np.ndarray, beta: float | None = None):
    """Rewards and uncertainties for a (n, d) batch, plus the beta used."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] != model.dim:
        raise ModelError(
            f"embedding batch shape {z.shape} does not match model dimension {model.dim}"
        )
    if beta is None:
        beta = DEFAULT_BETA[model.arch]
    if model.arch == "bay-lin":
        rewards = z @ model.theta_map
        uncertainties = _posterior_uncertainty(model, z)
    else:
        rewards, uncertainties = _aggregate_matrix(model.member_rewards(z))
    return rewards, uncertainties, float(beta)


def predict(model, embedding: np.ndarray, beta: float | None = None) -> RewardEstimate:
    """Reward estimate with symmetric confidence interval for one embedding.

    Without an explicit ``beta`` the architecture default applies: 2 for
    the ensemble and dropout heads, 0.5 for the Bayesian linear head.
    """
    z = np.asarray(embedding, dtype=np.float64)
    if z.ndim != 1:
        raise ModelError(f"expected a single embedding vector, got shape {z.shape}")
    rewards, uncertainties, beta = predict_batch(model, z[None, :], beta)
    return RewardEstimate(reward=float(rewards[0]), uncertainty=float(uncertainties[0]), beta=beta)


# ---------------------------------------------------------------------------
# Laplace posterior fitting and updates
# ---------------------------------------------------------------------------


def laplace_fit(
    dataset: PreferenceDataset,
    prior_precision: float,
    weighted: bool = False,
    tol: float = 1e-8,
    max_iter: int = 100,
) -> LaplacePosterior:
    """Fit the Bayesian linear head on preference data.

    The MAP weights minimize the summed margin BCE plus the Gaussian prior
    term; the Hessian is the feature-difference outer-product sum, with
    sigmoid-derivative weights at the MAP when ``weighted`` and unit
    weights (incrementally updatable) otherwise.
    """
    examples = list(dataset)
    if not examples:
        raise ModelError("cannot fit a posterior on an empty dataset")
    chosen, rejected = dataset_arrays(examples)
    deltas = chosen - rejected
    theta, _ = fit_linear_map(deltas, prior_precision, tol=tol, max_iter=max_iter)
    if weighted:
        margins = deltas @ theta
        weights = expit(margins) * expit(-margins)
    else:
        weights = np.ones(len(examples))
    hessian = (deltas * weights[:, None]).T @ deltas + prior_precision * np.eye(deltas.shape[1])
    hessian = 0.5 * (hessian + hessian.T)
    return LaplacePosterior(
        theta_map=theta,
        hessian=hessian,
        prior_precision=float(prior_precision),
        weighted=weighted,
    )


def laplace_update(posterior: LaplacePosterior, example: PreferenceExample) -> LaplacePosterior:
    """Rank-one Hessian update with one observed comparison.

    Only the unweighted posterior supports increments; the weighted Hessian
    depends on the MAP weights and must be refit.  The MAP itself is left
    unchanged, refreshing it is the caller's decision.
    """
    if posterior.weighted:
        raise ModelError("weighted posteriors cannot be updated incrementally")
    if example.dim != posterior.dim:
        raise ModelError(
            f"example dimension {example.dim} does not match posterior dimension {posterior.dim}"
        )
    delta = example.chosen - example.rejected
    return replace(posterior, hessian=posterior.hessian + np.outer(delta, delta))


def _spd_factor(posterior: LaplacePosterior):
    try:
        return cho_factor(posterior.hessian, lower=True)
    except LinAlgError:
        d = posterior.dim
        jitter = 1e-10 * np.trace(posterior.hessian) / d
        try:
            return cho_factor(posterior.hessian + jitter * np.eye(d), lower=True)
        except LinAlgError as exc:
            raise ModelError(
                "Hessian is not positive definite even after jitter; "
                "the posterior violates its invariant"
            ) from exc


def laplace_uncertainty(posterior: LaplacePosterior, embedding: np.ndarray) -> float:
    """Predictive standard deviation sqrt(z' H^-1 z) via Cholesky solve."""
    z = np.asarray(embedding, dtype=np.float64)
    if z.shape != (posterior.dim,):
        raise ModelError(
            f"embedding shape {z.shape} does not match posterior dimension {posterior.dim}"
        )
    factor = _spd_factor(posterior)
    quad = float(z @ cho_solve(factor, z))
    return float(np.sqrt(max(quad, 0.0)))


def _posterior_uncertainty(posterior: LaplacePosterior, z: np.ndarray) -> np.ndarray:
    factor = _spd_factor(posterior)
    solved = cho_solve(factor, z.T)
    quad = np.einsum("dn,dn->n", z.T, solved)
    return np.sqrt(np.maximum(quad, 0.0))


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def _params_to_lists(params: dict[str, np.ndarray]) -> dict:
    return {k: v.tolist() for k, v in params.items()}


def _params_from_lists(obj: dict) -> dict[str, np.ndarray]:
    return {k: np.asarray(v, dtype=np.float64) for k, v in obj.items()}


def save_model(model, path) -> None:
    """Write a versioned JSON checkpoint that round-trips exactly."""
    payload: dict = {"schema": CHECKPOINT_SCHEMA, "arch": model.arch, "dim": model.dim}
    if model.arch == "ens-mlp":
        payload["hyperparameters"] = {"hidden": model.hidden, "members": model.n_members}
        payload["members"] = [_params_to_lists(p) for p in model.members]
        payload["init_members"] = [_params_to_lists(p) for p in model.init_members]
    elif model.arch == "ens-lora":
        payload["hyperparameters"] = {
            "members": model.n_members,
            "rank": model.rank,
            "scaling": model.scaling,
        }
        payload["backbone"] = model.backbone.tolist()
        payload["members"] = [_params_to_lists(p) for p in model.members]
        payload["init_members"] = [_params_to_lists(p) for p in model.init_members]
    elif model.arch == "mcd":
        payload["hyperparameters"] = {
            "hidden": model.hidden,
            "dropout": model.dropout_rate,
            "masks": model.n_masks,
            "mask_seed": model.mask_seed,
        }
        payload["params"] = _params_to_lists(model.params)
    elif model.arch == "bay-lin":
        payload["hyperparameters"] = {
            "prior_precision": model.prior_precision,
            "weighted": model.weighted,
        }
        payload["theta_map"] = model.theta_map.tolist()
        payload["hessian"] = model.hessian.tolist()
    else:
        raise ModelError(f"cannot checkpoint unknown architecture {model.arch!r}")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, allow_nan=False)
        fh.write("\n")


def load_model(path):
    """Load a checkpoint written by :func:`save_model`."""
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("schema") != CHECKPOINT_SCHEMA:
        raise ModelError(f"unsupported checkpoint schema {payload.get('schema')!r}")
    arch = payload["arch"]
    dim = int(payload["dim"])
    hyper = payload["hyperparameters"]
    if arch == "ens-mlp":
        return MlpEnsemble(
            dim=dim,
            hidden=int(hyper["hidden"]),
            members=[_params_from_lists(p) for p in payload["members"]],
            init_members=[_params_from_lists(p) for p in payload["init_members"]],
        )
    if arch == "ens-lora":
        return LowRankEnsemble(
            dim=dim,
            rank=int(hyper["rank"]),
            scaling=float(hyper["scaling"]),
            backbone=np.asarray(payload["backbone"], dtype=np.float64),
            members=[_params_from_lists(p) for p in payload["members"]],
            init_members=[_params_from_lists(p) for p in payload["init_members"]],
        )
    if arch == "mcd":
        return McDropoutHead(
            dim=dim,
            hidden=int(hyper["hidden"]),
            params=_params_from_lists(payload["params"]),
            dropout_rate=float(hyper["dropout"]),
            n_masks=int(hyper["masks"]),
            mask_seed=int(hyper["mask_seed"]),
        )
    if arch == "bay-lin":
        return LaplacePosterior(
            theta_map=np.asarray(payload["theta_map"], dtype=np.float64),
            hessian=np.asarray(payload["hessian"], dtype=np.float64),
            prior_precision=float(hyper["prior_precision"]),
            weighted=bool(hyper["weighted"]),
        )
    raise ModelError(f"unknown architecture {arch!r} in checkpoint")
