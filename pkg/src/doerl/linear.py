"""Linear MDPs on a finite state list, with state-level trusted sets and covariances.

Transitions factor as ``P[h](s' | s, a) = <phi[h, s, a], mu[h, s']>`` and rewards
as ``r[h](s, a) = <phi[h, s, a], theta[h]>``. As in the tabular module,
``mu[h]`` drives the move from layer ``h`` to ``h + 1``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .estimation import EstimationReport, ModelClass, lse_estimate
from .mdp import (SCHEMA_VERSION, InvariantError, Policy, TabularMdp, _readonly, as_probs,
                  check_schema_version)
from .trusted import flow_forward

LINEAR_TOL = 1e-10
LINEAR_SCHEMA = "doerl.linear_mdp"


@dataclass(frozen=True, eq=False)
class LinearMdp:
    """features: (H, S, A, d); mu: (H, S, d); theta: (H, d)."""

    features: np.ndarray
    mu: np.ndarray
    theta: np.ndarray
    start_state: int = 0

    def __post_init__(self):
        phi, mu, theta = _readonly(self.features), _readonly(self.mu), _readonly(self.theta)
        if phi.ndim != 4:
            raise ValueError(f"features must have shape (H, S, A, d), got {phi.shape}")
        H, S, A, d = phi.shape
        if mu.shape != (H, S, d) or theta.shape != (H, d):
            raise ValueError("mu must be (H, S, d) and theta (H, d)")
        if not 0 <= int(self.start_state) < S:
            raise ValueError("start_state out of range")
        if np.any(np.linalg.norm(phi, axis=-1) > 1 + 1e-12):
            raise InvariantError("feature-norm", "every feature vector needs norm at most 1")
        P = phi @ np.swapaxes(mu, 1, 2)[:, None]
        if np.any(P < -LINEAR_TOL):
            raise InvariantError("simplex", "linear transition has a negative entry")
        worst = float(np.max(np.abs(P.sum(axis=-1) - 1.0)))
        if worst > LINEAR_TOL:
            raise InvariantError("simplex", f"linear transition rows deviate from 1 by {worst:.3g}")
        r = np.einsum("hsad,hd->hsa", phi, theta)
        if np.any(r < -LINEAR_TOL) or np.any(r > 1.0 / H + LINEAR_TOL):
            raise InvariantError("reward-range", "linear rewards must lie in [0, 1/H]")
        object.__setattr__(self, "features", phi)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "start_state", int(self.start_state))

    @property
    def horizon(self) -> int:
        return self.features.shape[0]

    @property
    def num_states(self) -> int:
        return self.features.shape[1]

    @property
    def num_actions(self) -> int:
        return self.features.shape[2]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[3]

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.horizon, self.num_states, self.num_actions

    def transitions(self) -> np.ndarray:
        return self.features @ np.swapaxes(self.mu, 1, 2)[:, None]

    def mean_rewards(self) -> np.ndarray:
        return np.einsum("hsad,hd->hsa", self.features, self.theta)

    def to_tabular(self) -> TabularMdp:
        H = self.horizon
        P = np.clip(self.transitions(), 0.0, None)
        P = P / P.sum(axis=-1, keepdims=True)
        r = np.clip(self.mean_rewards(), 0.0, 1.0 / H)
        return TabularMdp(P, r, self.start_state)


def linear_transition(model: LinearMdp, h: int, s: int, a: int) -> np.ndarray:
    """Next-state distribution ``<phi[h, s, a], mu[h, s']>`` over ``s'``."""
    return model.mu[h] @ model.features[h, s, a]


def tabular_to_linear(mdp: TabularMdp) -> LinearMdp:
    """One-hot embedding with ``d = S * A``."""
    H, S, A = mdp.dims
    d = S * A
    phi = np.broadcast_to(np.eye(d).reshape(S, A, d), (H, S, A, d))
    mu = np.swapaxes(mdp.transitions.reshape(H, d, S), 1, 2)
    theta = mdp.mean_rewards.reshape(H, d)
    return LinearMdp(phi, mu, theta, mdp.start_state)


@dataclass(frozen=True)
class NormalizationReport:
    c_M: float
    passes: bool
    max_theta_norm: float

    def to_dict(self) -> dict:
        return {"c_M": self.c_M, "passes": self.passes, "max_theta_norm": self.max_theta_norm}


def normalization_constant(model: LinearMdp) -> NormalizationReport:
    """``c_M = max_h sum_{s'} ||mu[h, s']||_2^{1/2}``; also checks ``||theta[h]|| <= 1``."""
    theta_norm = float(np.max(np.linalg.norm(model.theta, axis=-1)))
    if theta_norm > 1 + 1e-12:
        raise InvariantError("theta-norm", f"reward parameter norm {theta_norm:.6g} exceeds 1")
    c = float(np.max(np.sum(np.sqrt(np.linalg.norm(model.mu, axis=-1)), axis=-1)))
    return NormalizationReport(c, bool(np.isfinite(c)), theta_norm)


def class_normalization_constant(model_class: ModelClass) -> float:
    return max(normalization_constant(m).c_M for m in model_class)


@dataclass(frozen=True, eq=False)
class LinearLayerEstimate:
    layer: int
    mu_hat: np.ndarray  # (S, d)
    theta_hat: np.ndarray  # (d,)

    @classmethod
    def from_model(cls, model: LinearMdp, layer: int) -> "LinearLayerEstimate":
        return cls(layer, model.mu[layer], model.theta[layer])


@dataclass(frozen=True, eq=False)
class TrustedStructureLinear:
    """Per-epoch linear layer estimates and trusted arriving-state masks.

    ``trusted_sets[j]`` is a boolean vector over states reached from layer ``j``.
    """

    features: np.ndarray
    start_state: int
    zeta: float
    epoch: int = 1
    estimates: tuple = field(default_factory=tuple)
    trusted_sets: tuple = field(default_factory=tuple)

    def __post_init__(self):
        if not self.zeta > 0:
            raise ValueError("zeta must be positive")
        for j, est in enumerate(self.estimates):
            if est.layer != j:
                raise ValueError("layer estimates must be supplied in layer order")
        if len(self.trusted_sets) > len(self.estimates):
            raise ValueError("a trusted set needs the estimate of its source layer")
        object.__setattr__(self, "features", _readonly(self.features))
        object.__setattr__(self, "trusted_sets", tuple(_readonly(t, dtype=bool) for t in self.trusted_sets))

    @classmethod
    def empty(cls, features: np.ndarray, start_state: int, zeta: float, epoch: int = 1) -> "TrustedStructureLinear":
        return cls(features, start_state, float(zeta), epoch)

    @property
    def horizon(self) -> int:
        return self.features.shape[0]

    @property
    def num_states(self) -> int:
        return self.features.shape[1]

    @property
    def num_actions(self) -> int:
        return self.features.shape[2]

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.horizon, self.num_states, self.num_actions

    def with_estimate(self, estimate: LinearLayerEstimate) -> "TrustedStructureLinear":
        return TrustedStructureLinear(self.features, self.start_state, self.zeta, self.epoch,
                                      self.estimates + (estimate,), self.trusted_sets)

    def with_trusted_set(self, mask: np.ndarray) -> "TrustedStructureLinear":
        return TrustedStructureLinear(self.features, self.start_state, self.zeta, self.epoch,
                                      self.estimates, self.trusted_sets + (mask,))

    def start_distribution(self) -> np.ndarray:
        x = np.zeros(self.num_states)
        x[self.start_state] = 1.0
        return x

    def estimated_kernel(self, j: int) -> np.ndarray:
        return self.features[j] @ self.estimates[j].mu_hat.T

    def gated_kernels(self, upto: int, transitions=None) -> list[np.ndarray]:
        if upto >= self.horizon:
            raise ValueError(f"layer {upto} outside horizon {self.horizon}")
        if len(self.trusted_sets) < upto:
            raise ValueError(f"trusted occupancy at layer {upto} needs trusted sets for layers 0..{upto - 1}")
        out = []
        for j in range(upto):
            K = self.estimated_kernel(j) if transitions is None else transitions[j]
            out.append(K * self.trusted_sets[j][None, None, :])
        return out


def _check(structure: TrustedStructureLinear, probs: np.ndarray) -> None:
    if probs.shape != structure.dims:
        raise ValueError(f"policy shape {probs.shape} does not match structure dims {structure.dims}")


def trusted_occupancy_linear(structure: TrustedStructureLinear, policy: Policy | np.ndarray, upto: int) -> np.ndarray:
    probs = as_probs(policy)
    _check(structure, probs)
    return flow_forward(structure.start_distribution(), structure.gated_kernels(upto), probs, upto)[1]


def trusted_set_linear(structure: TrustedStructureLinear, executed_policy: Policy | np.ndarray, layer: int) -> np.ndarray:
    """Arriving states whose estimated inflow from ``layer`` reaches ``1 / zeta``."""
    if layer >= len(structure.estimates):
        raise ValueError(f"layer {layer} has no estimate yet")
    if layer + 1 >= structure.horizon:
        raise ValueError("the last layer has no outgoing trusted set")
    d = trusted_occupancy_linear(structure, executed_policy, layer)[layer]
    inflow = np.einsum("sa,sat->t", d, structure.estimated_kernel(layer))
    return inflow >= 1.0 / structure.zeta


def covariance(features: np.ndarray, occupancy: np.ndarray) -> np.ndarray:
    """``sum_{s,a} occupancy[s, a] * phi(s, a) phi(s, a)^T`` for one layer."""
    Phi = features.reshape(-1, features.shape[-1])
    return Phi.T @ (occupancy.reshape(-1)[:, None] * Phi)


def trusted_covariance(structure: TrustedStructureLinear, policy: Policy | np.ndarray, layer: int) -> np.ndarray:
    d = trusted_occupancy_linear(structure, policy, layer)[layer]
    K = covariance(structure.features[layer], d)
    return 0.5 * (K + K.T)


def lse_linear(model_class: ModelClass, data) -> EstimationReport:
    """Least-squares estimation over a class of linear models via their induced kernels."""
    tab = ModelClass(tuple(m.to_tabular() if isinstance(m, LinearMdp) else m for m in model_class),
                     model_class.realizable_index)
    return lse_estimate(tab, data)


def random_linear_mdp(num_states: int, num_actions: int, feature_dim: int, horizon: int, rng: np.random.Generator,
                      start_state: int = 0, concentration: float = 1.0) -> LinearMdp:
    """Features on the probability simplex and ``mu`` columns that are distributions over states.

    Both choices make every ``<phi, mu>`` row a valid distribution and keep
    ``||phi|| <= 1``; ``theta`` in ``[0, 1/H]^d`` keeps rewards in range.
    """
    H, S, A, d = horizon, num_states, num_actions, feature_dim
    phi = rng.dirichlet(np.full(d, concentration), size=(H, S, A))
    mu = np.swapaxes(rng.dirichlet(np.full(S, concentration), size=(H, d)), 1, 2)
    theta = rng.uniform(0.0, 1.0 / H, size=(H, d))
    return LinearMdp(phi, mu, theta, start_state)


def perturbed_linear_class(truth: LinearMdp, size: int, perturbation: float, rng: np.random.Generator,
                           realizable: bool = True) -> ModelClass:
    """Truth plus perturbations sharing its features; ``mu`` columns and ``theta`` are mixed."""
    H, S, _ = truth.dims
    d = truth.feature_dim
    models = []
    for _ in range(size - 1 if realizable else size):
        q = np.swapaxes(rng.dirichlet(np.ones(S), size=(H, d)), 1, 2)
        u = rng.uniform(0.0, 1.0 / H, size=(H, d))
        mu = (1 - perturbation) * truth.mu + perturbation * q
        theta = (1 - perturbation) * truth.theta + perturbation * u
        models.append(LinearMdp(truth.features, mu, theta, truth.start_state))
    index = None
    if realizable:
        index = int(rng.integers(size))
        models.insert(index, truth)
    return ModelClass(tuple(models), index)


def linear_to_dict(model: LinearMdp) -> dict:
    H, S, A = model.dims
    return {"schema": LINEAR_SCHEMA, "version": SCHEMA_VERSION, "horizon": H, "num_states": S,
            "num_actions": A, "feature_dim": model.feature_dim, "start_state": model.start_state,
            "features": model.features.tolist(), "mu": model.mu.tolist(), "theta": model.theta.tolist()}


def linear_from_dict(doc: dict) -> LinearMdp:
    check_schema_version(doc, LINEAR_SCHEMA)
    model = LinearMdp(np.array(doc["features"], dtype=float), np.array(doc["mu"], dtype=float),
                      np.array(doc["theta"], dtype=float), int(doc["start_state"]))
    if model.dims != (doc["horizon"], doc["num_states"], doc["num_actions"]) or model.feature_dim != doc["feature_dim"]:
        raise ValueError("declared dimensions do not match tensor shapes")
    return model


def save_linear(model: LinearMdp, path: str | Path) -> None:
    Path(path).write_text(json.dumps(linear_to_dict(model)) + "\n")


def load_linear(path: str | Path) -> LinearMdp:
    return linear_from_dict(json.loads(Path(path).read_text()))
