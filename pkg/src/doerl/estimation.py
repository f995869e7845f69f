"""Offline estimation oracles over a finite model class.

Trajectory laws include the reward channel, so a model's likelihood of an
episode is the product of its transition probabilities and its reward-bit
probabilities (the policy factor is shared by every model).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .mdp import Policy, TabularMdp, TrajectoryBatch, as_probs


@dataclass(frozen=True, eq=False)
class ModelClass:
    """Nonempty finite model class sharing horizon, state/action counts and start state."""

    models: tuple
    realizable_index: int | None = None

    def __post_init__(self):
        models = tuple(self.models)
        if not models:
            raise ValueError("model class must be nonempty")
        ref = models[0]
        key = (ref.horizon, ref.num_states, ref.num_actions, ref.start_state)
        for i, m in enumerate(models):
            if (m.horizon, m.num_states, m.num_actions, m.start_state) != key:
                raise ValueError(f"model {i} is not dimension-compatible with model 0")
        if self.realizable_index is not None and not 0 <= self.realizable_index < len(models):
            raise ValueError("realizable_index out of range")
        object.__setattr__(self, "models", models)

    def __len__(self) -> int:
        return len(self.models)

    def __getitem__(self, i: int):
        return self.models[i]

    def __iter__(self):
        return iter(self.models)

    @property
    def dims(self) -> tuple[int, int, int]:
        m = self.models[0]
        return m.horizon, m.num_states, m.num_actions


@dataclass(frozen=True)
class OracleRate:
    """Estimation-error rate ``c_est * ln(|M| / delta) / n``."""

    c_est: float = 1.0

    def __post_init__(self):
        if not self.c_est > 0:
            raise ValueError("c_est must be positive")

    def __call__(self, class_size: int, n: int, delta: float) -> float:
        return oracle_rate(self, class_size, n, delta)


def oracle_rate(rate: OracleRate, class_size: int, n: int, delta: float) -> float:
    if n < 1:
        raise ValueError("n must be at least 1")
    if not 0 < delta <= 0.5:
        raise ValueError("delta must lie in (0, 1/2]")
    if class_size < 1:
        raise ValueError("class_size must be at least 1")
    return rate.c_est * math.log(class_size / delta) / n


@dataclass(frozen=True)
class EstimationReport:
    chosen_index: int
    scores: tuple[float, ...]
    criterion: str  # "log_likelihood" (maximised) or "squared_loss" (minimised)
    n_samples: int

    def to_dict(self) -> dict:
        key = "log_likelihoods" if self.criterion == "log_likelihood" else "squared_losses"
        return {"chosen_index": self.chosen_index, key: [_json_float(x) for x in self.scores],
                "n_samples": self.n_samples}


def _json_float(x: float):
    return x if math.isfinite(x) else ("-inf" if x < 0 else "inf")


def _tabular(model) -> TabularMdp:
    return model if isinstance(model, TabularMdp) else model.to_tabular()


def _as_batches(data) -> list[TrajectoryBatch]:
    batches = [data] if isinstance(data, TrajectoryBatch) else list(data)
    if not batches or sum(len(b) for b in batches) == 0:
        raise ValueError("estimation requires nonempty data")
    return batches


def _check_compatible(model_class: ModelClass, batches: Sequence[TrajectoryBatch]) -> None:
    H, S, A = model_class.dims
    for b in batches:
        if b.horizon != H or b.policy.dims != (H, S, A):
            raise ValueError("data is not dimension-compatible with the model class")
        if b.states.max(initial=0) >= S or b.actions.max(initial=0) >= A:
            raise ValueError("data references states or actions outside the model class")


def _log(x: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(x)


def episode_log_likelihoods(model: TabularMdp, batch: TrajectoryBatch) -> np.ndarray:
    """Per-episode log-probability under ``model``, excluding the policy factor."""
    H = model.horizon
    ll = np.zeros(len(batch))
    bit_probs = model.reward_bit_probs()
    for h in range(H):
        s, a = batch.states[:, h], batch.actions[:, h]
        p1 = bit_probs[h, s, a]
        ll += _log(np.where(batch.reward_bits[:, h] == 1, p1, 1.0 - p1))
        if h + 1 < H:
            ll += _log(model.transitions[h, s, a, batch.states[:, h + 1]])
    return ll


@dataclass
class SufficientStats:
    """Transition and reward-bit counts; enough to evaluate any tabular likelihood."""

    horizon: int
    num_states: int
    num_actions: int
    transitions: np.ndarray = field(init=False)
    rewards: np.ndarray = field(init=False)
    n: int = 0

    def __post_init__(self):
        H, S, A = self.horizon, self.num_states, self.num_actions
        self.transitions = np.zeros((max(H - 1, 0), S, A, S), dtype=np.int64)
        self.rewards = np.zeros((H, S, A, 2), dtype=np.int64)

    def add(self, batch: TrajectoryBatch) -> "SufficientStats":
        H = self.horizon
        for h in range(H):
            s, a = batch.states[:, h], batch.actions[:, h]
            np.add.at(self.rewards[h], (s, a, batch.reward_bits[:, h]), 1)
            if h + 1 < H:
                np.add.at(self.transitions[h], (s, a, batch.states[:, h + 1]), 1)
        self.n += len(batch)
        return self

    def log_likelihood(self, model: TabularMdp) -> float:
        H = self.horizon
        bit_probs = model.reward_bit_probs()
        channel = np.stack([1.0 - bit_probs, bit_probs], axis=-1)
        total = _masked_dot(self.rewards, channel)
        if H > 1:
            total += _masked_dot(self.transitions, model.transitions[: H - 1])
        return total


def _masked_dot(counts: np.ndarray, probs: np.ndarray) -> float:
    mask = counts > 0
    if np.any(probs[mask] <= 0.0):
        return -math.inf
    return float(np.sum(counts[mask] * np.log(probs[mask])))


def mle_from_stats(model_class: ModelClass, stats: SufficientStats) -> EstimationReport:
    """Maximum likelihood over the class; ties go to the lowest index."""
    scores = tuple(stats.log_likelihood(_tabular(m)) for m in model_class)
    best = max(scores)
    chosen = scores.index(best)
    return EstimationReport(chosen, scores, "log_likelihood", stats.n)


def mle_estimate(model_class: ModelClass, data) -> EstimationReport:
    """Maximum-likelihood density estimation from one or more trajectory batches."""
    batches = _as_batches(data)
    _check_compatible(model_class, batches)
    stats = SufficientStats(*model_class.dims)
    for b in batches:
        stats.add(b)
    return mle_from_stats(model_class, stats)


class RunningLikelihood:
    """Incrementally maintained per-model log-likelihoods for sequential refitting."""

    def __init__(self, model_class: ModelClass):
        self.model_class = model_class
        models = [_tabular(m) for m in model_class]
        # per-model log tables, stacked along the first axis
        self._log_P = _log(np.stack([m.transitions for m in models]))
        bits = np.stack([m.reward_bit_probs() for m in models])
        self._log_R = _log(np.stack([1.0 - bits, bits], axis=-1))
        self.scores = np.zeros(len(model_class))
        self.n = 0

    def update(self, batch: TrajectoryBatch) -> None:
        H = batch.horizon
        for h in range(H):
            s, a = batch.states[:, h], batch.actions[:, h]
            self.scores += self._log_R[:, h, s, a, batch.reward_bits[:, h]].sum(axis=1)
            if h + 1 < H:
                self.scores += self._log_P[:, h, s, a, batch.states[:, h + 1]].sum(axis=1)
        self.n += len(batch)

    def estimate(self) -> EstimationReport:
        chosen = int(np.argmax(self.scores))
        return EstimationReport(chosen, tuple(float(x) for x in self.scores), "log_likelihood", self.n)


def _chain_sum(a: TabularMdp, b: TabularMdp, probs: np.ndarray, kind: str) -> float:
    """Sum over full observation sequences of a combined per-step kernel.

    ``kind="product"`` gives ``sum_z P_a(z) P_b(z)``; ``kind="sqrt"`` gives the
    Bhattacharyya coefficient ``sum_z sqrt(P_a(z) P_b(z))``. The observation
    (state, action, reward bit) at a layer determines the next layer's state,
    so both factors follow one chain and the sum is a forward recursion.
    """
    if a.dims != b.dims or a.start_state != b.start_state:
        raise ValueError("models are not dimension-compatible")
    if probs.shape != a.dims:
        raise ValueError("policy shape does not match models")
    comb = np.multiply if kind == "product" else (lambda x, y: np.sqrt(x * y))
    H, S, _ = a.dims
    ra, rb = a.reward_bit_probs(), b.reward_bit_probs()
    alpha = np.zeros(S)
    alpha[a.start_state] = 1.0
    for h in range(H):
        step = comb(probs[h], probs[h]) * (comb(ra[h], rb[h]) + comb(1.0 - ra[h], 1.0 - rb[h]))
        w = alpha[:, None] * step
        if h + 1 == H:
            return float(w.sum())
        alpha = np.einsum("sa,sat->t", w, comb(a.transitions[h], b.transitions[h]))
    raise AssertionError("unreachable")


def squared_norm(model, policy: Policy | np.ndarray) -> float:
    """``sum_z P^M(pi)(z)^2`` over full observation sequences."""
    m = _tabular(model)
    return _chain_sum(m, m, as_probs(policy), "product")


def hellinger_sq_exact(a, b, policy: Policy | np.ndarray) -> float:
    """Squared Hellinger distance ``sum_z (sqrt P_a - sqrt P_b)^2`` between trajectory laws."""
    bc = _chain_sum(_tabular(a), _tabular(b), as_probs(policy), "sqrt")
    return float(min(2.0, max(0.0, 2.0 - 2.0 * bc)))


def l2_sq_exact(a, b, policy: Policy | np.ndarray) -> float:
    """Squared L2 distance between trajectory laws."""
    probs = as_probs(policy)
    ta, tb = _tabular(a), _tabular(b)
    val = (_chain_sum(ta, ta, probs, "product") + _chain_sum(tb, tb, probs, "product")
           - 2.0 * _chain_sum(ta, tb, probs, "product"))
    return max(0.0, val)


def _policy_log_probs(probs: np.ndarray, batch: TrajectoryBatch) -> np.ndarray:
    lp = np.zeros(len(batch))
    for h in range(batch.horizon):
        lp += _log(probs[h, batch.states[:, h], batch.actions[:, h]])
    return lp


def lse_estimate(model_class: ModelClass, data) -> EstimationReport:
    """Least-squares density estimation for single-policy data.

    Minimises ``||P^M(pi)||^2 - (2/n) sum_i P^M(pi)(z_i)``, which equals the squared
    L2 distance to the empirical law up to a model-independent constant.
    """
    batches = _as_batches(data)
    _check_compatible(model_class, batches)
    probs = batches[0].policy.probs
    for b in batches[1:]:
        if not np.array_equal(b.policy.probs, probs):
            raise ValueError("least-squares oracle requires data from a single policy")
    n = sum(len(b) for b in batches)
    pol_lp = [_policy_log_probs(probs, b) for b in batches]
    scores = []
    for model in model_class:
        m = _tabular(model)
        inner = sum(float(np.sum(np.exp(episode_log_likelihoods(m, b) + lp))) for b, lp in zip(batches, pol_lp))
        scores.append(_chain_sum(m, m, probs, "product") - 2.0 * inner / n)
    chosen = int(np.argmin(scores))
    return EstimationReport(chosen, tuple(scores), "squared_loss", n)


def perturbed_class(truth: TabularMdp, size: int, perturbation: float, rng: np.random.Generator,
                    realizable: bool = True) -> ModelClass:
    """Truth plus ``size - 1`` perturbations at a random position in the list.

    Each perturbed transition row is ``(1 - rho) * P + rho * q`` with ``q`` a fresh
    Dirichlet row; rewards are mixed the same way with uniform draws in [0, 1/H].
    """
    H, S, A = truth.dims
    models = []
    for _ in range(size - 1 if realizable else size):
        q = rng.dirichlet(np.ones(S), size=(H, S, A))
        u = rng.uniform(0.0, 1.0 / H, size=(H, S, A))
        P = (1 - perturbation) * truth.transitions + perturbation * q
        r = (1 - perturbation) * truth.mean_rewards + perturbation * u
        models.append(TabularMdp.normalized(P, r, truth.start_state))
    index = None
    if realizable:
        index = int(rng.integers(size))
        models.insert(index, truth)
    return ModelClass(tuple(models), index)
