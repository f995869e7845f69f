"""Exploration-regularised policy optimisation.

Two objectives share one solver:

* log-barrier (tabular): ``V_prev(pi) + (1/eta) sum_{s,a} log(d~[h, s, a] + beta)``
* log-determinant (linear): ``V_prev(pi) + (1/eta) sum_{j<=h} log det(K~_j(pi) + beta I)``

``V_prev`` is the value of ``pi`` in the previous epoch's aggregated model.
Gradients are exact, obtained by a reverse sweep through the occupancy
recursions. The solver runs exponentiated-gradient ascent on the
per-(layer, state) action simplices.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .linear import TrustedStructureLinear, covariance
from .mdp import Policy, TabularMdp, as_probs, optimal_policy_plan, optimal_value, value_backward
from .trusted import TrustedStructure, flow_backward, flow_forward


@dataclass(frozen=True, eq=False)
class BarrierObjectiveSpec:
    prev_model: TabularMdp
    structure: TrustedStructure
    segment: int
    eta: float
    beta: float

    def __post_init__(self):
        _validate_spec(self)


@dataclass(frozen=True, eq=False)
class LogDetObjectiveSpec:
    prev_model: TabularMdp  # tabular view of the previous aggregated linear model
    structure: TrustedStructureLinear
    segment: int
    eta: float
    beta: float

    def __post_init__(self):
        _validate_spec(self)


def _validate_spec(spec) -> None:
    if not (spec.eta > 0 and spec.beta > 0):
        raise ValueError("eta and beta must be positive")
    if spec.prev_model.dims != spec.structure.dims:
        raise ValueError("previous model and trusted structure disagree on dimensions")
    if not 0 <= spec.segment < spec.structure.horizon:
        raise ValueError("segment outside horizon")


@dataclass(frozen=True)
class SolverConfig:
    max_iters: int = 500
    restarts: int = 8
    stationarity_tol: float = 1e-7
    seed: int = 0
    initial_step: float = 1.0

    def __post_init__(self):
        if self.max_iters < 1 or self.restarts < 0 or not self.stationarity_tol > 0 or not self.initial_step > 0:
            raise ValueError("solver settings must be positive")


@dataclass
class SolverDiagnostics:
    winner: str
    iterations: int
    stationarity: float
    converged: bool
    evaluations: int
    candidates: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def _value_and_grad(model: TabularMdp, probs: np.ndarray) -> tuple[float, np.ndarray]:
    H = model.horizon
    start = np.zeros(model.num_states)
    start[model.start_state] = 1.0
    kernels = [model.transitions[j] for j in range(H - 1)]
    masses, d = flow_forward(start, kernels, probs, H - 1)
    value = float(np.sum(d * model.mean_rewards))
    return value, flow_backward(kernels, probs, masses, model.mean_rewards)


def barrier_value_grad(spec: BarrierObjectiveSpec, policy: Policy | np.ndarray) -> tuple[float, np.ndarray]:
    probs = as_probs(policy)
    if probs.shape != spec.prev_model.dims:
        raise ValueError("policy does not match the objective's dimensions")
    h = spec.segment
    value, grad = _value_and_grad(spec.prev_model, probs)
    kernels = spec.structure.gated_kernels(h)
    masses, d = flow_forward(spec.structure.start_distribution(), kernels, probs, h)
    shifted = d[h] + spec.beta
    value += float(np.sum(np.log(shifted))) / spec.eta
    weights = np.zeros_like(d)
    weights[h] = 1.0 / (spec.eta * shifted)
    return value, grad + flow_backward(kernels, probs, masses, weights)


def _logdet_and_weights(features: np.ndarray, occ: np.ndarray, beta: float) -> tuple[float, np.ndarray]:
    """``log det(K + beta I)`` and its gradient ``phi^T (K + beta I)^{-1} phi`` per (s, a)."""
    dim = features.shape[-1]
    K = covariance(features, occ)
    L = np.linalg.cholesky(0.5 * (K + K.T) + beta * np.eye(dim))
    Phi = features.reshape(-1, dim)
    X = np.linalg.solve(L, Phi.T)
    return 2.0 * float(np.sum(np.log(np.diag(L)))), np.sum(X * X, axis=0).reshape(occ.shape)


def logdet_value_grad(spec: LogDetObjectiveSpec, policy: Policy | np.ndarray) -> tuple[float, np.ndarray]:
    probs = as_probs(policy)
    if probs.shape != spec.prev_model.dims:
        raise ValueError("policy does not match the objective's dimensions")
    h = spec.segment
    value, grad = _value_and_grad(spec.prev_model, probs)
    kernels = spec.structure.gated_kernels(h)
    masses, d = flow_forward(spec.structure.start_distribution(), kernels, probs, h)
    weights = np.zeros_like(d)
    for j in range(h + 1):
        ld, w = _logdet_and_weights(spec.structure.features[j], d[j], spec.beta)
        value += ld / spec.eta
        weights[j] = w / spec.eta
    return value, grad + flow_backward(kernels, probs, masses, weights)


def logdet_terms(spec: LogDetObjectiveSpec, policy: Policy | np.ndarray) -> list[np.ndarray]:
    """Trusted covariances ``K~_j(pi)`` for ``j = 0..h``."""
    probs = as_probs(policy)
    h = spec.segment
    _, d = flow_forward(spec.structure.start_distribution(), spec.structure.gated_kernels(h), probs, h)
    return [covariance(spec.structure.features[j], d[j]) for j in range(h + 1)]


def stationarity(probs: np.ndarray, grad: np.ndarray, free_layers: int) -> float:
    """Frank-Wolfe gap over the free layers, relative to ``max(1, |grad|_inf)``."""
    g = grad[:free_layers]
    gap = float(np.sum(g.max(axis=2) - np.sum(probs[:free_layers] * g, axis=2)))
    return gap / max(1.0, float(np.max(np.abs(g))))


def _ascend(fn, probs: np.ndarray, free: int, config: SolverConfig) -> tuple[np.ndarray, float, int, float, int]:
    """Exponentiated-gradient ascent with a backtracking step; never decreases the objective."""
    value, grad = fn(probs)
    evals = 1
    step = config.initial_step
    it = 0
    gap = stationarity(probs, grad, free)
    while it < config.max_iters and gap > config.stationarity_tol:
        it += 1
        g = grad[:free]
        scale = max(1e-300, float(np.max(np.abs(g))))
        accepted = False
        while step * scale > 1e-14:
            logits = np.log(np.maximum(probs[:free], 1e-300)) + step * (g - g.max(axis=2, keepdims=True))
            new_free = np.exp(logits - logits.max(axis=2, keepdims=True))
            new_free /= new_free.sum(axis=2, keepdims=True)
            cand = probs.copy()
            cand[:free] = new_free
            new_value, new_grad = fn(cand)
            evals += 1
            if new_value >= value:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        probs, value, grad = cand, new_value, new_grad
        gap = stationarity(probs, grad, free)
        step *= 1.5
    return probs, value, it, gap, evals


def _optimize(fn, prev_model: TabularMdp, segment: int, config: SolverConfig):
    H, S, A = prev_model.dims
    free = segment + 1
    greedy = optimal_policy_plan(prev_model)[0].probs
    uniform = np.full((H, S, A), 1.0 / A)
    rng = np.random.default_rng(config.seed)

    def completed(head: np.ndarray) -> np.ndarray:
        out = greedy.copy()
        out[:free] = head[:free]
        return out

    starts = [("uniform", completed(uniform)), ("smoothed-greedy", completed(0.9 * greedy + 0.1 / A))]
    for k in range(config.restarts):
        starts.append((f"restart-{k}", completed(rng.dirichlet(np.ones(A), size=(H, S)))))

    best = None
    total_evals = 0
    candidates = {}
    for name, probs in [("exact-uniform", uniform), ("exact-greedy", greedy)]:
        value = fn(probs)[0]
        total_evals += 1
        candidates[name] = value
        if best is None or value > best[1]:
            best = (probs, value, name, 0, math.nan)
    for name, start in starts:
        probs, value, it, gap, evals = _ascend(fn, start, free, config)
        total_evals += evals
        candidates[name] = value
        if value > best[1]:
            best = (probs, value, name, it, gap)
    probs, value, name, it, gap = best
    if math.isnan(gap):
        gap = stationarity(probs, fn(probs)[1], free)
    diag = SolverDiagnostics(name, it, gap, gap <= config.stationarity_tol, total_evals, candidates)
    return Policy(probs), value, diag


def optimize_barrier(spec: BarrierObjectiveSpec, config: SolverConfig = SolverConfig()):
    """Maximise the log-barrier objective; returns (policy, objective value, diagnostics).

    Layers after the segment do not enter the barrier, so they are set to the
    greedy plan of the previous model, which is optimal for them exactly.
    """
    return _optimize(lambda p: barrier_value_grad(spec, p), spec.prev_model, spec.segment, config)


def optimize_logdet(spec: LogDetObjectiveSpec, config: SolverConfig = SolverConfig()):
    """Maximise the log-determinant objective; same conventions as ``optimize_barrier``."""
    return _optimize(lambda p: logdet_value_grad(spec, p), spec.prev_model, spec.segment, config)


def pseudo_regret(model: TabularMdp, policy: Policy | np.ndarray) -> float:
    """Optimality gap of ``policy`` inside ``model``."""
    return optimal_value(model) - value_backward(model, policy)[0]


def pseudo_regret_bound(S: int, A: int, eta: float, beta: float) -> float:
    """``(SA/eta) * log(1 + 1/(SA beta))``, met by any maximiser at least as good as the greedy plan."""
    return S * A / eta * math.log1p(1.0 / (S * A * beta))
