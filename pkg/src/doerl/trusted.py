"""Trusted transition sets and trusted occupancy measures for tabular MDPs.

Within an epoch, segment ``h`` produces an estimate of layer ``h``. Once that
estimate exists, the flow from layer ``h`` to ``h + 1`` is gated: a triple
``(s, a, s')`` is trusted when the executed policy's trusted occupancy times
the estimated transition probability reaches ``1 / zeta``. Occupancies pushed
only through trusted triples form a sub-probability measure.

``trusted_sets[j]`` is the ``(S, A, S)`` boolean gate for the flow from layer
``j`` to layer ``j + 1``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .mdp import Policy, TabularMdp, _readonly, as_probs, check_simplex_rows, occupancy_forward


@dataclass(frozen=True, eq=False)
class LayerEstimate:
    """Layer ``h`` of the model chosen by the estimation oracle after segment ``h``."""

    layer: int
    P_hat: np.ndarray  # (S, A, S)
    r_hat: np.ndarray  # (S, A)

    def __post_init__(self):
        P = _readonly(self.P_hat)
        r = _readonly(self.r_hat)
        if P.ndim != 3 or r.shape != P.shape[:2]:
            raise ValueError("layer estimate shapes must be (S, A, S) and (S, A)")
        check_simplex_rows(P, f"layer {self.layer} estimate")
        object.__setattr__(self, "P_hat", P)
        object.__setattr__(self, "r_hat", r)

    @classmethod
    def from_model(cls, model: TabularMdp, layer: int) -> "LayerEstimate":
        return cls(layer, model.transitions[layer], model.mean_rewards[layer])


@dataclass(frozen=True, eq=False)
class TrustedStructure:
    """Per-epoch layer estimates and trusted gates, grown causally one layer at a time."""

    horizon: int
    num_states: int
    num_actions: int
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
        object.__setattr__(self, "trusted_sets", tuple(_readonly(t, dtype=bool) for t in self.trusted_sets))

    @classmethod
    def empty(cls, horizon: int, num_states: int, num_actions: int, start_state: int, zeta: float,
              epoch: int = 1) -> "TrustedStructure":
        return cls(horizon, num_states, num_actions, start_state, float(zeta), epoch)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.horizon, self.num_states, self.num_actions

    def with_estimate(self, estimate: LayerEstimate) -> "TrustedStructure":
        return TrustedStructure(self.horizon, self.num_states, self.num_actions, self.start_state, self.zeta,
                                self.epoch, self.estimates + (estimate,), self.trusted_sets)

    def with_trusted_set(self, gate: np.ndarray) -> "TrustedStructure":
        return TrustedStructure(self.horizon, self.num_states, self.num_actions, self.start_state, self.zeta,
                                self.epoch, self.estimates, self.trusted_sets + (gate,))

    def start_distribution(self) -> np.ndarray:
        x = np.zeros(self.num_states)
        x[self.start_state] = 1.0
        return x

    def gated_kernels(self, upto: int, transitions: Sequence[np.ndarray] | None = None) -> list[np.ndarray]:
        """Kernels for the flows into layers ``1..upto`` with untrusted entries zeroed.

        ``transitions`` overrides the estimated kernels (used for the true
        observable occupancy).
        """
        if upto >= self.horizon:
            raise ValueError(f"layer {upto} outside horizon {self.horizon}")
        if len(self.trusted_sets) < upto:
            raise ValueError(f"trusted occupancy at layer {upto} needs trusted sets for layers 0..{upto - 1}")
        src = transitions if transitions is not None else [e.P_hat for e in self.estimates]
        return [np.where(self.trusted_sets[j], src[j], 0.0) for j in range(upto)]


def flow_forward(start: np.ndarray, kernels: Sequence[np.ndarray], probs: np.ndarray, upto: int):
    """Push state mass through ``kernels``; returns (state masses (upto+1, S), d (upto+1, S, A))."""
    S = start.shape[0]
    masses = np.zeros((upto + 1, S))
    d = np.zeros((upto + 1, S, probs.shape[2]))
    masses[0] = start
    for j in range(upto + 1):
        d[j] = masses[j][:, None] * probs[j]
        if j < upto:
            masses[j + 1] = np.einsum("sa,sat->t", d[j], kernels[j])
    return masses, d


def flow_backward(kernels: Sequence[np.ndarray], probs: np.ndarray, masses: np.ndarray,
                  weights: np.ndarray) -> np.ndarray:
    """Gradient with respect to ``probs`` of ``sum_j <weights[j], d[j]>`` for the flow above.

    Layers beyond ``len(weights) - 1`` get zero gradient.
    """
    upto = weights.shape[0] - 1
    grad = np.zeros_like(probs)
    u = np.zeros(probs.shape[1])  # adjoint of the state mass entering the layer above
    for j in range(upto, -1, -1):
        G = weights[j] + kernels[j] @ u if j < upto else weights[j]
        grad[j] = masses[j][:, None] * G
        u = np.sum(probs[j] * G, axis=1)
    return grad


def trusted_occupancy(structure: TrustedStructure, policy: Policy | np.ndarray, upto: int) -> np.ndarray:
    """Trusted occupancies ``d~[j, s, a]`` for layers ``0..upto``."""
    probs = as_probs(policy)
    _check(structure, probs)
    kernels = structure.gated_kernels(upto)
    return flow_forward(structure.start_distribution(), kernels, probs, upto)[1]


def true_observable_occupancy(truth: TabularMdp, structure: TrustedStructure, policy: Policy | np.ndarray,
                              upto: int | None = None) -> np.ndarray:
    """Same gated recursion as the trusted occupancy but with the true kernels."""
    probs = as_probs(policy)
    _check(structure, probs)
    if truth.dims != structure.dims:
        raise ValueError("truth is not dimension-compatible with the structure")
    upto = len(structure.trusted_sets) if upto is None else upto
    kernels = structure.gated_kernels(upto, truth.transitions)
    return flow_forward(structure.start_distribution(), kernels, probs, upto)[1]


def build_trusted_set(structure: TrustedStructure, executed_policy: Policy | np.ndarray, layer: int) -> np.ndarray:
    """Gate for the flow out of ``layer``: ``d~[layer, s, a] * P_hat[s, a, s'] >= 1 / zeta``."""
    if layer >= len(structure.estimates):
        raise ValueError(f"layer {layer} has no estimate yet")
    if layer + 1 >= structure.horizon:
        raise ValueError("the last layer has no outgoing trusted set")
    d = trusted_occupancy(structure, executed_policy, layer)[layer]
    flow = d[:, :, None] * structure.estimates[layer].P_hat
    return flow >= 1.0 / structure.zeta


def aggregate(structure: TrustedStructure) -> TabularMdp:
    """Stitch the per-layer estimates into one tabular model."""
    if len(structure.estimates) != structure.horizon:
        raise ValueError("aggregation needs an estimate for every layer")
    P = np.stack([e.P_hat for e in structure.estimates])
    r = np.stack([e.r_hat for e in structure.estimates])
    return TabularMdp(P, r, structure.start_state)


def estimated_occupancy(model: TabularMdp, policy: Policy | np.ndarray) -> np.ndarray:
    return occupancy_forward(model, policy)


def mixture_policy(structure: TrustedStructure, pi1: Policy | np.ndarray, pi2: Policy | np.ndarray,
                   lam: float, upto: int) -> Policy:
    """Policy whose trusted occupancies up to ``upto`` mix those of ``pi1`` and ``pi2``.

    Works because the gated kernels do not depend on the policy, so mixing the
    state masses layer by layer and renormalising reproduces the mixture.
    Layers after ``upto`` are copied from ``pi1``.
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda must lie in [0, 1]")
    p1, p2 = as_probs(pi1), as_probs(pi2)
    _check(structure, p1)
    _check(structure, p2)
    kernels = structure.gated_kernels(upto)
    start = structure.start_distribution()
    m1, _ = flow_forward(start, kernels, p1, upto)
    m2, _ = flow_forward(start, kernels, p2, upto)
    out = p1.copy()
    A = structure.num_actions
    for j in range(upto + 1):
        num = lam * m1[j][:, None] * p1[j] + (1 - lam) * m2[j][:, None] * p2[j]
        den = num.sum(axis=1, keepdims=True)
        safe = np.where(den > 0, den, 1.0)
        out[j] = np.where(den > 0, num / safe, 1.0 / A)
    out /= out.sum(axis=2, keepdims=True)
    return Policy(out)


def trusted_set_summary(structure: TrustedStructure, policy: Policy | np.ndarray) -> dict:
    """Sizes of the trusted sets and retained mass per layer, for run logs."""
    upto = len(structure.trusted_sets)
    upto = min(upto, structure.horizon - 1)
    d = trusted_occupancy(structure, policy, upto)
    return {"trusted_set_sizes": [int(t.sum()) for t in structure.trusted_sets],
            "retained_mass": [float(x) for x in d.sum(axis=(1, 2))]}


def _check(structure: TrustedStructure, probs: np.ndarray) -> None:
    if probs.shape != structure.dims:
        raise ValueError(f"policy shape {probs.shape} does not match structure dims {structure.dims}")
