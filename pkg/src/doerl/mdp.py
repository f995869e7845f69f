"""Finite-horizon tabular MDPs: simulation, dynamic programming and exact regret.

Layers are 0-indexed. ``transitions[h]`` moves the process from layer ``h`` to
layer ``h + 1``; the last layer's kernel is stored but never observed.

Observed rewards follow a scaled Bernoulli channel: at layer ``h`` the agent
sees ``1/H`` with probability ``H * r[h, s, a]`` and ``0`` otherwise, so every
trajectory's return lies in ``[0, 1]`` and its law is discrete.
"""
from __future__ import annotations

import hashlib
import itertools
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

SIMPLEX_TOL = 1e-12
TIE_TOL = 1e-12
MDP_SCHEMA = "doerl.tabular_mdp"
SCHEMA_VERSION = "1.0"


class InvariantError(ValueError):
    """A model or policy violates a named structural invariant."""

    def __init__(self, invariant: str, message: str):
        super().__init__(f"{invariant} invariant violated: {message}")
        self.invariant = invariant


def _readonly(x, dtype=float) -> np.ndarray:
    arr = np.array(x, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


def check_simplex_rows(x: np.ndarray, what: str, tol: float = SIMPLEX_TOL) -> None:
    """Raise InvariantError unless every row along the last axis is a distribution."""
    if not np.all(np.isfinite(x)):
        raise InvariantError("simplex", f"{what} has non-finite entries")
    if np.any(x < -tol) or np.any(x > 1 + tol):
        raise InvariantError("simplex", f"{what} has entries outside [0, 1]")
    sums = x.sum(axis=-1)
    worst = float(np.max(np.abs(sums - 1.0))) if sums.size else 0.0
    if worst > tol:
        idx = np.unravel_index(int(np.argmax(np.abs(sums - 1.0))), sums.shape)
        raise InvariantError("simplex", f"{what} row {tuple(int(i) for i in idx)} sums to {sums[idx]!r}")


@dataclass(frozen=True, eq=False)
class TabularMdp:
    """Ground-truth or hypothesised episodic environment.

    transitions: (H, S, A, S) kernel; mean_rewards: (H, S, A) in [0, 1/H].
    """

    transitions: np.ndarray
    mean_rewards: np.ndarray
    start_state: int = 0

    def __post_init__(self):
        P = _readonly(self.transitions)
        r = _readonly(self.mean_rewards)
        if P.ndim != 4 or P.shape[1] != P.shape[3]:
            raise ValueError(f"transitions must have shape (H, S, A, S), got {P.shape}")
        H, S, A, _ = P.shape
        if min(H, S, A) < 1:
            raise ValueError("horizon, states and actions must be positive")
        if r.shape != (H, S, A):
            raise ValueError(f"mean_rewards must have shape {(H, S, A)}, got {r.shape}")
        if not 0 <= int(self.start_state) < S:
            raise ValueError(f"start_state {self.start_state} outside [0, {S})")
        check_simplex_rows(P, "transitions")
        if not np.all(np.isfinite(r)) or np.any(r < -SIMPLEX_TOL) or np.any(r > 1.0 / H + SIMPLEX_TOL):
            raise InvariantError("reward-range", f"mean rewards must lie in [0, 1/H] = [0, {1.0 / H}]")
        r = _readonly(np.clip(r, 0.0, 1.0 / H))
        object.__setattr__(self, "transitions", P)
        object.__setattr__(self, "mean_rewards", r)
        object.__setattr__(self, "start_state", int(self.start_state))

    @classmethod
    def normalized(cls, transitions, mean_rewards, start_state: int = 0) -> "TabularMdp":
        """Build from unnormalised nonnegative weights; rows are rescaled to sum to one."""
        P = np.asarray(transitions, dtype=float)
        if np.any(P < 0):
            raise InvariantError("simplex", "negative transition weight")
        sums = P.sum(axis=-1, keepdims=True)
        if np.any(sums <= 0):
            raise InvariantError("simplex", "transition row with zero total weight")
        return cls(P / sums, mean_rewards, start_state)

    @property
    def horizon(self) -> int:
        return self.transitions.shape[0]

    @property
    def num_states(self) -> int:
        return self.transitions.shape[1]

    @property
    def num_actions(self) -> int:
        return self.transitions.shape[2]

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.horizon, self.num_states, self.num_actions

    def reward_bit_probs(self) -> np.ndarray:
        """Probability of observing the nonzero reward, ``H * r``."""
        return np.clip(self.horizon * self.mean_rewards, 0.0, 1.0)


@dataclass(frozen=True, eq=False)
class Policy:
    """Randomised non-stationary policy; ``probs[h, s]`` is a distribution over actions."""

    probs: np.ndarray

    def __post_init__(self):
        p = _readonly(self.probs)
        if p.ndim != 3:
            raise ValueError(f"policy probs must have shape (H, S, A), got {p.shape}")
        check_simplex_rows(p, "policy")
        object.__setattr__(self, "probs", p)

    @classmethod
    def uniform(cls, horizon: int, num_states: int, num_actions: int) -> "Policy":
        return cls(np.full((horizon, num_states, num_actions), 1.0 / num_actions))

    @classmethod
    def deterministic(cls, actions, num_actions: int) -> "Policy":
        actions = np.asarray(actions, dtype=int)
        probs = np.zeros(actions.shape + (num_actions,))
        np.put_along_axis(probs, actions[..., None], 1.0, axis=-1)
        return cls(probs)

    @classmethod
    def random(cls, horizon: int, num_states: int, num_actions: int, rng: np.random.Generator,
               concentration: float = 1.0) -> "Policy":
        return cls(rng.dirichlet(np.full(num_actions, concentration), size=(horizon, num_states)))

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.probs.shape  # type: ignore[return-value]

    @property
    def policy_id(self) -> str:
        return hashlib.sha1(np.ascontiguousarray(self.probs).tobytes()).hexdigest()[:16]

    def is_deterministic(self) -> bool:
        return bool(np.all((self.probs == 0.0) | (self.probs == 1.0)))


def as_probs(policy: Policy | np.ndarray) -> np.ndarray:
    return policy.probs if isinstance(policy, Policy) else np.asarray(policy, dtype=float)


def _check_dims(mdp: TabularMdp, probs: np.ndarray) -> None:
    if probs.shape != mdp.dims:
        raise ValueError(f"policy shape {probs.shape} does not match MDP dims {mdp.dims}")


@dataclass(frozen=True, eq=False)
class Trajectory:
    """One episode: per-layer state, action and observed reward (0 or 1/H)."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    policy_id: str = ""

    @property
    def steps(self) -> list[tuple[int, int, float]]:
        return [(int(s), int(a), float(r)) for s, a, r in zip(self.states, self.actions, self.rewards)]

    def __len__(self) -> int:
        return len(self.states)


@dataclass(frozen=True, eq=False)
class TrajectoryBatch:
    """Episodes collected under one policy, stored column-wise.

    ``reward_bits`` holds 1 where the nonzero reward was observed.
    """

    states: np.ndarray
    actions: np.ndarray
    reward_bits: np.ndarray
    policy: Policy

    def __post_init__(self):
        for name in ("states", "actions", "reward_bits"):
            object.__setattr__(self, name, _readonly(getattr(self, name), dtype=np.int64))
        if not (self.states.shape == self.actions.shape == self.reward_bits.shape) or self.states.ndim != 2:
            raise ValueError("states, actions and reward_bits must share shape (n, H)")

    def __len__(self) -> int:
        return self.states.shape[0]

    @property
    def horizon(self) -> int:
        return self.states.shape[1]

    @property
    def rewards(self) -> np.ndarray:
        return self.reward_bits / self.horizon

    def trajectory(self, i: int) -> Trajectory:
        return Trajectory(self.states[i], self.actions[i], self.rewards[i], self.policy.policy_id)

    def __iter__(self) -> Iterator[Trajectory]:
        return (self.trajectory(i) for i in range(len(self)))

    @classmethod
    def from_trajectories(cls, trajectories: Sequence[Trajectory], policy: Policy) -> "TrajectoryBatch":
        if not trajectories:
            raise ValueError("no trajectories")
        H = policy.dims[0]
        for traj in trajectories:
            if len(traj) != H:
                raise ValueError(f"trajectory length {len(traj)} != horizon {H}")
            if traj.policy_id and traj.policy_id != policy.policy_id:
                raise ValueError("trajectory was generated by a different policy")
        bits = np.rint(np.array([t.rewards for t in trajectories]) * H)
        return cls(np.array([t.states for t in trajectories]),
                   np.array([t.actions for t in trajectories]), bits, policy)


def _inverse_cdf(rows: np.ndarray, u: np.ndarray) -> np.ndarray:
    cum = np.cumsum(rows, axis=-1)
    cum[:, -1] = 1.0
    return (u[:, None] >= cum).sum(axis=1)


def sample_batch(mdp: TabularMdp, policy: Policy, n: int, rng: np.random.Generator) -> TrajectoryBatch:
    """Roll out ``n`` independent episodes of ``policy`` in ``mdp``."""
    probs = as_probs(policy)
    _check_dims(mdp, probs)
    H = mdp.horizon
    states = np.empty((n, H), dtype=np.int64)
    actions = np.empty((n, H), dtype=np.int64)
    bits = np.empty((n, H), dtype=np.int64)
    bit_probs = mdp.reward_bit_probs()
    s = np.full(n, mdp.start_state, dtype=np.int64)
    for h in range(H):
        states[:, h] = s
        a = _inverse_cdf(probs[h, s], rng.random(n))
        actions[:, h] = a
        bits[:, h] = rng.random(n) < bit_probs[h, s, a]
        if h + 1 < H:
            s = _inverse_cdf(mdp.transitions[h, s, a], rng.random(n))
    pol = policy if isinstance(policy, Policy) else Policy(probs)
    return TrajectoryBatch(states, actions, bits, pol)


def sample_trajectory(mdp: TabularMdp, policy: Policy, rng: np.random.Generator) -> Trajectory:
    return sample_batch(mdp, policy, 1, rng).trajectory(0)


def occupancy_forward(mdp: TabularMdp, policy: Policy | np.ndarray) -> np.ndarray:
    """State-action occupancy ``d[h, s, a]``; each layer sums to one."""
    probs = as_probs(policy)
    _check_dims(mdp, probs)
    H, S, A = mdp.dims
    d = np.zeros((H, S, A))
    state = np.zeros(S)
    state[mdp.start_state] = 1.0
    for h in range(H):
        d[h] = state[:, None] * probs[h]
        if h + 1 < H:
            state = np.einsum("sa,sat->t", d[h], mdp.transitions[h])
    return d


def value_backward(mdp: TabularMdp, policy: Policy | np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """Policy evaluation. Returns (value at the start state, Q (H,S,A), V (H+1,S))."""
    probs = as_probs(policy)
    _check_dims(mdp, probs)
    H, S, A = mdp.dims
    Q = np.zeros((H, S, A))
    V = np.zeros((H + 1, S))
    for h in range(H - 1, -1, -1):
        Q[h] = mdp.mean_rewards[h] + mdp.transitions[h] @ V[h + 1]
        V[h] = np.sum(probs[h] * Q[h], axis=1)
    return float(V[0, mdp.start_state]), Q, V


def greedy_actions(Q: np.ndarray, tol: float = TIE_TOL) -> np.ndarray:
    """Row-wise argmax with ties (within ``tol``) broken toward the lowest action."""
    best = Q.max(axis=-1, keepdims=True)
    return np.argmax(Q >= best - tol, axis=-1)


def optimal_q(mdp: TabularMdp) -> tuple[np.ndarray, np.ndarray]:
    """Backward induction; returns (Q*, greedy actions (H, S))."""
    H, S, A = mdp.dims
    Q = np.zeros((H, S, A))
    actions = np.zeros((H, S), dtype=int)
    v_next = np.zeros(S)
    for h in range(H - 1, -1, -1):
        Q[h] = mdp.mean_rewards[h] + mdp.transitions[h] @ v_next
        actions[h] = greedy_actions(Q[h])
        v_next = Q[h][np.arange(S), actions[h]]
    return Q, actions


def optimal_policy_plan(mdp: TabularMdp) -> tuple[Policy, float]:
    """Deterministic optimal policy by backward induction and its value."""
    Q, actions = optimal_q(mdp)
    s0 = mdp.start_state
    return Policy.deterministic(actions, mdp.num_actions), float(Q[0, s0, actions[0, s0]])


def optimal_value(mdp: TabularMdp) -> float:
    return optimal_policy_plan(mdp)[1]


def regret_of_policy(truth: TabularMdp, policy: Policy | np.ndarray) -> float:
    """Exact ``V* - V(pi)`` under the ground-truth model."""
    return optimal_value(truth) - value_backward(truth, policy)[0]


def enumerate_trajectories(mdp: TabularMdp, policy: Policy | np.ndarray, cap: int = 10**6):
    """All positive-probability state/action skeletons with their probabilities.

    A skeleton is ``(states, actions)`` with ``H + 1`` states (the final entry is
    the state reached through the last layer's kernel) and ``H`` actions.
    Intended as a brute-force oracle for tiny instances.
    """
    probs = as_probs(policy)
    _check_dims(mdp, probs)
    H, S, A = mdp.dims
    if (S * A) ** H > cap:
        raise ValueError(f"(S*A)^H = {(S * A) ** H} exceeds enumeration cap {cap}")
    out = []
    for actions in itertools.product(range(A), repeat=H):
        for tail in itertools.product(range(S), repeat=H):
            states = (mdp.start_state,) + tail
            p = 1.0
            for h in range(H):
                p *= probs[h, states[h], actions[h]] * mdp.transitions[h, states[h], actions[h], states[h + 1]]
                if p == 0.0:
                    break
            if p > 0.0:
                out.append(((states, actions), p))
    return out


def random_mdp(num_states: int, num_actions: int, horizon: int, rng: np.random.Generator,
               start_state: int = 0, concentration: float = 1.0) -> TabularMdp:
    """Dirichlet transition rows and uniform mean rewards in [0, 1/H]."""
    P = rng.dirichlet(np.full(num_states, concentration), size=(horizon, num_states, num_actions))
    r = rng.uniform(0.0, 1.0 / horizon, size=(horizon, num_states, num_actions))
    return TabularMdp(P, r, start_state)


def mdp_to_dict(mdp: TabularMdp) -> dict:
    H, S, A = mdp.dims
    return {
        "schema": MDP_SCHEMA,
        "version": SCHEMA_VERSION,
        "horizon": H,
        "num_states": S,
        "num_actions": A,
        "start_state": mdp.start_state,
        "transitions": mdp.transitions.tolist(),
        "mean_rewards": mdp.mean_rewards.tolist(),
    }


def check_schema_version(doc: dict, schema: str) -> None:
    if doc.get("schema") != schema:
        raise ValueError(f"expected schema {schema!r}, got {doc.get('schema')!r}")
    major = str(doc.get("version", "")).split(".")[0]
    if major != SCHEMA_VERSION.split(".")[0]:
        raise ValueError(f"unsupported {schema} version {doc.get('version')!r}")


def mdp_from_dict(doc: dict) -> TabularMdp:
    check_schema_version(doc, MDP_SCHEMA)
    mdp = TabularMdp(np.array(doc["transitions"], dtype=float), np.array(doc["mean_rewards"], dtype=float),
                     int(doc["start_state"]))
    if mdp.dims != (doc["horizon"], doc["num_states"], doc["num_actions"]):
        raise ValueError("declared dimensions do not match tensor shapes")
    return mdp


def save_mdp(mdp: TabularMdp, path: str | Path) -> None:
    Path(path).write_text(json.dumps(mdp_to_dict(mdp)) + "\n")


def load_mdp(path: str | Path) -> TabularMdp:
    return mdp_from_dict(json.loads(Path(path).read_text()))
