"""Brute-force reference computations for tiny instances.

Everything here enumerates explicitly and shares no code with the package
beyond reading model arrays, so it can serve as an independent check.
"""
from __future__ import annotations

import itertools
import math

import numpy as np


def observation_law(P, r, start, probs) -> dict:
    """Law of full observation sequences ``(states, actions, reward bits)`` by explicit enumeration."""
    H, S, A, _ = P.shape
    law = {}
    for states_tail in itertools.product(range(S), repeat=H - 1):
        states = (start,) + states_tail
        for actions in itertools.product(range(A), repeat=H):
            for bits in itertools.product((0, 1), repeat=H):
                p = 1.0
                for h in range(H):
                    s, a = states[h], actions[h]
                    q = H * r[h, s, a]
                    p *= probs[h, s, a] * (q if bits[h] else 1.0 - q)
                    if h + 1 < H:
                        p *= P[h, s, a, states[h + 1]]
                if p > 0:
                    law[(states, actions, bits)] = p
    return law


def law_of(mdp, probs) -> dict:
    return observation_law(np.asarray(mdp.transitions), np.asarray(mdp.mean_rewards), mdp.start_state,
                           np.asarray(probs))


def hellinger_sq(p: dict, q: dict) -> float:
    keys = set(p) | set(q)
    return sum((math.sqrt(p.get(k, 0.0)) - math.sqrt(q.get(k, 0.0))) ** 2 for k in keys)


def l2_sq(p: dict, q: dict) -> float:
    keys = set(p) | set(q)
    return sum((p.get(k, 0.0) - q.get(k, 0.0)) ** 2 for k in keys)


def tv(p: dict, q: dict) -> float:
    keys = set(p) | set(q)
    return 0.5 * sum(abs(p.get(k, 0.0) - q.get(k, 0.0)) for k in keys)


def state_marginal(law: dict, h: int, S: int) -> np.ndarray:
    out = np.zeros(S)
    for (states, _, _), p in law.items():
        out[states[h]] += p
    return out


def state_action_marginals(law: dict, H: int, S: int, A: int) -> np.ndarray:
    d = np.zeros((H, S, A))
    for (states, actions, _), p in law.items():
        for h in range(H):
            d[h, states[h], actions[h]] += p
    return d


def best_deterministic_value(P, r, start) -> float:
    """Maximum value over all deterministic Markov policies, by enumeration."""
    H, S, A, _ = P.shape
    best = -math.inf
    for flat in itertools.product(range(A), repeat=H * S):
        acts = np.array(flat).reshape(H, S)
        v = np.zeros(S)
        for h in range(H - 1, -1, -1):
            q = r[h] + P[h] @ v
            v = q[np.arange(S), acts[h]]
        best = max(best, v[start])
    return best


def deterministic_policies(H: int, S: int, A: int):
    for flat in itertools.product(range(A), repeat=H * S):
        probs = np.zeros((H, S, A))
        acts = np.array(flat).reshape(H, S)
        for h in range(H):
            probs[h, np.arange(S), acts[h]] = 1.0
        yield probs


def path_trusted_occupancy(P_hat, gates, start, probs, upto: int) -> np.ndarray:
    """Trusted occupancy by summing over explicit paths that use only trusted triples."""
    _, S, A = probs.shape
    d = np.zeros((upto + 1, S, A))
    for j in range(upto + 1):
        for states_tail in itertools.product(range(S), repeat=j):
            states = (start,) + states_tail
            for actions in itertools.product(range(A), repeat=j + 1):
                p = 1.0
                for k in range(j):
                    s, a, s2 = states[k], actions[k], states[k + 1]
                    if not gates[k][s, a, s2]:
                        p = 0.0
                        break
                    p *= probs[k, s, a] * P_hat[k][s, a, s2]
                if p == 0.0:
                    continue
                d[j, states[j], actions[j]] += p * probs[j, states[j], actions[j]]
    return d


def finite_difference_grad(fn, x: np.ndarray, step: float = 1e-6) -> np.ndarray:
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        up, dn = x.copy(), x.copy()
        up[idx] += step
        dn[idx] -= step
        g[idx] = (fn(up) - fn(dn)) / (2 * step)
    return g
