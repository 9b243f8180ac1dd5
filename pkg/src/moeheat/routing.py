"""Token-to-expert routing.

Training uses a balanced assignment: every expert takes ``T // E`` tokens, and
the first ``T % E`` experts take one more. Inference routes each token to its
argmax expert. ``brute_force_assign`` enumerates every balanced assignment and
exists as a test oracle.

Ties among optimal balanced assignments are broken toward the lexicographically
smallest ``expert_of`` vector, so routing is reproducible bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.optimize import linear_sum_assignment

# Relative slack under which two routing totals (or a reduced cost and zero) count as equal.
TIE_TOL = 1e-9
BRUTE_FORCE_MAX_TOKENS = 10


class RoutingCapacityError(ValueError):
    """Instance too large for exhaustive enumeration."""


class NonFiniteScoresError(ValueError):
    """Affinity matrix contains NaN or infinity."""


@dataclass(frozen=True)
class Assignment:
    expert_of: np.ndarray
    loads: np.ndarray

    @property
    def num_experts(self) -> int:
        return len(self.loads)

    def total(self, scores) -> float:
        return assignment_score(scores, self.expert_of)


def _check_scores(scores) -> np.ndarray:
    a = np.asarray(scores, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
        raise ValueError(f"affinity matrix must be 2-d and non-empty, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NonFiniteScoresError("affinity matrix has non-finite entries")
    return a


def capacities(num_tokens: int, num_experts: int) -> np.ndarray:
    base, extra = divmod(num_tokens, num_experts)
    caps = np.full(num_experts, base, dtype=np.int64)
    caps[:extra] += 1
    return caps


def load_histogram(expert_of, num_experts: int) -> np.ndarray:
    idx = np.asarray(expert_of, dtype=np.int64).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= num_experts):
        raise IndexError(f"expert index out of range [0, {num_experts})")
    return np.bincount(idx, minlength=num_experts).astype(np.int64)


def assignment_score(scores, expert_of) -> float:
    """Exactly rounded total of the chosen entries; equal real totals give equal floats."""
    a = np.asarray(scores, dtype=np.float64)
    idx = np.asarray(expert_of, dtype=np.int64)
    return math.fsum(a[np.arange(len(idx)), idx].tolist())


def _make(expert_of, num_experts) -> Assignment:
    expert_of = np.asarray(expert_of, dtype=np.int64)
    return Assignment(expert_of, load_histogram(expert_of, num_experts))


def greedy_assign(scores) -> Assignment:
    a = _check_scores(scores)
    # argmax returns the first maximum, i.e. the lowest expert index on ties.
    return _make(np.argmax(a, axis=1), a.shape[1])


def _expert_duals(a: np.ndarray, expert_of: np.ndarray) -> np.ndarray:
    """Optimal dual prices for the experts, given an optimal assignment.

    Complementary slackness requires ``v[a] - v[j] <= s[t, a] - s[t, j]`` for
    every token ``t`` routed to ``a``. These are difference constraints over
    the E experts, solved by Bellman-Ford from a virtual source.
    """
    E = a.shape[1]
    w = np.full((E, E), np.inf)
    for j in range(E):
        rows = a[expert_of == j]
        if len(rows):
            # w[i, j]: bound on v[j] - v[i]
            w[:, j] = np.min(rows[:, [j]] - rows, axis=0)
    np.fill_diagonal(w, np.inf)
    v = np.zeros(E)
    for _ in range(E):
        cand = np.min(v[:, None] + w, axis=0)
        nv = np.minimum(v, cand)
        if np.array_equal(nv, v):
            break
        v = nv
    return v


def _solve(a: np.ndarray, caps: np.ndarray) -> np.ndarray:
    slot_expert = np.repeat(np.arange(a.shape[1]), caps)
    rows, cols = linear_sum_assignment(a[:, slot_expert], maximize=True)
    out = np.empty(a.shape[0], dtype=np.int64)
    out[rows] = slot_expert[cols]
    return out


def _lexicographic_min(a: np.ndarray, tight: np.ndarray, expert_of: np.ndarray, caps: np.ndarray) -> np.ndarray:
    """Smallest ``expert_of`` (lexicographically) among optimal assignments.

    Tokens are fixed in order. Token ``t`` is offered each lower expert on a
    tight edge (reduced cost ~ 0, the only places another optimum can differ);
    the offer stands if re-solving the remaining tokens with ``t`` pinned
    there keeps the exactly rounded total.
    """
    cur = expert_of.copy()
    best = assignment_score(a, cur)
    left = caps.copy()
    for t in range(len(cur)):
        for j in np.flatnonzero(tight[t, : cur[t]]):
            if left[j] == 0:
                continue
            rest_caps = left.copy()
            rest_caps[j] -= 1
            trial = cur.copy()
            trial[t] = j
            trial[t + 1:] = _solve(a[t + 1:], rest_caps)
            score = assignment_score(a, trial)
            if score >= best:
                cur, best = trial, score
                break
        left[cur[t]] -= 1
    return cur


def balanced_assign(scores) -> Assignment:
    """Maximum-total balanced assignment (Hungarian method on an expanded matrix)."""
    a = _check_scores(scores)
    T, E = a.shape
    caps = capacities(T, E)
    expert_of = _solve(a, caps)

    if E > 1:
        v = _expert_duals(a, expert_of)
        u = a[np.arange(T), expert_of] - v[expert_of]
        reduced = u[:, None] + v[None, :] - a
        scale = 1.0 + np.abs(a).max()
        tight = reduced <= TIE_TOL * scale
        tight[np.arange(T), expert_of] = True
        expert_of = _lexicographic_min(a, tight, expert_of, caps)
    return _make(expert_of, E)


@lru_cache(maxsize=64)
def _balanced_candidates(T: int, E: int) -> np.ndarray:
    """All capacity-respecting assignments, in lexicographic order."""
    caps = capacities(T, E)
    out = []

    def rec(prefix, left):
        if len(prefix) == T:
            out.append(tuple(prefix))
            return
        for j in range(E):
            if left[j]:
                left[j] -= 1
                prefix.append(j)
                rec(prefix, left)
                prefix.pop()
                left[j] += 1

    rec([], list(caps))
    arr = np.array(out, dtype=np.int64).reshape(len(out), T)
    arr.flags.writeable = False
    return arr


def brute_force_assign(scores) -> Assignment:
    a = _check_scores(scores)
    T, E = a.shape
    if T > BRUTE_FORCE_MAX_TOKENS:
        raise RoutingCapacityError(
            f"brute force limited to {BRUTE_FORCE_MAX_TOKENS} tokens, got {T}"
        )
    cand = _balanced_candidates(T, E)
    totals = a[np.arange(T), cand].sum(axis=1)
    # Re-score the near-best candidates exactly; ties are equal exactly rounded totals.
    near = np.flatnonzero(totals >= totals.max() - TIE_TOL * (1.0 + np.abs(a).max()))
    exact = [assignment_score(a, cand[i]) for i in near]
    best = max(exact)
    first = int(near[exact.index(best)])
    return _make(cand[first], E)


def enumerate_balanced(T: int, E: int):
    """Iterate over every capacity-respecting assignment (lexicographic order)."""
    return iter(map(tuple, _balanced_candidates(T, E)))


__all__ = [
    "Assignment",
    "RoutingCapacityError",
    "NonFiniteScoresError",
    "assignment_score",
    "balanced_assign",
    "brute_force_assign",
    "capacities",
    "enumerate_balanced",
    "greedy_assign",
    "load_histogram",
]
