"""Exact and heuristic TSP oracles, and the optimality gap."""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import InvalidOracleValue, InvalidScale, TooLarge
from .tsp_core import (
    Instance,
    as_rng,
    canonical_tour,
    distance_matrix,
    tour_length,
)

BRUTE_FORCE_MAX_N = 10
HELD_KARP_MAX_N = 18
DEFAULT_EXACT_THRESHOLD = 18
DEFAULT_RESTARTS = 10

# cap on B * 2^(n-1) * (n-1) cells held at once by the batched DP
_DP_CELL_BUDGET = 1 << 23


@dataclass(frozen=True)
class OracleResult:
    length: float
    tour: np.ndarray
    exact: bool


def _result(points: np.ndarray, tour, exact: bool) -> OracleResult:
    order = canonical_tour(tour)
    return OracleResult(tour_length(points, order), order, exact)


def brute_force(inst: Instance) -> OracleResult:
    """Exhaustive search over the (n-1)!/2 distinct cycles through city 0."""
    n = inst.n
    if n > BRUTE_FORCE_MAX_N:
        raise TooLarge(f"brute force supports n <= {BRUTE_FORCE_MAX_N}, got {n}")
    d = distance_matrix(inst.points)
    perms = np.array(list(itertools.permutations(range(1, n))), dtype=np.int64)
    # each cycle appears twice (once per direction); keep one orientation
    perms = perms[perms[:, 0] < perms[:, -1]]
    cost = d[0, perms[:, 0]] + d[perms[:, -1], 0]
    cost += d[perms[:, :-1], perms[:, 1:]].sum(axis=1)
    best = perms[int(np.argmin(cost))]
    return _result(inst.points, np.concatenate([[0], best]), exact=True)


@lru_cache(maxsize=None)
def _dp_layers(m: int):
    """Index tables for the subset DP over m non-start cities.

    For every popcount s >= 2 returns (mask, last, prev_mask) arrays that
    enumerate each (subset, end city) pair of that size.
    """
    popcount = np.array([bin(x).count("1") for x in range(1 << m)])
    layers = []
    for s in range(2, m + 1):
        masks = np.nonzero(popcount == s)[0]
        bits = (masks[:, None] >> np.arange(m)[None, :]) & 1
        mi, last = np.nonzero(bits)
        mask = masks[mi]
        layers.append((mask, last, mask ^ (1 << last)))
    return layers


def held_karp_batch(coords: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Optimal tour lengths and tours for a batch of equal-size instances.

    ``coords`` has shape (B, n, 2). Returns lengths (B,) and canonical tours
    (B, n). Ties between predecessors go to the lowest index.
    """
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim == 2:
        coords = coords[None]
    b, n, _ = coords.shape
    if n > HELD_KARP_MAX_N:
        raise TooLarge(f"Held-Karp supports n <= {HELD_KARP_MAX_N}, got {n}")
    if n < 3:
        raise InvalidScale(f"n must be >= 3, got {n}")
    m = n - 1
    chunk = max(1, _DP_CELL_BUDGET // ((1 << m) * m))
    if b > chunk:
        parts = [held_karp_batch(coords[i : i + chunk]) for i in range(0, b, chunk)]
        return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])

    d = distance_matrix(coords)
    sub = d[:, 1:, 1:]
    dp = np.full((b, 1 << m, m), np.inf)
    parent = np.full((b, 1 << m, m), -1, dtype=np.int8)
    singles = np.arange(m)
    dp[:, 1 << singles, singles] = d[:, 0, 1:]
    for mask, last, prev in _dp_layers(m):
        # cand[b, p, k] = dp[b, prev_p, k] + dist(k, last_p)
        cand = dp[:, prev, :] + np.swapaxes(sub[:, :, last], 1, 2)
        k = np.argmin(cand, axis=2)
        dp[:, mask, last] = np.take_along_axis(cand, k[:, :, None], axis=2)[:, :, 0]
        parent[:, mask, last] = k

    full = (1 << m) - 1
    closing = dp[:, full, :] + d[:, 1:, 0]
    ends = np.argmin(closing, axis=1)

    tours = np.empty((b, n), dtype=np.int64)
    lengths = np.empty(b)
    for i in range(b):
        mask, j = full, int(ends[i])
        path = []
        while mask:
            path.append(j + 1)
            k = int(parent[i, mask, j])
            mask ^= 1 << j
            j = k
        order = canonical_tour([0] + path[::-1])
        tours[i] = order
        lengths[i] = tour_length(coords[i], order)
    return lengths, tours


def held_karp(inst: Instance) -> OracleResult:
    """Exact optimum by dynamic programming over subsets (n <= 18)."""
    if inst.n > HELD_KARP_MAX_N:
        raise TooLarge(f"Held-Karp supports n <= {HELD_KARP_MAX_N}, got {inst.n}")
    lengths, tours = held_karp_batch(inst.points[None])
    return OracleResult(float(lengths[0]), tours[0], exact=True)


def nearest_neighbor_tour(d: np.ndarray, start: int) -> np.ndarray:
    n = d.shape[0]
    visited = np.zeros(n, dtype=bool)
    tour = [start]
    visited[start] = True
    cur = start
    for _ in range(n - 1):
        row = np.where(visited, np.inf, d[cur])
        cur = int(np.argmin(row))
        visited[cur] = True
        tour.append(cur)
    return np.array(tour, dtype=np.int64)


def two_opt(d: np.ndarray, tour: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """Best-improvement 2-opt until no exchange shortens the tour by more than ``tol``."""
    tour = tour.copy()
    n = tour.shape[0]
    iu, ju = np.triu_indices(n, k=2)
    # (0, n-1) shares the closing edge; reversing it is a no-op
    keep = ~((iu == 0) & (ju == n - 1))
    iu, ju = iu[keep], ju[keep]
    while True:
        a, b = tour[iu], tour[iu + 1]
        c, e = tour[ju], tour[(ju + 1) % n]
        delta = d[a, c] + d[b, e] - d[a, b] - d[c, e]
        best = int(np.argmin(delta))
        if delta[best] >= -tol:
            return tour
        i, j = iu[best], ju[best]
        tour[i + 1 : j + 1] = tour[i + 1 : j + 1][::-1].copy()


def is_two_opt_stable(points: np.ndarray, tour: np.ndarray, tol: float = 1e-9) -> bool:
    d = distance_matrix(np.asarray(points))
    n = len(tour)
    iu, ju = np.triu_indices(n, k=2)
    keep = ~((iu == 0) & (ju == n - 1))
    iu, ju = iu[keep], ju[keep]
    delta = (
        d[tour[iu], tour[ju]]
        + d[tour[iu + 1], tour[(ju + 1) % n]]
        - d[tour[iu], tour[iu + 1]]
        - d[tour[ju], tour[(ju + 1) % n]]
    )
    return bool(np.all(delta >= -tol))


def local_search_2opt(inst: Instance, restarts: int = DEFAULT_RESTARTS, rng=0) -> OracleResult:
    """Best of ``restarts`` nearest-neighbour tours, each polished by 2-opt."""
    if inst.n < 4:
        raise InvalidScale(f"2-opt needs n >= 4, got {inst.n}")
    if restarts < 1:
        raise InvalidScale("restarts must be positive")
    rng = as_rng(rng)
    n = inst.n
    d = distance_matrix(inst.points)
    starts = rng.permutation(n)[: min(restarts, n)]
    if restarts > n:
        starts = np.concatenate([starts, rng.integers(0, n, restarts - n)])
    best = None
    for s in starts:
        tour = canonical_tour(two_opt(d, nearest_neighbor_tour(d, int(s))))
        length = tour_length(inst.points, tour)
        if best is None or length < best.length:
            best = OracleResult(length, tour, exact=False)
    return best


def optimality_gap(solver_len: float, oracle_len: float) -> float:
    if not oracle_len > 0:
        raise InvalidOracleValue(f"oracle length must be positive, got {oracle_len}")
    return (solver_len - oracle_len) / oracle_len


def oracle_for(
    inst: Instance,
    threshold: int = DEFAULT_EXACT_THRESHOLD,
    restarts: int = DEFAULT_RESTARTS,
    rng=0,
) -> OracleResult:
    """Held-Karp up to ``threshold`` cities, 2-opt local search above it."""
    if inst.n <= min(threshold, HELD_KARP_MAX_N):
        return held_karp(inst)
    return local_search_2opt(inst, restarts, rng)


def oracle_lengths(
    coords: np.ndarray,
    threshold: int = DEFAULT_EXACT_THRESHOLD,
    restarts: int = DEFAULT_RESTARTS,
    rng=0,
) -> tuple[np.ndarray, bool]:
    """Batched ``oracle_for`` lengths for (B, n, 2) coordinates; also returns the exact flag."""
    coords = np.asarray(coords, dtype=np.float64)
    n = coords.shape[1]
    if n <= min(threshold, HELD_KARP_MAX_N):
        return held_karp_batch(coords)[0], True
    rng = as_rng(rng)
    lengths = np.array([local_search_2opt(Instance(c), restarts, rng).length for c in coords])
    return lengths, False
