"""Zero-sum meta-game over solver and generator populations.

Table entries are expected optimality gaps: the row player (solver selector)
minimizes them, the column player (data generator) maximizes them.
"""

from __future__ import annotations

import csv
import io
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateInstance, EmptyPopulation, InvalidExpansion, SolveError
from .oracle import oracle_lengths
from .solver import check_simplex
from .tsp_core import batch_tour_lengths

log = logging.getLogger(__name__)

DEFAULT_M = 200


class OracleSolver:
    """Stands in for a learned solver by returning oracle tours."""

    def __init__(self, threshold: int = 18):
        self.threshold = threshold

    def solve_batch(self, coords):
        from .oracle import held_karp_batch, local_search_2opt
        from .tsp_core import Instance

        coords = np.asarray(coords, dtype=np.float64)
        if coords.shape[1] <= self.threshold:
            return held_karp_batch(coords)[1]
        return np.stack([local_search_2opt(Instance(c)).tour for c in coords])


def cell_seed(master_seed: int, row: int, col: int) -> int:
    return int(np.random.SeedSequence([master_seed, row, col]).generate_state(1)[0])


def evaluate_cell(solver, generator, m: int, rng, threshold: int = 18, max_retries: int = 10):
    """Monte Carlo estimate of the expected gap of ``solver`` (greedy) on ``generator``.

    Returns (mean gap, standard error of the mean).
    """
    if m < 1:
        raise ValueError("M must be positive")
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    for attempt in range(max_retries):
        try:
            groups = generator.sample(m, rng)
            break
        except DegenerateInstance:
            log.warning("degenerate draw while evaluating a cell, retry %d", attempt + 1)
    else:
        raise DegenerateInstance("repeated degenerate draws")
    gaps = []
    for coords in groups.values():
        opt, _ = oracle_lengths(coords, threshold)
        lengths = batch_tour_lengths(coords, solver.solve_batch(coords))
        gaps.append((lengths - opt) / opt)
    gaps = np.concatenate(gaps)
    stderr = float(gaps.std(ddof=1) / np.sqrt(m)) if m > 1 else 0.0
    return float(gaps.mean()), stderr


@dataclass
class MetaGame:
    table: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    stderr: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    counts: np.ndarray = field(default_factory=lambda: np.zeros((0, 0), dtype=np.int64))
    seeds: np.ndarray = field(default_factory=lambda: np.zeros((0, 0), dtype=np.int64))
    evaluations: int = 0

    @property
    def shape(self):
        return self.table.shape

    def to_json_obj(self) -> dict:
        return {
            "table": self.table.tolist(),
            "stderr": self.stderr.tolist(),
            "counts": self.counts.tolist(),
            "seeds": self.seeds.tolist(),
        }

    @classmethod
    def from_json_obj(cls, obj) -> "MetaGame":
        def arr(key, dtype):
            a = np.array(obj[key], dtype=dtype)
            return a.reshape((0, 0)) if a.size == 0 else a

        return cls(arr("table", float), arr("stderr", float), arr("counts", np.int64), arr("seeds", np.int64))

    def to_csv(self, header: str | None = None) -> str:
        buf = io.StringIO()
        if header:
            buf.write(f"# {header}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["row_id", "col_id", "u", "stderr", "M", "seed"])
        r, c = self.table.shape
        for i in range(r):
            for j in range(c):
                w.writerow([i, j, repr(float(self.table[i, j])), repr(float(self.stderr[i, j])), int(self.counts[i, j]), int(self.seeds[i, j])])
        return buf.getvalue()


def fill_meta_table(solvers, generators, game: MetaGame | None, m: int, master_seed: int, threshold: int = 18, threads: int = 1) -> MetaGame:
    """Evaluate only the cells missing from ``game`` after the populations grew.

    Each cell uses its own seed derived from (master_seed, row, col), so the
    result does not depend on ``threads``.
    """
    game = game if game is not None else MetaGame()
    r0, c0 = game.table.shape
    r, c = len(solvers), len(generators)
    if r < r0 or c < c0:
        raise InvalidExpansion(f"table cannot shrink from {(r0, c0)} to {(r, c)}")
    table = np.full((r, c), np.nan)
    stderr = np.full((r, c), np.nan)
    counts = np.zeros((r, c), dtype=np.int64)
    seeds = np.zeros((r, c), dtype=np.int64)
    table[:r0, :c0] = game.table
    stderr[:r0, :c0] = game.stderr
    counts[:r0, :c0] = game.counts
    seeds[:r0, :c0] = game.seeds
    todo = [(i, j) for i in range(r) for j in range(c) if i >= r0 or j >= c0]

    def run(cell):
        i, j = cell
        s = cell_seed(master_seed, i, j)
        return cell, s, evaluate_cell(solvers[i], generators[j], m, np.random.default_rng(s), threshold)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, todo))
    else:
        results = [run(cell) for cell in todo]
    for (i, j), s, (u, se) in results:
        table[i, j], stderr[i, j], counts[i, j], seeds[i, j] = u, se, m, s
    return MetaGame(table, stderr, counts, seeds, game.evaluations + len(todo))


# --- equilibrium -------------------------------------------------------------


def _simplex_max(a: np.ndarray, max_iter: int = 10_000):
    """Solve max 1'x s.t. a x <= 1, x >= 0 with Bland's rule.

    Returns the primal solution and the dual prices of the constraints.
    """
    rows, cols = a.shape
    tab = np.zeros((rows + 1, cols + rows + 1))
    tab[:rows, :cols] = a
    tab[:rows, cols : cols + rows] = np.eye(rows)
    tab[:rows, -1] = 1.0
    tab[-1, :cols] = -1.0
    basis = list(range(cols, cols + rows))
    eps = 1e-12
    for _ in range(max_iter):
        neg = np.nonzero(tab[-1, :-1] < -eps)[0]
        if neg.size == 0:
            break
        enter = int(neg[0])
        col = tab[:rows, enter]
        pos = np.nonzero(col > eps)[0]
        if pos.size == 0:
            raise SolveError("linear program is unbounded")
        ratios = tab[pos, -1] / col[pos]
        best = ratios.min()
        ties = pos[np.abs(ratios - best) <= eps * max(1.0, abs(best))]
        leave = int(min(ties, key=lambda r: basis[r]))
        tab[leave] /= tab[leave, enter]
        for r in range(rows + 1):
            if r != leave and tab[r, enter] != 0.0:
                tab[r] -= tab[r, enter] * tab[leave]
        basis[leave] = enter
    else:
        raise SolveError("simplex did not converge")
    x = np.zeros(cols + rows)
    for r, b in enumerate(basis):
        x[b] = tab[r, -1]
    return x[:cols], tab[-1, cols : cols + rows].copy()


def _to_simplex(v: np.ndarray) -> np.ndarray:
    v = np.clip(v, 0.0, None)
    return v / v.sum()


def _solve_lp(u: np.ndarray):
    shift = 1.0 - u.min()
    a = u + shift  # every entry >= 1
    # row player (minimizer): x = sigma_ss / v, columns give the constraints a' x <= 1
    x, y = _simplex_max(a.T)
    total = x.sum()
    if not total > 0:
        raise SolveError("degenerate linear program")
    v = 1.0 / total
    return _to_simplex(x * v), _to_simplex(y * v), v - shift


def regret_matching(u: np.ndarray, tol: float = 1e-6, max_iter: int = 1_000_000, check_every: int = 100):
    """Alternating predictive regret matching+ on the gap table.

    Every ``check_every`` iterations the linearly weighted average and the
    current iterate are tested; the first with duality gap below ``tol`` is
    returned as (sigma_ss, sigma_dg, value).
    """
    r, c = u.shape
    reg_r, reg_c = np.zeros(r), np.zeros(c)
    last_r, last_c = np.zeros(r), np.zeros(c)
    sum_r, sum_c = np.zeros(r), np.zeros(c)

    def strategy(reg):
        pos = np.maximum(reg, 0.0)
        tot = pos.sum()
        return pos / tot if tot > 0 else np.full(reg.size, 1.0 / reg.size)

    pc = strategy(reg_c)
    for it in range(1, max_iter + 1):
        pr = strategy(reg_r + last_r)
        row_vals = u @ pc  # the row player wants these small
        last_r = pr @ row_vals - row_vals
        reg_r = np.maximum(reg_r + last_r, 0.0)
        pr = strategy(reg_r + last_r)
        col_vals = pr @ u
        last_c = col_vals - col_vals @ pc
        reg_c = np.maximum(reg_c + last_c, 0.0)
        sum_r += it * pr
        sum_c += it * pc
        pc = strategy(reg_c + last_c)
        if it % check_every == 0:
            for sr, sc in ((sum_r / sum_r.sum(), sum_c / sum_c.sum()), (pr, pc)):
                if (sr @ u).max() - (u @ sc).min() < tol:
                    return sr, sc, float(sr @ u @ sc)
    raise SolveError("regret matching did not reach the target duality gap")


def solve_zero_sum(u, method: str = "simplex"):
    """Nash equilibrium (sigma_ss, sigma_dg, value) of the gap table ``u``."""
    u = np.asarray(u, dtype=np.float64)
    if u.ndim != 2 or 0 in u.shape:
        raise EmptyPopulation("meta table is empty")
    if not np.all(np.isfinite(u)):
        raise SolveError("meta table has non-finite entries")
    if method == "simplex":
        try:
            return _solve_lp(u)
        except SolveError as exc:
            log.warning("simplex failed (%s); falling back to regret matching", exc)
    return regret_matching(u)


def best_response_restricted(u, sigma_opponent, player: str):
    """Best pure strategy within the table against ``sigma_opponent``.

    ``player`` is "ss" (rows, minimizes the gap) or "dg" (columns, maximizes it).
    Returns (index, expected gap); ties go to the lowest index.
    """
    u = np.asarray(u, dtype=np.float64)
    if 0 in u.shape:
        raise EmptyPopulation("meta table is empty")
    if player == "ss":
        vals = u @ check_simplex(sigma_opponent, u.shape[1])
        i = int(np.argmin(vals))
    elif player == "dg":
        vals = check_simplex(sigma_opponent, u.shape[0]) @ u
        i = int(np.argmax(vals))
    else:
        raise ValueError(f"player must be 'ss' or 'dg', got {player!r}")
    return i, float(vals[i])


def exploitability(u, sigma_ss, sigma_dg) -> float:
    """Average best-response gain of the two players, in utility terms.

    The selector's utility is the negative gap and the generator's is the gap.
    """
    u = np.asarray(u, dtype=np.float64)
    _, br_ss_gap = best_response_restricted(u, sigma_dg, "ss")
    _, br_dg_gap = best_response_restricted(u, sigma_ss, "dg")
    return 0.5 * (-br_ss_gap + br_dg_gap)


def worst_case_gap(u, sigma_ss) -> float:
    """Largest expected gap any generator column inflicts on the row mixture."""
    u = np.asarray(u, dtype=np.float64)
    return float((check_simplex(sigma_ss, u.shape[0]) @ u).max())


def pad(sigma, size: int) -> np.ndarray:
    out = np.zeros(size)
    out[: len(sigma)] = sigma
    return out
