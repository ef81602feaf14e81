"""Feature-based constructive tour policy, REINFORCE training and policy mixing."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import nn
from .errors import (
    EmptyPopulation,
    InvalidCandidate,
    InvalidWeights,
    ShapeError,
    StateExhausted,
)
from .tsp_core import Instance, as_rng, batch_tour_lengths, distance_matrix

log = logging.getLogger(__name__)

FEATURE_DIM = 5
HIDDEN = 16
SIMPLEX_TOL = 1e-9


# --- state and features ----------------------------------------------------


@dataclass
class PartialState:
    """Cities visited so far; the tour always starts at city 0."""

    visited: np.ndarray
    current: int
    start: int = 0

    @classmethod
    def from_prefix(cls, n: int, prefix: Sequence[int]) -> "PartialState":
        visited = np.zeros(n, dtype=bool)
        visited[list(prefix)] = True
        return cls(visited, int(prefix[-1]), int(prefix[0]))


def batch_features(d: np.ndarray, current: np.ndarray, visited: np.ndarray, start: int = 0):
    """Candidate features for every city of every instance in a batch.

    d: (B, n, n) distances, current: (B,), visited: (B, n) bool.
    Returns (B, n, 5); rows of visited cities are finite filler and must be masked.
    """
    b, n, _ = d.shape
    rows = np.arange(b)
    unvisited = ~visited
    count = unvisited.sum(axis=1)  # (B,)
    d_cur = d[rows, current]  # (B, n)
    d_start = d[:, :, start]
    frac = np.broadcast_to((count / n)[:, None], (b, n))
    others = np.maximum(count - 1, 1)[:, None]
    # distances to unvisited cities; d[j, j] = 0 so j itself adds nothing
    mean_rem = (d * unvisited[:, None, :]).sum(axis=2) / others
    masked = np.where(unvisited, d_cur, np.inf)
    # rank = number of unvisited cities strictly closer to the current one
    rank = (masked[:, None, :] < d_cur[:, :, None]).sum(axis=2) / others
    return np.stack([d_cur, d_start, frac, mean_rem, rank], axis=-1)


def candidate_features(inst: Instance, state: PartialState, candidate: int) -> np.ndarray:
    if state.visited[candidate]:
        raise InvalidCandidate(f"city {candidate} is already visited")
    d = distance_matrix(inst.points)[None]
    feats = batch_features(d, np.array([state.current]), state.visited[None], state.start)
    return feats[0, candidate]


# --- policy ------------------------------------------------------------------


@dataclass
class SolverPolicy:
    net: nn.DenseNet
    temperature: float = 1.0
    id: int = 0

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if self.net.input_dim != FEATURE_DIM or self.net.output_dim != 1:
            raise ShapeError("solver net must map 5 features to one score")

    @classmethod
    def random(cls, rng, temperature: float = 1.0, id: int = 0, scale: float = 0.5) -> "SolverPolicy":
        rng = as_rng(rng)
        net = nn.DenseNet.init([FEATURE_DIM, HIDDEN, 1], ["relu", "identity"], rng, scale=scale)
        return cls(net, temperature, id)

    @classmethod
    def zeros(cls, temperature: float = 1.0, id: int = 0) -> "SolverPolicy":
        net = nn.DenseNet.init([FEATURE_DIM, HIDDEN, 1], ["relu", "identity"], np.random.default_rng(0))
        return cls(net.with_params([np.zeros_like(p) for p in net.params()]), temperature, id)

    def copy(self, id: int | None = None) -> "SolverPolicy":
        return SolverPolicy(self.net.copy(), self.temperature, self.id if id is None else id)

    def scores(self, feats: np.ndarray) -> np.ndarray:
        return nn.forward(self.net, feats)[0][..., 0]

    def step_probs(self, d, current, visited) -> np.ndarray:
        return masked_softmax(self.scores(batch_features(d, current, visited)) / self.temperature, visited)

    def solve_batch(self, coords: np.ndarray) -> np.ndarray:
        return rollout_batch(self, coords, None, greedy=True)[0]

    def to_json_obj(self) -> dict:
        return {
            "theta": self.net.to_json_obj(),
            "temperature": self.temperature,
            "feature_dim": FEATURE_DIM,
            "id": self.id,
        }

    @classmethod
    def from_json_obj(cls, obj) -> "SolverPolicy":
        if obj.get("feature_dim", FEATURE_DIM) != FEATURE_DIM:
            raise ShapeError("unsupported feature dimension")
        return cls(nn.DenseNet.from_json_obj(obj["theta"]), float(obj["temperature"]), int(obj.get("id", 0)))


def nearest_neighbor_policy(sharpness: float = 50.0, id: int = 0) -> SolverPolicy:
    """A hand-set policy whose score is ``-sharpness * distance(current, candidate)``."""
    pol = SolverPolicy.zeros(id=id)
    w0, b0, w1, b1 = pol.net.params()
    w0 = w0.copy()
    w1 = w1.copy()
    w0[0, 0] = 1.0
    w1[0, 0] = -sharpness
    return SolverPolicy(pol.net.with_params([w0, b0, w1, b1]), 1.0, id)


def masked_softmax(logits: np.ndarray, visited: np.ndarray) -> np.ndarray:
    if np.any(visited.all(axis=-1)):
        raise StateExhausted("no unvisited city left")
    z = np.where(visited, -np.inf, logits)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.where(visited, 0.0, np.exp(z))
    return e / e.sum(axis=-1, keepdims=True)


def step_distribution(policy: SolverPolicy, inst: Instance, state: PartialState) -> np.ndarray:
    d = distance_matrix(inst.points)[None]
    return policy.step_probs(d, np.array([state.current]), state.visited[None])[0]


# --- rollouts ----------------------------------------------------------------


@dataclass
class RolloutRecord:
    tour: np.ndarray
    log_probs: np.ndarray
    length: float


def _decode(step_fn, coords: np.ndarray, rng, greedy: bool):
    coords = np.asarray(coords, dtype=np.float64)
    b, n, _ = coords.shape
    d = distance_matrix(coords)
    rows = np.arange(b)
    visited = np.zeros((b, n), dtype=bool)
    visited[:, 0] = True
    current = np.zeros(b, dtype=np.int64)
    tours = np.zeros((b, n), dtype=np.int64)
    logps = np.zeros((b, n - 1))
    for t in range(1, n):
        p = step_fn(d, current, visited)
        if greedy:
            choice = np.argmax(p, axis=1)
        else:
            u = rng.random((b, 1))
            choice = (np.cumsum(p, axis=1) < u).sum(axis=1)
            over = choice >= n
            if over.any():
                # round-off left u above the final cumulative sum: take the last unvisited city
                choice[over] = (n - 1) - np.argmax(~visited[over][:, ::-1], axis=1)
        with np.errstate(divide="ignore"):
            logps[:, t - 1] = np.log(p[rows, choice])
        tours[:, t] = choice
        visited[rows, choice] = True
        current = choice
    return tours, logps, batch_tour_lengths(coords, tours)


def rollout_batch(policy: SolverPolicy, coords: np.ndarray, rng, greedy: bool = False):
    """Sample (or greedily decode) tours for a batch of equal-size instances.

    Returns tours (B, n), per-step log-probs (B, n-1) and tour lengths (B,).
    """
    return _decode(policy.step_probs, coords, as_rng(rng) if not greedy else None, greedy)


def rollout(policy: SolverPolicy, inst: Instance, rng) -> RolloutRecord:
    tours, logps, lengths = rollout_batch(policy, inst.points[None], rng)
    return RolloutRecord(tours[0], logps[0], float(lengths[0]))


def _replay(policy: SolverPolicy, coords: np.ndarray, tours: np.ndarray):
    """Features, masks and chosen actions along fixed tours, stacked over steps."""
    b, n, _ = coords.shape
    d = distance_matrix(coords)
    rows = np.arange(b)
    visited = np.zeros((b, n), dtype=bool)
    visited[rows, tours[:, 0]] = True
    feats, masks = [], []
    for t in range(1, n):
        feats.append(batch_features(d, tours[:, t - 1], visited))
        masks.append(visited.copy())
        visited[rows, tours[:, t]] = True
    return np.stack(feats), np.stack(masks), tours[:, 1:].T  # (T, B, n, F), (T, B, n), (T, B)


def trajectory_log_probs(policy: SolverPolicy, coords: np.ndarray, tours: np.ndarray) -> np.ndarray:
    """Summed log-probability of each fixed tour under ``policy``; shape (B,)."""
    feats, masks, actions = _replay(policy, np.asarray(coords, float), np.asarray(tours))
    logits = policy.scores(feats) / policy.temperature
    z = np.where(masks, -np.inf, logits)
    mx = z.max(axis=-1, keepdims=True)
    lse = mx[..., 0] + np.log(np.exp(z - mx).sum(axis=-1))
    chosen = np.take_along_axis(logits, actions[..., None], axis=-1)[..., 0]
    return (chosen - lse).sum(axis=0)


def weighted_log_prob_grad(policy: SolverPolicy, coords, tours, weights) -> list[np.ndarray]:
    """Gradient w.r.t. the policy parameters of ``sum_b weights[b] * log pi(tour_b)``."""
    feats, masks, actions = _replay(policy, np.asarray(coords, float), np.asarray(tours))
    out, cache = nn.forward(policy.net, feats)
    logits = out[..., 0] / policy.temperature
    p = masked_softmax(logits, masks)
    onehot = np.zeros_like(p)
    np.put_along_axis(onehot, actions[..., None], 1.0, axis=-1)
    g = (onehot - p) * np.asarray(weights, float)[None, :, None] / policy.temperature
    grads, _ = nn.backward(policy.net, cache, g[..., None])
    return grads


def group_by_size(instances) -> dict[int, np.ndarray]:
    groups: dict[int, list] = {}
    for inst in instances:
        pts = inst.points if isinstance(inst, Instance) else np.asarray(inst)
        groups.setdefault(pts.shape[0], []).append(pts)
    return {n: np.stack(v) for n, v in sorted(groups.items())}


def solver_loss_gradient(policy: SolverPolicy, batch, rng) -> tuple[list[np.ndarray], dict]:
    """Score-function estimate of the gradient of expected tour length.

    ``batch`` is a list of instances or a dict {n: (B, n, 2) array}. The
    baseline is the mean length within each size bucket.
    """
    rng = as_rng(rng)
    groups = batch if isinstance(batch, dict) else group_by_size(batch)
    total = sum(c.shape[0] for c in groups.values())
    if total == 0:
        raise ValueError("empty batch")
    grads = [np.zeros_like(p) for p in policy.net.params()]
    lengths_all = []
    for n, coords in groups.items():
        tours, _, lengths = rollout_batch(policy, coords, rng)
        adv = (lengths - lengths.mean()) / total
        for acc, g in zip(grads, weighted_log_prob_grad(policy, coords, tours, adv)):
            acc += g
        lengths_all.append(lengths)
    return grads, {"mean_length": float(np.concatenate(lengths_all).mean())}


# --- evaluation ----------------------------------------------------------------


def expected_gap(solver, groups: dict[int, np.ndarray], oracle: dict[int, np.ndarray]) -> tuple[float, np.ndarray]:
    """Mean optimality gap of greedy decoding; ``oracle`` holds per-group optimal lengths."""
    gaps = []
    for n, coords in groups.items():
        lengths = batch_tour_lengths(coords, solver.solve_batch(coords))
        gaps.append((lengths - oracle[n]) / oracle[n])
    gaps = np.concatenate(gaps)
    return float(gaps.mean()), gaps


@dataclass
class SolverTrainConfig:
    epochs: int = 40
    batch_size: int = 64
    batches_per_epoch: int = 8
    lr: float = 0.01
    lr_decay: float = 0.95
    weight_decay: float = 0.0
    val_size: int = 200
    exact_threshold: int = 18


@dataclass
class TrainLog:
    epochs: list[int] = field(default_factory=list)
    values: list[float] = field(default_factory=list)
    best_epoch: int = 0


def train_solver_oracle(sigma_dg, generator_pop, config: SolverTrainConfig, rng, init: SolverPolicy | None = None, id: int = 0):
    """Best response of a solver to the generator mixture ``sigma_dg``.

    Returns the snapshot with the lowest greedy gap on a validation set drawn
    from the mixture, and the per-epoch log (epoch 0 is the starting policy).
    """
    from .generator import sample_mixture
    from .oracle import oracle_lengths

    if not generator_pop:
        raise EmptyPopulation("generator population is empty")
    weights = check_simplex(sigma_dg, len(generator_pop))
    rng = as_rng(rng)
    policy = (init.copy(id=id) if init is not None else SolverPolicy.random(rng, id=id))

    val = sample_mixture(generator_pop, weights, config.val_size, rng)
    val_opt = {n: oracle_lengths(c, config.exact_threshold)[0] for n, c in val.items()}

    best, best_gap = policy.copy(), expected_gap(policy, val, val_opt)[0]
    tlog = TrainLog([0], [best_gap], 0)
    state = nn.AdamState(lr=config.lr, lr_decay=config.lr_decay, weight_decay=config.weight_decay)
    for epoch in range(1, config.epochs + 1):
        for _ in range(config.batches_per_epoch):
            batch = sample_mixture(generator_pop, weights, config.batch_size, rng)
            grads, _ = solver_loss_gradient(policy, batch, rng)
            policy.net = policy.net.with_params(nn.adam_step(state, policy.net.params(), grads))
        state.end_epoch()
        gap = expected_gap(policy, val, val_opt)[0]
        tlog.epochs.append(epoch)
        tlog.values.append(gap)
        if gap < best_gap:
            best, best_gap, tlog.best_epoch = policy.copy(), gap, epoch
        log.debug("solver epoch %d val gap %.4f", epoch, gap)
    return best, tlog


# --- mixing --------------------------------------------------------------------


def check_simplex(weights, size: int | None = None) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 1 or w.size == 0 or (size is not None and w.size != size):
        raise InvalidWeights(f"weights have shape {w.shape}, expected ({size},)")
    if np.any(w < -SIMPLEX_TOL) or abs(w.sum() - 1.0) > SIMPLEX_TOL or not np.all(np.isfinite(w)):
        raise InvalidWeights("weights are not a probability vector")
    return w


@dataclass
class MixedSolver:
    members: list[SolverPolicy]
    weights: np.ndarray

    def __post_init__(self):
        if not self.members:
            raise EmptyPopulation("a mixed solver needs at least one member")
        self.weights = check_simplex(self.weights, len(self.members))

    def step_probs(self, d, current, visited) -> np.ndarray:
        out = np.zeros(visited.shape)
        for w, m in zip(self.weights, self.members):
            if w > 0:
                out += w * m.step_probs(d, current, visited)
        return out

    def solve_batch(self, coords: np.ndarray) -> np.ndarray:
        return _decode(self.step_probs, coords, None, greedy=True)[0]


def mix_step_distribution(mixed: MixedSolver, inst: Instance, state: PartialState) -> np.ndarray:
    d = distance_matrix(inst.points)[None]
    return mixed.step_probs(d, np.array([state.current]), state.visited[None])[0]


def mix_value_tables(tables, weights) -> np.ndarray:
    tables = [np.asarray(t, dtype=np.float64) for t in tables]
    if len({t.shape for t in tables}) != 1:
        raise ShapeError("value tables must have equal length")
    w = check_simplex(weights, len(tables))
    return np.tensordot(w, np.stack(tables), axes=1)
