"""Adversarial instance generator: scale distribution plus a pointwise Gaussian attack.

An instance is drawn by picking a scale ``n`` from ``softmax(gamma_n)``,
sampling ``n`` uniform points, asking the attack network for a per-coordinate
noise variance in ``(0, lam)``, adding Gaussian noise and min-max normalizing.
Log-densities of the perturbed coordinates use the density of a uniform
variable plus Gaussian noise, with each axis treated independently.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import log_ndtr, ndtr

from . import nn
from .errors import DegenerateInstance, EmptyPopulation, InvalidParameter, ShapeError
from .oracle import oracle_lengths
from .solver import TrainLog, check_simplex
from .tsp_core import DEGENERATE_EPS, Instance, as_rng, batch_tour_lengths, normalize_array

log = logging.getLogger(__name__)

DEFAULT_SUPPORT = (10, 12, 15)
DEFAULT_LAMBDA = 1.0 / 3.0
HIDDEN = 128
IDENTITY_BIAS = -30.0
LOG_FLOOR = np.log(1e-300)
MC_SAMPLES = 10_000
_LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)


@dataclass
class GeneratorPolicy:
    gamma_n: np.ndarray
    net: nn.DenseNet
    support: tuple[int, ...] = DEFAULT_SUPPORT
    lam: float = DEFAULT_LAMBDA
    id: int = 0

    def __post_init__(self):
        self.gamma_n = np.asarray(self.gamma_n, dtype=np.float64)
        self.support = tuple(int(s) for s in self.support)
        if len(self.support) < 1 or self.gamma_n.shape != (len(self.support),):
            raise ShapeError("gamma_n must have one logit per supported scale")
        if [l.weight.shape for l in self.net.layers] != [(2, HIDDEN), (HIDDEN, 2)]:
            raise ShapeError("attack network must be 2 -> 128 -> 2")
        if not 0.0 < self.lam <= 1.0:
            raise InvalidParameter(f"lambda must lie in (0, 1], got {self.lam}")

    @classmethod
    def random(cls, rng, support=DEFAULT_SUPPORT, lam=DEFAULT_LAMBDA, output_bias=0.0, id=0):
        rng = as_rng(rng)
        net = nn.DenseNet.init([2, HIDDEN, 2], ["relu", "sigmoid"], rng)
        net.layers[-1].bias[:] = output_bias
        return cls(rng.normal(0.0, 0.1, len(support)), net, support, lam, id)

    @classmethod
    def identity(cls, support=DEFAULT_SUPPORT, lam=DEFAULT_LAMBDA, id=0):
        """Uniform scale choice and (numerically) zero attack variance."""
        net = nn.DenseNet.init([2, HIDDEN, 2], ["relu", "sigmoid"], np.random.default_rng(0))
        net.layers[-1].weight[:] = 0.0
        net.layers[-1].bias[:] = IDENTITY_BIAS
        return cls(np.zeros(len(support)), net, support, lam, id)

    def copy(self, id=None) -> "GeneratorPolicy":
        return GeneratorPolicy(self.gamma_n.copy(), self.net.copy(), self.support, self.lam, self.id if id is None else id)

    @property
    def scale_probs(self) -> np.ndarray:
        return nn.softmax(self.gamma_n)

    def variance(self, points) -> np.ndarray:
        return attack_variance(self, points)

    def sample(self, count: int, rng) -> dict[int, np.ndarray]:
        """Normalized attacked instances grouped by scale: {n: (B_n, n, 2)}."""
        return {n: b.coords for n, b in sample_attack_batches(self, count, rng).items()}

    def to_json_obj(self) -> dict:
        return {
            "gamma_N": self.gamma_n.tolist(),
            "support": list(self.support),
            "gamma_C": self.net.to_json_obj(),
            "lambda": self.lam,
            "id": self.id,
        }

    @classmethod
    def from_json_obj(cls, obj) -> "GeneratorPolicy":
        return cls(
            np.array(obj["gamma_N"]),
            nn.DenseNet.from_json_obj(obj["gamma_C"]),
            tuple(obj["support"]),
            float(obj["lambda"]),
            int(obj.get("id", 0)),
        )


# --- scale -------------------------------------------------------------------


def sample_scale(gamma_n, support, rng) -> tuple[int, float]:
    rng = as_rng(rng)
    logp = nn.log_softmax(gamma_n)
    k = int(rng.choice(len(support), p=np.exp(logp)))
    return int(support[k]), float(logp[k])


def scale_gradient(gamma_n, scale_idx, costs, sample_weights=None) -> np.ndarray:
    """Score-function gradient of expected cost w.r.t. the scale logits.

    Uses the (weighted) mean cost as baseline. With ``sample_weights`` equal to
    the scale probabilities and one sample per scale it is the exact gradient.
    """
    p = nn.softmax(gamma_n)
    idx = np.asarray(scale_idx)
    c = np.asarray(costs, dtype=np.float64)
    w = np.full(c.shape, 1.0 / c.size) if sample_weights is None else np.asarray(sample_weights, float)
    adv = c - np.dot(w, c)
    score = np.eye(p.size)[idx] - p  # d log p_k / d gamma
    return (w * adv) @ score


# --- attack ------------------------------------------------------------------


def attack_variance(policy: GeneratorPolicy, points) -> np.ndarray:
    pts = points.points if isinstance(points, Instance) else np.asarray(points, dtype=np.float64)
    if pts.shape[-1] != 2:
        raise ShapeError(f"points must end in a coordinate axis of size 2, got {pts.shape}")
    return policy.lam * nn.forward(policy.net, pts)[0]


def perturb(inst: Instance, variance: np.ndarray, rng) -> tuple[Instance, np.ndarray]:
    """Add N(0, variance) noise per coordinate; returns the normalized result and the raw values."""
    variance = np.asarray(variance, dtype=np.float64)
    if variance.shape != inst.points.shape:
        raise ShapeError(f"variance {variance.shape} does not match instance {inst.points.shape}")
    rng = as_rng(rng)
    raw = inst.points + np.sqrt(variance) * rng.standard_normal(variance.shape)
    return Instance(normalize_array(raw)), raw


@dataclass
class AttackBatch:
    n: int
    scale_index: int
    base: np.ndarray  # (B, n, 2) uniform draws
    variance: np.ndarray  # (B, n, 2)
    raw: np.ndarray  # (B, n, 2) perturbed, before normalization
    coords: np.ndarray  # (B, n, 2) normalized


def attack_batch(policy: GeneratorPolicy, base: np.ndarray, noise: np.ndarray, scale_index: int = 0) -> AttackBatch:
    """Deterministic attack given base points and standard-normal noise."""
    var = attack_variance(policy, base)
    raw = base + np.sqrt(var) * noise
    return AttackBatch(base.shape[1], scale_index, base, var, raw, normalize_array(raw))


def _draw(policy, n, count, rng, k):
    base = rng.random((count, n, 2))
    noise = rng.standard_normal((count, n, 2))
    for _ in range(10):
        raw = base + np.sqrt(attack_variance(policy, base)) * noise
        span = raw.max(axis=(1, 2)) - raw.min(axis=(1, 2))
        bad = span <= DEGENERATE_EPS
        if not bad.any():
            return attack_batch(policy, base, noise, k)
        base[bad] = rng.random((int(bad.sum()), n, 2))
        noise[bad] = rng.standard_normal((int(bad.sum()), n, 2))
    raise DegenerateInstance("could not draw a non-degenerate instance")


def sample_attack_batches(policy: GeneratorPolicy, count: int, rng) -> dict[int, AttackBatch]:
    rng = as_rng(rng)
    ks = rng.choice(len(policy.support), size=count, p=policy.scale_probs)
    out = {}
    for k in range(len(policy.support)):
        c = int((ks == k).sum())
        if c:
            out[policy.support[k]] = _draw(policy, policy.support[k], c, rng, k)
    return out


def sample_mixture(generators, weights, count: int, rng) -> dict[int, np.ndarray]:
    """Draw ``count`` instances from a mixture of generators, grouped by scale."""
    rng = as_rng(rng)
    w = check_simplex(weights, len(generators))
    which = rng.choice(len(generators), size=count, p=np.clip(w, 0, None) / np.clip(w, 0, None).sum())
    groups: dict[int, list] = {}
    for g, gen in enumerate(generators):
        c = int((which == g).sum())
        if c:
            for n, coords in gen.sample(c, rng).items():
                groups.setdefault(n, []).append(coords)
    return {n: np.concatenate(v) for n, v in sorted(groups.items())}


# --- density -----------------------------------------------------------------


def _log_diff_ndtr(a, b):
    """log(Phi(a) - Phi(b)) for a > b, stable in both tails."""
    # use Phi(a) - Phi(b) = Phi(-b) - Phi(-a) when both arguments are large
    flip = (a + b) > 0
    hi = np.where(flip, -b, a)
    lo = np.where(flip, -a, b)
    lhi, llo = log_ndtr(hi), log_ndtr(lo)
    with np.errstate(divide="ignore"):
        return lhi + np.log1p(-np.exp(llo - lhi))


def log_convolution_density(z, var):
    """Log-density of U(0,1) + N(0, var) at ``z`` and its derivative w.r.t. ``var``.

    Returns (logp, dlogp_dvar, clamped_mask). Values below log(1e-300) are
    clamped, and their derivative is set to zero.
    """
    z = np.asarray(z, dtype=np.float64)
    var = np.asarray(var, dtype=np.float64)
    if np.any(var <= 0):
        raise InvalidParameter("variance must be positive")
    s = np.sqrt(var)
    a, b = z / s, (z - 1.0) / s
    logp = _log_diff_ndtr(a, b)
    clamped = ~(logp > LOG_FLOOR)
    logp = np.where(clamped, LOG_FLOOR, logp)
    # dp/ds = -(z/s^2) phi(a) + ((z-1)/s^2) phi(b); ds/dvar = 1/(2s)
    log_phi_a = -0.5 * a * a - _LOG_SQRT_2PI
    log_phi_b = -0.5 * b * b - _LOG_SQRT_2PI
    dp_ds_over_p = (-(a / s) * np.exp(log_phi_a - logp) + (b / s) * np.exp(log_phi_b - logp))
    dlogp = np.where(clamped, 0.0, dp_ds_over_p / (2.0 * s))
    return logp, dlogp, clamped


def convolution_density(z, var, mode: str = "closed_form", rng=None, samples: int = MC_SAMPLES, stratified: bool = True):
    """Density of X + Y with X ~ U(0,1), Y ~ N(0, var).

    The Monte Carlo mode averages Gaussian kernels over ``samples`` uniform
    draws of X, one per equal-width stratum unless ``stratified`` is False.
    """
    z = np.asarray(z, dtype=np.float64)
    if np.any(np.asarray(var) <= 0):
        raise InvalidParameter("variance must be positive")
    s = np.sqrt(var)
    if mode == "closed_form":
        return ndtr(z / s) - ndtr((z - 1.0) / s)
    if mode == "monte_carlo":
        u = as_rng(rng).random(samples)
        x = (np.arange(samples) + u) / samples if stratified else u
        zz = z[..., None]
        ss = np.asarray(s)[..., None]
        return np.mean(np.exp(-0.5 * ((zz - x) / ss) ** 2) / (ss * np.sqrt(2 * np.pi)), axis=-1)
    raise InvalidParameter(f"unknown density mode {mode!r}")


@dataclass
class AttackLogProb:
    total: float
    per_coord: np.ndarray
    d_variance: np.ndarray
    clamped: int


def log_prob_attacked(policy: GeneratorPolicy, base, raw, mode: str = "closed_form", rng=None) -> AttackLogProb:
    """Summed log-density of perturbed coordinates, variance recomputed from ``base``."""
    base_pts = base.points if isinstance(base, Instance) else np.asarray(base, dtype=np.float64)
    raw = np.asarray(raw, dtype=np.float64)
    var = attack_variance(policy, base_pts)
    if var.shape != raw.shape:
        raise ShapeError("raw values do not match the base instance")
    logp, dlogp, clamped = log_convolution_density(raw, var)
    if mode == "monte_carlo":
        dens = convolution_density(raw, var, "monte_carlo", rng)
        logp = np.log(np.maximum(dens, 1e-300))
    elif mode != "closed_form":
        raise InvalidParameter(f"unknown density mode {mode!r}")
    n_clamped = int(clamped.sum())
    if n_clamped:
        log.debug("clamped %d log-densities at log(1e-300)", n_clamped)
    return AttackLogProb(float(logp.sum()), logp, dlogp, n_clamped)


def attack_log_prob_grad(policy: GeneratorPolicy, base, raw, weights) -> list[np.ndarray]:
    """Gradient w.r.t. the attack net of ``sum_b weights[b] * log P_C(raw_b | base_b)``."""
    base = np.asarray(base, dtype=np.float64)
    raw = np.asarray(raw, dtype=np.float64)
    out, cache = nn.forward(policy.net, base)
    var = policy.lam * out
    _, dlogp, _ = log_convolution_density(raw, var)
    w = np.asarray(weights, dtype=np.float64).reshape((-1,) + (1,) * (base.ndim - 1))
    grads, _ = nn.backward(policy.net, cache, w * dlogp * policy.lam)
    return grads


def attack_surrogate(policy: GeneratorPolicy, base, raw, weights) -> float:
    var = attack_variance(policy, base)
    logp, _, _ = log_convolution_density(raw, var)
    w = np.asarray(weights, dtype=np.float64)
    return float(np.dot(w, logp.reshape(w.size, -1).sum(axis=1)))


# --- oracle training ---------------------------------------------------------


def _solver_costs(batch: AttackBatch, solvers, which: np.ndarray, threshold: int):
    """Greedy lengths and optimality gaps of the assigned solver on each instance."""
    lengths = np.empty(batch.coords.shape[0])
    for s in np.unique(which):
        idx = np.nonzero(which == s)[0]
        tours = solvers[s].solve_batch(batch.coords[idx])
        lengths[idx] = batch_tour_lengths(batch.coords[idx], tours)
    opt, _ = oracle_lengths(batch.coords, threshold)
    return lengths, (lengths - opt) / opt


def generator_loss_gradient(policy: GeneratorPolicy, sigma_ss, solver_pop, batch_size: int, rng, exact_threshold: int = 18):
    """Score-function gradients of the generator objective (to be maximized).

    Returns (grad_attack_net, grad_gamma_n, info). The attack-net term weighs
    the optimality gap, with a per-scale mean baseline; the scale term weighs
    the raw greedy tour length against the batch mean.
    """
    if not solver_pop:
        raise EmptyPopulation("solver population is empty")
    w = check_simplex(sigma_ss, len(solver_pop))
    rng = as_rng(rng)
    batches = sample_attack_batches(policy, batch_size, rng)
    grads = [np.zeros_like(p) for p in policy.net.params()]
    scale_idx, scale_costs, all_gaps = [], [], []
    for n, batch in batches.items():
        which = rng.choice(len(solver_pop), size=batch.coords.shape[0], p=np.clip(w, 0, None) / np.clip(w, 0, None).sum())
        lengths, gaps = _solver_costs(batch, solver_pop, which, exact_threshold)
        adv = (gaps - gaps.mean()) / batch_size
        for acc, g in zip(grads, attack_log_prob_grad(policy, batch.base, batch.raw, adv)):
            acc += g
        scale_idx.append(np.full(lengths.size, batch.scale_index))
        scale_costs.append(lengths)
        all_gaps.append(gaps)
    grad_n = scale_gradient(policy.gamma_n, np.concatenate(scale_idx), np.concatenate(scale_costs))
    return grads, grad_n, {"mean_gap": float(np.concatenate(all_gaps).mean())}


@dataclass
class GeneratorTrainConfig:
    epochs: int = 40
    batch_size: int = 64
    batches_per_epoch: int = 8
    lr: float = 0.05
    lr_decay: float = 0.95
    weight_decay: float = 0.01
    eval_size: int = 200
    support: tuple[int, ...] = DEFAULT_SUPPORT
    lam: float = DEFAULT_LAMBDA
    init_output_bias: float = 0.0
    exact_threshold: int = 18


@dataclass
class EvalSet:
    """Frozen randomness for comparing generators: scale quantiles, base points and noise."""

    u: np.ndarray
    base: dict[int, np.ndarray] = field(default_factory=dict)
    noise: dict[int, np.ndarray] = field(default_factory=dict)

    @classmethod
    def draw(cls, support, size: int, rng) -> "EvalSet":
        rng = as_rng(rng)
        es = cls(rng.random(size))
        for n in support:
            es.base[n] = rng.random((size, n, 2))
            es.noise[n] = rng.standard_normal((size, n, 2))
        return es

    def batches(self, policy: GeneratorPolicy) -> dict[int, AttackBatch]:
        cdf = np.cumsum(policy.scale_probs)
        ks = np.minimum(np.searchsorted(cdf, self.u, side="right"), len(cdf) - 1)
        out = {}
        for k, n in enumerate(policy.support):
            idx = np.nonzero(ks == k)[0]
            if idx.size:
                out[n] = attack_batch(policy, self.base[n][idx], self.noise[n][idx], k)
        return out


def mixture_gap(policy: GeneratorPolicy, sigma_ss, solver_pop, eval_set: EvalSet, threshold: int = 18) -> float:
    """Expected greedy gap of the solver mixture on the generator's frozen evaluation draws."""
    w = np.asarray(sigma_ss, dtype=np.float64)
    total, count = 0.0, 0
    for batch in eval_set.batches(policy).values():
        opt, _ = oracle_lengths(batch.coords, threshold)
        for i, s in enumerate(solver_pop):
            if w[i] > 0:
                lengths = batch_tour_lengths(batch.coords, s.solve_batch(batch.coords))
                total += w[i] * ((lengths - opt) / opt).sum()
        count += batch.coords.shape[0]
    return total / count


def train_generator_oracle(sigma_ss, solver_pop, config: GeneratorTrainConfig, rng, init: GeneratorPolicy | None = None, id: int = 0):
    """Best response of the generator to the solver mixture ``sigma_ss``.

    Returns the epoch snapshot under which the mixture's expected gap on a
    frozen evaluation set is largest, and the per-epoch log.
    """
    if not solver_pop:
        raise EmptyPopulation("solver population is empty")
    w = check_simplex(sigma_ss, len(solver_pop))
    rng = as_rng(rng)
    if init is None:
        policy = GeneratorPolicy.random(rng, config.support, config.lam, config.init_output_bias, id)
    else:
        policy = init.copy(id=id)
    eval_set = EvalSet.draw(policy.support, config.eval_size, rng)

    best, best_gap = policy.copy(), mixture_gap(policy, w, solver_pop, eval_set, config.exact_threshold)
    tlog = TrainLog([0], [best_gap], 0)
    state_c = nn.AdamState(lr=config.lr, lr_decay=config.lr_decay, weight_decay=config.weight_decay)
    state_n = nn.AdamState(lr=config.lr, lr_decay=config.lr_decay, weight_decay=0.0)
    for epoch in range(1, config.epochs + 1):
        for _ in range(config.batches_per_epoch):
            g_c, g_n, _ = generator_loss_gradient(policy, w, solver_pop, config.batch_size, rng, config.exact_threshold)
            # Adam minimizes; the generator ascends its objective
            policy.net = policy.net.with_params(nn.adam_step(state_c, policy.net.params(), [-g for g in g_c]))
            policy.gamma_n = nn.adam_step(state_n, [policy.gamma_n], [-g_n])[0]
        state_c.end_epoch()
        state_n.end_epoch()
        gap = mixture_gap(policy, w, solver_pop, eval_set, config.exact_threshold)
        tlog.epochs.append(epoch)
        tlog.values.append(gap)
        if gap > best_gap:
            best, best_gap, tlog.best_epoch = policy.copy(), gap, epoch
        log.debug("generator epoch %d eval gap %.4f", epoch, gap)
    return best, tlog
