"""PSRO loop over solver and generator populations, plus mixing and ablations."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import IncompleteCheckpoint, InvalidParameter, PsroTspError
from .generator import DEFAULT_LAMBDA, GeneratorPolicy, attack_batch, GeneratorTrainConfig, train_generator_oracle
from .metagame import MetaGame, cell_seed, evaluate_cell, exploitability, fill_meta_table, pad, solve_zero_sum, worst_case_gap
from .oracle import oracle_lengths
from .solver import MixedSolver, SolverPolicy, SolverTrainConfig, check_simplex, train_solver_oracle
from .tsp_core import Instance, batch_tour_lengths, normalize_array

log = logging.getLogger(__name__)

MODES = ("from_scratch", "fine_tune")


@dataclass
class PsroConfig:
    iterations: int = 5
    scales: tuple[int, ...] = (10, 12, 15)
    cell_samples: int = 200
    solver_epochs: int = 40
    generator_epochs: int = 40
    solver_batch_size: int = 64
    generator_batch_size: int = 64
    solver_batches_per_epoch: int = 8
    generator_batches_per_epoch: int = 8
    solver_lr: float = 0.01
    generator_lr: float = 0.05
    lr_decay: float = 0.95
    weight_decay: float = 0.01
    lam: float = DEFAULT_LAMBDA
    support_threshold: float = 0.99
    val_size: int = 200
    eval_size: int = 200
    generator_init_bias: float = 0.0
    exact_threshold: int = 18
    seed: int = 0
    mode: str = "from_scratch"

    def __post_init__(self):
        self.scales = tuple(int(s) for s in self.scales)
        self.validate()

    def validate(self) -> None:
        errors = []
        if self.iterations < 1:
            errors.append("iterations: must be >= 1")
        if not self.scales or min(self.scales) < 4:
            errors.append("scales: need at least one scale, each >= 4")
        for name in (
            "cell_samples",
            "solver_batch_size",
            "generator_batch_size",
            "solver_batches_per_epoch",
            "generator_batches_per_epoch",
            "val_size",
            "eval_size",
            "exact_threshold",
        ):
            if getattr(self, name) < 1:
                errors.append(f"{name}: must be positive")
        for name in ("solver_epochs", "generator_epochs"):
            if getattr(self, name) < 0:
                errors.append(f"{name}: must be >= 0")
        for name in ("solver_lr", "generator_lr", "lr_decay"):
            if not getattr(self, name) > 0:
                errors.append(f"{name}: must be positive")
        if self.weight_decay < 0:
            errors.append("weight_decay: must be >= 0")
        if not 0 < self.lam <= 1:
            errors.append("lam: must lie in (0, 1]")
        if not 0 < self.support_threshold <= 1:
            errors.append("support_threshold: must lie in (0, 1]")
        if self.mode not in MODES:
            errors.append(f"mode: must be one of {MODES}")
        if errors:
            raise InvalidParameter("; ".join(errors))

    def to_json_obj(self) -> dict:
        d = dataclasses.asdict(self)
        d["scales"] = list(self.scales)
        return d

    def config_hash(self) -> str:
        text = json.dumps(self.to_json_obj(), sort_keys=True)
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def solver_train_config(self) -> SolverTrainConfig:
        return SolverTrainConfig(
            epochs=self.solver_epochs,
            batch_size=self.solver_batch_size,
            batches_per_epoch=self.solver_batches_per_epoch,
            lr=self.solver_lr,
            lr_decay=self.lr_decay,
            weight_decay=0.0,
            val_size=self.val_size,
            exact_threshold=self.exact_threshold,
        )

    def generator_train_config(self) -> GeneratorTrainConfig:
        return GeneratorTrainConfig(
            epochs=self.generator_epochs,
            batch_size=self.generator_batch_size,
            batches_per_epoch=self.generator_batches_per_epoch,
            lr=self.generator_lr,
            lr_decay=self.lr_decay,
            weight_decay=self.weight_decay,
            eval_size=self.eval_size,
            support=self.scales,
            lam=self.lam,
            init_output_bias=self.generator_init_bias,
            exact_threshold=self.exact_threshold,
        )


@dataclass
class IterationRecord:
    iteration: int
    sigma_ss: list[float]
    sigma_dg: list[float]
    game_value: float
    online_expl: float
    retro_expl: float = float("nan")
    solver_log: list[float] = field(default_factory=list)
    generator_log: list[float] = field(default_factory=list)
    solver_best_epoch: int = 0
    generator_best_epoch: int = 0

    @property
    def max_prob_ss(self) -> float:
        return max(self.sigma_ss)


@dataclass
class PopulationCheckpoint:
    config: PsroConfig
    solvers: list[SolverPolicy]
    generators: list[GeneratorPolicy]
    game: MetaGame
    records: list[IterationRecord] = field(default_factory=list)
    complete: bool = False
    error: str | None = None

    @property
    def seed(self) -> int:
        return self.config.seed

    @property
    def final_sigma(self):
        if not self.records:
            n_s, n_g = len(self.solvers), len(self.generators)
            return np.full(n_s, 1.0 / n_s), np.full(n_g, 1.0 / n_g)
        r = self.records[-1]
        return np.array(r.sigma_ss), np.array(r.sigma_dg)

    def to_json_obj(self) -> dict:
        return {
            "config": self.config.to_json_obj(),
            "config_hash": self.config.config_hash(),
            "seed": self.seed,
            "complete": self.complete,
            "error": self.error,
            "solvers": [s.to_json_obj() for s in self.solvers],
            "generators": [g.to_json_obj() for g in self.generators],
            "meta_table": self.game.to_json_obj(),
            "records": [dataclasses.asdict(r) for r in self.records],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_obj(), sort_keys=True, indent=1)

    @classmethod
    def from_json_obj(cls, obj) -> "PopulationCheckpoint":
        cfg = PsroConfig(**obj["config"])
        return cls(
            cfg,
            [SolverPolicy.from_json_obj(s) for s in obj["solvers"]],
            [GeneratorPolicy.from_json_obj(g) for g in obj["generators"]],
            MetaGame.from_json_obj(obj["meta_table"]),
            [IterationRecord(**r) for r in obj["records"]],
            bool(obj["complete"]),
            obj.get("error"),
        )

    def save(self, path) -> None:
        atomic_write(path, self.to_json())

    @classmethod
    def load(cls, path) -> "PopulationCheckpoint":
        return cls.from_json_obj(json.loads(Path(path).read_text()))


class RunAborted(PsroTspError, RuntimeError):
    """Raised when an iteration fails; carries the partial checkpoint."""

    def __init__(self, message, checkpoint: PopulationCheckpoint):
        super().__init__(message)
        self.checkpoint = checkpoint


def atomic_write(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    with os.fdopen(fd, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _stream(seed: int, iteration: int, role: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, iteration, role]))


def psro_run(config: PsroConfig, threads: int = 1, callback=None) -> PopulationCheckpoint:
    """Run the two-player PSRO loop for ``config.iterations`` iterations.

    Every iteration solves the current table, trains a solver against the
    generator meta-strategy and a generator against the solver
    meta-strategy, adds both, fills the new row and column and stores the
    new equilibrium together with exploitability figures.
    """
    cfg = config
    solvers = [SolverPolicy.random(_stream(cfg.seed, 0, 0), id=0)]
    generators = [GeneratorPolicy.identity(cfg.scales, cfg.lam, id=0)]
    game = fill_meta_table(solvers, generators, None, cfg.cell_samples, cfg.seed, cfg.exact_threshold, threads)
    ckpt = PopulationCheckpoint(cfg, solvers, generators, game)
    sigma_ss, sigma_dg, _ = solve_zero_sum(game.table)

    try:
        for t in range(1, cfg.iterations + 1):
            init = solvers[-1] if cfg.mode == "fine_tune" else None
            new_s, slog = train_solver_oracle(
                sigma_dg, generators, cfg.solver_train_config(), _stream(cfg.seed, t, 1), init=init, id=len(solvers)
            )
            new_g, glog = train_generator_oracle(
                sigma_ss, solvers, cfg.generator_train_config(), _stream(cfg.seed, t, 2), id=len(generators)
            )
            solvers.append(new_s)
            generators.append(new_g)
            game = fill_meta_table(solvers, generators, game, cfg.cell_samples, cfg.seed, cfg.exact_threshold, threads)
            ckpt.game = game
            online = exploitability(game.table, pad(sigma_ss, len(solvers)), pad(sigma_dg, len(generators)))
            sigma_ss, sigma_dg, value = solve_zero_sum(game.table)
            ckpt.records.append(
                IterationRecord(
                    t,
                    sigma_ss.tolist(),
                    sigma_dg.tolist(),
                    float(value),
                    float(online),
                    solver_log=[float(v) for v in slog.values],
                    generator_log=[float(v) for v in glog.values],
                    solver_best_epoch=slog.best_epoch,
                    generator_best_epoch=glog.best_epoch,
                )
            )
            log.info("iteration %d: value %.4f, online exploitability %.4f, max p_ss %.3f", t, value, online, sigma_ss.max())
            if callback is not None:
                callback(ckpt)
    except Exception as exc:
        ckpt.complete = False
        ckpt.error = f"{type(exc).__name__}: {exc}"
        fill_retrospective(ckpt)
        raise RunAborted(f"PSRO aborted: {ckpt.error}", ckpt) from exc
    fill_retrospective(ckpt)
    ckpt.complete = True
    return ckpt


def fill_retrospective(ckpt: PopulationCheckpoint) -> None:
    """Exploitability of each stored meta-strategy measured on the latest table."""
    u = ckpt.game.table
    r, c = u.shape
    for rec in ckpt.records:
        rec.retro_expl = float(exploitability(u, pad(rec.sigma_ss, r), pad(rec.sigma_dg, c)))


def exploitability_series(ckpt: PopulationCheckpoint) -> list[tuple[int, float, float, float]]:
    """(iteration, online, retrospective, game value) recomputed from the stored table."""
    u = ckpt.game.table
    r, c = u.shape
    rows = []
    for rec in ckpt.records:
        retro = float(exploitability(u, pad(rec.sigma_ss, r), pad(rec.sigma_dg, c)))
        rows.append((rec.iteration, rec.online_expl, retro, rec.game_value))
    return rows


# --- mixing --------------------------------------------------------------------


def select_support(sigma, threshold: float) -> list[int]:
    """Smallest set of top-probability indices whose mass reaches ``threshold``.

    A threshold of 1 keeps every index.
    """
    s = check_simplex(sigma)
    if not 0 < threshold <= 1:
        raise InvalidParameter("threshold must lie in (0, 1]")
    order = np.argsort(-s, kind="stable")
    if threshold >= 1.0:
        return [int(i) for i in order]
    cum = np.cumsum(s[order])
    k = int(np.searchsorted(cum, threshold - 1e-12)) + 1
    return [int(i) for i in order[: min(k, s.size)]]


def _require_complete(ckpt: PopulationCheckpoint) -> None:
    if not ckpt.complete:
        raise IncompleteCheckpoint("checkpoint is flagged incomplete")


def build_mixed_solver(ckpt: PopulationCheckpoint, threshold: float | None = None) -> MixedSolver:
    _require_complete(ckpt)
    threshold = ckpt.config.support_threshold if threshold is None else threshold
    sigma, _ = ckpt.final_sigma
    idx = select_support(sigma, threshold)
    w = sigma[idx]
    return MixedSolver([ckpt.solvers[i] for i in idx], w / w.sum())


def _top_k_mixture(ckpt, sigma, k):
    order = np.argsort(-sigma, kind="stable")[:k]
    w = sigma[order]
    if w.sum() <= 0:
        w = np.ones_like(w)
    return MixedSolver([ckpt.solvers[i] for i in order], w / w.sum()), order


@dataclass
class PreparedDataset:
    """Instances grouped by size, ready for repeated solver evaluation.

    Solvers see min-max normalized coordinates; tour lengths and oracle
    optima are measured on the raw coordinates.
    """

    coords: dict[int, np.ndarray]
    raw: dict[int, np.ndarray]
    optimum: dict[int, np.ndarray]
    index: dict[int, np.ndarray]
    exact: bool

    @classmethod
    def from_instances(cls, instances, threshold: int = 18) -> "PreparedDataset":
        groups: dict[int, list] = {}
        order: dict[int, list] = {}
        for i, inst in enumerate(instances):
            pts = inst.points if isinstance(inst, Instance) else np.asarray(inst, dtype=np.float64)
            groups.setdefault(pts.shape[0], []).append(pts)
            order.setdefault(pts.shape[0], []).append(i)
        if not groups:
            raise InvalidParameter("dataset is empty")
        raw = {n: np.stack(v) for n, v in sorted(groups.items())}
        opt, exact = {}, True
        for n, c in raw.items():
            opt[n], ex = oracle_lengths(c, threshold)
            exact &= ex
        coords = {n: normalize_array(c) for n, c in raw.items()}
        return cls(coords, raw, opt, {n: np.array(order[n]) for n in raw}, exact)

    @property
    def size(self) -> int:
        return sum(v.shape[0] for v in self.raw.values())

    def evaluate(self, solver) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Per-instance (solver length, oracle length, gap) in the original instance order."""
        lengths, opt = np.empty(self.size), np.empty(self.size)
        for n, c in self.coords.items():
            idx = self.index[n]
            lengths[idx] = batch_tour_lengths(self.raw[n], solver.solve_batch(c))
            opt[idx] = self.optimum[n]
        return lengths, opt, (lengths - opt) / opt

    def gaps(self, solver) -> np.ndarray:
        return self.evaluate(solver)[2]


def _summary(gaps: np.ndarray) -> tuple[float, float]:
    se = float(gaps.std(ddof=1) / np.sqrt(gaps.size)) if gaps.size > 1 else 0.0
    return float(gaps.mean()), se


def topk_ablation(ckpt: PopulationCheckpoint, dataset: PreparedDataset, ks) -> list[tuple[int, float, float]]:
    """Mean gap of the Nash-weighted mixture of the k most probable solvers, per k."""
    _require_complete(ckpt)
    sigma, _ = ckpt.final_sigma
    out = []
    for k in ks:
        if k > len(ckpt.solvers):
            log.warning("k=%d exceeds population size %d; clamping", k, len(ckpt.solvers))
            k = len(ckpt.solvers)
        mixed, _ = _top_k_mixture(ckpt, sigma, k)
        out.append((k, *_summary(dataset.gaps(mixed))))
    return out


def weight_variants(ckpt: PopulationCheckpoint) -> dict[str, np.ndarray]:
    """Row weights over the whole population for the three mixing variants."""
    sigma, _ = ckpt.final_sigma
    n = len(ckpt.solvers)
    partial = np.zeros(n)
    top = np.argsort(-sigma, kind="stable")[: min(2, n)]
    partial[top] = sigma[top]
    if partial.sum() <= 0:
        partial[top] = 1.0
    return {
        "original": sigma,
        "uniform": np.full(n, 1.0 / n),
        "original_partial": partial / partial.sum(),
    }


def weight_ablation(ckpt: PopulationCheckpoint, dataset: PreparedDataset) -> dict[str, tuple[float, float]]:
    """Mean gap (and stderr) on ``dataset`` for the original, uniform and original-partial mixtures."""
    _require_complete(ckpt)
    out = {}
    for name, w in weight_variants(ckpt).items():
        idx = np.nonzero(w > 0)[0]
        mixed = MixedSolver([ckpt.solvers[i] for i in idx], w[idx] / w[idx].sum())
        out[name] = _summary(dataset.gaps(mixed))
    return out


def table_worst_case(ckpt: PopulationCheckpoint) -> dict[str, float]:
    """Worst-case column gap of each weighting variant and of every pure solver."""
    u = ckpt.game.table
    out = {name: worst_case_gap(u, w) for name, w in weight_variants(ckpt).items()}
    for i in range(u.shape[0]):
        out[f"pure_{i}"] = float(u[i].max())
    return out


def trained_br_exploitability(ckpt: PopulationCheckpoint, iteration: int | None = None, threads: int = 1) -> float:
    """Exploitability with freshly trained best responses added to the table ones.

    Each side's best response is the better of the table best response and a
    newly trained oracle evaluated against the opponent mixture.
    """
    cfg = ckpt.config
    rec = ckpt.records[-1] if iteration is None else ckpt.records[iteration - 1]
    u = ckpt.game.table
    r, c = u.shape
    s_ss, s_dg = pad(rec.sigma_ss, r), pad(rec.sigma_dg, c)
    rng_s = _stream(cfg.seed, 10_000 + rec.iteration, 1)
    rng_g = _stream(cfg.seed, 10_000 + rec.iteration, 2)
    br_s, _ = train_solver_oracle(s_dg, ckpt.generators, cfg.solver_train_config(), rng_s, id=r)
    br_g, _ = train_generator_oracle(s_ss, ckpt.solvers, cfg.generator_train_config(), rng_g, id=c)
    m = cfg.cell_samples
    row = np.array([evaluate_cell(br_s, g, m, cell_seed(cfg.seed, r, j), cfg.exact_threshold)[0] for j, g in enumerate(ckpt.generators)])
    col = np.array([evaluate_cell(s, br_g, m, cell_seed(cfg.seed, i, c), cfg.exact_threshold)[0] for i, s in enumerate(ckpt.solvers)])
    best_ss_gap = min(float((u @ s_dg).min()), float(row @ s_dg))
    best_dg_gap = max(float((s_ss @ u).max()), float(s_ss @ col))
    return 0.5 * (-best_ss_gap + best_dg_gap)


# --- attack experiment ---------------------------------------------------------


@dataclass
class AttackConfig:
    epochs: int = 40
    n: int = 10
    eval_size: int = 200
    report_size: int = 200
    init_bias: float = -6.0
    batch_size: int = 64
    batches_per_epoch: int = 8
    lr: float = 0.05
    lr_decay: float = 0.95
    weight_decay: float = 0.01
    lam: float = DEFAULT_LAMBDA
    exact_threshold: int = 18
    seed: int = 0

    def __post_init__(self):
        errors = [f"{k}: must be positive" for k in ("n", "eval_size", "report_size", "batch_size", "batches_per_epoch", "lr") if not getattr(self, k) > 0]
        if self.epochs < 0:
            errors.append("epochs: must be >= 0")
        if self.n < 4:
            errors.append("n: must be >= 4")
        if not 0 < self.lam <= 1:
            errors.append("lam: must lie in (0, 1]")
        if errors:
            raise InvalidParameter("; ".join(errors))


@dataclass
class PairedGap:
    uniform_gap: float
    attacked_gap: float
    diff: float
    paired_stderr: float
    count: int

    @property
    def z(self) -> float:
        return self.diff / self.paired_stderr if self.paired_stderr > 0 else float("inf") * np.sign(self.diff)


def paired_gap(solver, policy: GeneratorPolicy, base: np.ndarray, noise: np.ndarray, threshold: int = 18) -> PairedGap:
    """Gap on the unattacked points versus the same points after the attack, paired per instance."""
    ds_u = PreparedDataset.from_instances(list(base), threshold)
    ds_a = PreparedDataset.from_instances(list(attack_batch(policy, base, noise).coords), threshold)
    gu, ga = ds_u.gaps(solver), ds_a.gaps(solver)
    d = ga - gu
    se = float(d.std(ddof=1) / np.sqrt(d.size)) if d.size > 1 else 0.0
    return PairedGap(float(gu.mean()), float(ga.mean()), float(d.mean()), se, int(d.size))


@dataclass
class AttackResult:
    generator: GeneratorPolicy
    curve: list[tuple[int, float]]
    best_epoch: int
    initial: PairedGap
    final: PairedGap

    def report(self) -> dict:
        return {
            "best_epoch": self.best_epoch,
            "initial": dataclasses.asdict(self.initial) | {"z": self.initial.z},
            "final": dataclasses.asdict(self.final) | {"z": self.final.z},
        }


def run_attack(solver, config: AttackConfig) -> AttackResult:
    """Train a single-scale generator against one frozen solver and report paired gaps.

    The report uses fresh instances, independent of the draws that picked
    the best epoch.
    """
    gcfg = GeneratorTrainConfig(
        epochs=config.epochs,
        batch_size=config.batch_size,
        batches_per_epoch=config.batches_per_epoch,
        lr=config.lr,
        lr_decay=config.lr_decay,
        weight_decay=config.weight_decay,
        eval_size=config.eval_size,
        support=(config.n,),
        lam=config.lam,
        init_output_bias=config.init_bias,
        exact_threshold=config.exact_threshold,
    )
    init = GeneratorPolicy.random(_stream(config.seed, 0, 3), (config.n,), config.lam, config.init_bias)
    gen, tlog = train_generator_oracle([1.0], [solver], gcfg, _stream(config.seed, 1, 3), init=init)
    rng = _stream(config.seed, 2, 3)
    base = rng.random((config.report_size, config.n, 2))
    noise = rng.standard_normal((config.report_size, config.n, 2))
    return AttackResult(
        gen,
        [(int(e), float(v)) for e, v in zip(tlog.epochs, tlog.values)],
        tlog.best_epoch,
        paired_gap(solver, init, base, noise, config.exact_threshold),
        paired_gap(solver, gen, base, noise, config.exact_threshold),
    )
