"""Command-line entry point: ``psrotsp`` / ``python -m psrotsp``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import psro
from .errors import PsroTspError
from .oracle import oracle_for
from .psro import (
    AttackConfig,
    PopulationCheckpoint,
    PreparedDataset,
    PsroConfig,
    RunAborted,
    atomic_write,
    build_mixed_solver,
    exploitability_series,
    psro_run,
    run_attack,
    trained_br_exploitability,
    weight_variants,
)
from .solver import MixedSolver
from .tsp_core import Dataset, Instance, generate_benchmark, load_tsplib, normalize, tour_length

log = logging.getLogger(__name__)

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
DEFAULT_LAMBDAS = tuple(round(0.1 * i, 10) for i in range(1, 11))


class ConfigError(Exception):
    """Invalid user input; reported with exit code 2."""


# --- configuration -------------------------------------------------------------


@dataclass
class DatasetSpec:
    """Either generated benchmark groups (``n`` + ``lambdas``) or a file path."""

    n: int | None = None
    lambdas: tuple[float, ...] = DEFAULT_LAMBDAS
    count: int = 100
    seed: int = 0
    path: str | None = None
    tsplib: str | None = None


@dataclass
class ExperimentConfig:
    psro: PsroConfig
    datasets: list[DatasetSpec] = field(default_factory=list)
    output_dir: str | None = None


def _line_of(text: str, key: str) -> str:
    for i, line in enumerate(text.splitlines(), 1):
        if f'"{key}"' in line:
            return f"line {i}: "
    return ""


def _type_error(value, kind) -> str | None:
    if kind is int and (isinstance(value, bool) or not isinstance(value, int)):
        return f"expected an integer, got {value!r}"
    if kind is float and (isinstance(value, bool) or not isinstance(value, (int, float))):
        return f"expected a number, got {value!r}"
    if kind is str and not isinstance(value, str):
        return f"expected a string, got {value!r}"
    if kind in ("ints", "floats"):
        if not isinstance(value, list) or not value:
            return "expected a non-empty list"
        inner = int if kind == "ints" else float
        for v in value:
            err = _type_error(v, inner)
            if err:
                return err
    return None


_KIND = {"int": int, "float": float, "str": str, "tuple[int, ...]": "ints", "tuple[float, ...]": "floats", "int | None": int, "str | None": str}


def _validate_fields(obj: dict, cls, text: str, context: str) -> tuple[dict, list[str]]:
    types = {f.name: f.type for f in dataclasses.fields(cls)}
    errors, clean = [], {}
    for key, value in obj.items():
        if key not in types:
            errors.append(f"{_line_of(text, key)}{context}unknown key '{key}'")
            continue
        err = _type_error(value, _KIND[types[key]])
        if err:
            errors.append(f"{_line_of(text, key)}{context}field '{key}': {err}")
        clean[key] = tuple(value) if isinstance(value, list) else value
    return clean, errors


def parse_json(text: str, source: str = "config"):
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{source}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    if not isinstance(obj, dict):
        raise ConfigError(f"{source}: top level must be a JSON object")
    return obj


def load_experiment_config(path) -> ExperimentConfig:
    """Validate an experiment config file fully before anything runs."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    obj = parse_json(text, str(path))
    datasets = obj.pop("datasets", [])
    output_dir = obj.pop("output_dir", None)
    clean, errors = _validate_fields(obj, PsroConfig, text, "")
    if output_dir is not None and not isinstance(output_dir, str):
        errors.append(f"{_line_of(text, 'output_dir')}field 'output_dir': expected a string")
    specs = []
    if not isinstance(datasets, list):
        errors.append(f"{_line_of(text, 'datasets')}field 'datasets': expected a list")
        datasets = []
    for i, d in enumerate(datasets):
        if not isinstance(d, dict):
            errors.append(f"datasets[{i}]: expected an object")
            continue
        dclean, derr = _validate_fields(d, DatasetSpec, text, f"datasets[{i}]: ")
        errors += derr
        if not derr:
            try:
                specs.append(_dataset_spec(dclean))
            except ConfigError as exc:
                errors.append(f"datasets[{i}]: {exc}")
    if errors:
        raise ConfigError(f"{path}: " + "; ".join(errors))
    try:
        cfg = PsroConfig(**clean)
    except PsroTspError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return ExperimentConfig(cfg, specs, output_dir)


def _dataset_spec(d: dict) -> DatasetSpec:
    spec = DatasetSpec(**d)
    sources = sum(x is not None for x in (spec.n, spec.path, spec.tsplib))
    if sources != 1:
        raise ConfigError("give exactly one of 'n', 'path' or 'tsplib'")
    if spec.n is not None and (spec.n < 3 or spec.count < 1 or not all(0 < lam <= 1 for lam in spec.lambdas)):
        raise ConfigError("need n >= 3, count >= 1 and every lambda in (0, 1]")
    return spec


def load_attack_config(path, seed: int | None) -> AttackConfig:
    overrides = {}
    if path is not None:
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read attack config {path}: {exc.strerror}") from None
        clean, errors = _validate_fields(parse_json(text, str(path)), AttackConfig, text, "")
        if errors:
            raise ConfigError(f"{path}: " + "; ".join(errors))
        overrides.update(clean)
    if seed is not None:
        overrides["seed"] = seed
    try:
        return AttackConfig(**overrides)
    except PsroTspError as exc:
        raise ConfigError(str(exc)) from None


# --- datasets ------------------------------------------------------------------


def _int_seed(*parts) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def generated_datasets(n: int, lambdas, count: int, seed: int) -> list[tuple[str, Dataset]]:
    out = []
    for i, lam in enumerate(lambdas):
        ds = generate_benchmark(n, lam, count, _int_seed(seed, n, i))
        out.append((f"n{n}_lam{lam:g}", ds))
    return out


def _load_instance_file(path: Path) -> tuple[str, list[Instance]]:
    try:
        if path.suffix == ".json":
            return path.stem, Dataset.load(path).instances
        return path.stem, [load_tsplib(path)]
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None


def resolve_datasets(specs) -> list[tuple[str, list[Instance]]]:
    out = []
    for spec in specs:
        if spec.n is not None:
            out += [(name, ds.instances) for name, ds in generated_datasets(spec.n, spec.lambdas, spec.count, spec.seed)]
        else:
            out.append(_load_instance_file(Path(spec.path or spec.tsplib)))
    return out


# --- outputs -------------------------------------------------------------------


def provenance(ckpt: PopulationCheckpoint) -> str:
    return f"# seed={ckpt.seed} config_hash={ckpt.config.config_hash()}\n"


def _csv(header: str, columns, rows) -> str:
    buf = io.StringIO()
    buf.write(header)
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    return buf.getvalue()


def exploitability_csv(ckpt: PopulationCheckpoint) -> str:
    return _csv(provenance(ckpt), ["iter", "online_expl", "retro_expl", "game_value"], exploitability_series(ckpt))


def metastrategy_csv(ckpt: PopulationCheckpoint) -> str:
    rows = []
    for rec in ckpt.records:
        rows += [(rec.iteration, "ss", i, p) for i, p in enumerate(rec.sigma_ss)]
        rows += [(rec.iteration, "dg", j, p) for j, p in enumerate(rec.sigma_dg)]
    return _csv(provenance(ckpt), ["iter", "player", "index", "prob"], rows)


def write_run_outputs(ckpt: PopulationCheckpoint, out_dir) -> None:
    out_dir = Path(out_dir)
    ckpt.save(out_dir / "checkpoint.json")
    atomic_write(out_dir / "exploitability.csv", exploitability_csv(ckpt))
    atomic_write(out_dir / "metastrategy.csv", metastrategy_csv(ckpt))
    atomic_write(out_dir / "metatable.csv", ckpt.game.to_csv(provenance(ckpt)[2:-1]))


def variant_solvers(ckpt: PopulationCheckpoint, variants, ks=(), threshold=None, solver_index=None):
    """(variant name, k, solver) triples for the requested mixing variants."""
    sigma, _ = ckpt.final_sigma
    weights = weight_variants(ckpt)
    out = []
    for v in variants:
        if v == "mixed":
            m = build_mixed_solver(ckpt, threshold)
            out.append((v, len(m.members), m))
        elif v in weights:
            w = weights[v]
            idx = np.nonzero(w > 0)[0]
            out.append((v, int(idx.size), MixedSolver([ckpt.solvers[i] for i in idx], w[idx] / w[idx].sum())))
        elif v == "single":
            i = int(np.argmax(sigma)) if solver_index is None else solver_index
            if not 0 <= i < len(ckpt.solvers):
                raise ConfigError(f"solver index {i} out of range (population {len(ckpt.solvers)})")
            out.append((f"single_{i}", 1, ckpt.solvers[i]))
        elif v == "topk":
            for k in ks or range(1, len(ckpt.solvers) + 1):
                kk = min(k, len(ckpt.solvers))
                if kk < k:
                    log.warning("k=%d exceeds population size %d; clamping", k, kk)
                m, _ = psro._top_k_mixture(ckpt, sigma, kk)
                out.append((v, kk, m))
    return out


def _load_checkpoint(path) -> PopulationCheckpoint:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"checkpoint not found: {path}")
    try:
        return PopulationCheckpoint.load(path)
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ConfigError(f"checkpoint {path} is unreadable: {exc}") from None


def evaluate_datasets(ckpt, datasets, variants, ks=(), threshold=None, solver_index=None):
    """Rows for gaps.csv and the per-instance table."""
    solvers = variant_solvers(ckpt, variants, ks, threshold, solver_index)
    summary, per_instance = [], []
    for ds_id, instances in datasets:
        prepared = PreparedDataset.from_instances(instances, ckpt.config.exact_threshold)
        for name, k, solver in solvers:
            lengths, opt, gaps = prepared.evaluate(solver)
            se = float(gaps.std(ddof=1) / np.sqrt(gaps.size)) if gaps.size > 1 else 0.0
            summary.append((ds_id, name, k, float(gaps.mean()), se))
            per_instance += [(ds_id, name, k, i, inst.n, a, b, g) for i, (inst, a, b, g) in enumerate(zip(instances, lengths, opt, gaps))]
    return summary, per_instance


def write_eval_outputs(ckpt, summary, per_instance, out_dir) -> None:
    head = provenance(ckpt)
    atomic_write(Path(out_dir) / "gaps.csv", _csv(head, ["dataset_id", "variant", "k", "mean_gap", "stderr"], summary))
    atomic_write(
        Path(out_dir) / "instances.csv",
        _csv(head, ["dataset_id", "variant", "k", "index", "n", "solver_length", "oracle_length", "gap"], per_instance),
    )


# --- commands ------------------------------------------------------------------


def cmd_run(args) -> int:
    exp = load_experiment_config(args.config)
    cfg = exp.psro
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    out = Path(args.output_dir or exp.output_dir or "runs/default")
    datasets = resolve_datasets(exp.datasets)
    try:
        ckpt = psro_run(cfg, threads=args.threads)
    except RunAborted as exc:
        write_run_outputs(exc.checkpoint, out)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    write_run_outputs(ckpt, out)
    if datasets:
        summary, per_instance = evaluate_datasets(ckpt, datasets, ["mixed"])
        write_eval_outputs(ckpt, summary, per_instance, out)
    last = ckpt.records[-1]
    print(f"wrote {out}: {len(ckpt.solvers)} solvers, game value {last.game_value:.4f}, retro exploitability {last.retro_expl:.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = _load_checkpoint(args.checkpoint)
    datasets = [_load_instance_file(Path(p)) for p in args.dataset]
    if args.n is not None:
        seed = args.seed if args.seed is not None else 0
        datasets += [(name, ds.instances) for name, ds in generated_datasets(args.n, args.lambdas, args.count, seed)]
    if not datasets:
        raise ConfigError("nothing to evaluate: give --dataset files or --n")
    summary, per_instance = evaluate_datasets(ckpt, datasets, args.variant or ["mixed"], args.k, args.threshold, args.solver_index)
    out = Path(args.output_dir or ".")
    write_eval_outputs(ckpt, summary, per_instance, out)
    for row in summary:
        print(f"{row[0]} {row[1]} k={row[2]} gap={row[3]:.4f} (se {row[4]:.4f})")
    return EXIT_OK


def cmd_attack(args) -> int:
    ckpt = _load_checkpoint(args.checkpoint)
    cfg = load_attack_config(args.attack_config, args.seed)
    sigma, _ = ckpt.final_sigma
    idx = int(np.argmax(sigma)) if args.solver_index is None else args.solver_index
    if not 0 <= idx < len(ckpt.solvers):
        raise ConfigError(f"solver index {idx} out of range (population {len(ckpt.solvers)})")
    result = run_attack(ckpt.solvers[idx], cfg)
    out = Path(args.output_dir or ".")
    head = f"# seed={cfg.seed} config_hash={ckpt.config.config_hash()} solver={idx}\n"
    atomic_write(out / "attack_curve.csv", _csv(head, ["epoch", "gap"], result.curve))
    atomic_write(out / "generator.json", json.dumps(result.generator.to_json_obj(), sort_keys=True))
    report = {"solver_index": idx, "config": dataclasses.asdict(cfg)} | result.report()
    atomic_write(out / "attack_report.json", json.dumps(report, sort_keys=True, indent=1))
    f = result.final
    print(f"uniform gap {f.uniform_gap:.4f}, attacked gap {f.attacked_gap:.4f}, diff {f.diff:.4f} (paired se {f.paired_stderr:.4f})")
    return EXIT_OK


def cmd_exploitability(args) -> int:
    ckpt = _load_checkpoint(args.checkpoint)
    out = Path(args.output_dir or ".")
    atomic_write(out / "exploitability.csv", exploitability_csv(ckpt))
    for it, online, retro, value in exploitability_series(ckpt):
        print(f"iter {it}: online {online:.6f} retro {retro:.6f} value {value:.6f}")
    if args.trained_br:
        rows = [(r.iteration, trained_br_exploitability(ckpt, r.iteration, args.threads)) for r in ckpt.records]
        atomic_write(out / "exploitability_trained_br.csv", _csv(provenance(ckpt), ["iter", "trained_br_expl"], rows))
    return EXIT_OK


def cmd_solve(args) -> int:
    name, instances = _load_instance_file(Path(args.instance))
    if args.solver == "oracle":
        solver = None
    else:
        ckpt = _load_checkpoint(args.solver)
        solver = variant_solvers(ckpt, ["single" if args.solver_index is not None else "mixed"], threshold=args.threshold, solver_index=args.solver_index)[0][2]
    for i, inst in enumerate(instances):
        if solver is None:
            res = oracle_for(inst)
            tour, length, tag = res.tour, res.length, "exact" if res.exact else "2-opt"
        else:
            tour = solver.solve_batch(normalize(inst).points[None])[0]
            length, tag = tour_length(inst, tour), "greedy"
        print(f"{name}[{i}] length {length:.6f} ({tag})")
        print("tour " + " ".join(str(int(c)) for c in tour))
    return EXIT_OK


def cmd_export_dataset(args) -> int:
    seed = args.seed if args.seed is not None else 0
    out = Path(args.output_dir or ".")
    for name, ds in generated_datasets(args.n, args.lambdas, args.count, seed):
        atomic_write(out / f"{name}.json", ds.to_json())
        print(out / f"{name}.json")
    return EXIT_OK


# --- parser --------------------------------------------------------------------


def _lambdas(text: str) -> tuple[float, ...]:
    try:
        vals = tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad lambda list {text!r}") from None
    if not all(0 < v <= 1 for v in vals):
        raise argparse.ArgumentTypeError("every lambda must lie in (0, 1]")
    return vals


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override the master seed")
    common.add_argument("--threads", type=_positive, default=1, help="threads for meta-table cell evaluation")
    common.add_argument("--output-dir", default=None)
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="psrotsp", description="PSRO over TSP solvers and instance generators.")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", parents=[common], help="run PSRO from a JSON experiment config")
    r.add_argument("config")
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("eval", parents=[common], help="evaluate solvers from a checkpoint")
    e.add_argument("checkpoint")
    e.add_argument("--dataset", action="append", default=[], help="dataset JSON or TSPLIB file (repeatable)")
    e.add_argument("--n", type=int, default=None, help="generate benchmark groups of this size")
    e.add_argument("--lambdas", type=_lambdas, default=DEFAULT_LAMBDAS)
    e.add_argument("--count", type=_positive, default=100)
    e.add_argument("--variant", action="append", choices=["mixed", "original", "uniform", "original_partial", "single", "topk"])
    e.add_argument("--k", type=_positive, action="append", default=[])
    e.add_argument("--threshold", type=float, default=None)
    e.add_argument("--solver-index", type=int, default=None)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("attack", parents=[common], help="train a generator against one frozen solver")
    a.add_argument("checkpoint")
    a.add_argument("--attack-config", default=None)
    a.add_argument("--solver-index", type=int, default=None)
    a.set_defaults(func=cmd_attack)

    x = sub.add_parser("exploitability", parents=[common], help="recompute the exploitability series")
    x.add_argument("checkpoint")
    x.add_argument("--trained-br", action="store_true", help="also train fresh best responses")
    x.set_defaults(func=cmd_exploitability)

    s = sub.add_parser("solve", parents=[common], help="solve a TSPLIB or dataset file")
    s.add_argument("solver", help="checkpoint path or 'oracle'")
    s.add_argument("instance")
    s.add_argument("--solver-index", type=int, default=None)
    s.add_argument("--threshold", type=float, default=None)
    s.set_defaults(func=cmd_solve)

    d = sub.add_parser("export-dataset", parents=[common], help="write benchmark datasets over a lambda grid")
    d.add_argument("--n", type=int, required=True)
    d.add_argument("--lambdas", type=_lambdas, default=DEFAULT_LAMBDAS)
    d.add_argument("--count", type=_positive, default=100)
    d.set_defaults(func=cmd_export_dataset)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (PsroTspError, ValueError, RuntimeError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
