"""Compare ways of mixing a PSRO solver population.

Runs PSRO (or loads a checkpoint), then reports mean gaps of the top-k
Nash-weighted mixtures and of the original / uniform / original-partial
weightings on generated benchmark groups, alongside the worst-case column
gap each weighting attains on the meta-table.
"""

import argparse
import logging
from pathlib import Path

from psrotsp.cli import generated_datasets, write_run_outputs
from psrotsp.psro import (
    PopulationCheckpoint,
    PreparedDataset,
    PsroConfig,
    psro_run,
    table_worst_case,
    topk_ablation,
    weight_ablation,
)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--checkpoint", type=Path, default=None, help="reuse a finished run instead of training")
    ap.add_argument("--iterations", type=int, default=5)
    ap.add_argument("--scales", type=int, nargs="+", default=[10])
    ap.add_argument("--cell-samples", type=int, default=100)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--n", type=int, default=10)
    ap.add_argument("--lambdas", type=float, nargs="+", default=[0.1, 0.5, 1.0])
    ap.add_argument("--count", type=int, default=100)
    ap.add_argument("--output-dir", type=Path, default=Path("runs/mixing"))
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    if args.checkpoint is not None:
        ckpt = PopulationCheckpoint.load(args.checkpoint)
    else:
        cfg = PsroConfig(iterations=args.iterations, scales=tuple(args.scales), cell_samples=args.cell_samples, seed=args.seed)
        ckpt = psro_run(cfg)
        write_run_outputs(ckpt, args.output_dir)

    print("worst-case column gap on the meta-table:")
    for name, v in table_worst_case(ckpt).items():
        print(f"  {name:18s} {v:.4f}")

    ks = range(1, len(ckpt.solvers) + 1)
    for ds_id, ds in generated_datasets(args.n, args.lambdas, args.count, args.seed):
        data = PreparedDataset.from_instances(ds.instances, ckpt.config.exact_threshold)
        print(f"{ds_id}:")
        for k, mean, se in topk_ablation(ckpt, data, ks):
            print(f"  top-{k:<2d}             {mean:.4f} +- {se:.4f}")
        for name, (mean, se) in weight_ablation(ckpt, data).items():
            print(f"  {name:18s} {mean:.4f} +- {se:.4f}")


if __name__ == "__main__":
    main()
