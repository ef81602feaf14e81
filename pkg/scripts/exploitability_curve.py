"""Exploitability of the PSRO meta-strategies over iterations, for several seeds.

Writes one exploitability.csv per seed plus a summary to the output directory.
"""

import argparse
import logging
import time
from pathlib import Path

from psrotsp.cli import write_run_outputs
from psrotsp.psro import PsroConfig, psro_run


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, nargs="+", default=[1, 2, 3])
    ap.add_argument("--iterations", type=int, default=5)
    ap.add_argument("--scales", type=int, nargs="+", default=[10])
    ap.add_argument("--cell-samples", type=int, default=100)
    ap.add_argument("--epochs", type=int, default=40)
    ap.add_argument("--mode", choices=["from_scratch", "fine_tune"], default="from_scratch")
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--output-dir", type=Path, default=Path("runs/exploitability"))
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    decreased = 0
    for seed in args.seeds:
        cfg = PsroConfig(
            iterations=args.iterations,
            scales=tuple(args.scales),
            cell_samples=args.cell_samples,
            solver_epochs=args.epochs,
            generator_epochs=args.epochs,
            seed=seed,
            mode=args.mode,
        )
        t0 = time.perf_counter()
        ckpt = psro_run(cfg, threads=args.threads)
        write_run_outputs(ckpt, args.output_dir / f"seed{seed}")
        retro = [r.retro_expl for r in ckpt.records]
        decreased += retro[-1] < retro[0]
        print(f"seed {seed}: retro {['%.4f' % v for v in retro]} ({time.perf_counter() - t0:.0f}s)")
    print(f"final < first in {decreased}/{len(args.seeds)} seeds")


if __name__ == "__main__":
    main()
