"""Train the default teacher, distill vanilla-kd and align-ti students, compare exposure bias.

    python3 scripts/exposure_bias.py --workdir runs/exposure --seeds 0 1 2
"""

import argparse
import logging
import time

from alignti.config import load_config
from alignti.experiments import dump, exposure_bias, prepare, summarize_bias
from alignti.plots import plot_bias


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config")
    ap.add_argument("--set", action="append", default=[])
    ap.add_argument("--workdir", default="runs/exposure")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--max-len", type=int, default=32)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    t0 = time.perf_counter()
    cfg, teacher = prepare(load_config(args.config, args.set), args.workdir)
    results = exposure_bias(cfg, teacher, args.seeds, max_len=args.max_len)
    results["summary"] = summarize_bias(results, args.seeds)
    results["seconds"] = time.perf_counter() - t0
    dump(results, f"{args.workdir}/exposure_bias.json")
    plot_bias([f"{args.workdir}/{s}-seed{args.seeds[0]}/bias.csv" for s in ("vanilla-kd", "align-ti")],
              f"{args.workdir}/exposure_bias.png")
    print(results["summary"], f"{results['seconds']:.0f}s")


if __name__ == "__main__":
    main()
