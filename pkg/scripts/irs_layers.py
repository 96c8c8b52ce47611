"""IRS per teacher layer and IVA with IRS-selected vs uniform importance weights.

    python3 scripts/irs_layers.py --workdir runs/irs
    python3 scripts/irs_layers.py --workdir runs/exposure --reuse   # teacher already trained there
"""

import argparse
import dataclasses
import logging
from pathlib import Path

from alignti.config import load_config
from alignti.experiments import dump, irs_layer_study, prepare
from alignti.plots import plot_irs


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config")
    ap.add_argument("--set", action="append", default=[])
    ap.add_argument("--workdir", default="runs/irs")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--reuse", action="store_true", help="use workdir/teacher instead of training one")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfg = load_config(args.config, args.set)
    if args.reuse:
        cfg = dataclasses.replace(cfg, output_dir=args.workdir,
                                  data=dataclasses.replace(cfg.data, path=f"{args.workdir}/dataset.jsonl"))
        teacher = Path(args.workdir) / "teacher"
    else:
        cfg, teacher = prepare(cfg, args.workdir)
    results = irs_layer_study(cfg, teacher, args.seeds)
    dump(results, f"{args.workdir}/irs_layers.json")
    plot_irs([f"{args.workdir}/irs.csv"], f"{args.workdir}/irs.png")
    print(results)


if __name__ == "__main__":
    main()
