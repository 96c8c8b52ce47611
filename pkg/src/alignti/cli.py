"""Command-line entry point: ``alignti <command> ...``.

Exit codes: 0 success, 2 configuration or input error, 3 numeric abort.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .errors import AlignTIError, ConfigError, ContractError, NumericDomainError

log = logging.getLogger("alignti")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


def _config(args):
    from .config import load_config

    overrides = list(args.set or [])
    for flag, key in (("strategy", "strategy"), ("steps", "optim.steps"), ("seed", "seeds.train"),
                      ("data", "data.path"), ("out", "output_dir")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides.append(f"{key}={json.dumps(value)}")
    return load_config(args.config, overrides)


def cmd_generate_data(args) -> None:
    from .synthdata import TaskSpec, generate_dataset, write_dataset

    spec = TaskSpec()
    if args.spec:
        try:
            spec = TaskSpec.from_dict(json.loads(Path(args.spec).read_text()))
        except (OSError, json.JSONDecodeError, TypeError) as exc:
            raise ConfigError(f"cannot read task spec {args.spec}: {exc}") from exc
    path = write_dataset(args.out, spec, generate_dataset(spec, args.n))
    print(f"wrote {args.n} records to {path} (vocab {spec.vocab.size}, spec {spec.spec_hash()})")


def cmd_train_teacher(args) -> None:
    from .train import train_teacher

    cfg = _config(args)
    ckpt, metrics = train_teacher(cfg)
    print(f"teacher checkpoint: {ckpt}")
    print(json.dumps(metrics.eval, indent=2, sort_keys=True))


def cmd_distill(args) -> None:
    from .train import distill

    cfg = _config(args)
    ckpt, metrics = distill(cfg, args.teacher, args.out_dir)
    print(f"student checkpoint: {ckpt}")
    print(json.dumps(metrics.eval, indent=2, sort_keys=True))


def cmd_evaluate(args) -> None:
    from .synthdata import read_dataset
    from .train import evaluate

    _, records = read_dataset(args.data)
    report = evaluate(args.student, args.teacher, records, args.max_new)
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text + "\n")
    print(text)


def cmd_irs_report(args) -> None:
    from .irs import irs_report
    from .model import load_checkpoint
    from .synthdata import read_dataset

    model = load_checkpoint(args.model)
    _, records = read_dataset(args.data)
    rep = irs_report(model, records[: args.limit], args.pairs, args.seed, args.source)
    if args.layer is not None:
        if not 0 <= args.layer < len(rep.per_layer_score):
            raise ConfigError(f"--layer {args.layer} outside [0, {len(rep.per_layer_score)})")
        rep.selected_layer = args.layer
    if args.out:
        rep.to_csv(args.out)
    for layer, score in enumerate(rep.per_layer_score):
        mark = " *" if layer == rep.selected_layer else ""
        print(f"layer {layer}: IRS {score:.6f}{mark}")


def cmd_bias_report(args) -> None:
    from .biasmetrics import bias_curve
    from .model import load_checkpoint
    from .synthdata import read_dataset

    teacher, student = load_checkpoint(args.teacher), load_checkpoint(args.student)
    _, records = read_dataset(args.data)
    records = [r for r in records if len(r.response_tokens) >= args.max_len]
    if not records:
        raise ConfigError(f"no records with at least {args.max_len} response tokens in {args.data}")
    curve = bias_curve(teacher, student, records, args.max_len, args.seeds, args.sampling, args.nucleus_p)
    curve.to_csv(args.out)
    if args.plot:
        from .plots import plot_bias

        plot_bias([args.out], args.plot)
    lo, hi = args.plateau
    print(f"%ExAccErr plateau over l in [{lo}, {hi}]: {curve.plateau(lo, hi):.3f}")


def cmd_plot(args) -> None:
    from .plots import plot_bias, plot_irs, plot_metrics

    kinds = {"bias": plot_bias, "irs": plot_irs, "metrics": plot_metrics}
    out = kinds[args.kind](args.csv, args.out)
    print(f"wrote {out}")


def cmd_selftest(args) -> None:
    import torch

    from .losses import naive_tpa_loss, sample_candidates, tpa_from_logits
    from .model import ModelConfig, TinyTransformer, forward_pass
    from .ribbon import assemble_augmented_batch
    from .synthdata import TaskSpec, generate_dataset, to_batch

    spec = TaskSpec(seed=1)
    recs = generate_dataset(spec, 3)
    batch = to_batch(recs)
    t = TinyTransformer(ModelConfig(spec.vocab.size, 2, 2, 16, 256, seed=1))
    s = TinyTransformer(ModelConfig(spec.vocab.size, 1, 2, 8, 256, seed=2))
    with torch.no_grad():
        cand = sample_candidates(forward_pass(s, batch)[0], batch, "nucleus", 2, seed=0)
        aug = assemble_augmented_batch(batch, cand.tokens)
        fast = float(tpa_from_logits(forward_pass(t, aug.seq, aug.mask)[0], forward_pass(s, aug.seq, aug.mask)[0], aug))
        slow = float(naive_tpa_loss(t, s, batch, cand))
    rel = abs(fast - slow) / abs(slow)
    print(f"ribbon vs naive TPA: {fast:.12g} vs {slow:.12g} (rel {rel:.2e})")
    if rel > 1e-6:
        raise NumericDomainError("ribbon TPA disagrees with the naive oracle")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="alignti", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def run_opts(sp):
        sp.add_argument("--config", help="JSON run config")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted override, value parsed as JSON")
        sp.add_argument("--data", help="dataset path")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--steps", type=int)
        sp.add_argument("--seed", type=int, help="training seed")

    g = sub.add_parser("generate-data", help="write a synthetic dataset")
    g.add_argument("--spec", help="JSON task spec (defaults when omitted)")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate_data)

    t = sub.add_parser("train-teacher", help="SFT-train the teacher")
    run_opts(t)
    t.set_defaults(func=cmd_train_teacher)

    d = sub.add_parser("distill", help="distill a student from a teacher checkpoint")
    run_opts(d)
    d.add_argument("--teacher", required=True, help="teacher checkpoint directory")
    d.add_argument("--strategy")
    d.add_argument("--out-dir", help="run directory (default: <output_dir>/student-<strategy>)")
    d.set_defaults(func=cmd_distill)

    e = sub.add_parser("evaluate", help="teacher-forced KL and exact-match accuracy")
    e.add_argument("--student", required=True)
    e.add_argument("--teacher")
    e.add_argument("--data", required=True)
    e.add_argument("--max-new", type=int, default=64)
    e.add_argument("--out")
    e.set_defaults(func=cmd_evaluate)

    i = sub.add_parser("irs-report", help="per-layer instruction-relevance scores")
    i.add_argument("--model", required=True)
    i.add_argument("--data", required=True)
    i.add_argument("--pairs", type=int, default=256)
    i.add_argument("--seed", type=int, default=0)
    i.add_argument("--limit", type=int, default=512, help="use at most this many records")
    i.add_argument("--layer", type=int, help="override the selected layer")
    i.add_argument("--source", choices=("teacher", "student"), default="teacher")
    i.add_argument("--out")
    i.set_defaults(func=cmd_irs_report)

    b = sub.add_parser("bias-report", help="accumulated-error and %%ExAccErr curves")
    b.add_argument("--teacher", required=True)
    b.add_argument("--student", required=True)
    b.add_argument("--data", required=True)
    b.add_argument("--max-len", type=int, default=32)
    b.add_argument("--seeds", type=int, nargs="+", default=[0])
    b.add_argument("--sampling", choices=("greedy", "nucleus"), default="nucleus")
    b.add_argument("--nucleus-p", type=float, default=0.9)
    b.add_argument("--plateau", type=int, nargs=2, default=(8, 32), metavar=("LO", "HI"))
    b.add_argument("--out", required=True)
    b.add_argument("--plot", help="also write a figure here")
    b.set_defaults(func=cmd_bias_report)

    pl = sub.add_parser("plot", help="render CSVs to an image")
    pl.add_argument("kind", choices=("bias", "irs", "metrics"))
    pl.add_argument("csv", nargs="+")
    pl.add_argument("--out", required=True)
    pl.set_defaults(func=cmd_plot)

    st = sub.add_parser("selftest", help="quick ribbon-vs-naive consistency check")
    st.set_defaults(func=cmd_selftest)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    from .train import NumericAbort

    try:
        args.func(args)
    except (NumericAbort, NumericDomainError) as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ContractError, AlignTIError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
