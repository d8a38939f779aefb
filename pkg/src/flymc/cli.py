"""Command line entry point: ``flymc {generate,tune,run,compare,oracle}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields

import numpy as np

from .bounds import DEFAULT_FAMILY, BoundParams, SGDConfig, map_tune
from .diagnostics import moment_comparison, queries_per_effective_sample
from .harness import (
    ConfigError,
    ExperimentConfig,
    SyntheticSpec,
    generate_synthetic,
    grid_posterior_oracle,
    run_experiment,
)
from .models import FAMILIES, Prior, load_csv, make_model, save_csv
from .samplers import ChainTrace


def _add_model_args(p):
    p.add_argument("--family", choices=FAMILIES, default="logistic")
    p.add_argument("--n-classes", type=int, default=None)
    p.add_argument("--prior-kind", choices=("gaussian", "laplace"), default=None)
    p.add_argument("--prior-scale", type=float, default=1.0)
    p.add_argument("--nu", type=float, default=4.0)
    p.add_argument("--noise-scale", type=float, default=1.0)


def _prior(args):
    kind = args.prior_kind or ("laplace" if args.family == "robust_t" else "gaussian")
    return Prior(kind, args.prior_scale)


def _json_out(obj):
    json.dump(obj, sys.stdout, indent=2, sort_keys=True)
    sys.stdout.write("\n")


def cmd_generate(args):
    spec = SyntheticSpec(args.theta_scale, args.prior_kind or "gaussian", args.nu, args.noise_scale)
    data = generate_synthetic(spec, args.family, args.n_points, args.n_features, args.n_classes, args.seed)
    save_csv(data, args.out)
    if args.meta:
        with open(args.meta, "w") as fh:
            json.dump(data.metadata, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return 0


def cmd_tune(args):
    data = load_csv(args.data, args.family, args.n_classes)
    model = make_model(args.family, args.nu, args.noise_scale)
    sgd = SGDConfig(args.sgd_step, args.sgd_batch_size, args.sgd_epochs, args.seed)
    params = map_tune(data, model, _prior(args), sgd, args.bound or DEFAULT_FAMILY[args.family])
    params.save(args.out)
    return 0


def cmd_oracle(args):
    data = load_csv(args.data, args.family, args.n_classes)
    model = make_model(args.family, args.nu, args.noise_scale)
    grid = None
    if args.grid:
        grid = [tuple(float(v) for v in g.split(":")) for g in args.grid]
        grid = [(lo, hi, int(n)) for lo, hi, n in grid]
    oracle = grid_posterior_oracle(data, model, _prior(args), grid)
    if args.table:
        oracle.write_csv(args.table)
    _json_out({"mean": oracle.mean.tolist(), "var": oracle.var.tolist(), "log_evidence": oracle.log_norm})
    return 0


def _read_queries(path):
    with open(path) as fh:
        next(fh)
        cum = np.array([int(line.split(",")[3]) for line in fh if line.strip()])
    return np.diff(cum, prepend=cum[0] if cum.size else 0)


def cmd_compare(args):
    a, b = np.load(args.a), np.load(args.b)
    burn_a = int(len(a) * args.burn_in) if args.burn_in < 1 else int(args.burn_in)
    burn_b = int(len(b) * args.burn_in) if args.burn_in < 1 else int(args.burn_in)
    cmp = moment_comparison(a[burn_a:], b[burn_b:], args.threshold)
    report = {"comparison": cmp.to_dict(), "flagged": cmp.flagged}
    if args.trace_a and args.trace_b:
        qa, qb = _read_queries(args.trace_a), _read_queries(args.trace_b)
        ta = ChainTrace(a, np.zeros(len(a)), np.zeros(len(a), int), qa, np.zeros(len(a), bool))
        tb = ChainTrace(b, np.zeros(len(b)), np.zeros(len(b), int), qb, np.zeros(len(b), bool))
        cost_a = queries_per_effective_sample(ta, burn_a)
        cost_b = queries_per_effective_sample(tb, burn_b)
        report.update(queries_per_es_a=cost_a, queries_per_es_b=cost_b, speedup_a_over_b=cost_b / cost_a)
    _json_out(report)
    return 1 if (cmp.flagged and args.fail_on_flag) else 0


def cmd_run(args):
    doc = {}
    for f in fields(ExperimentConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            doc[f.name] = v
    if args.config:
        with open(args.config) as fh:
            doc.update(json.load(fh))
    try:
        cfg = ExperimentConfig.from_dict(doc).validate()
    except ConfigError as exc:
        print(str(exc), file=sys.stderr)
        return 2
    out = run_experiment(cfg)
    with open(out / "table.csv") as fh:
        sys.stdout.write(fh.read())
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="flymc", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic dataset CSV")
    _add_model_args(p)
    p.add_argument("--n-points", type=int, required=True)
    p.add_argument("--n-features", type=int, required=True)
    p.add_argument("--theta-scale", type=float, default=1.0)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--meta", help="also write generation metadata (true theta) as JSON")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("tune", help="MAP-tune bound parameters and save them as JSON")
    _add_model_args(p)
    p.add_argument("--data", required=True)
    p.add_argument("--bound", choices=sorted(set(DEFAULT_FAMILY.values())))
    p.add_argument("--sgd-step", type=float, default=SGDConfig.step)
    p.add_argument("--sgd-batch-size", type=int, default=SGDConfig.batch_size)
    p.add_argument("--sgd-epochs", type=int, default=SGDConfig.epochs)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("run", help="run regular / untuned / MAP-tuned chains and write artifacts")
    p.add_argument("--config", help="JSON config; its fields override the flags")
    for f in fields(ExperimentConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.name == "algorithms":
            p.add_argument(flag, nargs="+", default=None)
        elif f.type in ("bool",):
            p.add_argument(flag, action=argparse.BooleanOptionalAction, default=None)
        elif f.type in ("int", "int | None"):
            p.add_argument(flag, type=int, default=None)
        elif f.type in ("float", "float | None"):
            p.add_argument(flag, type=float, default=None)
        else:
            p.add_argument(flag, default=None)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("compare", help="compare moments of two saved theta traces")
    p.add_argument("a")
    p.add_argument("b")
    p.add_argument("--trace-a")
    p.add_argument("--trace-b")
    p.add_argument("--burn-in", type=float, default=0.5)
    p.add_argument("--threshold", type=float, default=4.0)
    p.add_argument("--fail-on-flag", action="store_true")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("oracle", help="grid-quadrature posterior moments (at most 2 parameters)")
    _add_model_args(p)
    p.add_argument("--data", required=True)
    p.add_argument("--grid", action="append", metavar="LOW:HIGH:N",
                   help="grid for one dimension, repeat per dimension; write --grid=-4:4:201 when LOW "
                        "is negative (default: automatic)")
    p.add_argument("--table", help="write the normalized density table to this CSV")
    p.set_defaults(func=cmd_oracle)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, RuntimeError, OSError) as exc:
        print(f"flymc {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
