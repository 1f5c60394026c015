"""Command line entry point: ``fedrisk {generate,run,accountant,compare}``."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import data, metrics
from .experiments import ExperimentConfig, accountant_query, emit_reports, run_condition

log = logging.getLogger("fedrisk")


def _generate(args):
    if args.config:
        config = ExperimentConfig.from_file(args.config, seed=args.seed)
        spec = config.synthetic_spec()
    else:
        if args.eicu_sites:
            sizes = data.EICU_SITES
        else:
            sizes = tuple((f"site{i:02d}", args.admissions) for i in range(args.sites))
        spec = data.SyntheticSpec(site_sizes=sizes, n_features=args.features,
                                  site_effect=args.site_effect, seed=args.seed or 0)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = data.write_csv(data.generate_synthetic(spec), out / "cohort.csv")
    print(path)


def _run(args):
    config = ExperimentConfig.from_file(args.config, seed=args.seed, out_dir=args.out)
    result = run_condition(config)
    paths = emit_reports(result.rows, result.trajectories, config.out_dir)
    sys.stdout.write(paths["summary"].read_text(encoding="utf-8"))
    for name, path in paths.items():
        print(f"{name}: {path}")


def _accountant(args):
    eps = accountant_query(args.q, args.z, args.steps, args.delta)
    print(f"epsilon={eps!r} q={args.q} z={args.z} steps={args.steps} delta={args.delta}")
    return eps


def read_scores(path):
    """Read ``record_id,label,score_a[,score_b]``; returns ids, labels and score columns."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        fields = reader.fieldnames or []
        if fields[:3] != ["record_id", "label", "score_a"] or fields[3:] not in ([], ["score_b"]):
            raise ValueError(f"{path}: header must be record_id,label,score_a[,score_b]")
        ids, labels, cols = [], [], {f: [] for f in fields[2:]}
        for line, row in enumerate(reader, start=2):
            try:
                labels.append(int(row["label"]))
                for f in cols:
                    cols[f].append(float(row[f]))
            except (TypeError, ValueError):
                raise ValueError(f"{path}:{line}: malformed row") from None
            ids.append(row["record_id"])
    return ids, np.array(labels), {k: np.array(v) for k, v in cols.items()}


def _compare(args):
    ids, labels, cols = read_scores(args.scores[0])
    if len(args.scores) == 2:
        ids_b, labels_b, cols_b = read_scores(args.scores[1])
        if ids_b != ids or not np.array_equal(labels_b, labels):
            raise ValueError("score files must list the same records with the same labels in the same order")
        cols["score_b"] = cols_b["score_a"]
    est_a = metrics.delong_estimate(cols["score_a"], labels)
    print(f"auc_a={est_a.auc!r} ci=({est_a.ci_low!r}, {est_a.ci_high!r}) variance={est_a.variance!r}")
    if "score_b" not in cols:
        return est_a
    est_b = metrics.delong_estimate(cols["score_b"], labels)
    diff = metrics.delong_diff(cols["score_a"], cols["score_b"], labels)
    print(f"auc_b={est_b.auc!r} ci=({est_b.ci_low!r}, {est_b.ci_high!r}) variance={est_b.variance!r}")
    print(f"delta={diff.delta!r} ci=({diff.ci_low!r}, {diff.ci_high!r}) "
          f"variance={diff.variance!r} significant={diff.significant}")
    return diff


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedrisk", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", help="write a synthetic multi-site cohort CSV")
    gen.add_argument("--config", help="take the synthetic-data keys from this config file")
    gen.add_argument("--seed", type=int)
    gen.add_argument("--out", default=".", help="output directory (cohort.csv is written there)")
    gen.add_argument("--sites", type=int, default=5)
    gen.add_argument("--admissions", type=int, default=2000)
    gen.add_argument("--features", type=int, default=50)
    gen.add_argument("--site-effect", type=float, default=0.3)
    gen.add_argument("--eicu-sites", action="store_true",
                     help="use the 31 site sizes of the eICU cohort instead of --sites/--admissions")
    gen.set_defaults(func=_generate)

    run = sub.add_parser("run", help="run one experimental condition from a config file")
    run.add_argument("--config", required=True)
    run.add_argument("--seed", type=int)
    run.add_argument("--out", help="output directory (overrides out_dir)")
    run.set_defaults(func=_run)

    acc = sub.add_parser("accountant", help="epsilon of a DP-SGD run")
    acc.add_argument("--q", type=float, required=True, help="sampling ratio")
    acc.add_argument("--z", type=float, required=True, help="noise multiplier")
    acc.add_argument("--steps", type=int, required=True)
    acc.add_argument("--delta", type=float, default=1e-5)
    acc.set_defaults(func=_accountant)

    cmp_ = sub.add_parser("compare", help="DeLong AUC estimate / difference from score CSVs")
    cmp_.add_argument("scores", nargs="+", help="one CSV with score_a[,score_b], or two CSVs")
    cmp_.set_defaults(func=_compare)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "compare" and len(args.scores) > 2:
        parser.error("compare takes one or two score files")
    try:
        args.func(args)
    except (ValueError, OSError) as exc:
        print(f"fedrisk {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
