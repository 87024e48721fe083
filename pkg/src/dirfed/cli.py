"""Command-line entry point.

Subcommands:

* ``run CONFIG``: run one experiment, or a grid over ``--methods`` and
  ``--seeds``; each cell writes its archive under the output root.
* ``verify``: run the oracle suite; exits 1 if any check fails.
* ``gen-data``: export a synthetic world as an interaction CSV.
* ``report DIR...``: summarize archives written by ``run``.

The output root defaults to ``$DIRFED_OUTPUT_ROOT`` or ``./runs``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import backbone as bb
from . import datagen, oracle
from .config import ConfigError, ExperimentConfig, stream_int
from .runner import run_experiment

logger = logging.getLogger("dirfed")

OUTPUT_ROOT_ENV = "DIRFED_OUTPUT_ROOT"


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


def _cell_dir(base: Path, config: ExperimentConfig) -> Path:
    return base / config.run_id / f"{config.method}_seed{config.seed}"


def cmd_run(args) -> int:
    try:
        base_cfg = ExperimentConfig.load(args.config)
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: cannot read config {args.config}: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    methods = args.methods.split(",") if args.methods else [base_cfg.method]
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [base_cfg.seed]
    cells = [base_cfg.replace(method=m, seed=s) for m in methods for s in seeds]
    problems = sorted({p for c in cells for p in c.problems()})
    if problems:
        print(f"error: {ConfigError(problems)}", file=sys.stderr)
        return 2
    root = Path(args.out) if args.out else output_root()
    for cfg in cells:
        out_dir = Path(cfg.output_dir) if (cfg.output_dir and len(cells) == 1 and not args.out) else _cell_dir(root, cfg)
        try:
            result = run_experiment(cfg, out_dir=out_dir)
        except bb.NumericError as exc:
            # batch ids are (client, round, epoch, step)
            print(f"error: {cfg.method} seed {cfg.seed} diverged: {exc}", file=sys.stderr)
            return 1
        print(
            f"{cfg.method:<10} seed {cfg.seed:<4} final H@5 {result.mean_final('H@5'):.4f} "
            f"best-val H@5 {result.mean_best_val('H@5'):.4f} -> {out_dir}"
        )
    return 0


def cmd_verify(args) -> int:
    checks = args.checks.split(",") if args.checks else None
    unknown = [c for c in checks or [] if c not in oracle.SUITE]
    if unknown:
        print(f"error: unknown checks {unknown}; choose from {sorted(oracle.SUITE)}", file=sys.stderr)
        return 2
    out = Path(args.out) if args.out else output_root() / "verify" / "oracle_report.jsonl"
    summary = oracle.run_suite(seed=args.seed, checks=checks, out_path=out)
    for name, counts in summary.counts.items():
        status = "FAIL" if counts["fail"] else "ok"
        print(
            f"{status:<4} {name:<22} pass {counts['pass']:>3} fail {counts['fail']:>3} "
            f"skip {counts['skip']:>3} ({summary.elapsed[name]:.1f}s)"
        )
    print(f"report: {out}")
    return 0 if summary.ok else 1


def cmd_gen_data(args) -> int:
    sim = datagen.default_similarity(args.domains)
    if args.similarity:
        sim = json.loads(args.similarity)
    world = datagen.DomainWorld(
        num_domains=args.domains,
        vocab_size=args.vocab,
        users_per_domain=args.users,
        num_clusters=args.clusters,
        similarity=tuple(tuple(float(x) for x in row) for row in sim),
        seed=stream_int(args.seed, "data"),
    )
    try:
        gen = datagen.generate_world(world)
    except datagen.ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    path = datagen.export_csv(gen.datasets, args.out)
    print(f"wrote {sum(len(ds.users) for ds in gen.datasets)} users to {path}")
    print("measured prototype similarity:")
    for row in gen.measured_similarity():
        print("  " + " ".join(f"{v:.3f}" for v in row))
    return 0


def _read_metrics(path: Path) -> list[dict]:
    with path.open(newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def summarize_archive(path: Path, metric: str = "H@5") -> dict:
    """Mean-over-clients metrics of one archive directory."""
    rows = _read_metrics(path / "metrics.csv")
    out = {"archive": str(path)}
    for split in ("final_test", "best_val_test"):
        vals = [float(r["value"]) for r in rows if r["split"] == split and r["metric"] == metric]
        out[split] = float(np.mean(vals)) if vals else float("nan")
    out["method"] = rows[0]["method"] if rows else "?"
    out["run_id"] = rows[0]["run_id"] if rows else "?"
    alpha_path = path / "alpha.csv"
    if alpha_path.exists():
        with alpha_path.open(newline="", encoding="utf-8") as fh:
            arows = list(csv.DictReader(fh))
        if arows:
            last = max(int(r["round"]) for r in arows)
            k = 1 + max(int(r["i"]) for r in arows)
            mat = np.zeros((k, k))
            for r in arows:
                if int(r["round"]) == last:
                    mat[int(r["i"]), int(r["j"])] = float(r["alpha"])
            out["alpha_last"] = mat.tolist()
    summary_path = path / "summary.json"
    if summary_path.exists():
        summary = json.loads(summary_path.read_text(encoding="utf-8"))
        out["convergence_round"] = summary.get("convergence_round")
        out["comm_totals"] = summary.get("comm_totals", {})
    return out


def _find_archives(paths) -> list[Path]:
    found = []
    for p in paths:
        p = Path(p)
        if (p / "metrics.csv").exists():
            found.append(p)
        else:
            found.extend(sorted(m.parent for m in p.rglob("metrics.csv")))
    return found


def cmd_report(args) -> int:
    archives = _find_archives(args.archives)
    if not archives:
        print("error: no archives (directories containing metrics.csv) found", file=sys.stderr)
        return 2
    summaries = [summarize_archive(a, args.metric) for a in archives]
    print(f"{'method':<10} {'final ' + args.metric:>12} {'best-val ' + args.metric:>15}  archive")
    for s in summaries:
        print(f"{s['method']:<10} {s['final_test']:>12.4f} {s['best_val_test']:>15.4f}  {s['archive']}")
    by_method: dict[str, list[float]] = {}
    for s in summaries:
        by_method.setdefault(s["method"], []).append(s["final_test"])
    if len(summaries) > len(by_method):
        print("\nmean over archives:")
        for m, vals in sorted(by_method.items(), key=lambda kv: -np.mean(kv[1])):
            print(f"  {m:<10} {np.mean(vals):.4f} (n={len(vals)})")
    for s in summaries:
        if "alpha_last" in s:
            print(f"\nlast-round alpha, {s['method']} ({s['archive']}); convergence round {s.get('convergence_round')}")
            for row in s["alpha_last"]:
                print("  " + " ".join(f"{v:7.3f}" for v in row))
    if args.json:
        Path(args.json).write_text(json.dumps(summaries, indent=2) + "\n", encoding="utf-8")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dirfed", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="count", default=0, help="-v for info, -vv for debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run an experiment from a JSON config")
    p.add_argument("config", help="path to a JSON config (flat keys, all optional)")
    p.add_argument("--methods", help="comma-separated methods overriding the config")
    p.add_argument("--seeds", help="comma-separated seeds overriding the config")
    p.add_argument("--out", help=f"output root (default ${OUTPUT_ROOT_ENV} or ./runs)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("verify", help="run the oracle suite")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--checks", help=f"comma-separated subset of {','.join(oracle.SUITE)}")
    p.add_argument("--out", help="JSON-lines report path")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("gen-data", help="export a synthetic world as CSV")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--domains", type=int, default=3)
    p.add_argument("--vocab", type=int, default=100)
    p.add_argument("--users", type=int, default=200)
    p.add_argument("--clusters", type=int, default=8)
    p.add_argument("--similarity", help="JSON K x K matrix (default: one similar pair, others 0.1)")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("report", help="summarize run archives")
    p.add_argument("archives", nargs="+", help="archive directories or roots to search")
    p.add_argument("--metric", default="H@5")
    p.add_argument("--json", help="also write the summaries as JSON")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(asctime)s %(name)s %(levelname)s %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
