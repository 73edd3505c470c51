"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import gradcheck as gc
from .config import PRESETS, load_config
from .errors import FedTrustError
from .harness import pivot, run_experiment, run_grid
from .io import emit_csv, emit_json, format_table, report, write_run
from .rng import stream
from .shapley import UpdateGame, exact_shapley_game, mc_shapley_game

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageExit(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise UsageExit(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fedtrust", description="Trust-aware federated learning simulator")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    run = sub.add_parser("run", help="run one experiment")
    src = run.add_mutually_exclusive_group(required=True)
    src.add_argument("--config", type=Path, help="JSON config file")
    src.add_argument("--preset", choices=sorted(PRESETS), help="named preset")
    run.add_argument("--out", type=Path, required=True, help="output directory")

    grid = sub.add_parser("grid", help="run every *.json config in a directory")
    grid.add_argument("--configs", type=Path, required=True)
    grid.add_argument("--out", type=Path, default=None, help="output directory (default: <configs>/results)")
    grid.add_argument("--parallel", type=int, default=1)

    sc = sub.add_parser("shapley-check", help="Monte-Carlo vs exact Shapley table")
    sc.add_argument("--n", type=int, default=6, help="clients (<= 12)")
    sc.add_argument("--m", type=int, default=2000, help="permutations")
    sc.add_argument("--seed", type=int, default=0)

    g = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    g.add_argument("--seeds", type=int, default=10)

    rep = sub.add_parser("report", help="re-derive summaries from stored records")
    rep.add_argument("--in", dest="in_dir", type=Path, required=True)
    return p


def _cmd_run(args) -> int:
    cfg = load_config(args.config) if args.config else PRESETS[args.preset]()
    records = run_experiment(cfg)
    summary = write_run(args.out, cfg, records)
    print(format_table(list(summary), [list(summary.values())]))
    return EXIT_OK


def _cmd_grid(args) -> int:
    files = sorted(args.configs.glob("*.json"))
    cfgs = [load_config(f) for f in files]
    out = args.out or args.configs / "results"
    out.mkdir(parents=True, exist_ok=True)
    rows, all_records = run_grid(cfgs, args.parallel)
    for f, cfg, recs in zip(files, cfgs, all_records):
        write_run(out / f.stem, cfg, recs)
    emit_csv(rows, out / "grid.csv", None if rows else ())
    header, table = pivot(rows)
    emit_csv([dict(zip(header, r)) for r in table], out / "pivot.csv", header)
    print(format_table(header, table))
    return EXIT_OK


def quadratic_game(n: int, seed: int, dim: int = 8) -> UpdateGame:
    """A small synthetic game: ``L(delta) = ||delta - target||^2`` over random updates."""
    rng = stream(seed, "shapley-check")
    target = rng.standard_normal(dim)
    updates = target + rng.standard_normal((n, dim)) * rng.uniform(0.2, 2.0, size=(n, 1))
    return UpdateGame(list(updates), lambda d: float(((d - target) ** 2).sum()))


def _cmd_shapley(args) -> int:
    if not 1 <= args.n <= 12 or args.m < 1:
        raise UsageExit("--n must lie in [1, 12] and --m must be >= 1")
    game = quadratic_game(args.n, args.seed)
    exact = exact_shapley_game(game).phi
    mc = mc_shapley_game(game, args.m, args.seed).phi
    diff = np.abs(mc - exact)
    rng_ = float(exact.max() - exact.min())
    rows = [[k, exact[k], mc[k], diff[k]] for k in range(args.n)]
    print(format_table(["client", "exact", "monte_carlo", "abs_diff"], rows))
    print(f"max |mc - exact| = {diff.max():.6g}  ({diff.max() / rng_ if rng_ else 0.0:.4g} of range)")
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    results = gc.run_suite(range(args.seeds))
    rows = [[r.name, r.seed, r.block, r.rel_error, r.checked, r.skipped, "ok" if r.passed else "FAIL"]
            for r in results]
    print(format_table(["check", "seed", "block", "rel_error", "checked", "skipped", "status"], rows))
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} blocks within {gc.TOLERANCE:g}")
    return EXIT_OK if not failed else EXIT_RUNTIME


def _cmd_report(args) -> int:
    d = args.in_dir
    if (d / "rounds.csv").exists():
        summaries = [report(d)]
    else:
        summaries = [report(sub) for sub in sorted(d.iterdir()) if (sub / "rounds.csv").exists()]
    if not summaries:
        raise FedTrustError(f"no run directories under {d}")
    header = list(summaries[0])
    print(format_table(header, [list(s.values()) for s in summaries]))
    if len(summaries) > 1:
        h, table = pivot(summaries)
        print()
        print(format_table(h, table))
    return EXIT_OK


COMMANDS = {"run": _cmd_run, "grid": _cmd_grid, "shapley-check": _cmd_shapley,
            "gradcheck": _cmd_gradcheck, "report": _cmd_report}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageExit:
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    except (FedTrustError, OSError) as exc:
        print(f"fedtrust: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
