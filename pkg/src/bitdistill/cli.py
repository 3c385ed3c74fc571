"""Command-line entry point: ``bitdistill <command> [options]``.

Exit codes: 0 success, 1 check failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .bitpack import xnor_popcount_core
from .checks import BENCH_COLUMNS, bench_row, read_layer_specs, run_equiv_check
from .config import DistillConfig, format_config, load_config, parse_config_text
from .gradcheck import FD_STEP, REL_TOL, random_pair, run_grad_check
from .proposals import load_pairs, save_pairs
from .select import mahalanobis_discrepancy, select_mask

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
DEFAULT_SEED = 42


class UsageError(Exception):
    pass


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def _echo_settings(out, **settings) -> None:
    for key, value in settings.items():
        print(f"{key} = {value}", file=out)


def cmd_equiv_check(args, kernel: Callable) -> int:
    _echo_settings(sys.stdout, command="equiv-check", trials=args.trials, seed=args.seed)
    passed, failure = run_equiv_check(args.trials, args.seed, kernel)
    if failure is not None:
        print(f"FAIL after {passed} passing trials")
        print(failure.describe())
        return EXIT_FAIL
    print(f"PASS {passed}/{args.trials} trials bit-exact")
    return EXIT_OK


def cmd_grad_check(args, kernel: Callable) -> int:
    _echo_settings(sys.stdout, command="grad-check", pairs=args.pairs, seed=args.seed, tol=args.tol,
                   step=args.step, channels=args.channels)
    results = run_grad_check(args.pairs, args.seed, args.tol, args.channels, h=args.step)
    print(f"{'pair':>4}  {'max_rel_err':>12}  result")
    for r in results:
        print(f"{r.pair:>4}  {r.max_rel_err:12.4e}  {'pass' if r.passed else 'FAIL'}")
    worst = max(r.max_rel_err for r in results)
    n_fail = sum(not r.passed for r in results)
    print(f"max_rel_err = {worst:.6e}; {n_fail} of {len(results)} pairs failed")
    return EXIT_FAIL if n_fail else EXIT_OK


def cmd_bench(args, kernel: Callable) -> int:
    # stdout carries the CSV, so settings go to stderr
    _echo_settings(sys.stderr, command="bench", specs=args.specs, seed=args.seed, repeats=args.repeats)
    path = Path(args.specs)
    if not path.is_file():
        raise UsageError(f"spec file not found: {path}")
    try:
        layers = read_layer_specs(path)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    writer = csv.DictWriter(sys.stdout, fieldnames=BENCH_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for layer in layers:
        writer.writerow(bench_row(layer, args.seed, args.repeats))
    return EXIT_OK


def cmd_select_demo(args, kernel: Callable) -> int:
    _echo_settings(sys.stdout, command="select-demo", dump=args.dump, gamma=args.gamma, seed=args.seed)
    dump = Path(args.dump)
    if args.synthesize:
        rng = np.random.default_rng(args.seed)
        save_pairs([random_pair(rng, index=i) for i in range(args.synthesize)], dump)
        print(f"wrote {args.synthesize} synthetic pairs to {dump}")
    if not (dump / "pairs.csv").is_file():
        raise UsageError(f"proposal dump not found: {dump / 'pairs.csv'}")
    if not 0 < args.gamma <= 1:
        raise UsageError(f"gamma must lie in (0, 1], got {args.gamma}")
    pairs = load_pairs(dump)
    scores = [mahalanobis_discrepancy(p) for p in pairs]
    mask = select_mask(scores, args.gamma)
    print(f"{'n':>4}  {'source':<7}  {'epsilon':>14}  selected")
    for pair, score, bit in zip(pairs, scores, mask.bits):
        print(f"{score.pair_index:>4}  {pair.source:<7}  {score.epsilon:14.6f}  {int(bit)}")
    print(f"selected k = {mask.k} of {len(pairs)}")
    mask_path = Path(args.mask_out) if args.mask_out else dump / "mask.csv"
    with open(mask_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["pair_index", "epsilon", "selected"])
        for score, bit in zip(scores, mask.bits):
            w.writerow([score.pair_index, repr(score.epsilon), int(bit)])
    print(f"mask written to {mask_path}")
    return EXIT_OK


def _effective_config(args) -> DistillConfig:
    cfg = load_config(args.config) if args.config else DistillConfig()
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        overrides.update(parse_config_text(item))
    for key in ("temperature", "lam", "gamma", "mu", "epochs", "n_train", "n_eval"):
        value = getattr(args, key)
        if value is not None:
            overrides[key] = value
    return cfg.with_overrides(**overrides)


def _comparison_rows(reports) -> list[dict]:
    by_mode: dict[str, list] = {}
    for rep in reports:
        by_mode.setdefault(rep["mode"], []).append(rep)
    rows = []
    for mode, reps in by_mode.items():
        reps = sorted(reps, key=lambda r: r["seed"])
        metrics = [r["eval_metric"] for r in reps]
        rows.append({
            "mode": mode,
            "n_seeds": len(reps),
            "seeds": " ".join(str(r["seed"]) for r in reps),
            "mean_metric": float(np.mean(metrics)),
            "std_metric": float(np.std(metrics)),
            "teacher_metric": float(np.mean([r["teacher_metric"] for r in reps])),
        })
    return rows


def _print_comparison(rows) -> None:
    print(f"{'mode':<10} {'seeds':>5} {'mean_metric':>12} {'std':>8} {'teacher':>8}")
    for r in rows:
        print(f"{r['mode']:<10} {r['n_seeds']:>5} {r['mean_metric']:12.4f} {r['std_metric']:8.4f} "
              f"{r['teacher_metric']:8.4f}")


def _write_comparison(rows, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)


def cmd_train(args, kernel: Callable) -> int:
    from .toy.train import MODES, TeacherQualityError, train, train_all_modes

    try:
        cfg = _effective_config(args)
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from exc
    except (KeyError, ValueError) as exc:
        raise UsageError(f"bad configuration: {exc}") from exc
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [cfg.seed]
    modes = list(MODES) if args.all_modes else [args.mode]
    print("effective config:")
    print(format_config(cfg))
    print(f"config_hash = {cfg.hash()}")
    print(f"modes = {','.join(modes)}; seeds = {','.join(map(str, seeds))}")
    out = Path(args.out)
    written = []
    for seed in seeds:
        seeded = cfg.with_overrides(seed=seed)
        try:
            if args.all_modes:
                reports = train_all_modes(seeded, modes, args.cache)
            else:
                reports = {args.mode: train(seeded, args.mode, args.cache)}
        except TeacherQualityError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_FAIL
        for mode, rep in reports.items():
            json_path, _ = rep.save(out)
            written.append(json.loads(rep.to_json()))
            print(f"seed {seed} mode {mode}: eval_metric = {rep.eval_metric:.4f} "
                  f"teacher = {rep.teacher_metric:.4f} packed_equivalence = {rep.packed_equivalence} "
                  f"report = {json_path}")
    if len(written) > 1:
        rows = _comparison_rows(written)
        _print_comparison(rows)
        _write_comparison(rows, out / "comparison.csv")
    return EXIT_OK


def cmd_report(args, kernel: Callable) -> int:
    _echo_settings(sys.stdout, command="report", directory=args.directory)
    directory = Path(args.directory)
    paths = sorted(directory.glob("report_*.json"))
    if not paths:
        raise UsageError(f"no report_*.json files in {directory}")
    reports = [json.loads(p.read_text()) for p in paths]
    rows = _comparison_rows(reports)
    _print_comparison(rows)
    target = Path(args.out) if args.out else directory / "comparison.csv"
    _write_comparison(rows, target)
    print(f"comparison written to {target}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bitdistill", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("equiv-check", help="bit-exact packed convolution vs reference")
    p.add_argument("--trials", type=_positive_int, default=500)
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.set_defaults(func=cmd_equiv_check)

    p = sub.add_parser("grad-check", help="entropy loss gradient vs central differences")
    p.add_argument("--pairs", type=_positive_int, default=50)
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.add_argument("--tol", type=float, default=REL_TOL)
    p.add_argument("--step", type=float, default=FD_STEP)
    p.add_argument("--channels", type=_positive_int, default=8)
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("bench", help="OPs, memory and wall time per layer spec")
    p.add_argument("specs", help="file with one c_in/c_out/KxK/HxW[/sS][/pP][/binary|/real] per line")
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.add_argument("--repeats", type=_positive_int, default=3)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("select-demo", help="score a proposal dump and select pairs")
    p.add_argument("dump", help="directory with pairs.csv and patch stacks")
    p.add_argument("--gamma", type=float, default=DistillConfig.gamma)
    p.add_argument("--mask-out", default=None, help="mask CSV path (default: DUMP/mask.csv)")
    p.add_argument("--synthesize", type=_positive_int, default=None,
                   help="first write this many random pairs to DUMP")
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.set_defaults(func=cmd_select_demo)

    p = sub.add_parser("train", help="train toy students and write reports")
    p.add_argument("--config", default=None, help="flat key = value config file")
    p.add_argument("--mode", choices=("none", "random", "gt-region", "ida"), default="ida")
    p.add_argument("--all-modes", action="store_true")
    p.add_argument("--seed", dest="seeds", type=str, default=None, metavar="SEED")
    p.add_argument("--seeds", dest="seeds", type=str, metavar="S1,S2,...")
    p.add_argument("--out", default="reports")
    p.add_argument("--cache", default=None, help="dataset cache directory")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    for key, kind in (("temperature", float), ("lam", float), ("gamma", float), ("mu", float),
                      ("epochs", int), ("n_train", int), ("n_eval", int)):
        p.add_argument(f"--{key.replace('_', '-')}", dest=key, type=kind, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("report", help="aggregate saved reports into a comparison table")
    p.add_argument("directory")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[list[str]] = None, kernel: Callable = xnor_popcount_core) -> int:
    """Run one command; ``kernel`` replaces the packed core (used for fault injection)."""
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args, kernel)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
