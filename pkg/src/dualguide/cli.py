"""Command-line entry point: ``dualguide <command> [options]``.

Exit codes: 0 success, 1 verification failure, 2 usage or input error.

Config files are flat ``key = value`` text (``#`` comments allowed).  Keys
are the ``GuidanceConfig`` fields, the ``ToyShape`` fields, and ``seed``,
``n_seeds``, ``n_images``.  Command-line flags override file values, which
override the built-in defaults.
"""
from __future__ import annotations

import argparse
import configparser
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import numeric as nm
from ._validation import ValidationError
from .attention import RISA_AXES, SFCA_MASKS
from .bench import BenchParseError, CleaningPolicy, build_benchmark, load_annotations
from .experiments import SWEEP_PARAMS, VARIANTS, ToyShape, guide, sweep
from .gradcheck import OP_SUITES, PIPELINE_SUITES, run_all
from .guidance import GuidanceConfig
from .io import write_csv, write_grid_csv, write_json, write_pgm
from .layout import FORMULAS, TARGET_KINDS, sigmoid_target
from .metrics import EvalParseError, aggregate_report, load_eval

log = logging.getLogger("dualguide")

EXIT_OK, EXIT_VERIFY, EXIT_USAGE = 0, 1, 2
RUN_KEYS = {"seed": int, "n_seeds": int, "n_images": int}


class UsageError(Exception):
    pass


def _field_types(cls) -> dict:
    hints = {"float": float, "int": int, "bool": bool, "str": str}
    return {f.name: hints[str(f.type)] for f in dataclasses.fields(cls)}


GUIDE_KEYS = _field_types(GuidanceConfig)
SHAPE_KEYS = _field_types(ToyShape)


def _convert(key: str, raw: str, kind):
    try:
        if kind is bool:
            return configparser.ConfigParser.BOOLEAN_STATES[raw.strip().lower()]
        return kind(raw.strip())
    except (KeyError, ValueError):
        raise UsageError(f"config key {key!r}: cannot read {raw!r} as {kind.__name__}") from None


def read_config(path) -> dict:
    """Parse a flat key-value file into typed values."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
    try:
        text = Path(path).read_text(encoding="utf-8")
        parser.read_string("[run]\n" + text, source=str(path))
    except (OSError, configparser.Error) as exc:
        raise UsageError(f"{path}: {exc}") from None
    known = {**GUIDE_KEYS, **SHAPE_KEYS, **RUN_KEYS}
    out = {}
    for key, raw in parser["run"].items():
        if key not in known:
            raise UsageError(f"{path}: unknown config key {key!r}")
        out[key] = _convert(key, raw, known[key])
    return out


def resolve(args) -> tuple[GuidanceConfig, ToyShape, dict]:
    """Merge defaults, the config file and flags (in increasing priority)."""
    values = read_config(args.config) if getattr(args, "config", None) else {}
    flag_map = {"seed": "seed", "n_seeds": "n_seeds", "target": "target", "risa_mask_axis": "risa_mask_axis",
                "sfca_mask": "sfca_mask", "n_images": "n_images"}
    for attr, key in flag_map.items():
        v = getattr(args, attr, None)
        if v is not None:
            values[key] = v
    for item in getattr(args, "set", None) or []:
        key, sep, raw = item.partition("=")
        key = key.strip()
        known = {**GUIDE_KEYS, **SHAPE_KEYS, **RUN_KEYS}
        if not sep or key not in known:
            raise UsageError(f"--set expects key=value with a known key, got {item!r}")
        values[key] = _convert(key, raw, known[key])
    try:
        cfg = GuidanceConfig(**{k: v for k, v in values.items() if k in GUIDE_KEYS})
        shape = ToyShape(**{k: v for k, v in values.items() if k in SHAPE_KEYS})
        shape.build()
    except (ValidationError, nm.DimensionError, TypeError) as exc:
        raise UsageError(str(exc)) from None
    run = {"seed": values.get("seed", 0), "n_seeds": values.get("n_seeds", 1), "n_images": values.get("n_images", 2)}
    if run["seed"] < 0 or run["n_seeds"] < 1 or run["n_images"] < 1:
        raise UsageError("seed must be >= 0, n_seeds and n_images >= 1")
    return cfg, shape, run


# ----------------------------------------------------------------- commands


def cmd_target_map(args) -> int:
    try:
        tm = sigmoid_target(args.box, args.s, args.height, args.width, kind=args.target or "sigmoid",
                            formula=args.formula)
    except ValidationError as exc:
        raise UsageError(f"bad target map arguments: {exc}") from None
    out = Path(args.out)
    write_grid_csv(out / "target.csv", tm.values)
    write_pgm(out / "target.pgm", tm.values)
    print(f"wrote {out / 'target.csv'} and {out / 'target.pgm'}")
    return EXIT_OK


def _seeds(run) -> list[int]:
    return list(range(run["seed"], run["seed"] + run["n_seeds"]))


def cmd_guide(args) -> int:
    cfg, shape, run = resolve(args)
    variants = args.variant or ["full"]
    summary = guide(cfg, _seeds(run), variants, shape, run["n_images"], out_dir=args.out,
                    record_vectors=args.record_vectors)
    for v in variants:
        st = summary["variants"][v]
        print(f"{v}: median iterations {st['median_iterations']:g}, converged {st['converged_fraction']:.0%}")
    if summary["warning"]:
        print("warning: some backward updates did not reach the threshold (see summary.json)")
    return EXIT_OK


def _grid_value(param: str, raw: str):
    if param == "target":
        if raw not in TARGET_KINDS:
            raise UsageError(f"target grid values must be in {TARGET_KINDS}, got {raw!r}")
        return raw
    try:
        return float(raw)
    except ValueError:
        raise UsageError(f"grid value {raw!r} is not a number") from None


def cmd_sweep(args) -> int:
    cfg, shape, run = resolve(args)
    grid = [_grid_value(args.param, g) for g in args.grid.split(",") if g.strip()]
    if not grid:
        raise UsageError("--grid is empty")
    variant = (args.variant or ["full"])[0]
    try:
        report = sweep(args.param, grid, cfg, _seeds(run), variant, shape, run["n_images"], args.batch_size)
    except ValidationError as exc:
        raise UsageError(str(exc)) from None
    write_json(Path(args.out) / "sweep.json", report)
    rows = [[p["value"], p["median_iterations"], p["converged_fraction"]] for p in report["points"]]
    write_csv(Path(args.out) / "sweep.csv", [args.param, "median_iterations", "converged_fraction"], rows)
    print(f"{args.param}: medians {report['medians']}, interior minimum in "
          f"{report['interior_fraction']:.0%} of batches")
    return EXIT_OK


def cmd_bench_build(args) -> int:
    try:
        records, rejected = load_annotations(args.annotations)
        policy = CleaningPolicy.from_dict(json.loads(Path(args.policy).read_text())) if args.policy else None
        bank = json.loads(Path(args.templates).read_text()) if args.templates else None
        doc = build_benchmark(records, policy, bank, args.seed or 0, rejected)
    except (BenchParseError, ValidationError, OSError, TypeError) as exc:
        raise UsageError(str(exc)) from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"policy/template file: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    write_json(Path(args.out) / "benchmark.json", doc)
    r = doc["report"]
    print(f"{r['single_sets']} single and {r['double_sets']} double sets from {r['kept']} of {r['records']} boxes")
    return EXIT_OK


def cmd_metrics(args) -> int:
    try:
        report = aggregate_report(load_eval(args.eval), seed=args.seed or 0)
    except (EvalParseError, ValidationError, OSError) as exc:
        raise UsageError(str(exc)) from None
    out = Path(args.out)
    write_json(out / "report.json", report.to_dict())
    header, rows = report.csv_rows()
    write_csv(out / "report.csv", header, rows)
    for c, e in report.scores.items():
        print(f"{c}: " + ("absent" if e is None else f"{e.mean:.2f} ± {e.std:.2f}"))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    names = args.suite or None
    if names and any(n not in OP_SUITES and n not in PIPELINE_SUITES for n in names):
        raise UsageError(f"unknown suite in {names}")
    _, shape, _ = resolve(args)
    if shape.height * shape.width > 64:
        raise UsageError("gradient checks need a toy shape with at most 64 pixels")
    if args.corrupt:
        with nm.inject_adjoint_fault(args.corrupt, args.corrupt_factor):
            results = run_all(args.instances, args.seed or 0, shape.build(), names)
    else:
        results = run_all(args.instances, args.seed or 0, shape.build(), names)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name:<18} max rel err {r.max_rel_error:.3e} ({r.instances} cases)")
    ok = all(r.passed for r in results)
    if args.out:
        write_json(Path(args.out) / "gradcheck.json", {"passed": ok, "suites": [r.to_dict() for r in results]})
    return EXIT_OK if ok else EXIT_VERIFY


# ------------------------------------------------------------------- parser


def _common(p, guided: bool = True):
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--seed", type=int, help="base 64-bit seed")
    p.add_argument("--out", default="out", help="output directory")
    if guided:
        p.add_argument("--n-seeds", type=int, dest="n_seeds", help="number of consecutive seeds")
        p.add_argument("--n-images", type=int, dest="n_images", help="images per batch")
        p.add_argument("--variant", action="append", choices=VARIANTS, help="repeatable; default full")
        p.add_argument("--target", choices=TARGET_KINDS)
        p.add_argument("--risa-mask-axis", dest="risa_mask_axis", choices=RISA_AXES)
        p.add_argument("--sfca-mask", dest="sfca_mask", choices=SFCA_MASKS)
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dualguide", description="Layout energy guidance toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("target-map", help="write a layout target map as CSV and PGM")
    p.add_argument("--box", type=float, nargs=4, required=True, metavar=("H_MIN", "W_MIN", "H_MAX", "W_MAX"))
    p.add_argument("--s", type=float, default=10.0)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--target", choices=TARGET_KINDS)
    p.add_argument("--formula", choices=FORMULAS, default="corrected")
    p.add_argument("--out", default="out")
    p.set_defaults(func=cmd_target_map)

    p = sub.add_parser("guide", help="guided sampling over seeds, with energy traces")
    _common(p)
    p.add_argument("--record-vectors", action="store_true", help="dump the latent/embedding iterates")
    p.set_defaults(func=cmd_guide)

    p = sub.add_parser("sweep", help="repeat guide over a parameter grid")
    _common(p)
    p.add_argument("--param", choices=SWEEP_PARAMS, required=True)
    p.add_argument("--grid", required=True, help="comma-separated values")
    p.add_argument("--batch-size", type=int, default=5, dest="batch_size")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("bench-build", help="build prompt/box sets from COCO annotations")
    _common(p, guided=False)
    p.add_argument("--annotations", required=True)
    p.add_argument("--policy", help="JSON file of cleaning-policy fields")
    p.add_argument("--templates", help="JSON template bank")
    p.set_defaults(func=cmd_bench_build)

    p = sub.add_parser("metrics", help="score an evaluation JSON")
    _common(p, guided=False)
    p.add_argument("--eval", required=True)
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("gradcheck", help="finite-difference checks of all adjoints")
    _common(p, guided=False)
    p.set_defaults(out=None)
    p.add_argument("--instances", type=int, default=100)
    p.add_argument("--suite", action="append", help="restrict to named suites")
    p.add_argument("--corrupt", help=argparse.SUPPRESS)
    p.add_argument("--corrupt-factor", type=float, default=1.01, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"dualguide {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:  # e.g. a bad DGL_THREADS value
        print(f"dualguide {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
