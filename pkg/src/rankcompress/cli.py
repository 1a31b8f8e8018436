"""Command-line entry point: ``rankcompress <arch|tables|search|rewrite|eval|info>``.

Settings come from built-in defaults, then an optional INI file
(``--config``), then command-line flags; flags win.

Exit codes: 0 success, 2 usage error, 3 infeasible budget, 4 malformed model
or table files, 5 shape error, 6 plan/model mismatch or missing input.
"""
from __future__ import annotations

import argparse
import configparser
import dataclasses
import hashlib
import json
import logging
import sys
import time
from dataclasses import dataclass
from pathlib import Path

from . import __version__
from .architectures import ARCHITECTURES, build_arch
from .decompose import METHODS, ProposalGrid
from .errors import InfeasibleBudgetError, ManifestError, ShapeError
from .estimators import SIZE_MODES, CalibrationConfig, build_tables, load_tables, save_tables
from .model_ir import _atomic_write, deserialize, model_digest, param_count, serialize, serialized_nbytes
from .pipeline import compare_models, rewrite
from .search import SOLVERS, Budget, SearchConfig, load_plans, min_achievable_size, save_plans, solve

log = logging.getLogger("rankcompress")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_INFEASIBLE = 3
EXIT_MALFORMED = 4
EXIT_SHAPE = 5
EXIT_MISMATCH = 6


@dataclass
class RunConfig:
    model: str | None = None
    out: str | None = None
    grid_start: int = 8
    grid_steps: tuple[int, ...] = (8,)
    calib_batches: int = 4
    calib_size: int = 8
    seed: int = 0
    flash_max: int | None = None
    target_compression: float | None = None
    topk: int = 1
    solver: str = "exact_bnb"
    dp_scale: int = 1
    method: str = "hooi"
    size_mode: str = "params"
    workers: int = 1

    @property
    def grid(self) -> ProposalGrid:
        return ProposalGrid(self.grid_start, self.grid_steps)

    @property
    def calibration(self) -> CalibrationConfig:
        return CalibrationConfig(self.calib_batches, self.calib_size, self.seed)

    def budget(self) -> Budget:
        return Budget(self.flash_max, self.target_compression)


# INI (section, key) -> RunConfig field
_INI_KEYS = {
    ("model", "path"): "model",
    ("output", "dir"): "out",
    ("grid", "start"): "grid_start",
    ("grid", "steps"): "grid_steps",
    ("calibration", "batches"): "calib_batches",
    ("calibration", "size"): "calib_size",
    ("calibration", "seed"): "seed",
    ("budget", "flash_max"): "flash_max",
    ("budget", "target_compression"): "target_compression",
    ("search", "topk"): "topk",
    ("search", "solver"): "solver",
    ("search", "dp_scale"): "dp_scale",
    ("rewrite", "method"): "method",
    ("tables", "size_mode"): "size_mode",
    ("tables", "workers"): "workers",
}


def _parse_steps(text) -> tuple[int, ...]:
    if isinstance(text, (tuple, list)):
        return tuple(int(s) for s in text)
    return tuple(int(s) for s in str(text).replace(" ", "").split(",") if s)


def _coerce(name: str, value):
    if name == "grid_steps":
        return _parse_steps(value)
    if name in ("model", "out", "solver", "method", "size_mode"):
        return str(value)
    if name == "target_compression":
        return float(value)
    return int(value)


def load_config(path) -> dict:
    parser = configparser.ConfigParser()
    if not parser.read(path):
        raise FileNotFoundError(path)
    values = {}
    for section in parser.sections():
        for key, raw in parser.items(section):
            name = _INI_KEYS.get((section, key))
            if name is None:
                raise ValueError(f"{path}: unknown key [{section}] {key}")
            values[name] = _coerce(name, raw)
    return values


def resolve_config(args: argparse.Namespace) -> RunConfig:
    values = load_config(args.config) if args.config else {}
    flags = {
        f.name: getattr(args, f.name)
        for f in dataclasses.fields(RunConfig)
        if getattr(args, f.name, None) is not None
    }
    # a budget flag replaces whichever budget the config file set
    if "flash_max" in flags or "target_compression" in flags:
        values.pop("flash_max", None)
        values.pop("target_compression", None)
    values.update(flags)
    values = {k: _coerce(k, v) for k, v in values.items()}
    return RunConfig(**values)


# --- subcommands ---------------------------------------------------------

def _summary(m) -> str:
    lines = [f"{'layer':<28} {'kind':<16} {'shape':<22} {'params':>10}"]
    from .model_ir import layer_param_count, weight_shapes

    for spec in m.layers:
        shapes = weight_shapes(spec)
        shape = "x".join(str(d) for d in shapes["weight"]) if "weight" in shapes else ""
        lines.append(f"{spec.id:<28} {spec.kind:<16} {shape:<22} {layer_param_count(spec):>10}")
    return "\n".join(lines)


def cmd_arch(args, cfg: RunConfig) -> int:
    if not cfg.out:
        raise _Usage("arch needs --out")
    m = build_arch(args.name, num_classes=args.num_classes, seed=cfg.seed, input_size=args.input_size)
    serialize(m, cfg.out)
    if args.verbose:
        print(_summary(m))
    n = param_count(m)
    print(f"{m.name}: {n} parameters ({n / 1e6:.2f}M), "
          f"{len(m.decomposable_layers())} decomposable layers, sha256 {model_digest(m)[:16]}")
    print(f"wrote {cfg.out}")
    return EXIT_OK


def cmd_tables(args, cfg: RunConfig) -> int:
    if not cfg.model or not cfg.out:
        raise _Usage("tables needs --model and --out")
    m = deserialize(cfg.model)
    t0 = time.perf_counter()
    table = build_tables(m, cfg.grid, cfg.calibration, cfg.size_mode, cfg.workers)
    elapsed = time.perf_counter() - t0
    if not table.layers:
        log.warning("no decomposable layers: writing empty tables")
    save_tables(table, cfg.out)
    print(f"{len(table.layers)} candidate layers, {len(table)} candidates, "
          f"reference size {table.reference_size} ({table.size_mode}); built in {elapsed:.2f}s")
    print(f"wrote {cfg.out}")
    return EXIT_OK


def cmd_search(args, cfg: RunConfig) -> int:
    if not args.tables or not cfg.out:
        raise _Usage("search needs --tables and --out")
    table = load_tables(args.tables)
    log.info("loaded %d precomputed candidates; no candidate evaluation is performed", len(table))
    search_cfg = SearchConfig(k=cfg.topk, solver=cfg.solver, dp_scale=cfg.dp_scale)
    try:
        res = solve(table, cfg.budget(), search_cfg)
    except InfeasibleBudgetError as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    out = Path(cfg.out)
    if out.suffix != ".json":
        out = out / "plans.json"
    extra = {"tables": {k: table.meta[k] for k in ("model", "model_sha256") if k in table.meta}}
    save_plans(res, out, table.size_mode, extra)
    print(f"{'rank':>4} {'objective':>14} {'size':>12} {'ratio':>7} decomposed")
    for p in res.plans:
        ratio = table.reference_size / p.predicted_size
        print(f"{p.rank_in_topk:>4} {p.predicted_total_delta_acc:>14.6g} {p.predicted_size:>12} "
              f"{ratio:>6.2f}x {len(p.decomposed)}")
    if res.truncated:
        print(f"only {len(res.plans)} feasible plans exist (asked for {cfg.topk})")
    print(f"min achievable size {min_achievable_size(table)}; budget {res.flash_max}; "
          f"{res.nodes_expanded} nodes; optimal={res.proven_optimal}; {res.seconds:.3f}s")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_rewrite(args, cfg: RunConfig) -> int:
    if not cfg.model or not args.plans or not cfg.out:
        raise _Usage("rewrite needs --model, --plans and --out")
    m = deserialize(cfg.model)
    plans, meta = load_plans(args.plans)
    if not 1 <= args.plan_index <= len(plans):
        print(f"plan index {args.plan_index} out of range 1..{len(plans)}", file=sys.stderr)
        return EXIT_MISMATCH
    expected = meta.get("tables", {}).get("model_sha256")
    if expected and expected != model_digest(m):
        print("plans were built for a different model (sha256 mismatch)", file=sys.stderr)
        return EXIT_MISMATCH
    plan = plans[args.plan_index - 1]
    try:
        out_model, report = rewrite(m, plan, cfg.method, cfg.calibration, meta.get("size_mode", "params"))
    except KeyError as exc:
        print(f"plan/model mismatch: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    serialize(out_model, cfg.out)
    report["model_sha256"] = model_digest(out_model)
    _atomic_write(Path(cfg.out) / "report.json", (json.dumps(report, indent=1, sort_keys=True) + "\n").encode())
    print(f"params {report['reference_params']} -> {report['achieved_params']} "
          f"({report['compression_ratio']:.2f}x); predicted size {report['predicted_size']}, "
          f"achieved {report['achieved_size']}")
    print(f"{'layer':<28} {'r1':>5} {'r2':>5} {'nmse':>12}")
    for lid, r in report["decomposed_layers"].items():
        print(f"{lid:<28} {r['r1']:>5} {r['r2']:>5} {report['layer_nmse'][lid]:>12.4g}")
    print(f"end-to-end output NMSE {report['output_nmse']:.4g}")
    print(f"wrote {cfg.out}")
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig) -> int:
    if not cfg.model or not args.candidate:
        raise _Usage("eval needs --model and --candidate")
    a = deserialize(cfg.model)
    b = deserialize(args.candidate)
    report = compare_models(a, b, cfg.calibration)
    print(f"params {report['reference']['params']} vs {report['candidate']['params']} "
          f"({report['compression_ratio']:.2f}x)")
    for lid, v in report["layer_nmse"].items():
        if v > 0:
            print(f"  {lid:<28} {v:.4g}")
    print(f"output NMSE {report['output_nmse']:.4g}")
    if cfg.out:
        path = Path(cfg.out)
        path.parent.mkdir(parents=True, exist_ok=True)
        _atomic_write(path, (json.dumps(report, indent=1, sort_keys=True) + "\n").encode())
        print(f"wrote {path}")
    return EXIT_OK


def cmd_info(args, cfg: RunConfig) -> int:
    if cfg.model:
        m = deserialize(cfg.model)
        print(_summary(m))
        print(f"{m.name}: input {m.input_shape}, {param_count(m)} parameters, "
              f"{serialized_nbytes(m)} serialized bytes")
    if args.tables:
        t = load_tables(args.tables)
        print(f"tables: {len(t.layers)} layers, {len(t)} candidates, reference {t.reference_size} "
              f"({t.size_mode}), min achievable {min_achievable_size(t)}")
        for lid, row in zip(t.layers, t.rows()):
            ranks = ",".join(str(e.proposal.r2) for e in row)
            print(f"  {lid:<28} {ranks}")
    if args.plans:
        plans, meta = load_plans(args.plans)
        print(json.dumps({k: v for k, v in meta.items()}, indent=1, sort_keys=True))
        for p in plans:
            print(f"  plan {p.rank_in_topk}: objective {p.predicted_total_delta_acc:.6g}, "
                  f"size {p.predicted_size}, {len(p.decomposed)} decomposed")
    if not (cfg.model or args.tables or args.plans):
        raise _Usage("info needs --model, --tables or --plans")
    return EXIT_OK


class _Usage(Exception):
    pass


def _add_common(p, *names):
    opts = {
        "model": dict(flags=("--model",), help="model directory"),
        "out": dict(flags=("--out",), help="output directory or file"),
        "grid": None,
        "calib": None,
        "seed": dict(flags=("--seed",), type=int, help="seed for weights or calibration inputs"),
        "budget": None,
        "size_mode": dict(flags=("--size-mode",), choices=SIZE_MODES, help="flash unit"),
        "method": dict(flags=("--method",), choices=METHODS, help="factorization for the rewrite"),
    }
    for name in names:
        if name == "grid":
            p.add_argument("--grid-start", type=int, help="first rank proposal (default 8)")
            p.add_argument("--grid-steps", type=_parse_steps,
                           help="comma-separated rank increments, last one repeats (default 8)")
        elif name == "calib":
            p.add_argument("--calib-batches", type=int, help="calibration batches (default 4)")
            p.add_argument("--calib-size", type=int, help="samples per calibration batch (default 8)")
        elif name == "budget":
            g = p.add_mutually_exclusive_group()
            g.add_argument("--flash-max", type=int, help="size budget in table units")
            g.add_argument("--target-compression", type=float, help="budget = reference / ratio")
        else:
            o = dict(opts[name])
            flags = o.pop("flags")
            p.add_argument(*flags, dest=name, **o)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rankcompress", description=__doc__.splitlines()[0])
    ap.add_argument("--config", help="INI file with default settings")
    ap.add_argument("-v", "--verbose", action="store_true")
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("arch", help="build a reference architecture")
    p.add_argument("name", choices=ARCHITECTURES)
    p.add_argument("--num-classes", type=int, default=1000)
    p.add_argument("--input-size", type=int, default=32)
    _add_common(p, "out", "seed")
    p.set_defaults(func=cmd_arch)

    p = sub.add_parser("tables", help="build accuracy/flash lookup tables")
    _add_common(p, "model", "out", "grid", "calib", "seed", "size_mode")
    p.add_argument("--workers", type=int, help="threads for candidate scoring")
    p.set_defaults(func=cmd_tables)

    p = sub.add_parser("search", help="pick ranks under a budget from prebuilt tables")
    p.add_argument("--tables", help="table directory from `tables`")
    _add_common(p, "out", "budget")
    p.add_argument("--topk", type=int, help="number of plans to return")
    p.add_argument("--solver", choices=SOLVERS)
    p.add_argument("--dp-scale", type=int, help="size quantum for exact_dp")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("rewrite", help="apply a plan and write the compressed model")
    _add_common(p, "model", "out", "method", "calib", "seed")
    p.add_argument("--plans", help="plans.json from `search`")
    p.add_argument("--plan-index", type=int, default=1, help="1-based plan to apply")
    p.set_defaults(func=cmd_rewrite)

    p = sub.add_parser("eval", help="compare two models on calibration inputs")
    _add_common(p, "model", "out", "calib", "seed")
    p.add_argument("--candidate", help="model directory to compare against --model")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("info", help="summarize a model, tables or plans")
    _add_common(p, "model")
    p.add_argument("--tables")
    p.add_argument("--plans")
    p.set_defaults(func=cmd_info)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = resolve_config(args)
        return args.func(args, cfg)
    except _Usage as exc:
        ap.error(str(exc))
    except InfeasibleBudgetError as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except ShapeError as exc:
        print(f"shape error: {exc}", file=sys.stderr)
        return EXIT_SHAPE
    except (ManifestError, json.JSONDecodeError, KeyError) as exc:
        print(f"malformed input: {exc}", file=sys.stderr)
        return EXIT_MALFORMED
    except FileNotFoundError as exc:
        print(f"missing input: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
