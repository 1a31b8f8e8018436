"""Build tables once, then search and rewrite at several compression targets.

    python scripts/run_pipeline.py --arch testnet_small --targets 1.5 2 3 --out runs/testnet
"""
import argparse
import json
import time
from pathlib import Path

from rankcompress import build_arch, build_tables, param_count, rewrite, save_tables, serialize
from rankcompress.decompose import ProposalGrid
from rankcompress.estimators import CalibrationConfig
from rankcompress.search import Budget, SearchConfig, save_plans, solve


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--arch", default="testnet_small")
    ap.add_argument("--num-classes", type=int, default=10)
    ap.add_argument("--targets", type=float, nargs="+", default=[1.5, 2.0, 3.0, 4.0])
    ap.add_argument("--method", default="hooi", choices=["hosvd", "hooi"])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="runs/pipeline")
    args = ap.parse_args()

    out = Path(args.out)
    m = build_arch(args.arch, num_classes=args.num_classes, seed=args.seed)
    serialize(m, out / "reference")
    calib = CalibrationConfig(seed=args.seed)
    t0 = time.perf_counter()
    table = build_tables(m, ProposalGrid(), calib)
    print(f"{args.arch}: {param_count(m)} params, {len(table)} candidates "
          f"over {len(table.layers)} layers, tables in {time.perf_counter() - t0:.1f}s")
    save_tables(table, out / "tables")

    rows = []
    for target in args.targets:
        t0 = time.perf_counter()
        res = solve(table, Budget(target_compression=target), SearchConfig(k=1))
        search_s = time.perf_counter() - t0
        save_plans(res, out / f"plans_x{target:g}.json")
        plan = res.plans[0]
        small, report = rewrite(m, plan, args.method, calib)
        serialize(small, out / f"model_x{target:g}")
        rows.append({
            "target": target,
            "search_s": round(search_s, 4),
            "achieved_ratio": round(report["compression_ratio"], 4),
            "decomposed": len(plan.decomposed),
            "predicted_objective": plan.predicted_total_delta_acc,
            "output_nmse": report["output_nmse"],
        })
    print(f"{'target':>7} {'ratio':>7} {'layers':>6} {'objective':>11} {'out nmse':>9} {'search':>8}")
    for r in rows:
        print(f"{r['target']:>7.2f} {r['achieved_ratio']:>7.2f} {r['decomposed']:>6} "
              f"{r['predicted_objective']:>11.4f} {r['output_nmse']:>9.4f} {r['search_s']:>7.3f}s")
    (out / "summary.json").write_text(json.dumps(rows, indent=1) + "\n")


if __name__ == "__main__":
    main()
