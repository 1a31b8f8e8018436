"""Per-layer EVBMF ranks versus budgeted search at the same model size.

Randomly initialised kernels have flat spectra, so EVBMF keeps every layer.
``--decay`` bends each kernel's output-mode spectrum geometrically, a rough
stand-in for the decaying spectra of trained weights.
"""
import argparse

import numpy as np

from rankcompress import build_arch, build_tables, evbmf_plan, param_count, rewrite
from rankcompress import tensor_core as tc
from rankcompress.estimators import CalibrationConfig
from rankcompress.model_ir import ModelIR
from rankcompress.search import Budget, solve


def with_decay(m, decay):
    weights = dict(m.weights)
    for spec in m.decomposable_layers():
        if spec.kind != "conv2d" or decay >= 1.0:
            continue
        w = np.asarray(m.weights[spec.id]["weight"], np.float64)
        u, s, vt = np.linalg.svd(tc.unfold(w, 1), full_matrices=False)
        s = s * decay ** np.arange(s.size)
        w = tc.fold((u * s) @ vt, 1, w.shape)
        weights[spec.id] = {**m.weights[spec.id], "weight": w.astype(np.float32)}
    return ModelIR(m.name, m.input_shape, m.layers, weights)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--arch", default="testnet_small")
    ap.add_argument("--decay", type=float, default=0.85)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    m = with_decay(build_arch(args.arch, num_classes=10, seed=args.seed), args.decay)
    calib = CalibrationConfig(seed=args.seed)
    ref = param_count(m)
    base = evbmf_plan(m)
    print(f"EVBMF: {len(base.decomposed)} layers decomposed, size {base.predicted_size} "
          f"({ref / base.predicted_size:.2f}x)")
    for lid, p in base.decomposed.items():
        print(f"  {lid:<16} r1={p.r1:<4} r2={p.r2}")
    if not base.decomposed:
        print("nothing to compare: EVBMF kept every layer")
        return
    _, base_rep = rewrite(m, base, "hooi", calib)

    table = build_tables(m, calib=calib)
    plan = solve(table, Budget(flash_max=base.predicted_size)).plans[0]
    _, search_rep = rewrite(m, plan, "hooi", calib)
    print(f"{'':<8} {'params':>9} {'ratio':>6} {'output nmse':>12}")
    for name, rep in (("evbmf", base_rep), ("search", search_rep)):
        print(f"{name:<8} {rep['achieved_params']:>9} {rep['compression_ratio']:>6.2f} "
              f"{rep['output_nmse']:>12.4f}")


if __name__ == "__main__":
    main()
