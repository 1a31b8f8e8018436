"""The ten binding acceptance checks, one test each.

Every test appends a PASS/FAIL line (with timing and the measured numbers)
that is printed in the pytest terminal summary.  Run standalone with
``python tests/test_acceptance.py``.
"""
import contextlib
import json
import math
import sys
import time

import jsonschema
import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES, brute_force_plans, naive_conv2d
from rankcompress import cli, estimators, infer, search
from rankcompress import model_ir as ir
from rankcompress import tensor_core as tc
from rankcompress.architectures import build_arch
from rankcompress.decompose import LayerFactorizer, ProposalGrid, RankProposal, decompose_conv, param_delta
from rankcompress.estimators import CandidateEntry, CandidateTable, TraceRecord, mse_proxy
from rankcompress.evbmf import evbmf_rank


@contextlib.contextmanager
def criterion(n, title, limit_s=None):
    info = {}
    t0 = time.perf_counter()
    ok = False
    try:
        yield info
        elapsed = time.perf_counter() - t0
        if limit_s is not None:
            info["time"] = f"{elapsed:.2f}s/{limit_s}s"
            assert elapsed <= limit_s, f"took {elapsed:.1f}s, limit {limit_s}s"
        ok = True
    finally:
        detail = ", ".join(f"{k}={v}" for k, v in info.items())
        line = f"[{'PASS' if ok else 'FAIL'}] {n:>2}. {title}" + (f" ({detail})" if detail else "")
        ACCEPTANCE_LINES.append(line)
        print(line)


def test_01_saving_arithmetic():
    with criterion(1, "32->64 3x3 at R1=R2=8 saves 17088 params") as info:
        spec = ir.conv2d("c", "input", 32, 64, 3)
        info["delta"] = param_delta(spec, 8, 8)
        assert info["delta"] == -17088


def test_02_full_rank_lossless():
    with criterion(2, "full-rank blocks reproduce conv outputs", limit_s=30) as info:
        r = np.random.default_rng(2)
        worst = 0.0
        layers = 0
        for trial in range(24):
            cin, cout = int(r.integers(1, 17)), int(r.integers(1, 17))
            k = int(r.choice([1, 3, 5]))
            stride = int(r.integers(1, 3))
            bias = bool(trial % 2)
            spec = ir.conv2d("c", "input", cin, cout, k, stride=stride, bias=bias)
            w = r.standard_normal((cout, cin, k, k))
            b = r.standard_normal(cout) if bias else None
            x = r.standard_normal((2, cin, 9, 9))
            ref = infer.conv2d_forward(x, w, b, stride, spec.padding)
            for method in ("hosvd", "hooi"):
                block, bw = decompose_conv(spec, w, b, RankProposal("c", cin, cout), method)
                y = infer.run_chain(block.layers, bw, x)
                worst = max(worst, float(np.linalg.norm(y - ref) / np.linalg.norm(ref)))
            layers += 1
        info["layers"] = layers
        info["max_rel_err"] = f"{worst:.1e}"
        assert layers >= 20 and worst <= 1e-4


def test_03_monotone_fidelity():
    with criterion(3, "nested HOSVD: kernel error and layer NMSE non-increasing", limit_s=60) as info:
        r = np.random.default_rng(3)
        # kernel reconstruction error on random layers, nested grid
        pairs = 0
        for _ in range(20):
            cin, cout = int(r.integers(8, 65)), int(r.integers(8, 65))
            basis = tc.Tucker2Basis(r.standard_normal((cout, cin, 3, 3)))
            grid = ProposalGrid(2, (2,))
            errs = [basis.factors(min(cin, max(1, grid.round(r2 * cin / cout))), r2).errors[0]
                    for r2 in grid.values(cout)]
            assert all(b <= a + 1e-12 for a, b in zip(errs, errs[1:]))
            pairs += len(errs) - 1
        info["kernel_steps"] = pairs
        # proxy on isotropic inputs, where output error is exactly kernel error
        steps = 0
        for _ in range(10):
            cin, cout = int(r.integers(4, 13)), int(r.integers(4, 13))
            spec = ir.conv2d("c", "input", cin, cout, 3, padding=0)
            w = r.standard_normal((cout, cin, 3, 3))
            n = 2 * cin * 9
            x = (np.linalg.qr(r.standard_normal((n, cin * 9)))[0] * np.sqrt(n)).reshape(n, cin, 3, 3)
            tr = TraceRecord("c", x, naive_conv2d(x, w))
            fac = LayerFactorizer(spec, w)
            scores = [mse_proxy(tr, *fac.block(max(1, round(r2 * cin / cout)), r2))[0]
                      for r2 in range(1, cout + 1)]
            assert all(b <= a + 1e-12 for a, b in zip(scores, scores[1:]))
            steps += len(scores) - 1
        # the traced testnet_small table on the default grid
        table = estimators.build_tables(build_arch("testnet_small", num_classes=10))
        for row in table.rows():
            assert all(hi.delta_acc >= lo.delta_acc - 1e-12 for lo, hi in zip(row, row[1:]))
            steps += len(row) - 1
        info["proxy_steps"] = steps


def _instance(r):
    n = int(r.integers(1, 7))
    values, weights = [], []
    for _ in range(n):
        m = int(r.integers(1, 6))
        if r.random() < 0.3:  # tie-heavy rows
            values.append([-float(v) for v in r.integers(0, 4, m) / 4])
            weights.append([-int(v) for v in r.integers(0, 5, m) * 10])
        else:
            values.append([-float(v) for v in r.random(m)])
            weights.append([-int(v) for v in r.integers(1, 150, m)])
    return values, weights


def _table(values, weights, ref=1000):
    layers = [f"l{i}" for i in range(len(values))]
    entries = [CandidateEntry(lid, RankProposal(lid, j + 1, j + 1), v, w, -v)
               for lid, vs, ws in zip(layers, values, weights) for j, (v, w) in enumerate(zip(vs, ws))]
    return CandidateTable(layers, entries, ref)


def test_04_solver_exactness():
    with criterion(4, "solver and top-k equal brute-force enumeration", limit_s=60) as info:
        r = np.random.default_rng(4)
        checked = 0
        for _ in range(250):
            values, weights = _instance(r)
            table = _table(values, weights)
            floor = search.min_achievable_size(table)
            fm = int(r.integers(floor, 1001))
            k = int(r.integers(1, 8))
            expect = brute_force_plans([[0.0] + v for v in values], [[0] + w for w in weights], fm - 1000)
            res = search.solve(table, search.Budget(flash_max=fm), search.SearchConfig(k=k))
            got = [(-p.predicted_total_delta_acc, p.predicted_size - 1000, p.key[2]) for p in res.plans]
            assert got == expect[:k]
            checked += 1
        info["instances"] = checked
        assert checked >= 200


def test_05_budget_reuse(tmp_path, monkeypatch):
    m = build_arch("testnet_small", num_classes=10)
    estimators.save_tables(estimators.build_tables(m), tmp_path / "t")
    calls = {"n": 0}

    def counted(*a, **k):
        calls["n"] += 1
        raise AssertionError("candidate re-evaluation during search")

    with criterion(5, "5 budgets on prebuilt tables, no re-evaluation", limit_s=10) as info:
        for mod in (infer, estimators):
            monkeypatch.setattr(mod, "forward_traced", counted)
        monkeypatch.setattr(estimators, "build_tables", counted)
        monkeypatch.setattr(estimators, "mse_proxy", counted)
        for i, tc_ in enumerate((1.25, 1.5, 2.0, 3.0, 4.0)):
            code = cli.main(["search", "--tables", str(tmp_path / "t"), "--target-compression", str(tc_),
                             "--topk", "5", "--out", str(tmp_path / f"p{i}.json")])
            assert code == 0
        info["evaluations"] = calls["n"]
        assert calls["n"] == 0


def test_06_param_counts():
    with criterion(6, "architecture parameter counts") as info:
        targets = {"resnet18": (11.68e6, 0.01), "stresnet_pico": (0.62e6, 0.10),
                   "stresnet_micro": (1.50e6, 0.10), "stresnet_tiny": (3.99e6, 0.10)}
        bad = []
        for name, (target, tol) in targets.items():
            n = ir.param_count(build_arch(name))
            info[name] = f"{n / 1e6:.3f}M"
            if abs(n - target) / target > tol:
                bad.append(name)
        assert not bad, bad


REPORT_SCHEMA = {
    "type": "object",
    "required": ["reference_params", "achieved_params", "predicted_size", "achieved_size",
                 "compression_ratio", "layer_nmse", "output_nmse", "decomposed_layers"],
    "properties": {"achieved_params": {"type": "integer"}, "output_nmse": {"type": "number"}},
}


def _pipeline(d, topk=1):
    steps = [
        ["arch", "testnet_small", "--num-classes", "10", "--seed", "0", "--out", str(d / "m")],
        ["tables", "--model", str(d / "m"), "--out", str(d / "t")],
        ["search", "--tables", str(d / "t"), "--target-compression", "2.0", "--topk", str(topk),
         "--out", str(d / "plans.json")],
        ["rewrite", "--model", str(d / "m"), "--plans", str(d / "plans.json"), "--out", str(d / "c")],
    ]
    for argv in steps:
        assert cli.main(argv) == 0, argv


def test_07_end_to_end(tmp_path):
    with criterion(7, "testnet_small at 2x: size, finite NMSE, valid report", limit_s=300) as info:
        _pipeline(tmp_path)
        rep = json.loads((tmp_path / "c" / "report.json").read_text())
        jsonschema.validate(rep, REPORT_SCHEMA)
        ratio = rep["achieved_params"] / rep["reference_params"]
        info["achieved/ref"] = f"{ratio:.4f}"
        info["output_nmse"] = f"{rep['output_nmse']:.3f}"
        assert ratio <= 0.52
        assert math.isfinite(rep["output_nmse"])
        assert rep["achieved_params"] == ir.param_count(ir.deserialize(tmp_path / "c"))


def test_08_evbmf():
    with criterion(8, "EVBMF planted-rank recovery and scale invariance") as info:
        hits = 0
        invariant = True
        for seed in range(100):
            r = np.random.default_rng(seed)
            u = np.linalg.qr(r.standard_normal((100, 3)))[0]
            v = np.linalg.qr(r.standard_normal((60, 3)))[0]
            a = (u * np.array([3.0, 2.0, 1.0])) @ v.T
            e = r.standard_normal(a.shape)
            a = a + e * 0.01 * np.linalg.norm(a) / np.linalg.norm(e)
            est = evbmf_rank(a).estimated_rank
            hits += est == 3
            if seed < 20:
                invariant &= all(evbmf_rank(c * a).estimated_rank == est for c in (1e-3, 0.5, 7.0, 1e4))
        info["recovered"] = f"{hits}/100"
        info["scale_invariant"] = invariant
        assert hits >= 95 and invariant


def test_09_determinism(tmp_path):
    with criterion(9, "pipeline reruns are bitwise identical") as info:
        a, b = tmp_path / "a", tmp_path / "b"
        a.mkdir()
        b.mkdir()
        _pipeline(a, topk=3)
        _pipeline(b, topk=3)
        for rel in ("t/acc_table.csv", "t/flash_table.csv", "c/weights.bin", "c/model.json"):
            assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel
        assert json.loads((a / "plans.json").read_text()) == json.loads((b / "plans.json").read_text())
        info["files"] = 5


def test_10_hooi_dominance():
    with criterion(10, "HOOI error <= HOSVD error + 1e-10") as info:
        r = np.random.default_rng(10)
        worst = -math.inf
        cases = 0
        for _ in range(60):
            cin, cout = int(r.integers(2, 33)), int(r.integers(2, 33))
            k = int(r.choice([1, 3]))
            w = r.standard_normal((cout, cin, k, k))
            r1, r2 = int(r.integers(1, cin + 1)), int(r.integers(1, cout + 1))
            e_hosvd = tc.tucker2_hosvd(w, r1, r2).errors[-1]
            e_hooi = tc.tucker2_hooi(w, r1, r2).errors[-1]
            worst = max(worst, e_hooi - e_hosvd)
            cases += 1
        info["cases"] = cases
        info["max(hooi-hosvd)"] = f"{worst:.1e}"
        assert cases >= 50 and worst <= 1e-10


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
