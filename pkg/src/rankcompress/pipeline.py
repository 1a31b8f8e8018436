"""Model rewriting from a rank plan, and model-vs-model evaluation reports."""
from __future__ import annotations

import logging

import numpy as np

from .decompose import RankProposal, decompose_layer
from .errors import ShapeError
from .estimators import CalibrationConfig
from .infer import calibration_batches, forward, forward_traced, run_chain
from .model_ir import ModelIR, param_count, replace_layer, serialized_nbytes
from .search import RankPlan

log = logging.getLogger(__name__)

REPORT_VERSION = 1


def apply_plan(m: ModelIR, choices: dict[str, RankProposal | None], method: str = "hooi") -> ModelIR:
    """Replace every decomposed layer of ``choices`` in model order."""
    known = set(m.layer_ids)
    missing = [lid for lid in choices if lid not in known]
    if missing:
        raise KeyError(f"plan names layers missing from the model: {missing}")
    out = m
    for spec in m.layers:
        p = choices.get(spec.id)
        if p is None:
            continue
        block, weights = decompose_layer(m, p, method)
        out = replace_layer(out, spec.id, block, weights)
    return out


def _layer_pairs(ref: ModelIR, cand: ModelIR) -> list[tuple[str, str]]:
    """(reference id, candidate id) of layers producing the same tensor."""
    cand_ids = set(cand.layer_ids)
    expands = {}
    for spec in cand.layers:
        if spec.decomposed_from is not None and spec.role == "expand":
            expands[spec.decomposed_from] = spec.id
    pairs = []
    for spec in ref.layers:
        if spec.kind in ("input", "output"):
            continue
        if spec.id in expands:
            pairs.append((spec.id, expands[spec.id]))
        elif spec.id in cand_ids:
            pairs.append((spec.id, spec.id))
    return pairs


def compare_models(ref: ModelIR, cand: ModelIR, calib: CalibrationConfig = CalibrationConfig()) -> dict:
    """Per-layer and final-output NMSE of ``cand`` against ``ref`` on shared inputs.

    Per-layer numbers are end-to-end (errors accumulate through the network).
    """
    if tuple(ref.input_shape) != tuple(cand.input_shape):
        raise ShapeError(f"input shapes differ: {ref.input_shape} vs {cand.input_shape}")
    pairs = _layer_pairs(ref, cand)
    ref_ids = [a for a, _ in pairs]
    cand_ids = [b for _, b in pairs]
    err = {a: 0.0 for a in ref_ids}
    energy = {a: 0.0 for a in ref_ids}
    out_err = out_energy = 0.0
    count = {a: 0 for a in ref_ids}
    out_count = 0
    for x in calibration_batches(ref.input_shape, calib.batches, calib.batch_size, calib.seed):
        rt = {r.layer_id: r.output for r in forward_traced(ref, x, ref_ids)}
        ct = {r.layer_id: r.output for r in forward_traced(cand, x, cand_ids)}
        for a, b in pairs:
            ya, yb = rt[a], ct[b]
            if ya.shape != yb.shape:
                raise ShapeError(f"layer {a!r}: output {ya.shape} vs {yb.shape}")
            err[a] += float(np.sum((ya - yb) ** 2))
            energy[a] += float(np.sum(ya * ya))
            count[a] += ya.size
        ya, yb = forward(ref, x), forward(cand, x)
        out_err += float(np.sum((ya - yb) ** 2))
        out_energy += float(np.sum(ya * ya))
        out_count += ya.size
    per_layer = {
        a: (err[a] / count[a]) / (energy[a] / count[a] + 1e-12) for a in ref_ids
    }
    final = (out_err / out_count) / (out_energy / out_count + 1e-12)
    ref_params, cand_params = param_count(ref), param_count(cand)
    ref_bytes, cand_bytes = serialized_nbytes(ref), serialized_nbytes(cand)
    return {
        "report_version": REPORT_VERSION,
        "reference": {"name": ref.name, "params": ref_params, "bytes": ref_bytes},
        "candidate": {"name": cand.name, "params": cand_params, "bytes": cand_bytes},
        "compression_ratio": ref_params / cand_params,
        "calibration": {"batches": calib.batches, "batch_size": calib.batch_size, "seed": calib.seed},
        "output_nmse": final,
        "layer_nmse": per_layer,
    }


def local_layer_nmse(ref: ModelIR, cand: ModelIR, layer_ids, calib: CalibrationConfig) -> dict[str, float]:
    """NMSE of each replaced block fed the reference layer's own input."""
    layer_ids = list(layer_ids)
    if not layer_ids:
        return {}
    chains = {lid: [s for s in cand.layers if s.decomposed_from == lid] for lid in layer_ids}
    err = dict.fromkeys(layer_ids, 0.0)
    energy = dict.fromkeys(layer_ids, 0.0)
    n = dict.fromkeys(layer_ids, 0)
    for x in calibration_batches(ref.input_shape, calib.batches, calib.batch_size, calib.seed):
        for rec in forward_traced(ref, x, layer_ids):
            y = run_chain(chains[rec.layer_id], cand.weights, rec.input)
            err[rec.layer_id] += float(np.sum((y - rec.output) ** 2))
            energy[rec.layer_id] += float(np.sum(rec.output ** 2))
            n[rec.layer_id] += rec.output.size
    return {lid: (err[lid] / n[lid]) / (energy[lid] / n[lid] + 1e-12) for lid in layer_ids}


def rewrite(m: ModelIR, plan: RankPlan, method: str = "hooi",
            calib: CalibrationConfig = CalibrationConfig(), size_mode: str = "params"):
    """Apply ``plan`` and build the rewrite report; returns ``(model, report)``."""
    out = apply_plan(m, plan.choices, method)
    decomposed = [lid for lid in m.layer_ids if plan.choices.get(lid) is not None]
    cmp = compare_models(m, out, calib)
    achieved = cmp["candidate"]["params"] if size_mode == "params" else cmp["candidate"]["bytes"]
    report = {
        "report_version": REPORT_VERSION,
        "method": method,
        "size_mode": size_mode,
        "reference_params": cmp["reference"]["params"],
        "reference_bytes": cmp["reference"]["bytes"],
        "achieved_params": cmp["candidate"]["params"],
        "achieved_bytes": cmp["candidate"]["bytes"],
        "predicted_size": plan.predicted_size,
        "achieved_size": achieved,
        "compression_ratio": cmp["compression_ratio"],
        "predicted_objective": plan.predicted_total_delta_acc,
        "decomposed_layers": {
            lid: {"r1": plan.choices[lid].r1, "r2": plan.choices[lid].r2} for lid in decomposed
        },
        "layer_nmse": local_layer_nmse(m, out, decomposed, calib),
        "output_nmse": cmp["output_nmse"],
        "calibration": cmp["calibration"],
    }
    return out, report


def evbmf_plan(m: ModelIR, min_saving: int = 1) -> RankPlan:
    """Per-layer ranks from EVBMF alone, with no budget and no search.

    Modes that EVBMF judges pure noise (rank 0) leave the layer untouched, as
    do rank pairs that would save fewer than ``min_saving`` parameters.  The
    plan carries no proxy objective (0.0); score it with :func:`rewrite`.
    """
    from .decompose import param_delta
    from .evbmf import evbmf_rank, evbmf_tucker_ranks

    choices: dict[str, RankProposal | None] = {}
    size = param_count(m)
    for spec in m.decomposable_layers():
        w = np.asarray(m.weights[spec.id]["weight"], dtype=np.float64)
        if spec.kind == "conv2d":
            r1, r2 = evbmf_tucker_ranks(w, clamp=False)
        else:
            r1 = r2 = evbmf_rank(w).estimated_rank
        if r1 == 0 or r2 == 0:
            choices[spec.id] = None
            continue
        delta = param_delta(spec, r1, r2)
        if -delta < min_saving:
            choices[spec.id] = None
            continue
        choices[spec.id] = RankProposal(spec.id, r1, r2)
        size += delta
    return RankPlan(choices, 0.0, size, 1)
