"""Per-candidate accuracy proxy and flash deltas, assembled into lookup tables.

Every candidate is one layer factored at one rank proposal.  Its accuracy
proxy is ``-NMSE`` between the factored block's output and the reference
layer's output, both fed the reference layer's captured input.  Its flash
delta is candidate size minus reference size (negative = saving), either in
parameters (analytic) or in serialized bytes.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .decompose import (
    LayerFactorizer,
    ProposalGrid,
    RankProposal,
    layer_proposals,
    param_delta,
)
from .errors import ShapeError
from .infer import TraceRecord, calibration_batches, forward_traced, run_chain
from .model_ir import (
    LayerSpec,
    ModelIR,
    _atomic_write,
    model_digest,
    param_count,
    replace_layer,
    serialized_nbytes,
    weight_shapes,
)

log = logging.getLogger(__name__)

NMSE_EPS = 1e-12
SIZE_MODES = ("params", "bytes")
ACC_CSV = "acc_table.csv"
FLASH_CSV = "flash_table.csv"
SIDECAR = "tables.json"


@dataclass(frozen=True)
class CalibrationConfig:
    batches: int = 4
    batch_size: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.batches < 1 or self.batch_size < 1:
            raise ValueError("calibration needs at least one non-empty batch")


@dataclass(frozen=True)
class CandidateEntry:
    layer_id: str
    proposal: RankProposal
    delta_acc: float
    delta_flash: int
    nmse: float


@dataclass
class CandidateTable:
    """Rows are candidate layers (model order), entries sorted by rank within a row."""

    layers: list[str]
    entries: list[CandidateEntry]
    reference_size: int
    size_mode: str = "params"
    reference_params: int = 0
    reference_bytes: int = 0
    meta: dict = field(default_factory=dict)

    def rows(self) -> list[list[CandidateEntry]]:
        by_layer = {lid: [] for lid in self.layers}
        for e in self.entries:
            by_layer[e.layer_id].append(e)
        return [by_layer[lid] for lid in self.layers]

    def __len__(self) -> int:
        return len(self.entries)

    def scaled_acc(self, c: float) -> "CandidateTable":
        """Copy with every ``delta_acc`` multiplied by ``c``."""
        entries = [
            CandidateEntry(e.layer_id, e.proposal, e.delta_acc * c, e.delta_flash, e.nmse)
            for e in self.entries
        ]
        return CandidateTable(list(self.layers), entries, self.reference_size, self.size_mode,
                              self.reference_params, self.reference_bytes, dict(self.meta))


# --- flash ---------------------------------------------------------------

def delta_flash_analytic(spec: LayerSpec, p: RankProposal) -> int:
    """Factored minus original parameter count of one layer."""
    return param_delta(spec, p.r1, p.r2)


def delta_flash_serialized(m: ModelIR, layer_id: str | None, block=None, weights=None,
                           reference_nbytes: int | None = None) -> int:
    """Serialized-size difference after substituting ``block`` (0 if ``block`` is None)."""
    if block is None:
        return 0
    ref = serialized_nbytes(m) if reference_nbytes is None else reference_nbytes
    if weights is None:
        weights = _zero_weights(block)
    cand = replace_layer(m, layer_id, block, weights)
    return serialized_nbytes(cand) - ref


def _zero_weights(block):
    return {s.id: {k: np.zeros(v, np.float32) for k, v in weight_shapes(s).items()} for s in block.layers}


# --- accuracy proxy ------------------------------------------------------

def nmse(pred: np.ndarray, target: np.ndarray, eps: float = NMSE_EPS) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} vs target {target.shape}")
    err = float(np.mean((pred - target) ** 2))
    return err / (float(np.mean(target * target)) + eps)


def mse_proxy(ref_trace, block, block_weights) -> tuple[float, float]:
    """``(nmse, delta_acc)`` of ``block`` against one traced reference layer."""
    y = run_chain(block.layers, block_weights, ref_trace.input)
    if y.shape != ref_trace.output.shape:
        raise ShapeError(
            f"layer {ref_trace.layer_id!r}: block output {y.shape} vs reference {ref_trace.output.shape}"
        )
    score = nmse(y, ref_trace.output)
    return score, -score


# --- tables --------------------------------------------------------------

def _trace_candidates(m: ModelIR, layer_ids: list[str], calib: CalibrationConfig):
    """Reference input/output per layer, calibration batches concatenated."""
    per_layer: dict[str, list] = {lid: [] for lid in layer_ids}
    for x in calibration_batches(m.input_shape, calib.batches, calib.batch_size, calib.seed):
        for rec in forward_traced(m, x, layer_ids):
            per_layer[rec.layer_id].append(rec)
    return {
        lid: TraceRecord(
            lid,
            np.concatenate([r.input for r in recs]),
            np.concatenate([r.output for r in recs]),
        )
        for lid, recs in per_layer.items()
    }


def _score_layer(m, spec, proposals, trace, size_mode, ref_bytes):
    w = m.weights[spec.id]
    fac = LayerFactorizer(spec, np.asarray(w["weight"], np.float64), w.get("bias"))
    out = []
    for p in proposals:
        block, bw = fac.block(p.r1, p.r2)
        score, dacc = mse_proxy(trace, block, bw)
        if size_mode == "params":
            dflash = delta_flash_analytic(spec, p)
        else:
            dflash = delta_flash_serialized(m, spec.id, block, bw, ref_bytes)
        out.append(CandidateEntry(spec.id, p, dacc, int(dflash), score))
    return out


def build_tables(
    m: ModelIR,
    grid: ProposalGrid = ProposalGrid(),
    calib: CalibrationConfig = CalibrationConfig(),
    size_mode: str = "params",
    workers: int = 1,
) -> CandidateTable:
    """Score every rank proposal of every candidate layer.

    The reference model is traced once per calibration batch; candidates are
    evaluated locally on the captured inputs.  Layers may be scored on a
    thread pool; results are ordered by (layer position, rank) regardless.
    """
    if size_mode not in SIZE_MODES:
        raise ValueError(f"size_mode must be one of {SIZE_MODES}")
    t0 = time.perf_counter()
    groups = []
    for spec in m.decomposable_layers():
        props = layer_proposals(spec, grid)
        if props:
            groups.append((spec, props))
    ref_params = param_count(m)
    ref_bytes = serialized_nbytes(m)
    layer_ids = [spec.id for spec, _ in groups]
    if not groups:
        log.warning("model %s has no decomposable layer with a saving proposal", m.name)
    traces = _trace_candidates(m, layer_ids, calib) if groups else {}

    def work(item):
        spec, props = item
        return _score_layer(m, spec, props, traces[spec.id], size_mode, ref_bytes)

    if workers > 1 and len(groups) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(work, groups))
    else:
        results = [work(g) for g in groups]
    entries = [e for row in results for e in row]
    elapsed = time.perf_counter() - t0
    log.info("scored %d candidates over %d layers in %.2fs", len(entries), len(groups), elapsed)
    return CandidateTable(
        layers=layer_ids,
        entries=entries,
        reference_size=ref_params if size_mode == "params" else ref_bytes,
        size_mode=size_mode,
        reference_params=ref_params,
        reference_bytes=ref_bytes,
        meta={
            "model": m.name,
            "model_sha256": model_digest(m),
            "grid": {"start": grid.start, "steps": list(grid.steps)},
            "calibration": asdict(calib),
            "proxy_baseline": 0.0,
        },
    )


# --- table files ---------------------------------------------------------

def _csv_text(table: CandidateTable, column: str) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["layer_id", "r1", "r2", "value"])
    for e in table.entries:
        value = getattr(e, column)
        w.writerow([e.layer_id, e.proposal.r1, e.proposal.r2, repr(value) if isinstance(value, float) else value])
    return buf.getvalue()


def save_tables(table: CandidateTable, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _atomic_write(out / ACC_CSV, _csv_text(table, "delta_acc").encode())
    _atomic_write(out / FLASH_CSV, _csv_text(table, "delta_flash").encode())
    sidecar = {
        "layers": table.layers,
        "reference_size": table.reference_size,
        "size_mode": table.size_mode,
        "reference_params": table.reference_params,
        "reference_bytes": table.reference_bytes,
        **table.meta,
    }
    _atomic_write(out / SIDECAR, (json.dumps(sidecar, indent=1, sort_keys=True) + "\n").encode())
    return out


def _read_csv(path: Path, parse):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["layer_id", "r1", "r2", "value"]:
        raise ValueError(f"{path}: unexpected header {rows[:1]}")
    return [(r[0], int(r[1]), int(r[2]), parse(r[3])) for r in rows[1:]]


def load_tables(in_dir) -> CandidateTable:
    d = Path(in_dir)
    sidecar = json.loads((d / SIDECAR).read_text())
    acc = _read_csv(d / ACC_CSV, float)
    flash = _read_csv(d / FLASH_CSV, int)
    if [a[:3] for a in acc] != [f[:3] for f in flash]:
        raise ValueError(f"{d}: accuracy and flash tables list different candidates")
    entries = [
        CandidateEntry(lid, RankProposal(lid, r1, r2), dacc, df, -dacc)
        for (lid, r1, r2, dacc), (_, _, _, df) in zip(acc, flash)
    ]
    known = {
        "layers", "reference_size", "size_mode", "reference_params", "reference_bytes",
    }
    return CandidateTable(
        layers=list(sidecar["layers"]),
        entries=entries,
        reference_size=int(sidecar["reference_size"]),
        size_mode=sidecar["size_mode"],
        reference_params=int(sidecar.get("reference_params", 0)),
        reference_bytes=int(sidecar.get("reference_bytes", 0)),
        meta={k: v for k, v in sidecar.items() if k not in known},
    )
