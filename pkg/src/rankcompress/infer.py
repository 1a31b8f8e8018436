"""Deterministic float64 forward pass over a :class:`ModelIR`.

Feature maps are ``(N, C, H, W)`` arrays, or ``(N, F)`` after global pooling.
Convolution is im2col (strided window view) followed by one matrix product.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError
from .model_ir import LayerSpec, ModelIR


@dataclass(frozen=True)
class TraceRecord:
    layer_id: str
    input: np.ndarray
    output: np.ndarray


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    """Patch view of ``x`` with shape ``(N, C, Ho, Wo, kh, kw)``."""
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def conv2d_forward(x, weight, bias=None, stride=1, padding=0, groups=1) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    weight = np.asarray(weight, dtype=np.float64)
    o, cg, kh, kw = weight.shape
    if x.shape[1] != cg * groups:
        raise ShapeError(f"conv expects {cg * groups} input channels, got {x.shape[1]}")
    cols = im2col(x, kh, kw, stride, padding)
    if groups == 1:
        out = np.tensordot(cols, weight, axes=([1, 4, 5], [1, 2, 3]))
    else:
        og = o // groups
        parts = [
            np.tensordot(
                cols[:, g * cg:(g + 1) * cg],
                weight[g * og:(g + 1) * og],
                axes=([1, 4, 5], [1, 2, 3]),
            )
            for g in range(groups)
        ]
        out = np.concatenate(parts, axis=-1)
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    if bias is not None:
        out += np.asarray(bias, dtype=np.float64)[None, :, None, None]
    return out


def maxpool_forward(x, k: int, stride: int, padding: int) -> np.ndarray:
    if padding:
        x = np.pad(
            x, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
            constant_values=-np.inf,
        )
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    return win.max(axis=(4, 5))


def layer_forward(spec: LayerSpec, w: Mapping[str, np.ndarray] | None, x) -> np.ndarray:
    """Run one layer.  ``x`` is a sequence of arrays for ``add`` layers."""
    kind = spec.kind
    try:
        if kind == "add":
            xs = list(x)
            if any(a.shape != xs[0].shape for a in xs):
                raise ShapeError(f"add inputs differ: {[a.shape for a in xs]}")
            out = xs[0].astype(np.float64, copy=True)
            for a in xs[1:]:
                out += a
            return out
        x = np.asarray(x, dtype=np.float64)
        if kind in ("input", "output"):
            return x
        if kind == "relu":
            return np.maximum(x, 0.0)
        if kind == "conv2d":
            if x.ndim != 4:
                raise ShapeError(f"conv expects a 4-d input, got {x.shape}")
            return conv2d_forward(
                x, w["weight"], w.get("bias"), spec.stride, spec.padding, spec.groups or 1
            )
        if kind == "linear":
            if x.ndim != 2 or x.shape[1] != spec.in_features:
                raise ShapeError(f"linear expects (N, {spec.in_features}), got {x.shape}")
            out = x @ np.asarray(w["weight"], dtype=np.float64).T
            if "bias" in w:
                out += np.asarray(w["bias"], dtype=np.float64)
            return out
        if kind == "batchnorm":
            if x.shape[1] != spec.channels:
                raise ShapeError(f"batchnorm expects {spec.channels} channels, got {x.shape[1]}")
            scale = np.asarray(w["weight"], np.float64) / np.sqrt(
                np.asarray(w["running_var"], np.float64) + spec.eps
            )
            shift = np.asarray(w["bias"], np.float64) - np.asarray(w["running_mean"], np.float64) * scale
            bshape = (1, -1) + (1,) * (x.ndim - 2)
            return x * scale.reshape(bshape) + shift.reshape(bshape)
        if kind == "maxpool":
            return maxpool_forward(x, spec.kernel[0], spec.stride, spec.padding)
        if kind == "global_avg_pool":
            if x.ndim != 4:
                raise ShapeError(f"global_avg_pool expects a 4-d input, got {x.shape}")
            return x.mean(axis=(2, 3))
    except ShapeError as exc:
        raise ShapeError(f"layer {spec.id!r}: {exc}") from None
    raise ShapeError(f"layer {spec.id!r}: unsupported kind {kind!r}")


def _check_input(m: ModelIR, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4 or tuple(x.shape[1:]) != tuple(m.input_shape):
        raise ShapeError(f"layer 'input': expected (N, {m.input_shape}), got {x.shape}")
    return x


def _run(m: ModelIR, x: np.ndarray, capture: set[str]):
    x = _check_input(m, x)
    # drop activations once their last consumer has run
    last_use = {}
    for idx, spec in enumerate(m.layers):
        for p in spec.predecessors:
            last_use[p] = idx
    acts: dict[str, np.ndarray] = {}
    records: dict[str, TraceRecord] = {}
    out = None
    for idx, spec in enumerate(m.layers):
        if spec.kind == "input":
            y = x
            inp = x
        else:
            ins = [acts[p] for p in spec.predecessors]
            inp = ins if spec.kind == "add" else ins[0]
            y = layer_forward(spec, m.weights.get(spec.id), inp)
        if spec.id in capture:
            records[spec.id] = TraceRecord(spec.id, inp if spec.kind != "add" else tuple(inp), y)
        if spec.kind == "output":
            out = y
        acts[spec.id] = y
        for p in spec.predecessors:
            if last_use.get(p) == idx:
                del acts[p]
    return out, records


def forward(m: ModelIR, x: np.ndarray) -> np.ndarray:
    out, _ = _run(m, x, set())
    return out


def forward_traced(m: ModelIR, x: np.ndarray, layer_ids: Iterable[str] | None = None) -> list[TraceRecord]:
    """Input/output captures for ``layer_ids`` (all layers if ``None``), in model order."""
    ids = m.layer_ids if layer_ids is None else list(layer_ids)
    known = set(m.layer_ids)
    unknown = [i for i in ids if i not in known]
    if unknown:
        raise KeyError(f"unknown layer ids: {unknown}")
    _, records = _run(m, x, set(ids))
    return [records[lid] for lid in m.layer_ids if lid in records]


def run_chain(layers: Sequence[LayerSpec], weights: Mapping[str, Mapping[str, np.ndarray]], x) -> np.ndarray:
    """Feed ``x`` through a linear chain of layers (e.g. a decomposed block)."""
    for spec in layers:
        x = layer_forward(spec, weights.get(spec.id), x)
    return x


def calibration_batches(input_shape, batches: int, batch_size: int, seed: int) -> list[np.ndarray]:
    """Seeded standard-normal inputs shared by tables, rewrite reports and eval."""
    rng = np.random.default_rng(seed)
    return [rng.standard_normal((batch_size, *input_shape)) for _ in range(batches)]
