"""Rank proposals and layer factorization (conv -> 3 convs, linear -> 2 linears)."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor_core as tc
from .model_ir import (
    DecomposedConvBlock,
    DecomposedLinearBlock,
    LayerSpec,
    ModelIR,
    conv2d,
    layer_param_count,
    linear,
)

METHODS = ("hosvd", "hooi")


@dataclass(frozen=True, order=True)
class RankProposal:
    layer_id: str
    r1: int
    r2: int


@dataclass(frozen=True)
class ProposalGrid:
    """Rank grid ``start, start+s0, start+s0+s1, ...``; the last step repeats."""

    start: int = 8
    steps: tuple[int, ...] = (8,)

    def __post_init__(self):
        object.__setattr__(self, "steps", tuple(int(s) for s in self.steps))
        if self.start < 1:
            raise ValueError("grid start must be >= 1")
        if not self.steps or min(self.steps) < 1:
            raise ValueError("grid steps must be positive integers")

    def values(self, limit: int) -> list[int]:
        out = []
        v = self.start
        i = 0
        while v <= limit:
            out.append(v)
            v += self.steps[min(i, len(self.steps) - 1)]
            i += 1
        return out

    def round(self, x: float) -> int:
        """Nearest grid value to ``x``; ties go to the smaller value."""
        if x <= self.start:
            return self.start
        prev = self.start
        i = 0
        while True:
            nxt = prev + self.steps[min(i, len(self.steps) - 1)]
            if x <= nxt:
                return prev if x - prev <= nxt - x else nxt
            prev = nxt
            i += 1


def decomposed_param_count(spec: LayerSpec, r1: int, r2: int) -> int:
    """Parameters of the factored replacement (bias kept on the last layer)."""
    bias = 0
    if spec.kind == "conv2d":
        kh, kw = spec.kernel
        if spec.has_bias:
            bias = spec.out_ch
        return spec.in_ch * r1 + r1 * r2 * kh * kw + r2 * spec.out_ch + bias
    if spec.kind == "linear":
        if spec.has_bias:
            bias = spec.out_features
        return spec.in_features * r1 + r1 * spec.out_features + bias
    raise ValueError(f"layer {spec.id!r} ({spec.kind}) cannot be decomposed")


def param_delta(spec: LayerSpec, r1: int, r2: int) -> int:
    """Decomposed minus original parameter count; negative means a saving."""
    return decomposed_param_count(spec, r1, r2) - layer_param_count(spec)


def layer_proposals(spec: LayerSpec, grid: ProposalGrid) -> list[RankProposal]:
    if not spec.is_decomposable:
        return []
    if spec.kind == "conv2d":
        pairs = []
        for r2 in grid.values(spec.out_ch):
            r1 = grid.round(r2 * spec.in_ch / spec.out_ch)
            r1 = min(max(r1, 1), spec.in_ch)
            pairs.append((r1, r2))
    else:
        pairs = [(r, r) for r in grid.values(min(spec.in_features, spec.out_features))]
    return [RankProposal(spec.id, r1, r2) for r1, r2 in pairs if param_delta(spec, r1, r2) < 0]


def propose_ranks(m: ModelIR, grid: ProposalGrid = ProposalGrid()) -> list[RankProposal]:
    """Parameter-saving proposals for every decomposable layer, in model order."""
    out = []
    for spec in m.decomposable_layers():
        out.extend(layer_proposals(spec, grid))
    return out


# --- factorization -------------------------------------------------------

def _conv_block(spec: LayerSpec, r1: int, r2: int) -> DecomposedConvBlock:
    lid = spec.id
    reduce = conv2d(f"{lid}.reduce", spec.predecessors[0] if spec.predecessors else "", spec.in_ch, r1, 1,
                    padding=0, role="reduce")
    core = conv2d(f"{lid}.core", reduce.id, r1, r2, spec.kernel, stride=spec.stride,
                  padding=spec.padding, role="core")
    expand = conv2d(f"{lid}.expand", core.id, r2, spec.out_ch, 1, padding=0,
                    bias=bool(spec.has_bias), role="expand")
    return DecomposedConvBlock(reduce, core, expand)


def conv_block_from_factors(spec: LayerSpec, f: tc.TuckerFactors, bias=None):
    """Realize Tucker-2 factors as a reduce/core/expand block with weights."""
    r1, r2 = f.ranks
    block = _conv_block(spec, r1, r2)
    weights = {
        block.reduce.id: {"weight": f.u_in.T.reshape(r1, spec.in_ch, 1, 1)},
        block.core.id: {"weight": np.ascontiguousarray(f.core)},
        block.expand.id: {"weight": f.u_out.reshape(spec.out_ch, r2, 1, 1)},
    }
    if spec.has_bias:
        weights[block.expand.id]["bias"] = np.asarray(bias, dtype=np.float64)
    return block, weights


def decompose_conv(spec: LayerSpec, w: np.ndarray, bias, p: RankProposal, method: str = "hosvd"):
    """Factor one conv layer at ``(p.r1, p.r2)``; returns ``(block, weights)``."""
    if spec.kind != "conv2d":
        raise ValueError(f"layer {spec.id!r} is not a conv2d")
    if (spec.groups or 1) != 1:
        raise ValueError(f"layer {spec.id!r}: grouped/depthwise convs are not decomposed")
    if method == "hosvd":
        f = tc.tucker2_hosvd(w, p.r1, p.r2)
    elif method == "hooi":
        f = tc.tucker2_hooi(w, p.r1, p.r2)
    else:
        raise ValueError(f"unknown method {method!r}")
    return conv_block_from_factors(spec, f, bias)


def decompose_linear(spec: LayerSpec, w: np.ndarray, bias, rank: int):
    """Truncated-SVD split ``W ~= U_r (S_r V_r^T)`` into two linear layers."""
    if spec.kind != "linear":
        raise ValueError(f"layer {spec.id!r} is not a linear layer")
    if not 1 <= rank <= min(spec.in_features, spec.out_features):
        raise ValueError(f"rank must be in 1..{min(spec.in_features, spec.out_features)}, got {rank}")
    return _linear_block(spec, tc.svd(w), rank, bias)


def _linear_block(spec: LayerSpec, res: tc.SvdResult, rank: int, bias=None):
    lid = spec.id
    pred = spec.predecessors[0] if spec.predecessors else ""
    reduce = linear(f"{lid}.reduce", pred, spec.in_features, rank, bias=False, role="reduce")
    expand = linear(f"{lid}.expand", reduce.id, rank, spec.out_features, bias=bool(spec.has_bias),
                    role="expand")
    weights = {
        reduce.id: {"weight": res.singular_values[:rank, None] * res.v[:, :rank].T},
        expand.id: {"weight": np.ascontiguousarray(res.u[:, :rank])},
    }
    if spec.has_bias:
        weights[expand.id]["bias"] = np.asarray(bias, dtype=np.float64)
    return DecomposedLinearBlock(reduce, expand), weights


def decompose_layer(m: ModelIR, p: RankProposal, method: str = "hosvd"):
    """Dispatch on layer kind using the model's stored weights."""
    spec = m.layer(p.layer_id)
    w = m.weights[spec.id]
    if spec.kind == "conv2d":
        return decompose_conv(spec, w["weight"], w.get("bias"), p, method)
    if p.r1 != p.r2:
        raise ValueError(f"linear layer {spec.id!r} needs r1 == r2")
    return decompose_linear(spec, w["weight"], w.get("bias"), p.r1)


@dataclass
class LayerFactorizer:
    """Caches the full HOSVD bases (or SVD) of one layer for nested rank sweeps."""

    spec: LayerSpec
    weight: np.ndarray
    bias: np.ndarray | None = None
    _basis: object = field(default=None, init=False, repr=False)

    def block(self, r1: int, r2: int):
        if self.spec.kind == "conv2d":
            if self._basis is None:
                self._basis = tc.Tucker2Basis(self.weight)
            return conv_block_from_factors(self.spec, self._basis.factors(r1, r2), self.bias)
        if self._basis is None:
            self._basis = tc.svd(self.weight)
        if r1 != r2:
            raise ValueError(f"linear layer {self.spec.id!r} needs r1 == r2")
        return _linear_block(self.spec, self._basis, r1, self.bias)
