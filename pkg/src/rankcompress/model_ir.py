"""Typed intermediate representation for sequential/residual CNNs.

A model is an ordered list of :class:`LayerSpec` plus a weight store mapping
layer id to named float32 arrays.  On disk a model is a directory holding
``model.json`` (manifest) and ``weights.bin`` (little-endian float32 blob in
manifest order).
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import ManifestError, ShapeError

FORMAT_VERSION = 1
MANIFEST = "model.json"
BLOB = "weights.bin"

KINDS = (
    "input",
    "output",
    "conv2d",
    "linear",
    "batchnorm",
    "relu",
    "maxpool",
    "global_avg_pool",
    "add",
)
PARAM_KINDS = ("conv2d", "linear", "batchnorm")
_DTYPE = np.dtype("<f4")


@dataclass(frozen=True)
class LayerSpec:
    id: str
    kind: str
    predecessors: tuple[str, ...] = ()
    # conv2d
    in_ch: int | None = None
    out_ch: int | None = None
    kernel: tuple[int, int] | None = None
    stride: int | None = None
    padding: int | None = None
    groups: int | None = None
    # linear
    in_features: int | None = None
    out_features: int | None = None
    has_bias: bool | None = None
    # batchnorm
    channels: int | None = None
    eps: float | None = None
    # maxpool (kernel/stride/padding reused)
    # set on layers emitted by a decomposition
    decomposed_from: str | None = None
    role: str | None = None

    def to_dict(self) -> dict:
        out = {"id": self.id, "kind": self.kind, "predecessors": list(self.predecessors)}
        for f in dataclasses.fields(self):
            if f.name in out:
                continue
            value = getattr(self, f.name)
            if value is None:
                continue
            out[f.name] = list(value) if isinstance(value, tuple) else value
        return out

    @classmethod
    def from_dict(cls, d: Mapping) -> "LayerSpec":
        lid = d.get("id", "<missing id>")
        kind = d.get("kind")
        if kind not in KINDS:
            raise ManifestError(f"layer {lid!r}: unknown layer kind {kind!r}")
        known = {f.name for f in dataclasses.fields(cls)}
        extra = set(d) - known
        if extra:
            raise ManifestError(f"layer {lid!r}: unknown fields {sorted(extra)}")
        kw = dict(d)
        kw["predecessors"] = tuple(kw.get("predecessors", ()))
        if kw.get("kernel") is not None:
            kw["kernel"] = tuple(int(k) for k in kw["kernel"])
        try:
            return cls(**kw)
        except TypeError as exc:
            raise ManifestError(f"layer {lid!r}: {exc}") from None

    @property
    def is_decomposable(self) -> bool:
        """Candidate for rank search: ungrouped conv or linear, not already factored."""
        if self.decomposed_from is not None:
            return False
        if self.kind == "conv2d":
            return (self.groups or 1) == 1
        return self.kind == "linear"


def conv2d(lid, pred, in_ch, out_ch, k, stride=1, padding=None, bias=False, **extra):
    kh, kw = (k, k) if isinstance(k, int) else tuple(k)
    if padding is None:
        padding = kh // 2
    return LayerSpec(
        id=lid, kind="conv2d", predecessors=(pred,), in_ch=in_ch, out_ch=out_ch,
        kernel=(kh, kw), stride=stride, padding=padding, groups=extra.pop("groups", 1),
        has_bias=bias, **extra,
    )


def linear(lid, pred, in_features, out_features, bias=True, **extra):
    return LayerSpec(
        id=lid, kind="linear", predecessors=(pred,), in_features=in_features,
        out_features=out_features, has_bias=bias, **extra,
    )


def batchnorm(lid, pred, channels, eps=1e-5):
    return LayerSpec(id=lid, kind="batchnorm", predecessors=(pred,), channels=channels, eps=eps)


def simple(lid, kind, *preds, **kw):
    return LayerSpec(id=lid, kind=kind, predecessors=tuple(preds), **kw)


def weight_shapes(spec: LayerSpec) -> dict[str, tuple[int, ...]]:
    """Named tensor shapes a layer owns, in storage order."""
    if spec.kind == "conv2d":
        g = spec.groups or 1
        shapes = {"weight": (spec.out_ch, spec.in_ch // g, *spec.kernel)}
        if spec.has_bias:
            shapes["bias"] = (spec.out_ch,)
        return shapes
    if spec.kind == "linear":
        shapes = {"weight": (spec.out_features, spec.in_features)}
        if spec.has_bias:
            shapes["bias"] = (spec.out_features,)
        return shapes
    if spec.kind == "batchnorm":
        c = (spec.channels,)
        return {"weight": c, "bias": c, "running_mean": c, "running_var": c}
    return {}


def layer_param_count(spec: LayerSpec) -> int:
    """Learnable parameters; batchnorm running statistics are not counted."""
    if spec.kind == "batchnorm":
        return 2 * spec.channels
    return sum(int(np.prod(s)) for s in weight_shapes(spec).values())


@dataclass(frozen=True)
class ModelIR:
    name: str
    input_shape: tuple[int, int, int]
    layers: tuple[LayerSpec, ...]
    weights: Mapping[str, Mapping[str, np.ndarray]] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))

    def layer(self, lid: str) -> LayerSpec:
        for spec in self.layers:
            if spec.id == lid:
                return spec
        raise KeyError(f"unknown layer id {lid!r}")

    @property
    def layer_ids(self) -> list[str]:
        return [spec.id for spec in self.layers]

    def decomposable_layers(self) -> list[LayerSpec]:
        return [spec for spec in self.layers if spec.is_decomposable]

    def output_id(self) -> str:
        return next(s.id for s in self.layers if s.kind == "output")


def param_count(m: ModelIR) -> int:
    return sum(layer_param_count(spec) for spec in m.layers)


def _conv_out(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def infer_shapes(m: ModelIR) -> dict[str, tuple[int, ...]]:
    """Per-layer output shapes (batch dim excluded); validates channel agreement.

    Feature maps are ``(C, H, W)``; ``global_avg_pool`` and ``linear`` emit ``(F,)``.
    """
    shapes: dict[str, tuple[int, ...]] = {}
    for spec in m.layers:
        ins = []
        for p in spec.predecessors:
            if p not in shapes:
                raise ShapeError(f"layer {spec.id!r}: predecessor {p!r} is not defined earlier")
            ins.append(shapes[p])
        kind = spec.kind
        if kind == "input":
            if ins:
                raise ShapeError(f"layer {spec.id!r}: input layer cannot have predecessors")
            shapes[spec.id] = tuple(m.input_shape)
            continue
        if kind == "add":
            if len(ins) < 2 or any(s != ins[0] for s in ins):
                raise ShapeError(f"layer {spec.id!r}: add needs >= 2 equal-shaped inputs, got {ins}")
            shapes[spec.id] = ins[0]
            continue
        if len(ins) != 1:
            raise ShapeError(f"layer {spec.id!r}: {kind} takes exactly one input")
        (x,) = ins
        if kind in ("relu", "output"):
            shapes[spec.id] = x
        elif kind == "conv2d":
            if len(x) != 3 or x[0] != spec.in_ch:
                raise ShapeError(f"layer {spec.id!r}: expects {spec.in_ch} input channels, got shape {x}")
            g = spec.groups or 1
            if spec.in_ch % g or spec.out_ch % g:
                raise ShapeError(f"layer {spec.id!r}: channels not divisible by groups={g}")
            kh, kw = spec.kernel
            if min(kh, kw, spec.stride) < 1 or spec.padding < 0:
                raise ShapeError(f"layer {spec.id!r}: invalid kernel/stride/padding")
            h = _conv_out(x[1], kh, spec.stride, spec.padding)
            w = _conv_out(x[2], kw, spec.stride, spec.padding)
            if h < 1 or w < 1:
                raise ShapeError(f"layer {spec.id!r}: empty output for input {x}")
            shapes[spec.id] = (spec.out_ch, h, w)
        elif kind == "batchnorm":
            if x[0] != spec.channels:
                raise ShapeError(f"layer {spec.id!r}: expects {spec.channels} channels, got {x}")
            shapes[spec.id] = x
        elif kind == "maxpool":
            kh, kw = spec.kernel
            shapes[spec.id] = (
                x[0],
                _conv_out(x[1], kh, spec.stride, spec.padding),
                _conv_out(x[2], kw, spec.stride, spec.padding),
            )
        elif kind == "global_avg_pool":
            if len(x) != 3:
                raise ShapeError(f"layer {spec.id!r}: expects a (C,H,W) map, got {x}")
            shapes[spec.id] = (x[0],)
        elif kind == "linear":
            if x != (spec.in_features,):
                raise ShapeError(f"layer {spec.id!r}: expects ({spec.in_features},), got {x}")
            shapes[spec.id] = (spec.out_features,)
        else:  # pragma: no cover - from_dict rejects unknown kinds
            raise ShapeError(f"layer {spec.id!r}: unknown kind {kind!r}")
    return shapes


def validate(m: ModelIR) -> dict[str, tuple[int, ...]]:
    """Check graph structure, shapes and weights; returns inferred output shapes."""
    ids = m.layer_ids
    if len(set(ids)) != len(ids):
        dup = sorted({i for i in ids if ids.count(i) > 1})
        raise ShapeError(f"duplicate layer ids: {dup}")
    kinds = [s.kind for s in m.layers]
    if kinds.count("input") != 1 or kinds.count("output") != 1:
        raise ShapeError("model needs exactly one input and one output layer")
    shapes = infer_shapes(m)
    consumed = {p for s in m.layers for p in s.predecessors}
    for spec in m.layers:
        if spec.kind != "output" and spec.id not in consumed:
            raise ShapeError(f"layer {spec.id!r} has no consumers")
        expected = weight_shapes(spec)
        got = m.weights.get(spec.id, {})
        if set(got) != set(expected):
            raise ShapeError(
                f"layer {spec.id!r}: expected tensors {sorted(expected)}, got {sorted(got)}"
            )
        for name, shape in expected.items():
            if tuple(got[name].shape) != shape:
                raise ShapeError(
                    f"layer {spec.id!r}: tensor {name!r} has shape {got[name].shape}, expected {shape}"
                )
    extra = set(m.weights) - set(ids)
    if extra:
        raise ShapeError(f"weights for unknown layers: {sorted(extra)}")
    return shapes


# --- serialization -------------------------------------------------------

def _manifest(m: ModelIR) -> tuple[dict, list[np.ndarray]]:
    offset = 0
    layers = []
    blobs = []
    for spec in m.layers:
        entry = spec.to_dict()
        tensors = []
        for name in weight_shapes(spec):
            arr = np.ascontiguousarray(m.weights[spec.id][name], dtype=_DTYPE)
            nbytes = arr.size * _DTYPE.itemsize
            tensors.append({"name": name, "dims": list(arr.shape), "offset": offset, "nbytes": nbytes})
            blobs.append(arr)
            offset += nbytes
        if tensors:
            entry["tensors"] = tensors
        layers.append(entry)
    manifest = {
        "format": FORMAT_VERSION,
        "name": m.name,
        "input_shape": list(m.input_shape),
        "layers": layers,
        "weights_nbytes": offset,
    }
    return manifest, blobs


def _manifest_bytes(manifest: dict) -> bytes:
    return (json.dumps(manifest, indent=1, sort_keys=True) + "\n").encode()


def serialized_nbytes(m: ModelIR) -> int:
    """Total bytes :func:`serialize` writes for ``m`` (manifest + blob)."""
    manifest, _ = _manifest(m)
    return len(_manifest_bytes(manifest)) + manifest["weights_nbytes"]


def _atomic_write(path: Path, data: bytes) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def serialize(m: ModelIR, path) -> Path:
    validate(m)
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest, blobs = _manifest(m)
    blob = b"".join(a.tobytes() for a in blobs)
    _atomic_write(path / BLOB, blob)
    _atomic_write(path / MANIFEST, _manifest_bytes(manifest))
    return path


def deserialize(path) -> ModelIR:
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST).read_text())
    except FileNotFoundError:
        raise
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ManifestError(f"{path / MANIFEST}: {exc}") from None
    blob = (path / BLOB).read_bytes()
    if not isinstance(manifest, dict) or "layers" not in manifest:
        raise ManifestError(f"{path / MANIFEST}: missing 'layers'")
    layers = []
    weights: dict[str, dict[str, np.ndarray]] = {}
    for entry in manifest["layers"]:
        entry = dict(entry)
        tensors = entry.pop("tensors", [])
        spec = LayerSpec.from_dict(entry)
        layers.append(spec)
        expected = weight_shapes(spec)
        store = {}
        for t in tensors:
            name, dims = t["name"], tuple(t["dims"])
            if expected.get(name) != dims:
                raise ShapeError(
                    f"layer {spec.id!r}: tensor {name!r} dims {dims} do not match spec {expected.get(name)}"
                )
            start = t["offset"]
            count = int(np.prod(dims))
            end = start + count * _DTYPE.itemsize
            if t.get("nbytes", end - start) != end - start or end > len(blob):
                raise ShapeError(
                    f"layer {spec.id!r}: tensor {name!r} needs bytes [{start}, {end}) "
                    f"but weights blob has {len(blob)}"
                )
            store[name] = np.frombuffer(blob, dtype=_DTYPE, count=count, offset=start).reshape(dims).copy()
        if store or expected:
            weights[spec.id] = store
    if manifest.get("weights_nbytes", len(blob)) != len(blob):
        raise ShapeError(
            f"weights blob has {len(blob)} bytes, manifest declares {manifest['weights_nbytes']}"
        )
    m = ModelIR(
        name=manifest.get("name", path.name),
        input_shape=tuple(manifest["input_shape"]),
        layers=tuple(layers),
        weights=weights,
    )
    validate(m)
    return m


def model_digest(m: ModelIR) -> str:
    """SHA-256 over the serialized form; equal digests mean bitwise-equal models."""
    manifest, blobs = _manifest(m)
    h = hashlib.sha256(_manifest_bytes(manifest))
    for a in blobs:
        h.update(a.tobytes())
    return h.hexdigest()


def models_equal(a: ModelIR, b: ModelIR) -> bool:
    """Spec deep-equality plus bitwise weight equality."""
    if (a.name, a.input_shape, a.layers) != (b.name, b.input_shape, b.layers):
        return False
    if set(a.weights) != set(b.weights):
        return False
    for lid, ta in a.weights.items():
        tb = b.weights[lid]
        if set(ta) != set(tb):
            return False
        for name, arr in ta.items():
            x = np.asarray(arr, dtype=_DTYPE)
            y = np.asarray(tb[name], dtype=_DTYPE)
            if x.shape != y.shape or x.tobytes() != y.tobytes():
                return False
    return True


# --- rewriting -----------------------------------------------------------

@dataclass(frozen=True)
class DecomposedConvBlock:
    """1x1 reduce -> kxk core -> 1x1 expand chain replacing one conv."""

    reduce: LayerSpec
    core: LayerSpec
    expand: LayerSpec

    @property
    def layers(self) -> tuple[LayerSpec, ...]:
        return (self.reduce, self.core, self.expand)


@dataclass(frozen=True)
class DecomposedLinearBlock:
    """in -> rank -> out pair of linear layers replacing one linear layer."""

    reduce: LayerSpec
    expand: LayerSpec

    @property
    def layers(self) -> tuple[LayerSpec, ...]:
        return (self.reduce, self.expand)


def block_param_count(block) -> int:
    return sum(layer_param_count(s) for s in block.layers)


def _check_chain(original: LayerSpec, block) -> None:
    chain = block.layers
    if original.kind == "conv2d":
        if not isinstance(block, DecomposedConvBlock):
            raise ShapeError(f"layer {original.id!r}: conv needs a 3-layer conv block")
        r, c, e = chain
        ok = (
            all(s.kind == "conv2d" for s in chain)
            and r.in_ch == original.in_ch
            and r.out_ch == c.in_ch
            and c.out_ch == e.in_ch
            and e.out_ch == original.out_ch
            and r.kernel == (1, 1) and e.kernel == (1, 1)
            and r.stride == 1 and e.stride == 1 and r.padding == 0 and e.padding == 0
            and c.kernel == original.kernel
            and c.stride == original.stride
            and c.padding == original.padding
        )
    else:
        if not isinstance(block, DecomposedLinearBlock):
            raise ShapeError(f"layer {original.id!r}: linear needs a 2-layer linear block")
        r, e = chain
        ok = (
            r.kind == "linear" and e.kind == "linear"
            and r.in_features == original.in_features
            and r.out_features == e.in_features
            and e.out_features == original.out_features
        )
    if not ok:
        raise ShapeError(f"layer {original.id!r}: replacement block does not chain correctly")


def replace_layer(m: ModelIR, layer_id: str, block, weights: Mapping[str, Mapping[str, np.ndarray]]) -> ModelIR:
    """Return a new model with ``layer_id`` substituted by ``block``.

    The block's first layer is rewired to the original's predecessor and all
    consumers of ``layer_id`` are rewired to the block's last layer.  Block
    weights are cast to float32.
    """
    original = m.layer(layer_id)
    if not original.is_decomposable:
        raise ValueError(f"layer {layer_id!r} is not a decomposition candidate")
    _check_chain(original, block)
    chain = list(block.layers)
    taken = set(m.layer_ids) - {layer_id}
    clash = [s.id for s in chain if s.id in taken]
    if clash:
        raise ValueError(f"block layer ids already exist: {clash}")
    chain[0] = dataclasses.replace(chain[0], predecessors=original.predecessors)
    for i in range(1, len(chain)):
        chain[i] = dataclasses.replace(chain[i], predecessors=(chain[i - 1].id,))
    chain = [dataclasses.replace(s, decomposed_from=layer_id) for s in chain]
    last = chain[-1].id

    layers = []
    for spec in m.layers:
        if spec.id == layer_id:
            layers.extend(chain)
            continue
        if layer_id in spec.predecessors:
            spec = dataclasses.replace(
                spec, predecessors=tuple(last if p == layer_id else p for p in spec.predecessors)
            )
        layers.append(spec)

    new_weights = {k: v for k, v in m.weights.items() if k != layer_id}
    for spec in chain:
        new_weights[spec.id] = {
            name: np.ascontiguousarray(weights[spec.id][name], dtype=np.float32)
            for name in weight_shapes(spec)
        }
    out = ModelIR(name=m.name, input_shape=m.input_shape, layers=tuple(layers), weights=new_weights)
    validate(out)
    return out
