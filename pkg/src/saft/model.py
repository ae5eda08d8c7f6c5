"""Sequential model graphs: named layers, layer I/O capture, binary checkpoints.

A model is an ordered chain of `LayerSpec`s plus a parameter table. The chain
is shape-checked once at build time, forwards are deterministic, and
`save_data` records the running activation before and after every layer --
the capture that sensitivity analysis replays layer by layer.

Checkpoints are self-describing binary: magic ``SAFT``, a format version, the
layer-spec table, then little-endian float64 parameter blobs. Round-trips are
bit-exact.
"""

from __future__ import annotations

import struct
from collections import Counter
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .tensor import Tensor, conv2d, matmul, add, relu as trelu, reshape

NOISE_ELIGIBLE_KINDS = ("linear", "conv2d")
LAYER_KINDS = ("linear", "conv2d", "relu", "flatten")


class BuildError(ValueError):
    """Layer chain is inconsistent with the declared input shape."""


class CheckpointFormatError(ValueError):
    """Checkpoint bytes are corrupt, truncated or not a checkpoint at all."""


@dataclass(frozen=True)
class LayerSpec:
    """One layer of a sequential model; the unit of freezing and sensitivity."""

    id: str
    kind: str
    in_features: int = 0
    out_features: int = 0
    in_channels: int = 0
    out_channels: int = 0
    kernel: int = 0
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise BuildError(f"layer {self.id!r}: unknown kind {self.kind!r}")
        if not self.id:
            raise BuildError("layer id must be a non-empty string")

    @property
    def noise_eligible(self) -> bool:
        # weight noise applies to matrix-multiplication layers only
        return self.kind in NOISE_ELIGIBLE_KINDS


def linear(layer_id: str, in_features: int, out_features: int) -> LayerSpec:
    return LayerSpec(layer_id, "linear", in_features=in_features, out_features=out_features)


def conv(
    layer_id: str,
    in_channels: int,
    out_channels: int,
    kernel: int,
    stride: int = 1,
    padding: int = 0,
) -> LayerSpec:
    return LayerSpec(
        layer_id,
        "conv2d",
        in_channels=in_channels,
        out_channels=out_channels,
        kernel=kernel,
        stride=stride,
        padding=padding,
    )


def relu(layer_id: str) -> LayerSpec:
    return LayerSpec(layer_id, "relu")


def flatten(layer_id: str) -> LayerSpec:
    return LayerSpec(layer_id, "flatten")


def _chain_shape(spec: LayerSpec, shape: tuple[int, ...]) -> tuple[int, ...]:
    """Output feature shape (batch excluded) of one layer, or BuildError."""
    if spec.kind == "linear":
        if shape != (spec.in_features,):
            raise BuildError(
                f"layer {spec.id!r}: linear expects ({spec.in_features},), receives {shape}"
            )
        return (spec.out_features,)
    if spec.kind == "conv2d":
        if len(shape) != 3 or shape[0] != spec.in_channels:
            raise BuildError(
                f"layer {spec.id!r}: conv2d expects (c={spec.in_channels}, h, w), receives {shape}"
            )
        _, h, w = shape
        if spec.kernel > h + 2 * spec.padding or spec.kernel > w + 2 * spec.padding:
            raise BuildError(
                f"layer {spec.id!r}: kernel {spec.kernel} larger than padded input {shape}"
            )
        oh = (h + 2 * spec.padding - spec.kernel) // spec.stride + 1
        ow = (w + 2 * spec.padding - spec.kernel) // spec.stride + 1
        return (spec.out_channels, oh, ow)
    if spec.kind == "flatten":
        return (int(np.prod(shape)),)
    return shape  # relu


@dataclass
class LayerIOStore:
    """Per-layer running activations: inputs[l] feeds l, outputs[l] is l's result."""

    inputs: dict[str, np.ndarray] = field(default_factory=dict)
    outputs: dict[str, np.ndarray] = field(default_factory=dict)


class ModelGraph:
    """Ordered layers + parameters. Immutable shape, mutable parameter values."""

    def __init__(
        self,
        layers: Sequence[LayerSpec],
        params: Mapping[str, list[Tensor]],
        input_shape: tuple[int, ...],
    ):
        self.layers: tuple[LayerSpec, ...] = tuple(layers)
        self.params: dict[str, list[Tensor]] = {k: list(v) for k, v in params.items()}
        self.input_shape = tuple(input_shape)
        self.counters: Counter = Counter()  # instrumentation: forward / layer_apply

    def index_of(self, layer_id: str) -> int:
        for i, spec in enumerate(self.layers):
            if spec.id == layer_id:
                return i
        raise KeyError(layer_id)

    def layer(self, layer_id: str) -> LayerSpec:
        return self.layers[self.index_of(layer_id)]

    def eligible_ids(self) -> list[str]:
        return [s.id for s in self.layers if s.noise_eligible]

    def layer_ids(self) -> list[str]:
        return [s.id for s in self.layers]

    def param_count(self, layer_id: str) -> int:
        return int(sum(p.size for p in self.params.get(layer_id, [])))

    def _check_input(self, x: np.ndarray) -> None:
        if x.ndim != len(self.input_shape) + 1 or x.shape[1:] != self.input_shape:
            raise ValueError(
                f"input shape {x.shape} does not match (batch, *{self.input_shape})"
            )

    def apply_layer(
        self, spec: LayerSpec, x: Tensor, params: Optional[Sequence[Tensor]] = None
    ) -> Tensor:
        """Run one layer on an activation, optionally with substituted parameters."""
        self.counters["layer_apply"] += 1
        if params is None:
            params = self.params.get(spec.id, [])
        if spec.kind == "linear":
            w, b = params
            return add(matmul(x, w), b)
        if spec.kind == "conv2d":
            w, b = params
            return conv2d(x, w, b, stride=spec.stride, padding=spec.padding)
        if spec.kind == "relu":
            return trelu(x)
        return reshape(x, (x.shape[0], int(np.prod(x.shape[1:]))))  # flatten

    def forward(
        self,
        x,
        overrides: Optional[Mapping[str, Sequence[Tensor]]] = None,
    ) -> Tensor:
        """Full forward pass; `overrides` substitutes parameters per layer id."""
        self.counters["forward"] += 1
        xt = x if isinstance(x, Tensor) else Tensor(x)
        self._check_input(xt.data)
        out = xt
        for spec in self.layers:
            layer_params = overrides.get(spec.id) if overrides else None
            out = self.apply_layer(spec, out, layer_params)
        return out

    def clone(self) -> "ModelGraph":
        params = {
            lid: [Tensor(p.data.copy(), requires_grad=p.requires_grad) for p in plist]
            for lid, plist in self.params.items()
        }
        return ModelGraph(self.layers, params, self.input_shape)


def build_model(
    specs: Sequence[LayerSpec], input_shape: Sequence[int], init_seed: int
) -> ModelGraph:
    """Shape-check the chain and initialize parameters (He-uniform, seeded)."""
    specs = list(specs)
    if not specs:
        raise BuildError("model needs at least one layer")
    ids = [s.id for s in specs]
    if len(set(ids)) != len(ids):
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        raise BuildError(f"duplicate layer ids: {dupes}")
    shape = tuple(int(d) for d in input_shape)
    if any(d <= 0 for d in shape):
        raise BuildError(f"input shape must be positive, got {shape}")
    params: dict[str, list[Tensor]] = {}
    running = shape
    for index, spec in enumerate(specs):
        running = _chain_shape(spec, running)
        rng = np.random.default_rng([int(init_seed), index])
        if spec.kind == "linear":
            limit = np.sqrt(6.0 / spec.in_features)
            w = rng.uniform(-limit, limit, size=(spec.in_features, spec.out_features))
            b = np.zeros(spec.out_features)
            params[spec.id] = [Tensor(w, requires_grad=True), Tensor(b, requires_grad=True)]
        elif spec.kind == "conv2d":
            fan_in = spec.in_channels * spec.kernel * spec.kernel
            limit = np.sqrt(6.0 / fan_in)
            w = rng.uniform(
                -limit,
                limit,
                size=(spec.out_channels, spec.in_channels, spec.kernel, spec.kernel),
            )
            b = np.zeros(spec.out_channels)
            params[spec.id] = [Tensor(w, requires_grad=True), Tensor(b, requires_grad=True)]
    return ModelGraph(specs, params, shape)


def save_data(model: ModelGraph, x: np.ndarray) -> LayerIOStore:
    """Record the running activation entering and leaving every layer."""
    model.counters["forward"] += 1
    x = np.asarray(x, dtype=np.float64)
    model._check_input(x)
    store = LayerIOStore()
    running = x
    for spec in model.layers:
        store.inputs[spec.id] = running
        running = model.apply_layer(spec, Tensor(running)).data
        store.outputs[spec.id] = running
    return store


# -- checkpoint format -------------------------------------------------------
#
#   magic          4 bytes  b"SAFT"
#   version        u32      1
#   input ndim     u32      followed by that many u32 dims
#   layer count    u32
#   per layer:     u16 id length, id utf-8, u8 kind,
#                  u32 x7: in_features out_features in_channels out_channels
#                          kernel stride padding
#   per parameterized layer, in layer order, per parameter:
#                  u8 ndim, u32 dims, float64 little-endian data
#
# all integers little-endian

CHECKPOINT_MAGIC = b"SAFT"
CHECKPOINT_VERSION = 1
_KIND_CODES = {kind: i for i, kind in enumerate(LAYER_KINDS)}
_KIND_NAMES = {i: kind for kind, i in _KIND_CODES.items()}


def save_checkpoint(model: ModelGraph) -> bytes:
    out = bytearray()
    out += CHECKPOINT_MAGIC
    out += struct.pack("<I", CHECKPOINT_VERSION)
    out += struct.pack("<I", len(model.input_shape))
    out += struct.pack(f"<{len(model.input_shape)}I", *model.input_shape)
    out += struct.pack("<I", len(model.layers))
    for spec in model.layers:
        raw_id = spec.id.encode("utf-8")
        out += struct.pack("<H", len(raw_id))
        out += raw_id
        out += struct.pack(
            "<B7I",
            _KIND_CODES[spec.kind],
            spec.in_features,
            spec.out_features,
            spec.in_channels,
            spec.out_channels,
            spec.kernel,
            spec.stride,
            spec.padding,
        )
    for spec in model.layers:
        plist = model.params.get(spec.id, [])
        out += struct.pack("<B", len(plist))
        for p in plist:
            out += struct.pack("<B", p.data.ndim)
            out += struct.pack(f"<{p.data.ndim}I", *p.data.shape)
            out += np.ascontiguousarray(p.data, dtype="<f8").tobytes()
    return bytes(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, n: int, what: str) -> bytes:
        if self.offset + n > len(self.data):
            raise CheckpointFormatError(
                f"truncated checkpoint: need {n} bytes for {what} at offset {self.offset}, "
                f"have {len(self.data) - self.offset}"
            )
        chunk = self.data[self.offset : self.offset + n]
        self.offset += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_checkpoint(data: bytes) -> ModelGraph:
    r = _Reader(data)
    if r.take(4, "magic") != CHECKPOINT_MAGIC:
        raise CheckpointFormatError("bad magic at offset 0: not a SAFT checkpoint")
    (version,) = r.unpack("<I", "version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version} at offset 4")
    (ndim,) = r.unpack("<I", "input ndim")
    input_shape = tuple(r.unpack(f"<{ndim}I", "input shape"))
    (n_layers,) = r.unpack("<I", "layer count")
    specs: list[LayerSpec] = []
    for _ in range(n_layers):
        (id_len,) = r.unpack("<H", "layer id length")
        at = r.offset
        try:
            layer_id = r.take(id_len, "layer id").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointFormatError(f"bad layer id encoding at offset {at}") from exc
        kind_code, in_f, out_f, in_c, out_c, kern, stride, padding = r.unpack(
            "<B7I", "layer fields"
        )
        if kind_code not in _KIND_NAMES:
            raise CheckpointFormatError(f"unknown layer kind {kind_code} at offset {at}")
        specs.append(
            LayerSpec(
                layer_id,
                _KIND_NAMES[kind_code],
                in_features=in_f,
                out_features=out_f,
                in_channels=in_c,
                out_channels=out_c,
                kernel=kern,
                stride=stride,
                padding=padding,
            )
        )
    params: dict[str, list[Tensor]] = {}
    for spec in specs:
        (n_params,) = r.unpack("<B", "parameter count")
        plist = []
        for _ in range(n_params):
            (pdim,) = r.unpack("<B", "parameter ndim")
            shape = tuple(r.unpack(f"<{pdim}I", "parameter shape"))
            count = int(np.prod(shape)) if shape else 1
            blob = r.take(count * 8, f"parameter data for layer {spec.id!r}")
            arr = np.frombuffer(blob, dtype="<f8").reshape(shape).astype(np.float64)
            plist.append(Tensor(arr, requires_grad=True))
        if plist:
            params[spec.id] = plist
    if r.offset != len(data):
        raise CheckpointFormatError(
            f"{len(data) - r.offset} trailing bytes after checkpoint at offset {r.offset}"
        )
    model = ModelGraph(specs, params, input_shape)
    # re-validate so a tampered spec or parameter table cannot build a broken model
    running = input_shape
    for spec in specs:
        running = _chain_shape(spec, running)
        if spec.kind in ("linear", "conv2d") and len(params.get(spec.id, [])) != 2:
            raise CheckpointFormatError(
                f"layer {spec.id!r} expects weight and bias parameters, "
                f"found {len(params.get(spec.id, []))}"
            )
    return model


def save_checkpoint_file(model: ModelGraph, path) -> None:
    with open(path, "wb") as fh:
        fh.write(save_checkpoint(model))


def load_checkpoint_file(path) -> ModelGraph:
    with open(path, "rb") as fh:
        return load_checkpoint(fh.read())
