"""Weight-noise models and the noisy forward view.

Noise is zero-mean, drawn either from a Gaussian (parameter sigma) or a
symmetric Uniform over [-r1, r1], and enters the weights of
matrix-multiplication layers only -- multiplicatively as ``w * (1 + eps)`` or
additively as ``w + eps``. Draws are deterministic given the spec seed and a
stream key derived from (layer id, parameter slot, step counter), so distinct
layers and steps get independent, reproducible streams. Clean weights are
never mutated.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from .model import ModelGraph
from .tensor import Tensor

DISTRIBUTIONS = ("gaussian", "uniform")
MODES = ("multiplicative", "additive")

StreamKey = Sequence[Union[str, int]]


@dataclass(frozen=True)
class NoiseSpec:
    """Noise family, injection mode and strength.

    `scale` is sigma for gaussian and the bound r1 for uniform. Biases are
    left clean unless `perturb_bias` is set.
    """

    distribution: str
    mode: str
    scale: float
    seed: int
    perturb_bias: bool = False

    def __post_init__(self):
        if self.distribution not in DISTRIBUTIONS:
            raise ValueError(f"distribution must be one of {DISTRIBUTIONS}, got {self.distribution!r}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not np.isfinite(self.scale) or self.scale < 0:
            raise ValueError(f"noise scale must be a finite non-negative float, got {self.scale}")
        if self.seed < 0:
            raise ValueError(f"seed must be non-negative, got {self.seed}")

    def with_seed(self, seed: int) -> "NoiseSpec":
        return dataclasses.replace(self, seed=seed)


def _key_ints(stream_key: StreamKey) -> list[int]:
    ints = []
    for part in stream_key:
        if isinstance(part, str):
            digest = hashlib.blake2b(part.encode("utf-8"), digest_size=8).digest()
            ints.append(int.from_bytes(digest, "little"))
        else:
            ints.append(int(part))
    return ints


def sample_noise(shape: Sequence[int], spec: NoiseSpec, stream_key: StreamKey) -> np.ndarray:
    """i.i.d. zero-mean draws, reproducible from (spec.seed, stream_key)."""
    rng = np.random.default_rng([int(spec.seed), *_key_ints(stream_key)])
    if spec.distribution == "gaussian":
        return rng.normal(0.0, spec.scale, size=tuple(shape))
    return rng.uniform(-spec.scale, spec.scale, size=tuple(shape))


def perturb_weights(w: np.ndarray, spec: NoiseSpec, stream_key: StreamKey) -> np.ndarray:
    """Perturbed copy of `w`; the input array is left untouched."""
    eps = sample_noise(w.shape, spec, stream_key)
    if spec.mode == "multiplicative":
        return w * (1.0 + eps)
    return w + eps


def noisy_overrides(
    model: ModelGraph,
    spec: NoiseSpec,
    step: int,
    trainable: frozenset[str] = frozenset(),
) -> dict[str, list[Tensor]]:
    """Per-layer substituted parameters for one noisy forward pass.

    Every noise-eligible layer gets freshly perturbed weights keyed by `step`;
    other layers are untouched. Parameters of layers in `trainable` are marked
    as requiring gradients so a backward pass accumulates into the wrappers,
    never into the clean parameters.
    """
    overrides: dict[str, list[Tensor]] = {}
    for layer in model.layers:
        if not layer.noise_eligible:
            continue
        w, b = model.params[layer.id]
        requires = layer.id in trainable
        wn = perturb_weights(w.data, spec, (layer.id, 0, step))
        if spec.perturb_bias:
            bn = perturb_weights(b.data, spec, (layer.id, 1, step))
        else:
            bn = b.data
        overrides[layer.id] = [Tensor(wn, requires_grad=requires), Tensor(bn, requires_grad=requires)]
    return overrides


class NoisyModel:
    """Forward view that re-perturbs eligible weights on every call.

    The step counter advances per forward so training sees a fresh draw each
    step; pass an explicit `step` to pin the draw for reproducibility.
    """

    def __init__(self, model: ModelGraph, spec: NoiseSpec):
        self.model = model
        self.spec = spec
        self.step = 0

    def forward(self, x, step: Optional[int] = None) -> np.ndarray:
        if step is None:
            step = self.step
            self.step += 1
        out = self.model.forward(x, noisy_overrides(self.model, self.spec, step))
        return out.data

    def layer_params(self, layer_id: str, step: int) -> Optional[list[Tensor]]:
        """Perturbed parameters of one layer at a pinned step (None if clean)."""
        layer = self.model.layer(layer_id)
        if not layer.noise_eligible:
            return None
        w, b = self.model.params[layer_id]
        wn = perturb_weights(w.data, self.spec, (layer_id, 0, step))
        bn = perturb_weights(b.data, self.spec, (layer_id, 1, step)) if self.spec.perturb_bias else b.data
        return [Tensor(wn), Tensor(bn)]

    def apply_layer(self, layer_id: str, x: np.ndarray, step: int) -> np.ndarray:
        """Run one noisy layer on a stored clean input (pinned draw)."""
        layer = self.model.layer(layer_id)
        params = self.layer_params(layer_id, step)
        return self.model.apply_layer(layer, Tensor(x), params).data


def wrap_noisy(model: ModelGraph, spec: NoiseSpec) -> NoisyModel:
    return NoisyModel(model, spec)
