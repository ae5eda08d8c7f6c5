"""Layer sensitivity analysis and layer selection.

The core measurement: run a clean forward once, capturing every layer's input
and output, then push each layer's *clean* input through the *noisy* version
of that layer and take the standard deviation of the output difference,
pooled over all elements. One pass over the data scores every layer at once;
the brute-force oracle below needs one full evaluation per layer and exists
as ground truth to rank against.

Noise draws are pinned per (layer, draw index), never per sample, so
accumulating statistics sample-by-sample is exactly equivalent to one big
batch -- that is what makes `accumulate_stats` a drop-in for memory-bound
runs.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Optional, Sequence

import numpy as np

from .model import ModelGraph, save_data
from .noise import NoiseSpec, NoisyModel, perturb_weights
from .tensor import Tensor


@dataclass
class LayerStats:
    std: float
    kl: Optional[float] = None


@dataclass
class SensitivityReport:
    """Per-layer statistics plus the descending-std ranking over eligible layers."""

    per_layer: dict[str, LayerStats]
    ranking: list[str]
    batch_size: int
    k: int = 0
    selected: list[str] = field(default_factory=list)


@dataclass(frozen=True)
class FreezePlan:
    """Partition of all layer ids into trainable and frozen."""

    trainable: frozenset[str]
    frozen: frozenset[str]

    def __post_init__(self):
        overlap = self.trainable & self.frozen
        if overlap:
            raise ValueError(f"layers both trainable and frozen: {sorted(overlap)}")

    def validate_against(self, model: ModelGraph) -> None:
        all_ids = set(model.layer_ids())
        if self.trainable | self.frozen != all_ids:
            missing = all_ids - (self.trainable | self.frozen)
            extra = (self.trainable | self.frozen) - all_ids
            raise ValueError(f"plan does not partition the model: missing={sorted(missing)} "
                             f"unknown={sorted(extra)}")
        not_eligible = self.trainable - set(model.eligible_ids())
        if not_eligible:
            raise ValueError(f"trainable layers must be noise-eligible: {sorted(not_eligible)}")


class RunningMoments:
    """Streaming mean/variance over chunks of values (parallel-merge form)."""

    def __init__(self):
        self.count = 0
        self.mean = 0.0
        self.m2 = 0.0

    def update(self, values: np.ndarray) -> None:
        values = np.asarray(values, dtype=np.float64).ravel()
        n = values.size
        if n == 0:
            return
        chunk_mean = float(values.mean())
        chunk_m2 = float(((values - chunk_mean) ** 2).sum())
        if self.count == 0:
            self.count, self.mean, self.m2 = n, chunk_mean, chunk_m2
            return
        delta = chunk_mean - self.mean
        total = self.count + n
        self.mean += delta * n / total
        self.m2 += chunk_m2 + delta * delta * self.count * n / total
        self.count = total

    def std(self) -> float:
        if self.count == 0:
            return 0.0
        return math.sqrt(self.m2 / self.count)


def _ranked(model: ModelGraph, stds: Mapping[str, float]) -> list[str]:
    # descending std, ties broken by ascending layer index
    eligible = model.eligible_ids()
    return sorted(eligible, key=lambda lid: (-stds[lid], model.index_of(lid)))


def _check_pair(model: ModelGraph, noisy: NoisyModel) -> None:
    if noisy.model is not model:
        if tuple(noisy.model.layers) != tuple(model.layers):
            raise ValueError("noisy view was built from a structurally different model")


def compute_stats(
    model: ModelGraph,
    noisy: NoisyModel,
    batch: np.ndarray,
    repeat: int = 1,
) -> SensitivityReport:
    """Score every layer from one clean pass plus one noisy application each.

    `repeat` pools difference elements over that many independent draws per
    layer; the default single draw is the cheap estimate, larger values give
    Monte-Carlo convergence for statistics tests.
    """
    if repeat < 1:
        raise ValueError(f"repeat must be >= 1, got {repeat}")
    _check_pair(model, noisy)
    batch = np.asarray(batch, dtype=np.float64)
    store = save_data(model, batch)
    per_layer: dict[str, LayerStats] = {}
    for layer in model.layers:
        if not layer.noise_eligible:
            per_layer[layer.id] = LayerStats(std=0.0)
            continue
        acc = RunningMoments()
        for draw in range(repeat):
            out_noisy = noisy.apply_layer(layer.id, store.inputs[layer.id], step=draw)
            acc.update(out_noisy - store.outputs[layer.id])
        per_layer[layer.id] = LayerStats(std=acc.std())
    stds = {lid: s.std for lid, s in per_layer.items()}
    return SensitivityReport(
        per_layer=per_layer,
        ranking=_ranked(model, stds),
        batch_size=int(batch.shape[0]),
    )


def accumulate_stats(
    model: ModelGraph,
    noisy: NoisyModel,
    samples: Iterable[np.ndarray],
    repeat: int = 1,
) -> SensitivityReport:
    """Streaming variant of `compute_stats` for inputs processed one by one.

    Draws are pinned per (layer, draw) before consuming the stream, so any
    partition of a batch accumulates to the same statistics as the whole
    batch at once.
    """
    if repeat < 1:
        raise ValueError(f"repeat must be >= 1, got {repeat}")
    _check_pair(model, noisy)
    eligible = model.eligible_ids()
    pinned: dict[tuple[str, int], Optional[list[Tensor]]] = {
        (lid, draw): noisy.layer_params(lid, step=draw)
        for lid in eligible
        for draw in range(repeat)
    }
    moments: dict[str, RunningMoments] = {lid: RunningMoments() for lid in eligible}
    seen = 0
    for sample in samples:
        sample = np.asarray(sample, dtype=np.float64)
        if sample.ndim == len(model.input_shape):
            sample = sample[np.newaxis]
        store = save_data(model, sample)
        seen += sample.shape[0]
        for lid in eligible:
            layer = model.layer(lid)
            for draw in range(repeat):
                out = model.apply_layer(layer, Tensor(store.inputs[lid]), pinned[(lid, draw)])
                moments[lid].update(out.data - store.outputs[lid])
    if seen == 0:
        raise ValueError("accumulate_stats needs at least one sample")
    per_layer = {
        layer.id: LayerStats(std=moments[layer.id].std()) if layer.noise_eligible else LayerStats(std=0.0)
        for layer in model.layers
    }
    stds = {lid: s.std for lid, s in per_layer.items()}
    return SensitivityReport(per_layer=per_layer, ranking=_ranked(model, stds), batch_size=seen)


def kl_sensitivity(
    model: ModelGraph,
    noisy: NoisyModel,
    batch: np.ndarray,
    bins: int = 128,
    step: int = 0,
) -> dict[str, float]:
    """Alternative metric: KL(clean || noisy) of histogrammed layer outputs.

    Outputs are binned over the clean output's range (noisy values clipped
    into it), smoothed additively and normalized. Constant clean output means
    there is no distribution to compare, reported as 0.
    """
    if bins < 2:
        raise ValueError(f"bins must be >= 2, got {bins}")
    _check_pair(model, noisy)
    eps = 1e-10
    batch = np.asarray(batch, dtype=np.float64)
    store = save_data(model, batch)
    out: dict[str, float] = {}
    for layer in model.layers:
        if not layer.noise_eligible:
            out[layer.id] = 0.0
            continue
        clean = store.outputs[layer.id].ravel()
        noisy_out = noisy.apply_layer(layer.id, store.inputs[layer.id], step=step).ravel()
        lo, hi = float(clean.min()), float(clean.max())
        if lo == hi:
            out[layer.id] = 0.0
            continue
        p_hist, edges = np.histogram(clean, bins=bins, range=(lo, hi))
        q_hist, _ = np.histogram(np.clip(noisy_out, lo, hi), bins=bins, range=(lo, hi))
        p = p_hist.astype(np.float64) + eps
        q = q_hist.astype(np.float64) + eps
        p /= p.sum()
        q /= q.sum()
        out[layer.id] = float(np.sum(p * np.log(p / q)))
    return out


def select_top_k(report: SensitivityReport, k: int) -> FreezePlan:
    """Mark the k highest-std layers trainable; everything else is frozen."""
    if k < 1:
        raise ValueError(f"k must be >= 1 (training nothing is a mistake), got {k}")
    chosen = list(report.ranking[: min(k, len(report.ranking))])
    report.k = k
    report.selected = chosen
    frozen = [lid for lid in report.per_layer if lid not in chosen]
    return FreezePlan(trainable=frozenset(chosen), frozen=frozenset(frozen))


def _accuracy(model: ModelGraph, inputs: np.ndarray, labels: np.ndarray,
              overrides=None, batch_size: int = 256) -> float:
    correct = 0
    for start in range(0, inputs.shape[0], batch_size):
        xb = inputs[start : start + batch_size]
        yb = labels[start : start + batch_size]
        logits = model.forward(xb, overrides).data
        correct += int((logits.argmax(axis=1) == yb).sum())
    return correct / inputs.shape[0]


def brute_force_oracle(
    model: ModelGraph,
    spec: NoiseSpec,
    eval_inputs: np.ndarray,
    eval_labels: np.ndarray,
    eval_seed: int = 0,
    metric: Optional[Callable[[ModelGraph, np.ndarray, np.ndarray, Optional[dict]], float]] = None,
    max_workers: int = 1,
) -> dict[str, float]:
    """Ground-truth sensitivity: perturb one layer at a time, measure the drop.

    Costs one full evaluation per eligible layer (the expensive route the
    single-pass statistics replace). Each layer uses an independent pinned
    noise stream; results merge by layer id, so evaluations may run in
    parallel threads.
    """
    if eval_inputs.shape[0] == 0:
        raise ValueError("oracle needs a non-empty evaluation set")
    score = metric if metric is not None else _accuracy
    baseline = score(model, eval_inputs, eval_labels, None)
    pinned_spec = spec.with_seed(eval_seed)

    def one_layer(lid: str) -> tuple[str, float]:
        w, b = model.params[lid]
        wn = perturb_weights(w.data, pinned_spec, (lid, 0, 0))
        bn = (
            perturb_weights(b.data, pinned_spec, (lid, 1, 0))
            if pinned_spec.perturb_bias
            else b.data
        )
        overrides = {lid: [Tensor(wn), Tensor(bn)]}
        return lid, baseline - score(model, eval_inputs, eval_labels, overrides)

    eligible = model.eligible_ids()
    if max_workers > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            results = dict(pool.map(one_layer, eligible))
    else:
        results = dict(one_layer(lid) for lid in eligible)
    return {lid: results[lid] for lid in eligible}


def _average_ranks(values: Sequence[float]) -> np.ndarray:
    """1-based ranks, ties sharing the average of their positions."""
    arr = np.asarray(values, dtype=np.float64)
    order = np.argsort(arr, kind="stable")
    ranks = np.empty(arr.size, dtype=np.float64)
    i = 0
    while i < arr.size:
        j = i
        while j + 1 < arr.size and arr[order[j + 1]] == arr[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def rank_agreement(scores_a: Mapping[str, float], scores_b: Mapping[str, float]) -> float:
    """Spearman rank correlation between two score maps over the same keys."""
    if set(scores_a) != set(scores_b):
        raise ValueError("rank_agreement requires identical key sets")
    keys = sorted(scores_a)
    if len(keys) < 2:
        raise ValueError(f"rank_agreement needs at least 2 keys, got {len(keys)}")
    ra = _average_ranks([scores_a[k] for k in keys])
    rb = _average_ranks([scores_b[k] for k in keys])
    da = ra - ra.mean()
    db = rb - rb.mean()
    denom = math.sqrt(float((da * da).sum()) * float((db * db).sum()))
    if denom == 0.0:
        # all ranks tied on one side: correlation is undefined, call it 0
        return 0.0
    return float((da * db).sum() / denom)


def ranking_scores(ranking: Sequence[str]) -> dict[str, float]:
    """Turn an ordered best-first ranking into scores usable by rank_agreement."""
    n = len(ranking)
    return {lid: float(n - i) for i, lid in enumerate(ranking)}
