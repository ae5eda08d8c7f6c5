"""Noise-injection training with selective layer freezing.

Every step perturbs the weights of all noise-eligible layers for the forward
pass (a deployed model is noisy everywhere, so frozen layers see noise too),
backpropagates through the noisy graph, and applies the resulting gradients
to the *clean* weights of the trainable layers only. Frozen layers never
receive an update and never have parameter gradients computed, which is
where the training speedup comes from; gradients still flow through them to
upstream trainable layers.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .datasets import LabeledBatch
from .model import ModelGraph
from .noise import NoiseSpec, noisy_overrides, wrap_noisy
from .sensitivity import FreezePlan, SensitivityReport, compute_stats, select_top_k
from .tensor import softmax_cross_entropy

OPTIMIZERS = ("sgd", "sgd_momentum")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    learning_rate: float
    batch_size: int
    seed: int
    optimizer: str = "sgd"
    momentum: float = 0.9  # used by sgd_momentum only

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.seed < 0:
            raise ValueError(f"seed must be non-negative, got {self.seed}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")


@dataclass
class TrainResult:
    final_accuracy_clean: float
    final_accuracy_noisy: float
    per_epoch_loss: list[float]
    per_epoch_wall_ms: list[int]
    wall_time_ms: int
    grad_update_count: dict[str, int]
    # deterministic work accounting: parameter scalars that received a
    # gradient, summed over steps -- the basis of reproducible speed ratios
    param_grad_scalars: int
    trainable_param_count: int
    total_param_count: int


def evaluate(
    model: ModelGraph,
    batch: LabeledBatch,
    spec: Optional[NoiseSpec] = None,
    eval_seed: int = 0,
    batch_size: int = 256,
) -> float:
    """Classification accuracy, optionally under weight noise.

    With a spec, each evaluation batch gets a fresh draw pinned to
    (eval_seed, batch index): reproducible, and averaged over enough draws to
    keep the number stable.
    """
    if batch.count == 0:
        raise ValueError("evaluation set is empty")
    eval_spec = spec.with_seed(eval_seed) if spec is not None else None
    correct = 0
    for bi, start in enumerate(range(0, batch.count, batch_size)):
        xb = batch.inputs[start : start + batch_size]
        yb = batch.labels[start : start + batch_size]
        overrides = (
            noisy_overrides(model, eval_spec, step=bi) if eval_spec is not None else None
        )
        logits = model.forward(xb, overrides).data
        correct += int((logits.argmax(axis=1) == yb).sum())
    return correct / batch.count


def noise_injection_train(
    model: ModelGraph,
    spec: NoiseSpec,
    plan: FreezePlan,
    cfg: TrainConfig,
    train: LabeledBatch,
    test: LabeledBatch,
    eval_seed: int = 0,
) -> TrainResult:
    """Train the plan's layers under injected weight noise; freeze the rest."""
    plan.validate_against(model)
    if not plan.trainable:
        raise ValueError("freeze plan leaves no trainable layers")
    if train.count == 0:
        raise ValueError("training set is empty")
    shuffle_rng = np.random.default_rng([int(cfg.seed)])
    use_momentum = cfg.optimizer == "sgd_momentum"
    velocity = (
        {lid: [np.zeros_like(p.data) for p in model.params[lid]] for lid in plan.trainable}
        if use_momentum
        else None
    )
    grad_update_count = {lid: 0 for lid in model.layer_ids()}
    per_epoch_loss: list[float] = []
    per_epoch_wall_ms: list[int] = []
    param_grad_scalars = 0
    step = 0
    for _epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(train.count)
        loss_sum = 0.0
        n_batches = 0
        t0 = time.perf_counter()
        for start in range(0, train.count, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            xb = train.inputs[idx]
            yb = train.labels[idx]
            overrides = noisy_overrides(model, spec, step, trainable=plan.trainable)
            logits = model.forward(xb, overrides)
            loss = softmax_cross_entropy(logits, yb)
            loss.backward()
            for lid in plan.trainable:
                for slot, (clean, wrapper) in enumerate(zip(model.params[lid], overrides[lid])):
                    if use_momentum:
                        v = velocity[lid][slot]
                        v *= cfg.momentum
                        v += wrapper.grad
                        clean.data -= cfg.learning_rate * v
                    else:
                        clean.data -= cfg.learning_rate * wrapper.grad
                grad_update_count[lid] += 1
            for wrappers in overrides.values():
                for wrapper in wrappers:
                    param_grad_scalars += wrapper.grad_events * wrapper.size
            loss_sum += float(loss.data)
            n_batches += 1
            step += 1
        per_epoch_wall_ms.append(int((time.perf_counter() - t0) * 1000))
        per_epoch_loss.append(loss_sum / n_batches)
    total_params = sum(model.param_count(lid) for lid in model.layer_ids())
    trainable_params = sum(model.param_count(lid) for lid in plan.trainable)
    return TrainResult(
        final_accuracy_clean=evaluate(model, test),
        final_accuracy_noisy=evaluate(model, test, spec, eval_seed=eval_seed),
        per_epoch_loss=per_epoch_loss,
        per_epoch_wall_ms=per_epoch_wall_ms,
        wall_time_ms=sum(per_epoch_wall_ms),
        grad_update_count=grad_update_count,
        param_grad_scalars=param_grad_scalars,
        trainable_param_count=trainable_params,
        total_param_count=total_params,
    )


def full_plan(model: ModelGraph) -> FreezePlan:
    """Baseline plan: every noise-eligible layer trains."""
    eligible = frozenset(model.eligible_ids())
    rest = frozenset(model.layer_ids()) - eligible
    return FreezePlan(trainable=eligible, frozen=rest)


@dataclass
class SaftRun:
    report: SensitivityReport
    plan: FreezePlan
    result: TrainResult
    sensitivity_wall_ms: int = 0
    sensitivity_batch: int = 0

    # convenience mirror of the two artifacts named in the pipeline contract
    def as_tuple(self) -> tuple[SensitivityReport, TrainResult]:
        return self.report, self.result


def saft_pipeline(
    model: ModelGraph,
    spec: NoiseSpec,
    k: int,
    cfg: TrainConfig,
    train: LabeledBatch,
    test: LabeledBatch,
    repeat: int = 1,
    eval_seed: int = 0,
) -> SaftRun:
    """Sensitivity analysis on one training batch, top-k selection, training."""
    sample = train.inputs[: cfg.batch_size]
    noisy = wrap_noisy(model, spec)
    t0 = time.perf_counter()
    report = compute_stats(model, noisy, sample, repeat=repeat)
    sensitivity_wall_ms = int((time.perf_counter() - t0) * 1000)
    plan = select_top_k(report, k)
    result = noise_injection_train(model, spec, plan, cfg, train, test, eval_seed=eval_seed)
    return SaftRun(
        report=report,
        plan=plan,
        result=result,
        sensitivity_wall_ms=sensitivity_wall_ms,
        sensitivity_batch=int(sample.shape[0]),
    )
