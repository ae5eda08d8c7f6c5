import numpy as np
import pytest

from saft.datasets import LabeledBatch, gen_blobs
from saft.model import build_model, linear, relu, save_checkpoint
from saft.noise import NoiseSpec, noisy_overrides
from saft.sensitivity import FreezePlan
from saft.trainer import (
    TrainConfig,
    evaluate,
    full_plan,
    noise_injection_train,
    saft_pipeline,
)


def mlp(seed=7):
    return build_model(
        [linear("f1", 8, 16), relu("a1"), linear("f2", 16, 8), relu("a2"), linear("f3", 8, 3)],
        (8,),
        seed,
    )


@pytest.fixture(scope="module")
def blob_data():
    return gen_blobs(num_classes=3, per_class=120, dim=8, spread=0.6, seed=4)


CFG = TrainConfig(epochs=3, learning_rate=0.05, batch_size=32, seed=11)
NOISY = NoiseSpec("gaussian", "multiplicative", 0.1, 21)


class TestTrainConfig:
    def test_rejects_nonpositive_fields(self):
        with pytest.raises(ValueError):
            TrainConfig(epochs=0, learning_rate=0.1, batch_size=8, seed=1)
        with pytest.raises(ValueError):
            TrainConfig(epochs=1, learning_rate=0.0, batch_size=8, seed=1)
        with pytest.raises(ValueError):
            TrainConfig(epochs=1, learning_rate=0.1, batch_size=0, seed=1)

    def test_rejects_unknown_optimizer(self):
        with pytest.raises(ValueError, match="optimizer"):
            TrainConfig(epochs=1, learning_rate=0.1, batch_size=8, seed=1, optimizer="adam")


class TestFreezeContract:
    def test_frozen_layers_bit_identical_and_unvisited(self, blob_data):
        train, test = blob_data
        model = mlp()
        plan = FreezePlan(
            trainable=frozenset({"f3"}),
            frozen=frozenset({"f1", "a1", "f2", "a2"}),
        )
        frozen_before = {
            lid: [p.data.tobytes() for p in model.params[lid]] for lid in ("f1", "f2")
        }
        cfg = TrainConfig(epochs=5, learning_rate=0.05, batch_size=32, seed=2)
        result = noise_injection_train(model, NOISY, plan, cfg, train, test)
        for lid in ("f1", "f2"):
            assert [p.data.tobytes() for p in model.params[lid]] == frozen_before[lid]
            assert result.grad_update_count[lid] == 0
        assert result.grad_update_count["f3"] > 0

    def test_all_frozen_plan_rejected(self, blob_data):
        train, test = blob_data
        model = mlp()
        plan = FreezePlan(trainable=frozenset(), frozen=frozenset(model.layer_ids()))
        with pytest.raises(ValueError, match="no trainable"):
            noise_injection_train(model, NOISY, plan, CFG, train, test)

    def test_frozen_layers_skip_parameter_gradient_work(self, blob_data):
        train, test = blob_data
        model = mlp()
        plan = FreezePlan(
            trainable=frozenset({"f1"}),
            frozen=frozenset({"a1", "f2", "a2", "f3"}),
        )
        cfg = TrainConfig(epochs=1, learning_rate=0.05, batch_size=32, seed=2)
        result = noise_injection_train(model, NOISY, plan, cfg, train, test)
        # work accounting only covers the single trainable layer
        steps = result.grad_update_count["f1"]
        expected = steps * model.param_count("f1")
        assert result.param_grad_scalars == expected


class TestGradientRouting:
    def test_single_step_is_exactly_minus_lr_times_noisy_grad(self, blob_data):
        train, test = blob_data
        lr = 0.05
        seed = 31
        cfg = TrainConfig(epochs=1, learning_rate=lr, batch_size=train.count, seed=seed)
        spec = NoiseSpec("gaussian", "multiplicative", 0.2, 77)

        model = mlp()
        before = {lid: [p.data.copy() for p in model.params[lid]] for lid in model.params}
        noise_injection_train(model, spec, full_plan(model), cfg, train, test)

        # replay the one step independently: same shuffle, same noise streams
        twin = mlp()
        for lid in twin.params:
            for p, saved in zip(twin.params[lid], before[lid]):
                p.data[...] = saved
        order = np.random.default_rng([seed]).permutation(train.count)
        xb, yb = train.inputs[order], train.labels[order]
        overrides = noisy_overrides(
            twin, spec, step=0, trainable=frozenset(twin.eligible_ids())
        )
        from saft.tensor import softmax_cross_entropy

        loss = softmax_cross_entropy(twin.forward(xb, overrides), yb)
        loss.backward()
        for lid in twin.eligible_ids():
            for p_new, p_old, wrapper in zip(
                model.params[lid], before[lid], overrides[lid]
            ):
                assert wrapper.grad_events > 0, "replayed gradient never materialized"
                np.testing.assert_array_equal(p_new.data, p_old - lr * wrapper.grad)

    def test_zero_noise_loss_decreases_on_separable_data(self):
        train, test = gen_blobs(num_classes=3, per_class=150, dim=8, spread=0.05, seed=9)
        model = mlp()
        spec = NoiseSpec("gaussian", "multiplicative", 0.0, 1)
        result = noise_injection_train(model, spec, full_plan(model), CFG, train, test)
        assert result.per_epoch_loss == sorted(result.per_epoch_loss, reverse=True)
        assert result.final_accuracy_clean == 1.0  # separable limit


class TestDeterminism:
    def test_identical_runs_bit_identical_metrics(self, blob_data):
        train, test = blob_data
        results = []
        for _ in range(2):
            model = mlp()
            results.append(
                noise_injection_train(model, NOISY, full_plan(model), CFG, train, test)
            )
        a, b = results
        assert a.per_epoch_loss == b.per_epoch_loss
        assert a.final_accuracy_clean == b.final_accuracy_clean
        assert a.final_accuracy_noisy == b.final_accuracy_noisy
        assert a.grad_update_count == b.grad_update_count
        assert a.param_grad_scalars == b.param_grad_scalars

    def test_momentum_variant_runs_and_is_deterministic(self, blob_data):
        train, test = blob_data
        cfg = TrainConfig(
            epochs=2, learning_rate=0.02, batch_size=32, seed=5,
            optimizer="sgd_momentum", momentum=0.9,
        )
        runs = []
        for _ in range(2):
            model = mlp()
            runs.append(
                noise_injection_train(model, NOISY, full_plan(model), cfg, train, test)
            )
        assert runs[0].per_epoch_loss == runs[1].per_epoch_loss


class TestEvaluate:
    def test_zero_noise_equals_clean(self, blob_data):
        _train, test = blob_data
        model = mlp()
        clean = evaluate(model, test)
        noised = evaluate(model, test, NoiseSpec("uniform", "additive", 0.0, 3), eval_seed=8)
        assert noised == clean

    def test_same_eval_seed_identical(self, blob_data):
        _train, test = blob_data
        model = mlp()
        spec = NoiseSpec("gaussian", "multiplicative", 0.4, 13)
        assert evaluate(model, test, spec, eval_seed=5) == evaluate(model, test, spec, eval_seed=5)

    def test_different_eval_seed_can_differ(self, blob_data):
        _train, test = blob_data
        model = mlp()
        spec = NoiseSpec("gaussian", "multiplicative", 0.8, 13)
        accs = {evaluate(model, test, spec, eval_seed=s) for s in range(8)}
        assert len(accs) > 1

    def test_empty_set_rejected(self):
        model = mlp()
        batch = LabeledBatch(np.zeros((1, 8)), np.zeros(1, dtype=np.int64))
        evaluate(model, batch)  # fine
        with pytest.raises(ValueError):
            evaluate(model, LabeledBatch(np.zeros((0, 8)), np.zeros(0, dtype=np.int64)))


class TestSaftPipeline:
    def test_k_all_matches_full_training_exactly(self, blob_data):
        train, test = blob_data
        full_model = mlp()
        full_res = noise_injection_train(
            full_model, NOISY, full_plan(full_model), CFG, train, test
        )
        saft_model = mlp()
        run = saft_pipeline(saft_model, NOISY, k=10, cfg=CFG, train=train, test=test)
        # same trainable set and same noise streams: identical training
        assert run.plan.trainable == frozenset(saft_model.eligible_ids())
        assert run.result.per_epoch_loss == full_res.per_epoch_loss
        assert run.result.final_accuracy_noisy == full_res.final_accuracy_noisy
        assert save_checkpoint(saft_model) == save_checkpoint(full_model)

    def test_pipeline_reports_selection_and_freeze(self, blob_data):
        train, test = blob_data
        model = mlp()
        run = saft_pipeline(model, NOISY, k=1, cfg=CFG, train=train, test=test)
        assert len(run.plan.trainable) == 1
        assert run.report.selected == list(run.plan.trainable)
        assert run.report.batch_size == min(CFG.batch_size, train.count)
        frozen_eligible = set(model.eligible_ids()) - run.plan.trainable
        for lid in frozen_eligible:
            assert run.result.grad_update_count[lid] == 0
