from decimal import Decimal, getcontext

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kstransformer import numcore as nc
from kstransformer.data import SynthSpec, generate_synthetic
from kstransformer.errors import ConfigError, ContractError, DivergenceError
from kstransformer.model import KSTransformerClassifier, preset
from kstransformer.trainer import (
    MetricReport,
    TrainConfig,
    cross_entropy,
    evaluate,
    lr_at,
    sgd_step,
    sweep,
    train,
    train_repeats,
)


def ce_oracle(logits, labels):
    getcontext().prec = 50
    total = Decimal(0)
    for row, y in zip(logits, labels):
        row = [Decimal(float(v)) for v in row]
        total += (sum((v.exp() for v in row), Decimal(0))).ln() - row[y]
    return float(total / len(labels))


class TestCrossEntropy:
    def test_uniform_is_log_classes(self):
        loss = cross_entropy(nc.Tensor(np.zeros((3, 4))), [0, 1, 2])
        assert abs(float(loss.data) - np.log(4)) < 1e-15

    def test_matches_extended_precision(self, rng):
        for _ in range(20):
            z = rng.normal(scale=5, size=(6, 4))
            y = rng.integers(0, 4, size=6)
            assert abs(float(cross_entropy(nc.Tensor(z), y).data) - ce_oracle(z, y)) < 1e-10

    def test_large_logits_stay_finite(self):
        z = np.array([[1000.0, 0.0, -1000.0, 5.0]])
        assert abs(float(cross_entropy(nc.Tensor(z), [0]).data)) < 1e-12

    def test_gradient_is_softmax_minus_onehot(self, rng):
        z = nc.Tensor(rng.normal(size=(5, 4)), requires_grad=True)
        y = np.array([0, 3, 1, 1, 2])
        nc.backward(cross_entropy(z, y))
        p = np.exp(z.data - z.data.max(1, keepdims=True))
        p /= p.sum(1, keepdims=True)
        p[np.arange(5), y] -= 1
        np.testing.assert_allclose(z.grad, p / 5, atol=1e-14)


class TestSchedule:
    def test_anchor_values(self):
        cfg = TrainConfig()
        assert [lr_at(e, cfg) for e in (0, 29, 30, 60, 90)] == [5e-4, 5e-4, 2.5e-4, 1.25e-4, 6.25e-5]

    @given(st.integers(0, 500), st.integers(0, 500))
    def test_non_increasing(self, a, b):
        cfg = TrainConfig(lr0=0.01)
        lo, hi = sorted((a, b))
        assert lr_at(hi, cfg) <= lr_at(lo, cfg)

    def test_invalid_config(self):
        with pytest.raises(ConfigError):
            TrainConfig(lr0=-1.0)
        with pytest.raises(ConfigError):
            TrainConfig(batch_size=0)


class TestSGD:
    def test_single_update(self):
        p = nc.Parameter(np.array([1.0]), "p")
        p.grad = np.array([2.0])
        sgd_step([p], 0.1)
        assert p.data[0] == pytest.approx(0.8, abs=1e-15)

    def test_zero_lr_is_identity(self, rng):
        p = nc.Parameter(rng.normal(size=(3, 2)), "p")
        before = p.data.copy()
        p.grad = rng.normal(size=(3, 2))
        sgd_step([p], 0.0)
        np.testing.assert_array_equal(p.data, before)

    def test_missing_grad(self):
        with pytest.raises(ContractError):
            sgd_step([nc.Parameter(np.ones(2), "p")], 0.1)

    def test_quadratic_bowl(self, rng):
        target = rng.normal(size=4)
        p = nc.Parameter(np.zeros(4), "p")
        for _ in range(200):
            diff = nc.add(p, nc.Tensor(-target))
            nc.backward(nc.sum_all(nc.mul(diff, diff)))
            sgd_step([p], 0.1)
        np.testing.assert_allclose(p.data, target, atol=1e-10)


class TestMetrics:
    def test_majority_baseline(self):
        y = [0] * 70 + [1] * 10 + [2] * 10 + [3] * 10
        report = MetricReport.from_predictions(y, [0] * 100, 4)
        assert report.wa == pytest.approx(0.70, abs=1e-12)
        assert report.ua == pytest.approx(0.25, abs=1e-12)

    def test_balanced_ua_equals_wa(self, rng):
        y = np.repeat(np.arange(4), 25)
        pred = rng.integers(0, 4, size=100)
        report = MetricReport.from_predictions(y, pred, 4)
        assert report.ua == pytest.approx(report.wa, abs=1e-12)

    @given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), min_size=1, max_size=60), st.randoms())
    @settings(max_examples=50)
    def test_permutation_invariant(self, pairs, rnd):
        shuffled = list(pairs)
        rnd.shuffle(shuffled)
        a = MetricReport.from_predictions(*zip(*pairs), 4)
        b = MetricReport.from_predictions(*zip(*shuffled), 4)
        assert (a.wa, a.ua) == (b.wa, b.ua)

    def test_missing_class_excluded_from_ua(self):
        report = MetricReport.from_predictions([0, 0, 1, 1], [0, 1, 1, 1], 4)
        assert report.ua == pytest.approx(0.75)


@pytest.fixture(scope="module")
def splits():
    ds = generate_synthetic(SynthSpec(n_samples=48, audio_dim=6, text_dim=5, audio_len=(4, 7), text_len=(3, 5), seed=7))
    return ds.split(0.25, seed=0)


@pytest.fixture(scope="module")
def cfg():
    return preset("tiny", audio_in_dim=6, text_in_dim=5)


def test_evaluate_threads_agree(cfg, splits):
    model = KSTransformerClassifier(cfg, 0)
    one = evaluate(model, splits[0], batch_size=5, threads=1)
    four = evaluate(model, splits[0], batch_size=5, threads=4)
    np.testing.assert_array_equal(one.confusion, four.confusion)
    with pytest.raises(ContractError):
        evaluate(model, splits[0].subset([]))


class TestTrain:
    def test_zero_epochs(self, cfg, splits):
        model = KSTransformerClassifier(cfg, 0)
        result = train(model, *splits, TrainConfig(epochs=0))
        assert result.history == [] and result.best.epoch == 0
        for k, v in model.state_dict().items():
            np.testing.assert_array_equal(result.best.state[k], v)

    def test_deterministic(self, cfg, splits):
        tc = TrainConfig(lr0=0.05, epochs=2, batch_size=8, seed=4)
        a = train(KSTransformerClassifier(cfg, 4), *splits, tc)
        b = train(KSTransformerClassifier(cfg, 4), *splits, tc)
        assert a.history == b.history
        for k in a.best.state:
            np.testing.assert_array_equal(a.best.state[k], b.best.state[k])

    def test_one_step_reduces_batch_loss(self, cfg, splits):
        from kstransformer.data import collate

        model = KSTransformerClassifier(cfg, 1)
        batch = collate(splits[0].samples[:16])
        before = cross_entropy(model.forward(batch), batch.labels)
        nc.backward(before)
        sgd_step(model.parameters(), 1e-2)
        after = cross_entropy(model.forward(batch), batch.labels)
        assert float(after.data) < float(before.data)

    def test_history_fields(self, cfg, splits):
        result = train(KSTransformerClassifier(cfg, 0), *splits, TrainConfig(epochs=2, batch_size=12))
        assert [set(r) for r in result.history] == [{"epoch", "lr", "train_loss", "dev_wa", "dev_ua"}] * 2
        assert result.best_report is not None

    def test_divergence_carries_checkpoint(self, cfg, splits):
        model = KSTransformerClassifier(cfg, 0)
        model.classifier[1].data[0] = np.inf
        with pytest.raises(DivergenceError) as err:
            train(model, *splits, TrainConfig(epochs=1))
        assert err.value.checkpoint is not None
        assert err.value.diagnostic["epoch"] == 0

    def test_overlapping_splits_rejected(self, cfg, splits):
        with pytest.raises(ContractError):
            train(KSTransformerClassifier(cfg, 0), splits[0], splits[0], TrainConfig(epochs=1))

    def test_repeats_use_distinct_seeds(self, cfg, splits):
        summary = train_repeats(cfg, *splits, TrainConfig(epochs=1, repeats=2, batch_size=12))
        assert len(set(summary.seeds)) == 2 and np.isfinite(summary.mean_ua)


class TestSweep:
    def test_single_value_matches_train(self, cfg, splits):
        tc = TrainConfig(lr0=0.05, epochs=2, batch_size=12, seed=2)
        table = sweep("sparsity", [0.3], cfg, tc, *splits)
        from dataclasses import replace

        direct = train(KSTransformerClassifier(replace(cfg, sparse_ratio=0.3), 2), *splits, tc)
        assert table.rows[0]["ua"] == direct.best_report.ua
        assert table.to_csv().splitlines()[0] == "ratio,WA,UA"

    def test_failed_cell_is_recorded(self, cfg, splits):
        table = sweep("sparsity", [1.5, 0.5], cfg, TrainConfig(epochs=1, batch_size=12), *splits)
        assert table.rows[0]["error"] and table.rows[0]["ua"] is None
        assert table.rows[1]["error"] is None and table.rows[1]["ua"] is not None

    def test_unknown_kind(self, cfg, splits):
        with pytest.raises(ConfigError):
            sweep("depth", [1], cfg, TrainConfig(), *splits)


def test_train_without_ccab(splits):
    cfg = preset("tiny", audio_in_dim=6, text_in_dim=5, n_ccab=0)
    result = train(KSTransformerClassifier(cfg, 0), *splits, TrainConfig(epochs=1, batch_size=12))
    assert len(result.history) == 1
