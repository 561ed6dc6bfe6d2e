import math

import numpy as np
import pytest

from oracles import lstm_scalar

from pbornn.cells import CellSpec, layout_for
from pbornn.core import (
    BudgetExhausted,
    BudgetMeter,
    CounterRng,
    LossSpec,
    RngStream,
    Scorer,
    evaluate_loss,
    gaussian_sample,
    uniform_sample,
)
from pbornn.data import SequenceDataset


def toy_dataset(features, targets):
    n = len(targets)
    return SequenceDataset(np.asarray(features, float), np.asarray(targets, float), n - 2, 1, 1)


class TestRng:
    def test_gaussian_deterministic(self):
        s = RngStream(42, (1, 2, 3))
        np.testing.assert_array_equal(gaussian_sample(s, 17), gaussian_sample(s, 17))

    def test_gaussian_moments(self):
        x = gaussian_sample(RngStream(7, (0, 0, 0)), 100_000)
        assert abs(x.mean()) <= 0.02
        assert abs(x.var() - 1.0) <= 0.02

    def test_distinct_streams_differ(self):
        a = gaussian_sample(RngStream(7, (0, 0, 1)), 5)
        b = gaussian_sample(RngStream(7, (0, 1, 1)), 5)
        assert np.any(a != b)

    def test_dim_must_be_positive(self):
        with pytest.raises(ValueError):
            gaussian_sample(RngStream(0, ()), 0)

    def test_uniform(self):
        s = RngStream(3, (9,))
        assert uniform_sample(s) == uniform_sample(s)
        draws = np.array([uniform_sample(RngStream(3, (j,))) for j in range(2000)])
        assert np.all((0 <= draws) & (draws < 1))
        big = CounterRng(3).uniform(0, 0, "moment", size=100_000)
        assert abs(big.mean() - 0.5) <= 0.01

    def test_order_independence(self):
        rng = CounterRng(11)
        forward = [rng.normal(i, 4, 3) for i in range(5)]
        backward = [rng.normal(i, 4, 3) for i in reversed(range(5))][::-1]
        np.testing.assert_array_equal(forward, backward)

    def test_purpose_and_namespace_separate_streams(self):
        rng = CounterRng(11)
        assert np.any(rng.normal(0, 0, 4, "a") != rng.normal(0, 0, 4, "b"))
        assert np.any(rng.child(1).normal(0, 0, 4) != rng.child(2).normal(0, 0, 4))


class TestBudgetMeter:
    def test_charges_and_refuses(self):
        m = BudgetMeter(3)
        m.charge(2)
        with pytest.raises(BudgetExhausted):
            m.charge(2)
        assert m.used == 2
        m.charge()
        assert m.remaining == 0

    def test_negative_cap(self):
        with pytest.raises(ValueError):
            BudgetMeter(-1)


class TestLossSpec:
    def test_validation(self):
        with pytest.raises(ValueError):
            LossSpec(kind="mae")
        with pytest.raises(ValueError):
            LossSpec(target_transform="sqrt")


class TestEvaluateLoss:
    spec = CellSpec("lstm", 1, 1)
    layout = layout_for(spec)

    def test_zero_weights_zero_targets(self):
        ds = toy_dataset(np.random.default_rng(0).normal(size=(8, 1)), np.zeros(8))
        meter = BudgetMeter(5)
        assert evaluate_loss(ds, self.layout, np.zeros(self.layout.size), LossSpec(), meter, self.spec) == 0.0
        assert meter.used == 1

    def test_repeatable_and_side_effect_free(self):
        rng = np.random.default_rng(1)
        ds = toy_dataset(rng.normal(size=(8, 1)), rng.normal(size=8))
        theta = rng.normal(size=self.layout.size)
        before_theta, before_x = theta.copy(), ds.features.copy()
        meter = BudgetMeter(5)
        a = evaluate_loss(ds, self.layout, theta, LossSpec(), meter, self.spec)
        b = evaluate_loss(ds, self.layout, theta, LossSpec(), meter, self.spec)
        assert a == b and meter.used == 2
        np.testing.assert_array_equal(theta, before_theta)
        np.testing.assert_array_equal(ds.features, before_x)

    def test_matches_scalar_oracle(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(7, 1))
        y = rng.normal(size=7)
        ds = toy_dataset(x, y)  # training split holds the first 5 steps
        theta = rng.normal(size=self.layout.size)
        w = self.layout.unflatten(theta)
        ys, _, _ = lstm_scalar(*(w[n].tolist() for n in ("W_x", "W_h", "b", "W_y", "b_y")), x[:5].tolist())
        expected = sum((ys[t][0] - y[t]) ** 2 for t in range(5)) / 5
        got = evaluate_loss(ds, self.layout, theta, LossSpec(), BudgetMeter(1), self.spec)
        assert got == pytest.approx(expected, rel=1e-12)

    def test_exhausted_budget(self):
        ds = toy_dataset(np.zeros((4, 1)), np.zeros(4))
        with pytest.raises(BudgetExhausted):
            evaluate_loss(ds, self.layout, np.zeros(self.layout.size), LossSpec(), BudgetMeter(0), self.spec)

    def test_divergent_weights_score_infinity(self):
        ds = toy_dataset(np.ones((4, 1)), np.zeros(4))
        theta = np.zeros(self.layout.size)
        theta[self.layout.slice("b_y")] = 1e200
        assert evaluate_loss(ds, self.layout, theta, LossSpec(), BudgetMeter(1), self.spec) == math.inf

    def test_wrong_length(self):
        ds = toy_dataset(np.zeros((4, 1)), np.zeros(4))
        with pytest.raises(ValueError):
            evaluate_loss(ds, self.layout, np.zeros(3), LossSpec(), BudgetMeter(1), self.spec)


class TestScorer:
    def test_batch_charges_per_row_and_refuses_whole_batch(self):
        spec = CellSpec("lstm", 1, 2)
        layout = layout_for(spec)
        meter = BudgetMeter(5)
        scorer = Scorer(spec, layout, np.zeros((6, 1)), np.zeros(6), meter)
        scorer.batch(np.zeros((3, layout.size)))
        assert meter.used == 3
        with pytest.raises(BudgetExhausted):
            scorer.batch(np.zeros((3, layout.size)))
        assert meter.used == 3

    def test_batch_equals_single(self):
        spec = CellSpec("fru", 1, 2, fru_frequencies=(0.0, 2.0))
        layout = layout_for(spec)
        rng = np.random.default_rng(3)
        x, y = rng.normal(size=(9, 1)), rng.normal(size=9)
        thetas = rng.normal(size=(4, layout.size))
        scorer = Scorer(spec, layout, x, y, BudgetMeter(8))
        batch = scorer.batch(thetas)
        for j in range(4):
            assert scorer(thetas[j]) == pytest.approx(batch[j], abs=1e-15)

    def test_empty_dataset(self):
        spec = CellSpec("lstm", 1, 1)
        with pytest.raises(ValueError):
            Scorer(spec, layout_for(spec), np.zeros((0, 1)), np.zeros(0), BudgetMeter(1))
