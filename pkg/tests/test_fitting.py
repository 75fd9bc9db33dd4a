import json
import math

import numpy as np
import pytest

from sdftrace.fields import SdfOccupancy, Sphere
from sdftrace.fitting import (
    Adam,
    FitConfig,
    FitDivergedError,
    FitReport,
    SamplingError,
    fit_color_stub,
    fit_sdf,
    geo_step,
    learning_rate_at,
    sample_surface_points,
)
from sdftrace.losses import GeoLossWeights, random_view_sampler

from helpers import small_neural_sdf, sphere_oracle

SMALL = dict(batch_surface=64, batch_eik=160, mask_width=16, mask_height=32, dtype="float64")


def snapshot(field):
    return [p.copy() for p in field.weights.params()]


class TestSurfaceSampling:
    def test_unit_sphere(self):
        X = sample_surface_points(SdfOccupancy(Sphere(1.0)), 500, 0)
        assert X.shape == (500, 3)
        assert np.all(np.abs(np.linalg.norm(X, axis=1) - 1.0) < 1e-3)

    def test_soft_oracle_level(self):
        occ = SdfOccupancy(Sphere(0.7), tau=0.05)
        X = sample_surface_points(occ, 200, 1)
        assert np.all(np.abs(occ.eval(X) - 0.5) < 1e-3)

    def test_empty_oracle(self):
        with pytest.raises(SamplingError):
            sample_surface_points(SdfOccupancy(Sphere(0.3, (5.0, 5.0, 5.0))), 10, 0, max_attempts=3)

    def test_deterministic(self):
        occ = SdfOccupancy(Sphere(1.0))
        a = sample_surface_points(occ, 100, 7)
        assert np.array_equal(a, sample_surface_points(occ, 100, 7))
        assert not np.array_equal(a, sample_surface_points(occ, 100, 8))

    def test_bad_count(self):
        with pytest.raises(ValueError):
            sample_surface_points(SdfOccupancy(Sphere(1.0)), 0)


class TestConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            FitConfig(steps=0)
        with pytest.raises(ValueError):
            FitConfig(lr_schedule="step")
        with pytest.raises(ValueError):
            FitConfig(batch_surface=512, batch_eik=512)
        with pytest.raises(ValueError):
            FitConfig(beta1=1.0)

    def test_schedule(self):
        c = FitConfig(steps=11, learning_rate=1e-3, lr_final_ratio=0.01)
        assert learning_rate_at(c, 0) == pytest.approx(1e-3)
        assert learning_rate_at(c, 10) == pytest.approx(1e-5)
        assert learning_rate_at(c, 5) == pytest.approx(1e-3 * (0.01 + 0.99 * 0.5))
        rates = [learning_rate_at(c, k) for k in range(11)]
        assert all(b <= a for a, b in zip(rates, rates[1:]))
        flat = FitConfig(steps=11, lr_schedule="constant")
        assert {learning_rate_at(flat, k) for k in range(11)} == {flat.learning_rate}


class TestAdam:
    def test_against_reference(self, rng):
        p = rng.normal(size=5)
        ref = p.copy()
        opt = Adam([p], 0.01)
        m = v = np.zeros(5)
        for t in range(1, 4):
            g = rng.normal(size=5)
            opt.step([g])
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            ref -= 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        np.testing.assert_allclose(p, ref, rtol=1e-14)

    def test_zero_gradient_is_no_op(self):
        p = np.ones(3)
        Adam([p], 0.1).step([np.zeros(3)])
        assert np.array_equal(p, np.ones(3))


class TestFit:
    def test_zero_weights_leave_field_unchanged(self):
        field, oracle = small_neural_sdf(seed=1)
        before = snapshot(field)
        report = fit_sdf(field, oracle, FitConfig(steps=3, **SMALL), GeoLossWeights(0.0, 0.0, 0.0), evaluate=False)
        assert all(np.array_equal(a, b) for a, b in zip(before, field.weights.params()))
        assert [r["total"] for r in report.losses] == [0.0, 0.0, 0.0]

    def test_same_seed_same_curve(self):
        curves = []
        for _ in range(2):
            field, oracle = small_neural_sdf(seed=1)
            report = fit_sdf(field, oracle, FitConfig(steps=4, seed=5, **SMALL), evaluate=False)
            curves.append(report.losses)
        assert curves[0] == curves[1]
        assert len(curves[0]) == 4
        assert set(curves[0][0]) == {"step", "total", "mask", "3d_sdf", "eik", "alpha"}

    @pytest.mark.parametrize("lr", [1e-6, 1e-7])
    def test_first_order_decrease(self, lr):
        # a small step changes the loss by g . dw; with Adam's first step dw = -lr g / |g|
        field, oracle = small_neural_sdf(seed=3)
        config = FitConfig(**SMALL)
        cam = random_view_sampler(16, 32)(np.random.default_rng(0))
        weights = GeoLossWeights()
        total, _, grads, _ = geo_step(field, oracle, cam, 0.05, weights, config, np.random.default_rng(9))
        before = snapshot(field)
        Adam(field.weights.params(), lr).step(grads)
        dw = [b - a for a, b in zip(before, field.weights.params())]
        predicted = sum(float((g * d).sum()) for g, d in zip(grads, dw))
        after, *_ = geo_step(field, oracle, cam, 0.05, weights, config, np.random.default_rng(9))
        assert predicted < 0
        assert 0.5 <= (after - total) / predicted <= 2.0

    def test_nan_aborts_with_breakdown(self):
        field, oracle = small_neural_sdf(seed=1)
        field.weights.layers[-1].bias[:] = np.nan
        with pytest.raises(FitDivergedError) as info:
            fit_sdf(field, oracle, FitConfig(steps=3, **SMALL), evaluate=False)
        assert info.value.step == 0
        assert {"mask", "3d_sdf", "eik", "alpha"} <= set(info.value.components)
        assert "step 0" in str(info.value)

    def test_loss_decreases_and_report(self):
        field, oracle = small_neural_sdf(seed=1, radius=0.5)
        config = FitConfig(steps=60, eval_points=256, eval_width=32, eval_height=64, eval_views=2, **SMALL)
        report = fit_sdf(field, oracle, config)
        assert len(report.losses) == 60
        assert report.losses[-1]["total"] < report.losses[0]["total"]
        assert 0.0 <= report.mask_iou <= 1.0 and report.alpha > 0 and report.wall_time > 0
        data = json.loads(report.to_json())
        assert len(data["losses"]) == 60 and data["alpha"] == report.alpha

    def test_needs_occupancy(self):
        from sdftrace.neural import PriorOracle

        field, oracle = small_neural_sdf()
        with pytest.raises(ValueError):
            fit_sdf(field, PriorOracle(oracle.feature_fn, None), FitConfig(steps=1, **SMALL))


class TestColorStub:
    def test_constant_gray(self, rng):
        stub = fit_color_stub(sphere_oracle(), lambda X: np.full((len(X), 3), 0.5))
        assert np.all(stub.color(rng.normal(size=(20, 3))) == 0.5)

    def test_normal_colors(self):
        stub = fit_color_stub(sphere_oracle(), lambda X: (X / np.linalg.norm(X, axis=-1, keepdims=True) + 1) / 2)
        X = sample_surface_points(SdfOccupancy(Sphere(1.0)), 100, 2)
        np.testing.assert_allclose(stub.color(X), (Sphere(1.0).gradient(X) + 1) / 2, atol=1e-12)

    def test_keeps_features_and_occupancy(self):
        base = sphere_oracle()
        stub = fit_color_stub(base, lambda X: X)
        assert stub.feature_fn is base.feature_fn and stub.occupancy is base.occupancy


def test_report_defaults():
    r = FitReport()
    assert r.losses == [] and math.isnan(r.mask_iou)
