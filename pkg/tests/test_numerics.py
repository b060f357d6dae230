from __future__ import annotations

import numpy as np
import pytest

from routebench.experts import ImageGrid, ToyExpertSpec, identity_adapter
from routebench.fusion import FusionStrategy, PipelineConfig, ProjectorParams
from routebench.numerics import (
    CHECKED_PARAMS,
    check_router_fusion_gradients,
    finite_diff_gradient,
    fit_router_demo,
    measure_fusion_latency,
    small_gradcheck_config,
    softmax_jacobian,
)
from routebench.router import RouterParams, routing_weights


class TestFiniteDiff:
    def test_quadratic_gradient(self):
        point = np.array([1.0, -2.0, 3.0])
        grad = finite_diff_gradient(lambda x: float((x**2).sum()), point)
        np.testing.assert_allclose(grad, 2 * point, rtol=0, atol=1e-8)

    def test_matrix_shaped_point(self):
        point = np.arange(6.0).reshape(2, 3)
        grad = finite_diff_gradient(lambda x: float((x**3).sum()), point)
        np.testing.assert_allclose(grad, 3 * point**2, rtol=0, atol=1e-6)

    def test_non_finite_loss_names_coordinate(self):
        def fn(x):
            return float("inf") if x[1] > 0.5 else float(x.sum())

        with pytest.raises(ValueError, match="coordinate 1"):
            finite_diff_gradient(fn, np.array([0.0, 0.5, 0.0]))

    def test_bad_eps_rejected(self):
        with pytest.raises(ValueError, match="eps"):
            finite_diff_gradient(lambda x: 0.0, np.zeros(2), eps=0.0)


class TestSoftmaxJacobian:
    def test_rows_sum_to_zero_and_symmetry(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            w = routing_weights(rng.uniform(-5, 5, size=5)).weights
            jac = softmax_jacobian(w)
            np.testing.assert_allclose(jac.sum(axis=1), 0.0, rtol=0, atol=1e-12)
            np.testing.assert_allclose(jac, jac.T, rtol=0, atol=1e-15)

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(1)
        logits = rng.uniform(-3, 3, size=4)
        w = routing_weights(logits).weights
        jac = softmax_jacobian(w)
        eps = 1e-6
        for j in range(4):
            bumped = logits.copy()
            bumped[j] += eps
            minus = logits.copy()
            minus[j] -= eps
            fd = (routing_weights(bumped).weights - routing_weights(minus).weights) / (2 * eps)
            np.testing.assert_allclose(jac[:, j], fd, rtol=0, atol=1e-8)


class TestGradCheck:
    def test_seeded_small_configs_pass(self):
        for seed in range(5):
            config, image = small_gradcheck_config(seed)
            reports = check_router_fusion_gradients(config, image)
            assert [r.parameter_name for r in reports] == list(CHECKED_PARAMS)
            for report in reports:
                assert report.passed, (seed, report)
                assert report.max_rel_error < 1e-6
                assert report.n_coordinates > 0

    def test_zero_experts_give_zero_router_gradient(self):
        # constant image + difference personas: every expert map is exactly 0,
        # so the loss cannot depend on the routing parameters
        experts = tuple(
            ToyExpertSpec(id=i, persona=p, seed=i, native_tokens=4, native_dim=4)
            for i, p in enumerate(("edge-shape", "text-stripe"))
        )
        rng = np.random.default_rng(3)
        config = PipelineConfig(
            experts=experts,
            router=RouterParams(rng.normal(size=(4, 2)), rng.normal(size=2)),
            strategy=FusionStrategy(kind="routed"),
            projector=ProjectorParams(stage1=identity_adapter(4), stage2=identity_adapter(4)),
            canonical_tokens=4,
            canonical_dim=4,
        )
        image = ImageGrid(np.full((8, 8, 3), 0.7))
        from routebench.numerics import _RoutedChain

        chain = _RoutedChain(image, config)
        grads = chain.analytic_gradients()
        assert np.all(grads["router.weights"] == 0.0)
        assert np.all(grads["router.bias"] == 0.0)
        reports = {r.parameter_name: r for r in check_router_fusion_gradients(config, image)}
        assert reports["router.weights"].degenerate
        assert reports["router.bias"].degenerate
        assert reports["router.weights"].passed
        assert not reports["projector.stage1.weights"].degenerate

    def test_eps_sweep_does_not_blow_up(self):
        config, image = small_gradcheck_config(11)
        errors = {}
        for eps in (1e-4, 1e-5, 1e-6):
            reports = check_router_fusion_gradients(config, image, eps=eps)
            errors[eps] = max(r.max_rel_error for r in reports)
        assert errors[1e-6] <= 10.0 * errors[1e-5]

    def test_top_k_config_rejected(self):
        config, image = small_gradcheck_config(2)
        masked = PipelineConfig(
            experts=config.experts,
            router=config.router,
            strategy=FusionStrategy(kind="routed", k=1),
            projector=config.projector,
            canonical_tokens=config.canonical_tokens,
            canonical_dim=config.canonical_dim,
            clip_seed=config.clip_seed,
        )
        if len(config.experts) == 1:
            pytest.skip("needs at least 2 experts to mask")
        with pytest.raises(ValueError, match="soft routing"):
            check_router_fusion_gradients(masked, image)

    def test_coordinate_subsampling(self):
        config, image = small_gradcheck_config(4)
        reports = check_router_fusion_gradients(config, image, seed=7, max_coords_per_param=3)
        for report in reports:
            assert report.n_coordinates <= 3
            assert report.passed


class TestRouterFitDemo:
    def test_loss_decreases_nearly_monotonically(self):
        rng = np.random.default_rng(5)
        cls = rng.normal(size=6)
        target = np.zeros(4)
        target[2] = 1.0
        losses = fit_router_demo(cls, target, steps=50, lr=0.5, seed=1)
        assert len(losses) == 51
        decreases = sum(1 for a, b in zip(losses, losses[1:]) if b < a)
        assert decreases >= 45
        assert losses[-1] < losses[0]


class TestLatency:
    def test_report_shape_and_bounds(self):
        config, image = small_gradcheck_config(6)
        report = measure_fusion_latency(config, image, repeats=5)
        assert report.strategy == "routed"
        assert report.repeats == 5
        assert set(report.per_stage_ms) == {"encode", "align", "route", "fuse", "project"}
        assert all(v >= 0.0 for v in report.per_stage_ms.values())
        # total stacks every stage, so its median dominates each stage median
        assert report.prefill_ms >= max(report.per_stage_ms.values())

    def test_too_few_repeats_rejected(self):
        config, image = small_gradcheck_config(6)
        with pytest.raises(ValueError, match="repeats"):
            measure_fusion_latency(config, image, repeats=2)
