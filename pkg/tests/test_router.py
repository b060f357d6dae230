from __future__ import annotations

import math

import numpy as np
import pytest

from routebench.experts import ImageGrid
from routebench.router import (
    ClipOutput,
    RouterParams,
    RoutingWeights,
    ToyClipParams,
    clip_encode,
    load_router,
    route_logits,
    routing_weights,
    save_router,
    select_top_k,
)


def brute_force_top_k(weights: np.ndarray, k: int):
    """Independent reference: sort by (-weight, id), keep k, renormalize.

    k == n is the identity by contract, so no renormalization happens there.
    """
    n = weights.size
    if k == n:
        return weights.copy(), frozenset(range(n))
    order = sorted(range(n), key=lambda i: (-weights[i], i))
    kept = sorted(order[:k])
    mask = np.zeros(n, dtype=bool)
    mask[kept] = True
    total = weights[mask].sum()
    return np.where(mask, weights / total, 0.0), frozenset(kept)


class TestRoutingWeights:
    def test_softmax_worked_example(self):
        out = routing_weights(np.array([math.log(2.0), 0.0]))
        np.testing.assert_allclose(out.weights, [2.0 / 3.0, 1.0 / 3.0], rtol=0, atol=1e-15)
        assert out.active == frozenset({0, 1})

    def test_simplex_properties_random(self):
        rng = np.random.default_rng(0)
        for n in range(2, 9):
            for _ in range(100):
                logits = rng.uniform(-50, 50, size=n)
                out = routing_weights(logits)
                assert abs(out.weights.sum() - 1.0) <= 1e-9
                assert out.weights.min() >= 0.0 and out.weights.max() <= 1.0
                assert int(np.argmax(out.weights)) == int(np.argmax(logits))

    def test_shift_invariance(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            logits = rng.uniform(-50, 50, size=6)
            c = rng.uniform(-1000, 1000)
            a = routing_weights(logits).weights
            b = routing_weights(logits + c).weights
            np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)

    def test_extreme_logits_stay_finite(self):
        for logits in ([1e6, -1e6], [1e6, 1e6], [-1e6, -1e6, 0.0]):
            out = routing_weights(np.array(logits))
            assert np.isfinite(out.weights).all()
            assert abs(out.weights.sum() - 1.0) <= 1e-9

    def test_rejects_empty_and_non_finite(self):
        with pytest.raises(ValueError, match="non-empty"):
            routing_weights(np.array([]))
        with pytest.raises(ValueError, match="non-finite"):
            routing_weights(np.array([1.0, np.inf]))

    def test_validation_rejects_leaky_inactive_weight(self):
        with pytest.raises(ValueError, match="non-zero weight"):
            RoutingWeights(np.array([0.5, 0.5]), frozenset({0}))

    def test_validation_rejects_bad_sum(self):
        with pytest.raises(ValueError, match="sum to 1"):
            RoutingWeights(np.array([0.5, 0.4]), frozenset({0, 1}))


class TestTopK:
    def test_worked_example(self):
        routing = RoutingWeights(np.array([0.5, 0.3, 0.2]), frozenset({0, 1, 2}))
        out = select_top_k(routing, 2)
        np.testing.assert_array_equal(out.weights, [0.5 / 0.8, 0.3 / 0.8, 0.0])
        assert out.active == frozenset({0, 1})

    def test_k_equals_n_returns_copy(self):
        routing = RoutingWeights(np.array([0.25, 0.75]), frozenset({0, 1}))
        out = select_top_k(routing, 2)
        np.testing.assert_array_equal(out.weights, routing.weights)
        assert out.weights is not routing.weights
        assert out.active == frozenset({0, 1})

    def test_ties_keep_lowest_ids(self):
        routing = RoutingWeights(np.array([0.25, 0.25, 0.25, 0.25]), frozenset(range(4)))
        out = select_top_k(routing, 2)
        assert out.active == frozenset({0, 1})
        np.testing.assert_array_equal(out.weights, [0.5, 0.5, 0.0, 0.0])

    def test_matches_brute_force_including_ties(self):
        rng = np.random.default_rng(2)
        for n in range(1, 9):
            for k in range(1, n + 1):
                for _ in range(60):
                    if rng.random() < 0.5:
                        # quantized weights force frequent ties
                        raw = rng.integers(1, 4, size=n).astype(np.float64)
                    else:
                        raw = rng.random(n) + 1e-3
                    weights = raw / raw.sum()
                    routing = RoutingWeights(weights, frozenset(range(n)))
                    got = select_top_k(routing, k)
                    want_w, want_active = brute_force_top_k(weights, k)
                    np.testing.assert_array_equal(got.weights, want_w)
                    assert got.active == want_active

    def test_out_of_range_k_rejected(self):
        routing = RoutingWeights(np.array([1.0]), frozenset({0}))
        for k in (0, 2, -1):
            with pytest.raises(ValueError, match="k must be"):
                select_top_k(routing, k)


class TestRouteLogits:
    def test_worked_example(self):
        params = RouterParams(np.array([[2.0, -1.0], [0.0, 3.0]]), np.array([0.5, 0.5]))
        logits = route_logits(np.array([1.0, 0.0]), params)
        np.testing.assert_array_equal(logits, [2.5, -0.5])

    def test_shape_mismatch_rejected(self):
        params = RouterParams(np.zeros((4, 2)), np.zeros(2))
        with pytest.raises(ValueError, match="router expects"):
            route_logits(np.zeros(3), params)

    def test_json_round_trip(self, tmp_path):
        rng = np.random.default_rng(3)
        params = RouterParams(rng.normal(size=(5, 3)), rng.normal(size=3))
        path = tmp_path / "router.json"
        save_router(params, path)
        loaded = load_router(path)
        np.testing.assert_array_equal(loaded.weights, params.weights)
        np.testing.assert_array_equal(loaded.bias, params.bias)

    def test_malformed_document_rejected(self, tmp_path):
        path = tmp_path / "router.json"
        path.write_text('{"dim_in": 2, "n_experts": 2, "weights": [1, 2, 3], "bias": [0, 0]}')
        with pytest.raises(ValueError, match="length"):
            load_router(path)


class TestClipEncode:
    def test_zero_image_gives_zero_cls(self):
        image = ImageGrid(np.zeros((16, 16, 3)))
        out = clip_encode(image, ToyClipParams(seed=0, tokens=16, dim=8))
        assert np.all(out.cls == 0.0)
        assert np.all(out.patches.values == 0.0)

    def test_cls_is_column_mean_of_patches(self):
        rng = np.random.default_rng(4)
        image = ImageGrid(rng.random((24, 24, 3)))
        out = clip_encode(image, ToyClipParams(seed=7, tokens=16, dim=6))
        np.testing.assert_array_equal(out.cls, out.patches.values.mean(axis=0))
        assert out.patches.source == "clip-patch"

    def test_canonical_geometry_from_non_dividing_image(self):
        # 64x64 image with a 24x24 canonical grid: native 16x16 grid upsampled.
        rng = np.random.default_rng(5)
        image = ImageGrid(rng.random((64, 64, 3)))
        out = clip_encode(image, ToyClipParams(seed=1, tokens=576, dim=16))
        assert out.patches.tokens == 576
        assert out.patches.dim == 16

    def test_deterministic(self):
        rng = np.random.default_rng(6)
        image = ImageGrid(rng.random((32, 32, 3)))
        params = ToyClipParams(seed=3, tokens=64, dim=12)
        a = clip_encode(image, params)
        b = clip_encode(image, params)
        assert a.patches.values.tobytes() == b.patches.values.tobytes()
        assert a.cls.tobytes() == b.cls.tobytes()

    def test_cls_shape_validation(self):
        from routebench.experts import FeatureMap

        with pytest.raises(ValueError, match="cls shape"):
            ClipOutput(cls=np.zeros(3), patches=FeatureMap(np.ones((4, 2)), source="clip-patch"))
