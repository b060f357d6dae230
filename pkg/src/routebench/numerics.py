"""Numerical verification for the routing pipeline.

Two harnesses live here:

* a gradient checker that backpropagates a scalar loss (sum of squared output
  features) through route -> fuse -> merge -> project analytically, then
  compares every parameter coordinate against central finite differences;
* a latency harness that medians per-stage wall-clock timings over repeated
  pipeline runs.

The analytic path relies on the softmax Jacobian diag(w) - w w^T and the
tanh-GELU derivative; both have their own unit checks.  Relative error uses
|analytic - fd| / max(1, |analytic|, |fd|), so tiny gradients are compared
absolutely and large ones relatively.
"""

from __future__ import annotations

import statistics
from dataclasses import dataclass

import numpy as np

from .experts import (
    ImageGrid,
    LinearAdapter,
    ToyExpertSpec,
    adapt_dim,
    encode_toy_expert,
    resample_tokens,
)
from .fusion import (
    FusionStrategy,
    PipelineConfig,
    ProjectorParams,
    gelu,
    gelu_grad,
    run_pipeline,
)
from .router import RouterParams, clip_encode

CHECKED_PARAMS = (
    "router.weights",
    "router.bias",
    "projector.stage1.weights",
    "projector.stage2.weights",
)


@dataclass(frozen=True)
class GradCheckReport:
    parameter_name: str
    max_rel_error: float
    mean_rel_error: float
    n_coordinates: int
    threshold: float
    passed: bool
    degenerate: bool = False

    def to_json_dict(self) -> dict:
        return {
            "parameter_name": self.parameter_name,
            "max_rel_error": self.max_rel_error,
            "mean_rel_error": self.mean_rel_error,
            "n_coordinates": self.n_coordinates,
            "threshold": self.threshold,
            "passed": self.passed,
            "degenerate": self.degenerate,
        }


@dataclass(frozen=True)
class LatencyReport:
    strategy: str
    prefill_ms: float
    per_stage_ms: dict
    repeats: int

    def to_json_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "prefill_ms": self.prefill_ms,
            "per_stage_ms": dict(self.per_stage_ms),
            "repeats": self.repeats,
        }


def softmax_jacobian(weights: np.ndarray) -> np.ndarray:
    """Jacobian of softmax at the point with output ``weights``."""
    w = np.asarray(weights, dtype=np.float64)
    return np.diag(w) - np.outer(w, w)


def _stable_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max()
    exp = np.exp(shifted)
    return exp / exp.sum()


def finite_diff_gradient(fn, point: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function at ``point``."""
    point = np.asarray(point, dtype=np.float64)
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    flat = point.ravel().copy()
    grad = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        f_plus = float(fn(flat.reshape(point.shape)))
        flat[i] = orig - eps
        f_minus = float(fn(flat.reshape(point.shape)))
        flat[i] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise ValueError(f"non-finite loss while perturbing coordinate {i}")
        grad[i] = (f_plus - f_minus) / (2.0 * eps)
    return grad.reshape(point.shape)


def _rel_error(analytic: np.ndarray, fd: np.ndarray) -> np.ndarray:
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(fd)))
    return np.abs(analytic - fd) / denom


class _RoutedChain:
    """Precomputed inputs and the differentiable tail of a routed pipeline.

    Expert maps, patches, and cls are constants with respect to the checked
    parameters, so they are computed once; forward/backward only rebuild the
    route -> fuse -> merge -> project tail.
    """

    def __init__(self, image: ImageGrid, config: PipelineConfig):
        if config.strategy.kind != "routed":
            raise ValueError(
                f"gradient check requires routed fusion, config uses {config.strategy.kind!r}"
            )
        if config.strategy.k is not None and config.strategy.k != len(config.experts):
            raise ValueError(
                "gradient check requires soft routing over all experts (k = None or k = N)"
            )
        aligned = []
        for spec in config.experts:
            fm = encode_toy_expert(image, spec)
            fm = resample_tokens(fm, config.canonical_tokens)
            if spec.native_dim != config.canonical_dim:
                fm = adapt_dim(fm, config.expert_adapter(spec))
            aligned.append(fm.values)
        self.z = np.stack(aligned)  # (N, T, D)
        clip = clip_encode(image, config.clip_params())
        self.patches = clip.patches.values
        self.cls = clip.cls
        self.config = config

    def params(self) -> dict:
        c = self.config
        return {
            "router.weights": c.router.weights,
            "router.bias": c.router.bias,
            "projector.stage1.weights": c.projector.stage1.weights,
            "projector.stage2.weights": c.projector.stage2.weights,
        }

    def loss(self, overrides: dict | None = None) -> float:
        p = self.params()
        if overrides:
            p = {**p, **overrides}
        c = self.config
        logits = self.cls @ p["router.weights"] + p["router.bias"]
        w = _stable_softmax(logits)
        y = np.zeros_like(self.z[0])
        for i in range(self.z.shape[0]):
            y += w[i] * self.z[i]
        merged = self.patches + y
        hidden = merged @ p["projector.stage1.weights"] + c.projector.stage1.bias
        act = gelu(hidden)
        out = act @ p["projector.stage2.weights"] + c.projector.stage2.bias
        return float((out**2).sum())

    def analytic_gradients(self) -> dict:
        p = self.params()
        c = self.config
        logits = self.cls @ p["router.weights"] + p["router.bias"]
        w = _stable_softmax(logits)
        y = np.zeros_like(self.z[0])
        for i in range(self.z.shape[0]):
            y += w[i] * self.z[i]
        merged = self.patches + y
        hidden = merged @ p["projector.stage1.weights"] + c.projector.stage1.bias
        act = gelu(hidden)
        out = act @ p["projector.stage2.weights"] + c.projector.stage2.bias

        d_out = 2.0 * out
        d_stage2 = act.T @ d_out
        d_act = d_out @ p["projector.stage2.weights"].T
        d_hidden = d_act * gelu_grad(hidden)
        d_stage1 = merged.T @ d_hidden
        d_merged = d_hidden @ p["projector.stage1.weights"].T
        d_w = np.array([(d_merged * self.z[i]).sum() for i in range(self.z.shape[0])])
        d_logits = w * (d_w - float(w @ d_w))
        d_router_w = np.outer(self.cls, d_logits)
        return {
            "router.weights": d_router_w,
            "router.bias": d_logits,
            "projector.stage1.weights": d_stage1,
            "projector.stage2.weights": d_stage2,
        }


def check_router_fusion_gradients(
    config: PipelineConfig,
    image: ImageGrid,
    seed: int = 0,
    eps: float = 1e-5,
    threshold: float = 1e-6,
    max_coords_per_param: int | None = None,
) -> list[GradCheckReport]:
    """Compare analytic and central-difference gradients coordinate by
    coordinate for the router and projector weights.

    All coordinates are checked unless ``max_coords_per_param`` caps them, in
    which case a ``seed``-drawn subset is used.  The config must route softly
    over all experts.
    """
    chain = _RoutedChain(image, config)
    analytic = chain.analytic_gradients()
    degenerate_router = bool(np.all(chain.z == 0.0))
    rng = np.random.default_rng(seed)
    reports = []
    for name in CHECKED_PARAMS:
        base = chain.params()[name]
        grad_a = analytic[name].ravel()
        flat = base.ravel().copy()
        coords = np.arange(flat.size)
        if max_coords_per_param is not None and flat.size > max_coords_per_param:
            coords = np.sort(rng.choice(flat.size, size=max_coords_per_param, replace=False))
        errors = np.empty(coords.size)
        for pos, i in enumerate(coords):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = chain.loss({name: flat.reshape(base.shape)})
            flat[i] = orig - eps
            f_minus = chain.loss({name: flat.reshape(base.shape)})
            flat[i] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise ValueError(
                    f"non-finite loss while perturbing {name} coordinate {i}"
                )
            fd = (f_plus - f_minus) / (2.0 * eps)
            errors[pos] = _rel_error(np.array(grad_a[i]), np.array(fd))
        max_err = float(errors.max())
        reports.append(
            GradCheckReport(
                parameter_name=name,
                max_rel_error=max_err,
                mean_rel_error=float(errors.mean()),
                n_coordinates=int(coords.size),
                threshold=threshold,
                passed=max_err < threshold,
                degenerate=degenerate_router and name.startswith("router."),
            )
        )
    return reports


def small_gradcheck_config(seed: int):
    """A seeded small pipeline (T<=16, D<=8, N<=4) plus a matching image.

    Used by the gradcheck CLI and the verification suite; shapes stay tiny so
    exhaustive coordinate checking is cheap.
    """
    rng = np.random.default_rng(seed)
    n_experts = int(rng.integers(2, 5))
    tokens = int(rng.choice([4, 16]))
    dim = int(rng.choice([4, 8]))
    personas = [
        "global-context",
        "color-histogram",
        "edge-shape",
        "patch-statistics",
        "text-stripe",
        "random-projection",
    ]
    experts = tuple(
        ToyExpertSpec(
            id=i,
            persona=personas[int(rng.integers(0, len(personas)))],
            seed=int(rng.integers(0, 2**31)),
            native_tokens=tokens,
            native_dim=int(rng.choice([6, dim])),
        )
        for i in range(n_experts)
    )
    router = RouterParams(
        rng.normal(scale=0.5, size=(dim, n_experts)), rng.normal(scale=0.1, size=n_experts)
    )
    hidden = int(rng.choice([4, 8]))
    projector = ProjectorParams(
        stage1=LinearAdapter(rng.normal(scale=0.4, size=(dim, hidden)), rng.normal(scale=0.1, size=hidden)),
        stage2=LinearAdapter(rng.normal(scale=0.4, size=(hidden, dim)), rng.normal(scale=0.1, size=dim)),
    )
    config = PipelineConfig(
        experts=experts,
        router=router,
        strategy=FusionStrategy(kind="routed"),
        projector=projector,
        canonical_tokens=tokens,
        canonical_dim=dim,
        clip_seed=int(rng.integers(0, 2**31)),
    )
    side = 4 if tokens == 16 else 2
    size = side * int(rng.choice([2, 4]))
    image = ImageGrid(rng.random((size, size, 3)))
    return config, image


def fit_router_demo(
    cls: np.ndarray, target: np.ndarray, steps: int = 50, lr: float = 0.5, seed: int = 0
) -> list[float]:
    """Gradient-descend a fresh router toward target mixture weights.

    Returns the squared-error loss trajectory (length ``steps + 1``).  This is
    a usability check on the analytic gradients, not an optimizer benchmark.
    """
    cls = np.asarray(cls, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    rng = np.random.default_rng(seed)
    weights = rng.normal(scale=0.1, size=(cls.size, target.size))
    bias = np.zeros(target.size)
    losses = []
    for _ in range(steps + 1):
        logits = cls @ weights + bias
        w = _stable_softmax(logits)
        diff = w - target
        losses.append(float(diff @ diff))
        d_logits = softmax_jacobian(w).T @ (2.0 * diff)
        weights = weights - lr * np.outer(cls, d_logits)
        bias = bias - lr * d_logits
    return losses


def measure_fusion_latency(
    config: PipelineConfig, image: ImageGrid, repeats: int = 5
) -> LatencyReport:
    """Median per-stage and total pipeline wall time over ``repeats`` runs."""
    if repeats < 3:
        raise ValueError(f"repeats must be at least 3, got {repeats}")
    stage_times: dict[str, list[float]] = {}
    totals = []
    for _ in range(repeats):
        result = run_pipeline(image, config)
        totals.append(sum(result.stage_seconds.values()))
        for stage, seconds in result.stage_seconds.items():
            stage_times.setdefault(stage, []).append(seconds)
    return LatencyReport(
        strategy=config.strategy.kind,
        prefill_ms=statistics.median(totals) * 1e3,
        per_stage_ms={s: statistics.median(v) * 1e3 for s, v in stage_times.items()},
        repeats=repeats,
    )
