"""Fusing expert feature maps back into the base patch features.

Three strategies are supported:

* ``routed``: softmax routing weights (optionally top-k masked) blend the
  aligned expert maps into a weighted sum, which is then added to the base
  patch features.
* ``add``: plain unweighted sum of the expert maps plus the base features, a
  routing-free baseline.
* ``concat``: expert maps stacked along the feature axis (column blocks in
  expert-id order) and handed straight to the projector, which must expect
  the widened input.

Whatever the strategy, a two-layer MLP projector (tanh-approximated GELU in
the middle) produces the final feature map.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .experts import (
    FeatureMap,
    ImageGrid,
    LinearAdapter,
    ToyExpertSpec,
    adapt_dim,
    encode_toy_expert,
    identity_adapter,
    resample_tokens,
    seeded_adapter,
)
from .router import (
    ClipOutput,
    RouterParams,
    RoutingWeights,
    ToyClipParams,
    clip_encode,
    route_logits,
    routing_weights,
    select_top_k,
)

FUSION_KINDS = ("routed", "add", "concat")

_GELU_SCALE = math.sqrt(2.0 / math.pi)
_GELU_CUBIC = 0.044715

PIPELINE_STAGES = ("encode", "align", "route", "fuse", "project")


def gelu(x: np.ndarray) -> np.ndarray:
    """tanh-approximated GELU, the projector nonlinearity."""
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * x * (1.0 + np.tanh(_GELU_SCALE * (x + _GELU_CUBIC * x**3)))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    u = _GELU_SCALE * (x + _GELU_CUBIC * x**3)
    th = np.tanh(u)
    du = _GELU_SCALE * (1.0 + 3.0 * _GELU_CUBIC * x**2)
    return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th**2) * du


@dataclass(frozen=True)
class FusionStrategy:
    """Which fusion path to run; ``k`` only applies to ``routed``."""

    kind: str
    k: Optional[int] = None

    def __post_init__(self):
        if self.kind not in FUSION_KINDS:
            raise ValueError(
                f"unknown fusion kind {self.kind!r}; valid kinds: {', '.join(FUSION_KINDS)}"
            )
        if self.k is not None:
            if self.kind != "routed":
                raise ValueError(f"k is only meaningful for routed fusion, not {self.kind!r}")
            if self.k < 1:
                raise ValueError(f"k must be positive, got {self.k}")


@dataclass(frozen=True, eq=False)
class ProjectorParams:
    """Two-layer MLP: stage1 -> GELU -> stage2."""

    stage1: LinearAdapter
    stage2: LinearAdapter

    def __post_init__(self):
        if self.stage1.out_dim != self.stage2.in_dim:
            raise ValueError(
                f"projector stages do not compose: stage1 emits {self.stage1.out_dim}, "
                f"stage2 expects {self.stage2.in_dim}"
            )


class PipelineError(RuntimeError):
    """A pipeline stage failed; the message is prefixed with the stage name."""


def weighted_fuse(routing: RoutingWeights, experts: list[FeatureMap]) -> FeatureMap:
    """Weighted sum of aligned expert maps.

    Experts whose weight is exactly zero are skipped entirely, so masked
    experts cannot influence the result.  Accumulation runs in expert-id
    order, which keeps the output byte-reproducible.
    """
    if len(experts) != routing.n_experts:
        raise ValueError(
            f"{routing.n_experts} routing weights for {len(experts)} expert maps"
        )
    if not experts:
        raise ValueError("cannot fuse an empty expert list")
    shape = (experts[0].tokens, experts[0].dim)
    for i, fm in enumerate(experts):
        if (fm.tokens, fm.dim) != shape:
            raise ValueError(
                f"expert {i}: shape ({fm.tokens}, {fm.dim}) does not match expert 0 shape {shape}"
            )
    acc = np.zeros(shape)
    for i, fm in enumerate(experts):
        w = routing.weights[i]
        if w != 0.0:
            acc += w * fm.values
    return FeatureMap(acc, source="fused")


def fuse_add(experts: list[FeatureMap]) -> FeatureMap:
    """Unweighted sum baseline."""
    if not experts:
        raise ValueError("cannot fuse an empty expert list")
    shape = (experts[0].tokens, experts[0].dim)
    for i, fm in enumerate(experts):
        if (fm.tokens, fm.dim) != shape:
            raise ValueError(
                f"expert {i}: shape ({fm.tokens}, {fm.dim}) does not match expert 0 shape {shape}"
            )
    acc = np.zeros(shape)
    for fm in experts:
        acc += fm.values
    return FeatureMap(acc, source="fused")


def fuse_concat(experts: list[FeatureMap]) -> FeatureMap:
    """Stack expert maps along the feature axis in expert-id order."""
    if not experts:
        raise ValueError("cannot fuse an empty expert list")
    tokens = experts[0].tokens
    for i, fm in enumerate(experts):
        if fm.tokens != tokens:
            raise ValueError(
                f"expert {i}: token count {fm.tokens} does not match expert 0 count {tokens}"
            )
    return FeatureMap(np.concatenate([fm.values for fm in experts], axis=1), source="fused")


def residual_merge(patches: FeatureMap, fused: FeatureMap) -> FeatureMap:
    """Add the fused expert signal back onto the base patch features."""
    if (patches.tokens, patches.dim) != (fused.tokens, fused.dim):
        raise ValueError(
            f"cannot merge shapes ({patches.tokens}, {patches.dim}) and "
            f"({fused.tokens}, {fused.dim})"
        )
    return FeatureMap(patches.values + fused.values, source="fused")


def project(fm: FeatureMap, params: ProjectorParams) -> FeatureMap:
    """Run the two-layer MLP projector over every token."""
    if params.stage1.in_dim != fm.dim:
        raise ValueError(
            f"projector expects {params.stage1.in_dim} input features, feature map has {fm.dim}"
        )
    hidden = gelu(fm.values @ params.stage1.weights + params.stage1.bias)
    out = hidden @ params.stage2.weights + params.stage2.bias
    return FeatureMap(out, source=fm.source)


@dataclass(frozen=True, eq=False)
class PipelineConfig:
    """Everything needed to run an image through the full pipeline.

    Expert ids must be 0..N-1 in list order.  ``clip_seed`` parameterizes the
    toy base encoder that produces the context vector and residual patches.
    Per-expert width adapters are derived, not configured: experts whose
    native_dim already matches ``canonical_dim`` pass through identically,
    everything else gets a seeded adapter keyed by the expert's seed.
    """

    experts: tuple
    router: RouterParams
    strategy: FusionStrategy
    projector: ProjectorParams
    canonical_tokens: int = 576
    canonical_dim: int = 1024
    clip_seed: int = 0

    def __post_init__(self):
        experts = tuple(self.experts)
        if not experts:
            raise ValueError("pipeline needs at least one expert")
        for i, spec in enumerate(experts):
            if spec.id != i:
                raise ValueError(
                    f"expert ids must be 0..{len(experts) - 1} in order; position {i} has id {spec.id}"
                )
        if self.router.dim_in != self.canonical_dim:
            raise ValueError(
                f"router dim_in {self.router.dim_in} does not match canonical_dim {self.canonical_dim}"
            )
        if self.router.n_experts != len(experts):
            raise ValueError(
                f"router expects {self.router.n_experts} experts, config lists {len(experts)}"
            )
        if self.strategy.kind == "routed" and self.strategy.k is not None:
            if self.strategy.k > len(experts):
                raise ValueError(
                    f"top-k {self.strategy.k} exceeds expert count {len(experts)}"
                )
        expected_in = (
            self.canonical_dim * len(experts)
            if self.strategy.kind == "concat"
            else self.canonical_dim
        )
        if self.projector.stage1.in_dim != expected_in:
            raise ValueError(
                f"projector stage1 expects {self.projector.stage1.in_dim} features, "
                f"{self.strategy.kind} fusion produces {expected_in}"
            )
        object.__setattr__(self, "experts", experts)

    def clip_params(self) -> ToyClipParams:
        return ToyClipParams(
            seed=self.clip_seed, tokens=self.canonical_tokens, dim=self.canonical_dim
        )

    def expert_adapter(self, spec: ToyExpertSpec) -> LinearAdapter:
        if spec.native_dim == self.canonical_dim:
            return identity_adapter(self.canonical_dim)
        return seeded_adapter(spec.native_dim, self.canonical_dim, seed=spec.seed)


@dataclass(frozen=True, eq=False)
class PipelineResult:
    features: FeatureMap
    routing: RoutingWeights
    stage_seconds: dict


def _adapter_from_json(doc: dict, what: str) -> LinearAdapter:
    try:
        weights = np.asarray(doc["weights"], dtype=np.float64)
        bias = np.asarray(doc["bias"], dtype=np.float64)
        in_dim = int(doc["in_dim"])
        out_dim = int(doc["out_dim"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ValueError(f"malformed {what}: {exc}") from exc
    if weights.size != in_dim * out_dim:
        raise ValueError(
            f"{what}: weights length {weights.size} does not match {in_dim}x{out_dim}"
        )
    return LinearAdapter(weights.reshape(in_dim, out_dim), bias)


def _adapter_to_json(adapter: LinearAdapter) -> dict:
    return {
        "in_dim": adapter.in_dim,
        "out_dim": adapter.out_dim,
        "weights": [float(v) for v in adapter.weights.ravel()],
        "bias": [float(v) for v in adapter.bias],
    }


def _projector_from_json(doc: dict, in_dim: int, out_default: int) -> ProjectorParams:
    if doc.get("init") == "seeded":
        seed = int(doc.get("seed", 0))
        hidden = int(doc.get("hidden_dim", out_default))
        out = int(doc.get("out_dim", out_default))
        return ProjectorParams(
            stage1=seeded_adapter(in_dim, hidden, seed=seed),
            stage2=seeded_adapter(hidden, out, seed=seed + 1),
        )
    return ProjectorParams(
        stage1=_adapter_from_json(doc["stage1"], "projector stage1"),
        stage2=_adapter_from_json(doc["stage2"], "projector stage2"),
    )


def _router_from_json(doc: dict, dim_in: int, n_experts: int) -> RouterParams:
    if doc.get("init") == "seeded":
        seed = int(doc.get("seed", 0))
        adapter = seeded_adapter(dim_in, n_experts, seed=seed)
        return RouterParams(adapter.weights, adapter.bias)
    return RouterParams.from_json_dict(doc)


def pipeline_config_from_json(doc: dict) -> PipelineConfig:
    """Build a PipelineConfig from its JSON document form.

    ``router`` and ``projector`` accept either explicit weight documents or
    ``{"init": "seeded", "seed": ..., ...}`` for derived parameters.
    """
    try:
        expert_docs = doc["experts"]
        strategy_doc = doc["strategy"]
        canonical_tokens = int(doc.get("canonical_tokens", 576))
        canonical_dim = int(doc.get("canonical_dim", 1024))
        clip_seed = int(doc.get("clip_seed", 0))
    except (KeyError, TypeError, ValueError) as exc:
        raise ValueError(f"malformed pipeline config: {exc}") from exc
    experts = tuple(
        ToyExpertSpec(
            id=int(e["id"]),
            persona=str(e["persona"]),
            seed=int(e["seed"]),
            native_tokens=int(e["native_tokens"]),
            native_dim=int(e["native_dim"]),
        )
        for e in expert_docs
    )
    strategy = FusionStrategy(
        kind=str(strategy_doc["kind"]),
        k=None if strategy_doc.get("k") is None else int(strategy_doc["k"]),
    )
    router = _router_from_json(doc["router"], canonical_dim, len(experts))
    proj_in = canonical_dim * len(experts) if strategy.kind == "concat" else canonical_dim
    projector = _projector_from_json(doc["projector"], proj_in, canonical_dim)
    return PipelineConfig(
        experts=experts,
        router=router,
        strategy=strategy,
        projector=projector,
        canonical_tokens=canonical_tokens,
        canonical_dim=canonical_dim,
        clip_seed=clip_seed,
    )


def pipeline_config_to_json(config: PipelineConfig) -> dict:
    return {
        "experts": [
            {
                "id": e.id,
                "persona": e.persona,
                "seed": e.seed,
                "native_tokens": e.native_tokens,
                "native_dim": e.native_dim,
            }
            for e in config.experts
        ],
        "router": config.router.to_json_dict(),
        "strategy": {"kind": config.strategy.kind, "k": config.strategy.k},
        "projector": {
            "stage1": _adapter_to_json(config.projector.stage1),
            "stage2": _adapter_to_json(config.projector.stage2),
        },
        "canonical_tokens": config.canonical_tokens,
        "canonical_dim": config.canonical_dim,
        "clip_seed": config.clip_seed,
    }


def load_pipeline_config(path) -> PipelineConfig:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    return pipeline_config_from_json(doc)


def _aligned_expert_maps(image: ImageGrid, config: PipelineConfig, native):
    aligned = []
    for spec, fm in zip(config.experts, native):
        fm = resample_tokens(fm, config.canonical_tokens)
        adapter = config.expert_adapter(spec)
        if spec.native_dim != config.canonical_dim:
            fm = adapt_dim(fm, adapter)
        aligned.append(fm)
    return aligned


def run_pipeline(image: ImageGrid, config: PipelineConfig) -> PipelineResult:
    """Run encode -> align -> route -> fuse -> project and report timings.

    Stage failures re-raise as :class:`PipelineError` with the stage name
    prefixed.  Expert encodings are combined in expert-id order, so results
    are deterministic for a fixed (image, config) pair.
    """
    timings: dict[str, float] = {}

    def staged(stage, fn):
        start = time.perf_counter()
        try:
            result = fn()
        except Exception as exc:
            raise PipelineError(f"{stage}: {exc}") from exc
        timings[stage] = time.perf_counter() - start
        return result

    native = staged(
        "encode", lambda: [encode_toy_expert(image, spec) for spec in config.experts]
    )
    aligned = staged("align", lambda: _aligned_expert_maps(image, config, native))

    def route_stage():
        clip = clip_encode(image, config.clip_params())
        logits = route_logits(clip.cls, config.router)
        weights = routing_weights(logits)
        if config.strategy.kind == "routed" and config.strategy.k is not None:
            weights = select_top_k(weights, config.strategy.k)
        return clip, weights

    clip, weights = staged("route", route_stage)

    def fuse_stage():
        if config.strategy.kind == "routed":
            return residual_merge(clip.patches, weighted_fuse(weights, aligned))
        if config.strategy.kind == "add":
            return residual_merge(clip.patches, fuse_add(aligned))
        return fuse_concat(aligned)

    fused = staged("fuse", fuse_stage)
    features = staged("project", lambda: project(fused, config.projector))
    return PipelineResult(features=features, routing=weights, stage_seconds=timings)
