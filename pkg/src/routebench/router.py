"""Context-driven expert routing.

A toy CLIP-style encoder summarizes the image as a patch feature map plus a
context vector (the mean of the patch rows).  A single linear layer maps the
context vector to one logit per expert, and a numerically stable softmax turns
the logits into mixture weights on the probability simplex.  Optionally only
the top-k experts are kept, with the surviving weights renormalized.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .experts import FeatureMap, ImageGrid, ToyExpertSpec, encode_toy_expert, resample_tokens


@dataclass(frozen=True)
class ToyClipParams:
    """Geometry and seed of the toy base encoder.

    ``tokens`` and ``dim`` fix the canonical aligned grid.  The patch features
    come from a seeded random projection of the pixels, computed on the
    largest image-dividing grid no finer than the canonical one and then
    resampled up to it.
    """

    seed: int
    tokens: int = 576
    dim: int = 1024

    def __post_init__(self):
        side = math.isqrt(self.tokens)
        if self.tokens < 1 or side * side != self.tokens:
            raise ValueError(f"tokens must be a positive perfect square, got {self.tokens}")
        if self.dim < 1:
            raise ValueError(f"dim must be positive, got {self.dim}")


@dataclass(frozen=True, eq=False)
class ClipOutput:
    """Base encoder output: context vector plus patch feature map."""

    cls: np.ndarray
    patches: FeatureMap

    def __post_init__(self):
        cls = np.asarray(self.cls, dtype=np.float64)
        if cls.shape != (self.patches.dim,):
            raise ValueError(
                f"cls shape {cls.shape} does not match patch width {self.patches.dim}"
            )
        object.__setattr__(self, "cls", cls)


@dataclass(frozen=True, eq=False)
class RouterParams:
    """Linear routing head: logits = cls @ weights + bias."""

    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        b = np.asarray(self.bias, dtype=np.float64)
        if w.ndim != 2 or w.shape[0] < 1 or w.shape[1] < 1:
            raise ValueError(f"router weights must be 2-D and non-empty, got shape {w.shape}")
        if b.shape != (w.shape[1],):
            raise ValueError(
                f"router bias shape {b.shape} does not match expert count {w.shape[1]}"
            )
        if not (np.isfinite(w).all() and np.isfinite(b).all()):
            raise ValueError("router parameters contain non-finite values")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)

    @property
    def dim_in(self) -> int:
        return self.weights.shape[0]

    @property
    def n_experts(self) -> int:
        return self.weights.shape[1]

    def to_json_dict(self) -> dict:
        return {
            "dim_in": self.dim_in,
            "n_experts": self.n_experts,
            "weights": [float(v) for v in self.weights.ravel()],
            "bias": [float(v) for v in self.bias],
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "RouterParams":
        try:
            dim_in = int(doc["dim_in"])
            n_experts = int(doc["n_experts"])
            weights = np.asarray(doc["weights"], dtype=np.float64)
            bias = np.asarray(doc["bias"], dtype=np.float64)
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"malformed router document: {exc}") from exc
        if weights.size != dim_in * n_experts:
            raise ValueError(
                f"router weights length {weights.size} does not match "
                f"dim_in*n_experts = {dim_in * n_experts}"
            )
        return cls(weights.reshape(dim_in, n_experts), bias)


def load_router(path) -> RouterParams:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    return RouterParams.from_json_dict(doc)


def save_router(params: RouterParams, path) -> None:
    Path(path).write_text(json.dumps(params.to_json_dict(), indent=2) + "\n", encoding="utf-8")


@dataclass(frozen=True, eq=False)
class RoutingWeights:
    """A point on the expert simplex plus the set of active expert ids."""

    weights: np.ndarray
    active: frozenset

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 1 or w.size < 1:
            raise ValueError("routing weights must be a non-empty vector")
        if not np.isfinite(w).all():
            raise ValueError("routing weights contain non-finite values")
        if w.min() < 0.0 or w.max() > 1.0:
            raise ValueError("routing weights must lie in [0, 1]")
        if abs(float(w.sum()) - 1.0) > 1e-9:
            raise ValueError(f"routing weights must sum to 1, got {w.sum()!r}")
        active = frozenset(int(i) for i in self.active)
        if not active <= set(range(w.size)):
            raise ValueError(f"active set {sorted(active)} out of range for {w.size} experts")
        inactive = [i for i in range(w.size) if i not in active and w[i] != 0.0]
        if inactive:
            raise ValueError(f"inactive experts carry non-zero weight: {inactive}")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "active", active)

    @property
    def n_experts(self) -> int:
        return self.weights.size


def _native_clip_grid(image: ImageGrid, target_side: int) -> int:
    g = math.gcd(image.height, image.width)
    best = 1
    for d in range(1, g + 1):
        if g % d == 0 and d <= target_side:
            best = d
    return best


def clip_encode(image: ImageGrid, params: ToyClipParams) -> ClipOutput:
    """Encode the image into canonical patch features and a context vector.

    The context vector is the column-wise mean of the patch rows, so it lives
    in the same feature space the router head was trained against.
    """
    side = math.isqrt(params.tokens)
    native_side = _native_clip_grid(image, side)
    spec = ToyExpertSpec(
        id=0,
        persona="random-projection",
        seed=params.seed,
        native_tokens=native_side * native_side,
        native_dim=params.dim,
    )
    fm = encode_toy_expert(image, spec)
    fm = resample_tokens(fm, params.tokens)
    patches = FeatureMap(fm.values, source="clip-patch")
    return ClipOutput(cls=patches.values.mean(axis=0), patches=patches)


def route_logits(cls: np.ndarray, params: RouterParams) -> np.ndarray:
    """One affinity logit per expert from the context vector."""
    cls = np.asarray(cls, dtype=np.float64)
    if cls.shape != (params.dim_in,):
        raise ValueError(
            f"cls has shape {cls.shape}, router expects ({params.dim_in},)"
        )
    if not np.isfinite(cls).all():
        raise ValueError("cls contains non-finite values")
    return cls @ params.weights + params.bias


def routing_weights(logits: np.ndarray) -> RoutingWeights:
    """Numerically stable softmax over expert logits.

    The maximum logit is subtracted before exponentiation, which leaves the
    result unchanged mathematically but keeps it finite for logits of any
    magnitude.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 1 or logits.size < 1:
        raise ValueError("logits must be a non-empty vector")
    if not np.isfinite(logits).all():
        raise ValueError("logits contain non-finite values")
    shifted = logits - logits.max()
    exp = np.exp(shifted)
    weights = exp / exp.sum()
    return RoutingWeights(weights, frozenset(range(logits.size)))


def select_top_k(routing: RoutingWeights, k: int) -> RoutingWeights:
    """Keep the k largest weights (ties broken by lower expert id), renormalize.

    Masked experts get exactly 0 so downstream fusion can skip them.
    """
    n = routing.n_experts
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    if k == n:
        return RoutingWeights(routing.weights.copy(), frozenset(range(n)))
    order = np.argsort(-routing.weights, kind="stable")
    kept = np.sort(order[:k])
    mask = np.zeros(n, dtype=bool)
    mask[kept] = True
    total = routing.weights[mask].sum()
    out = np.where(mask, routing.weights / total, 0.0)
    return RoutingWeights(out, frozenset(int(i) for i in kept))
