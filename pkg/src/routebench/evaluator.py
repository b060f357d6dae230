"""Caption-pair judging over pipeline features.

A sample is judged by scoring the perplexity of its factual caption R and its
hallucinated caption H against the same image features: the judge flags an
error exactly when PPL(R) > PPL(H), i.e. when the scorer finds the
hallucinated caption more plausible (ties count as correct).  Per-category
error rates aggregate judgements into reports, with an optional cross-run
min-max normalization for radar-style comparisons.

Scorers are pluggable: anything with ``score(features, caption) -> [nll]``
(one non-negative natural-log NLL per whitespace token) works.  Three toy
scorers ship here: a ground-truth oracle (and its negation) for protocol
tests, a seeded coin-flip scorer, and an affinity scorer that ties caption
keywords to statistics of the fused feature map, making routing choices
visible in the error rates.
"""

from __future__ import annotations

import hashlib
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .benchmark import (
    COLORS,
    COUNT_WORDS,
    HORIZONTAL_RELATIONS,
    INTERACTION_WORDS,
    LABEL_WORDS,
    SHAPES,
    VERTICAL_RELATIONS,
    BenchmarkSample,
    DatasetError,
    HallucinationCategory,
    ImageRef,
    rasterize,
)
from .experts import (
    PERSONAS,
    FeatureMap,
    ImageGrid,
    ToyExpertSpec,
    identity_adapter,
    load_raw_image,
)
from .fusion import FusionStrategy, PipelineConfig, ProjectorParams, run_pipeline
from .router import RouterParams

# How a caption would be framed for a real captioning model.  Toy scorers do
# not interpret the framing; it travels as judgement metadata only.
PROMPT_TEMPLATE = "<image>\nDescribe the image: {caption}"


class EvaluationError(RuntimeError):
    """A sample could not be judged; messages carry the sample id."""


def perplexity(nlls) -> float:
    """exp(mean NLL); 1.0 for perfectly-certain captions, >= 1 always."""
    arr = np.asarray(list(nlls), dtype=np.float64)
    if arr.size == 0:
        raise ValueError("perplexity needs at least one NLL")
    if not np.isfinite(arr).all():
        raise ValueError("NLLs must be finite")
    if (arr < 0).any():
        raise ValueError("NLLs must be non-negative")
    return float(np.exp(arr.mean()))


@dataclass(frozen=True)
class Judgement:
    sample_id: str
    ppl_real: float
    ppl_hall: float
    is_error: bool
    category: HallucinationCategory
    prompt_template: str = PROMPT_TEMPLATE

    def __post_init__(self):
        if self.is_error != (self.ppl_real > self.ppl_hall):
            raise ValueError(
                f"sample {self.sample_id}: is_error={self.is_error} inconsistent with "
                f"ppl_real={self.ppl_real} vs ppl_hall={self.ppl_hall}"
            )

    def to_json_dict(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "ppl_real": self.ppl_real,
            "ppl_hall": self.ppl_hall,
            "is_error": self.is_error,
            "category": self.category.value,
        }


def judge_sample(scorer, pipeline_output: FeatureMap, sample: BenchmarkSample) -> Judgement:
    """Score both captions against the same features and apply the error rule."""
    try:
        ppl_real = perplexity(scorer.score(pipeline_output, sample.real_caption))
        ppl_hall = perplexity(scorer.score(pipeline_output, sample.hallucinated_caption))
    except EvaluationError:
        raise
    except Exception as exc:
        raise EvaluationError(f"sample {sample.id}: {exc}") from exc
    return Judgement(
        sample_id=sample.id,
        ppl_real=ppl_real,
        ppl_hall=ppl_hall,
        is_error=ppl_real > ppl_hall,
        category=sample.category,
    )


@dataclass(frozen=True)
class CategoryStats:
    n: int
    errors: int
    error_rate: float
    degenerate: bool = False

    def to_json_dict(self) -> dict:
        return {
            "n": self.n,
            "errors": self.errors,
            "error_rate": self.error_rate,
            "degenerate": self.degenerate,
        }


@dataclass(frozen=True)
class CategoryReport:
    per_category: dict
    overall: CategoryStats
    mode: str = "raw"

    def to_json_dict(self) -> dict:
        return {
            "mode": self.mode,
            "overall": self.overall.to_json_dict(),
            "categories": {
                category.value: stats.to_json_dict()
                for category, stats in self.per_category.items()
            },
        }


def _stats(n: int, errors: int) -> CategoryStats:
    if n == 0:
        return CategoryStats(n=0, errors=0, error_rate=0.0, degenerate=True)
    return CategoryStats(n=n, errors=errors, error_rate=errors / n)


def error_rates(judgements) -> CategoryReport:
    """Raw per-category and overall error rates; empty categories are flagged."""
    items = list(judgements)
    if not items:
        raise ValueError("error_rates needs at least one judgement")
    per_category = {}
    for category in HallucinationCategory:
        sub = [j for j in items if j.category is category]
        per_category[category] = _stats(len(sub), sum(j.is_error for j in sub))
    overall = _stats(len(items), sum(j.is_error for j in items))
    return CategoryReport(per_category=per_category, overall=overall, mode="raw")


def radar_csv(reports: dict) -> str:
    """Cross-run radar export: raw rates plus per-category min-max normalization.

    ``reports`` maps run name -> CategoryReport.  Normalized values are
    (rate - min)/(max - min) across the runs within each category, 0.0 when
    all runs agree.
    """
    if not reports:
        raise ValueError("radar_csv needs at least one report")
    for name in reports:
        if "," in name or "\n" in name or not name:
            raise ValueError(f"run name {name!r} must be non-empty without commas/newlines")
    lines = ["category,run,error_rate,normalized"]
    runs = list(reports.items())
    for category in HallucinationCategory:
        rates = [report.per_category[category].error_rate for _, report in runs]
        lo, hi = min(rates), max(rates)
        for (name, _), rate in zip(runs, rates):
            normalized = 0.0 if hi == lo else (rate - lo) / (hi - lo)
            lines.append(f"{category.value},{name},{rate:.6f},{normalized:.6f}")
    return "\n".join(lines) + "\n"


def dumps_judgements(judgements) -> str:
    return "".join(
        json.dumps(j.to_json_dict(), sort_keys=True, separators=(",", ":")) + "\n"
        for j in judgements
    )


def loads_judgements(text: str) -> list:
    judgements = []
    for line_num, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            doc = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DatasetError(f"line {line_num}: invalid JSON: {exc}") from exc
        try:
            judgements.append(
                Judgement(
                    sample_id=str(doc["sample_id"]),
                    ppl_real=float(doc["ppl_real"]),
                    ppl_hall=float(doc["ppl_hall"]),
                    is_error=bool(doc["is_error"]),
                    category=HallucinationCategory(doc["category"]),
                )
            )
        except (KeyError, ValueError) as exc:
            raise DatasetError(f"line {line_num}: {exc}") from exc
    if not judgements:
        raise DatasetError("judgement file contains no entries")
    return judgements


def _resolve_image(ref: ImageRef, base_dir) -> ImageGrid:
    if ref.kind == "scene":
        return rasterize(ref.scene)
    path = Path(base_dir) / ref.path if base_dir is not None else Path(ref.path)
    return load_raw_image(path)


def evaluate_dataset(
    scorer,
    pipeline_config: PipelineConfig,
    dataset,
    parallelism: int = 1,
    strict: bool = True,
    base_dir=None,
    failures: Optional[list] = None,
):
    """Judge every sample: resolve image -> run pipeline -> score both captions.

    Judgements come back in dataset order regardless of parallelism.  In
    strict mode any per-sample failure aborts the run; in lenient mode failed
    samples are skipped and their messages appended to ``failures`` when the
    caller provides a list.
    """
    samples = list(dataset)
    if not samples:
        raise ValueError("dataset is empty")
    if parallelism < 1:
        raise ValueError(f"parallelism must be >= 1, got {parallelism}")

    def run_one(sample):
        try:
            image = _resolve_image(sample.image, base_dir)
            result = run_pipeline(image, pipeline_config)
            return judge_sample(scorer, result.features, sample), None
        except Exception as exc:
            return None, f"sample {sample.id}: {exc}"

    if parallelism == 1:
        outcomes = [run_one(s) for s in samples]
    else:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            outcomes = list(pool.map(run_one, samples))

    judgements = []
    for judgement, failure in outcomes:
        if failure is None:
            judgements.append(judgement)
        elif strict:
            raise EvaluationError(failure)
        elif failures is not None:
            failures.append(failure)
    if not judgements:
        raise EvaluationError("no samples were judged successfully")
    return judgements, error_rates(judgements)


_LOW_NLL = math.log(2.0)
_HIGH_NLL = math.log(8.0)
_NEUTRAL_NLL = math.log(4.0)


@dataclass(frozen=True)
class OracleScorer:
    """Scores captions by membership in the recorded ground truth.

    Captions recorded as factual get uniformly low per-token NLL, recorded
    hallucinations get high NLL, anything else neutral; ``negate`` swaps low
    and high to build the always-wrong adversary.
    """

    real_captions: frozenset
    hall_captions: frozenset
    negate: bool = False

    def score(self, features: FeatureMap, caption: str) -> list:
        tokens = caption.split()
        if not tokens:
            raise ValueError("cannot score an empty caption")
        low, high = (_HIGH_NLL, _LOW_NLL) if self.negate else (_LOW_NLL, _HIGH_NLL)
        if caption in self.real_captions:
            nll = low
        elif caption in self.hall_captions:
            nll = high
        else:
            nll = _NEUTRAL_NLL
        return [nll] * len(tokens)


def oracle_scorer(dataset, negate: bool = False) -> OracleScorer:
    """Build the ground-truth oracle for a dataset's recorded caption pairs."""
    real = frozenset(s.real_caption for s in dataset)
    hall = frozenset(s.hallucinated_caption for s in dataset)
    overlap = real & hall
    if overlap:
        raise ValueError(
            f"{len(overlap)} caption(s) appear as both real and hallucinated; "
            "the oracle is undefined on this dataset"
        )
    return OracleScorer(real_captions=real, hall_captions=hall, negate=negate)


@dataclass(frozen=True)
class CoinFlipScorer:
    """Deterministic pseudo-random NLLs in [0.5, 1.5] keyed by (seed, caption, index)."""

    seed: int = 0

    def score(self, features: FeatureMap, caption: str) -> list:
        tokens = caption.split()
        if not tokens:
            raise ValueError("cannot score an empty caption")
        nlls = []
        for index in range(len(tokens)):
            digest = hashlib.sha256(f"{self.seed}|{caption}|{index}".encode()).hexdigest()
            unit = int(digest[:12], 16) / float(16**12)
            nlls.append(0.5 + unit)
        return nlls


# Column positions of the saturated histogram bins inside the color-histogram
# persona's 24-wide raw block (8 bins per channel, palette highs land in the
# top bin).  Yellow saturates both the red and green channels, so pure red is
# "bin 7 without bin 15", pure green the reverse, and yellow the coincidence.
_HISTOGRAM_WIDTH = 24
_RED_BIN = 7
_GREEN_BIN = 15
_BLUE_BIN = 23
_COLOR_WORDS = frozenset(COLORS)
_RELATION_WORDS = frozenset(HORIZONTAL_RELATIONS + VERTICAL_RELATIONS + INTERACTION_WORDS)


@dataclass(frozen=True)
class AffinityConfig:
    """Knobs for the affinity scorer.

    ``personas`` names the expert personas assumed to feed the fused features;
    color keywords are only scored when the color-histogram persona is listed,
    other attribute keywords fall back to a global texture-energy statistic.
    """

    personas: tuple = PERSONAS
    base_nll: float = 3.0
    alpha: float = 8.0
    nll_min: float = 0.05
    nll_max: float = 6.0

    def __post_init__(self):
        personas = tuple(self.personas)
        if not personas:
            raise ValueError("at least one persona required")
        for persona in personas:
            if persona not in PERSONAS:
                raise ValueError(
                    f"unknown persona {persona!r}; valid personas: {', '.join(PERSONAS)}"
                )
        if not (math.isfinite(self.base_nll) and math.isfinite(self.alpha)):
            raise ValueError("base_nll and alpha must be finite")
        if not 0.0 <= self.nll_min <= self.nll_max:
            raise ValueError("need 0 <= nll_min <= nll_max")
        object.__setattr__(self, "personas", personas)


class AffinityScorer:
    """Keyword-vs-feature affinity scoring.

    Tokens are matched against attribute vocabularies.  A color keyword's
    affinity is the per-token coincidence of its saturated histogram bins in
    the (token-centered) feature columns, averaged over tokens, so captions
    naming colors actually present in the fused features score lower NLL.
    Other attribute keywords (shapes, counts, digits, relations, labels) share
    a global positive-energy statistic, and non-attribute tokens stay at the
    base NLL.  All NLLs are clamped to [nll_min, nll_max].
    """

    def __init__(self, config: AffinityConfig):
        self.config = config

    @staticmethod
    def _bin_column(positive: np.ndarray, offset: int) -> np.ndarray:
        cols = [j for j in range(positive.shape[1]) if j % _HISTOGRAM_WIDTH == offset]
        if not cols:
            return np.zeros(positive.shape[0])
        return positive[:, cols].mean(axis=1)

    def _color_affinity(self, positive: np.ndarray, word: str) -> float:
        red = self._bin_column(positive, _RED_BIN)
        green = self._bin_column(positive, _GREEN_BIN)
        if word == "red":
            per_token = np.maximum(red - green, 0.0)
        elif word == "green":
            per_token = np.maximum(green - red, 0.0)
        elif word == "blue":
            per_token = self._bin_column(positive, _BLUE_BIN)
        else:  # yellow: red/green coincidence within the same region
            per_token = np.minimum(red, green)
        return float(per_token.sum() / positive.shape[0])

    def score(self, features: FeatureMap, caption: str) -> list:
        tokens = caption.split()
        if not tokens:
            raise ValueError("cannot score an empty caption")
        config = self.config
        values = features.values
        centered = values - values.mean(axis=0, keepdims=True)
        positive = np.maximum(centered, 0.0)
        color_aware = "color-histogram" in config.personas
        texture_aware = any(p != "color-histogram" for p in config.personas)
        energy = float(positive.mean()) if texture_aware else 0.0
        nlls = []
        for token in tokens:
            word = token.rstrip(".,")
            lowered = word.lower()
            affinity = 0.0
            if lowered in _COLOR_WORDS:
                if color_aware:
                    affinity = self._color_affinity(positive, lowered)
            elif (
                lowered in SHAPES
                or lowered in COUNT_WORDS
                or lowered.isdigit()
                or lowered in _RELATION_WORDS
                or word in LABEL_WORDS
            ):
                affinity = energy
            nll = config.base_nll - config.alpha * affinity
            nlls.append(min(max(nll, config.nll_min), config.nll_max))
        return nlls


def affinity_scorer(config: AffinityConfig) -> AffinityScorer:
    return AffinityScorer(config)


# Judging pipeline: all six personas at the canonical geometry (64 tokens,
# 24 dims) so no alignment resampling or adapters distort the descriptors,
# with an identity two-stage projector.
JUDGING_TOKENS = 64
JUDGING_DIM = 24


def toy_judging_config(
    favored_persona: Optional[str] = None,
    favor_bias: float = 25.0,
    seed: int = 0,
) -> PipelineConfig:
    """A six-expert routed pipeline for judging experiments.

    With ``favored_persona=None`` the router is all-zero, i.e. exactly uniform
    routing; naming a persona puts ``favor_bias`` on that expert's router bias,
    which at the default value makes routing effectively one-hot.
    """
    if favored_persona is not None and favored_persona not in PERSONAS:
        raise ValueError(
            f"unknown persona {favored_persona!r}; valid personas: {', '.join(PERSONAS)}"
        )
    experts = tuple(
        ToyExpertSpec(
            id=i,
            persona=persona,
            seed=seed + i,
            native_tokens=JUDGING_TOKENS,
            native_dim=JUDGING_DIM,
        )
        for i, persona in enumerate(PERSONAS)
    )
    bias = np.zeros(len(PERSONAS))
    if favored_persona is not None:
        bias[PERSONAS.index(favored_persona)] = favor_bias
    router = RouterParams(weights=np.zeros((JUDGING_DIM, len(PERSONAS))), bias=bias)
    projector = ProjectorParams(
        stage1=identity_adapter(JUDGING_DIM), stage2=identity_adapter(JUDGING_DIM)
    )
    return PipelineConfig(
        experts=experts,
        router=router,
        strategy=FusionStrategy(kind="routed"),
        projector=projector,
        canonical_tokens=JUDGING_TOKENS,
        canonical_dim=JUDGING_DIM,
        clip_seed=seed,
    )
