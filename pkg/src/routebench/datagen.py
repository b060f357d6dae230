"""LLM-backed caption-pair generation.

Builds hallucination samples from existing (image, caption) pairs by asking a
chat-completion endpoint to inject exactly one category-specific edit into
each caption.  One unified prompt template is specialized per category by a
small spec (what to modify, when the edit is possible, what must stay
unchanged); the model answers either the rewritten caption or the literal
"NO" when the caption cannot support the category.

The HTTP client is a generic JSON-over-HTTPS adapter: request body keys, the
prompt shape, the auth header, and the response text path are all
configurable, so any chat-completion provider works without provider-specific
code.  Auth tokens are read from an environment variable named in the config
and never stored or serialized.

Generation fans out over (item, category) units with a bounded number of
in-flight requests, retries failures with exponential backoff, skips "NO" and
echo responses, and aborts when the failed fraction exceeds the configured
budget.  Results merge deterministically in (item, category) order.
"""

from __future__ import annotations

import json
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import requests

from .benchmark import (
    BenchmarkSample,
    DatasetError,
    HallucinationCategory,
    image_ref_from_json_dict,
    image_ref_to_json_dict,
)

logger = logging.getLogger(__name__)


class DatagenError(RuntimeError):
    """Generation could not produce a usable dataset."""


PLACEHOLDER_COUNTS = {
    "{{MODIFICATION_TASK_SPECIFICS}}": 2,
    "{{EXISTENCE_CONDITION_DESCRIPTION}}": 2,
    "{{MODIFIED_ELEMENTS_NAME}}": 1,
    "{{UNCHANGED_CONSTRAINT_TEXT}}": 1,
    "{input}": 1,
}

DEFAULT_TEMPLATE_BODY = """\
You edit image captions to inject exactly one visual error.

Task Description:
Rewrite the caption below so that it {{MODIFICATION_TASK_SPECIFICS}}.
This edit is only possible when {{EXISTENCE_CONDITION_DESCRIPTION}} appears
in the caption. Change only {{MODIFIED_ELEMENTS_NAME}} and keep
{{UNCHANGED_CONSTRAINT_TEXT}} exactly as written.

Output Format:
Return only the rewritten caption, a single line where it
{{MODIFICATION_TASK_SPECIFICS}}. If no {{EXISTENCE_CONDITION_DESCRIPTION}}
exists, output: NO

Caption: {input}
"""


@dataclass(frozen=True)
class PromptTemplate:
    """Unified generation prompt; placeholder multiplicities are fixed."""

    body: str

    def __post_init__(self):
        for placeholder, expected in PLACEHOLDER_COUNTS.items():
            got = self.body.count(placeholder)
            if got != expected:
                raise ValueError(
                    f"template must contain {placeholder} exactly "
                    f"{expected} time(s), found {got}"
                )


DEFAULT_TEMPLATE = PromptTemplate(DEFAULT_TEMPLATE_BODY)


@dataclass(frozen=True)
class CategorySpec:
    """Per-category texts substituted into the unified template."""

    category: HallucinationCategory
    modification_task: str
    existence_condition: str
    modified_elements: str
    unchanged_constraint: str

    def __post_init__(self):
        for name in (
            "modification_task",
            "existence_condition",
            "modified_elements",
            "unchanged_constraint",
        ):
            if not getattr(self, name).strip():
                raise ValueError(f"{name} must be non-empty")


_SHARED_CONSTRAINT = "every other object, attribute, count, position, and relation"

CATEGORY_SPECS = (
    CategorySpec(
        HallucinationCategory.CATEGORY,
        "describes one mentioned object as a different kind of object that does not appear anywhere in the scene",
        "an object mention that could be swapped for an absent object kind",
        "that object's class word",
        _SHARED_CONSTRAINT,
    ),
    CategorySpec(
        HallucinationCategory.COUNTING,
        "states the quantity of one object group as exactly one more or one fewer than written",
        "an explicit object count",
        "the count word",
        _SHARED_CONSTRAINT,
    ),
    CategorySpec(
        HallucinationCategory.OCCLUSION,
        "claims a partly hidden object is fully visible, or a fully visible object is partly hidden",
        "a statement about an object's visibility",
        "the visibility phrase",
        _SHARED_CONSTRAINT,
    ),
    CategorySpec(
        HallucinationCategory.TEXT,
        "replaces written text, a sign, or a label with different text",
        "quoted or written text on an object",
        "the written text",
        _SHARED_CONSTRAINT,
    ),
    CategorySpec(
        HallucinationCategory.SHAPE,
        "describes one object with the shape of a different object that is also present",
        "a shape mention with another distinct shape present",
        "the shape word",
        _SHARED_CONSTRAINT,
    ),
    CategorySpec(
        HallucinationCategory.ABSOLUTE_POSITION,
        "places one object at a position adjacent to where the caption puts it",
        "an absolute position statement",
        "the position value",
        _SHARED_CONSTRAINT,
    ),
    CategorySpec(
        HallucinationCategory.RELATIVE_POSITION,
        "reverses the spatial relation between two mentioned objects",
        "a relative position statement between two objects",
        "the relation word",
        _SHARED_CONSTRAINT,
    ),
    CategorySpec(
        HallucinationCategory.COLOR,
        "gives one object a color that appears nowhere in the scene",
        "a color mention",
        "the color word",
        _SHARED_CONSTRAINT,
    ),
    CategorySpec(
        HallucinationCategory.ACTION,
        "describes one object performing a different action than written",
        "an action description",
        "the action verb",
        _SHARED_CONSTRAINT,
    ),
    CategorySpec(
        HallucinationCategory.RELATIVE_INTERACTION,
        "claims two separate objects are interacting, or two interacting objects are separate",
        "an interaction statement between two objects",
        "the interaction word",
        _SHARED_CONSTRAINT,
    ),
)


def category_spec(category: HallucinationCategory) -> CategorySpec:
    for spec in CATEGORY_SPECS:
        if spec.category is category:
            return spec
    raise ValueError(f"no spec for category {category}")  # pragma: no cover


def render_prompt(template: PromptTemplate, spec: CategorySpec, caption: str) -> str:
    """Substitute a category spec and the caption into the template."""
    if not caption.strip():
        raise ValueError("caption must be non-empty")
    rendered = template.body
    rendered = rendered.replace("{{MODIFICATION_TASK_SPECIFICS}}", spec.modification_task)
    rendered = rendered.replace("{{EXISTENCE_CONDITION_DESCRIPTION}}", spec.existence_condition)
    rendered = rendered.replace("{{MODIFIED_ELEMENTS_NAME}}", spec.modified_elements)
    rendered = rendered.replace("{{UNCHANGED_CONSTRAINT_TEXT}}", spec.unchanged_constraint)
    rendered = rendered.replace("{input}", caption)
    if "{{" in rendered:
        start = rendered.index("{{")
        end = rendered.find("}}", start)
        marker = rendered[start : end + 2] if end != -1 else rendered[start : start + 40]
        raise ValueError(f"unsubstituted placeholder {marker!r} in rendered prompt")
    return rendered


def parse_generation(raw: str):
    """Trimmed model output; None for a (case-insensitive) "NO" answer."""
    stripped = raw.strip()
    if not stripped:
        raise ValueError("empty generation cannot be parsed")
    if stripped.upper() == "NO":
        return None
    return stripped


@dataclass(frozen=True)
class ClientShape:
    """How to shape requests and unpack responses for a specific provider."""

    prompt_mode: str = "messages"
    model_key: str = "model"
    temperature_key: str = "temperature"
    max_tokens_key: str = "max_tokens"
    prompt_key: str = "messages"
    response_path: tuple = ("choices", 0, "message", "content")
    auth_header: str = "Authorization"
    auth_scheme: str = "Bearer"

    def __post_init__(self):
        if self.prompt_mode not in ("messages", "text"):
            raise ValueError(f"prompt_mode must be 'messages' or 'text', got {self.prompt_mode!r}")
        if not self.response_path:
            raise ValueError("response_path must be non-empty")
        object.__setattr__(self, "response_path", tuple(self.response_path))

    def to_json_dict(self) -> dict:
        return {
            "prompt_mode": self.prompt_mode,
            "model_key": self.model_key,
            "temperature_key": self.temperature_key,
            "max_tokens_key": self.max_tokens_key,
            "prompt_key": self.prompt_key,
            "response_path": list(self.response_path),
            "auth_header": self.auth_header,
            "auth_scheme": self.auth_scheme,
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "ClientShape":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown client shape keys: {sorted(unknown)}")
        return cls(**doc)


@dataclass(frozen=True)
class DatagenConfig:
    """Endpoint, sampling, retry, and concurrency settings.

    ``auth_env`` names the environment variable holding the API token; the
    token itself is read per request and never stored on the config.
    """

    endpoint: str
    model: str
    auth_env: Optional[str] = None
    temperature: float = 0.7
    max_tokens: int = 256
    max_retries: int = 3
    backoff_base_ms: int = 500
    max_in_flight: int = 4
    max_failure_fraction: float = 0.2
    timeout_seconds: float = 60.0
    shape: ClientShape = field(default_factory=ClientShape)

    def __post_init__(self):
        if not self.endpoint.startswith("https://"):
            raise ValueError(f"endpoint must be https://, got {self.endpoint!r}")
        if not self.model:
            raise ValueError("model must be non-empty")
        if not (math.isfinite(self.temperature) and 0.0 <= self.temperature <= 2.0):
            raise ValueError(f"temperature must be in [0, 2], got {self.temperature}")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be >= 1")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if self.backoff_base_ms < 0:
            raise ValueError("backoff_base_ms must be >= 0")
        if self.max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")
        if not 0.0 <= self.max_failure_fraction <= 1.0:
            raise ValueError("max_failure_fraction must be in [0, 1]")
        if self.timeout_seconds <= 0:
            raise ValueError("timeout_seconds must be positive")

    def to_json_dict(self) -> dict:
        return {
            "endpoint": self.endpoint,
            "model": self.model,
            "auth_env": self.auth_env,
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
            "max_retries": self.max_retries,
            "backoff_base_ms": self.backoff_base_ms,
            "max_in_flight": self.max_in_flight,
            "max_failure_fraction": self.max_failure_fraction,
            "timeout_seconds": self.timeout_seconds,
            "shape": self.shape.to_json_dict(),
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "DatagenConfig":
        doc = dict(doc)
        shape_doc = doc.pop("shape", None)
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if shape_doc is not None:
            doc["shape"] = ClientShape.from_json_dict(shape_doc)
        return cls(**doc)


def load_datagen_config(path) -> DatagenConfig:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DatagenError(f"{path}: invalid JSON: {exc}") from exc
    try:
        return DatagenConfig.from_json_dict(doc)
    except (TypeError, ValueError) as exc:
        raise DatagenError(f"{path}: {exc}") from exc


@dataclass(frozen=True)
class CompletionRequest:
    prompt: str
    model: str
    temperature: float
    max_tokens: int


@dataclass(frozen=True)
class CompletionResponse:
    text: str
    finish_reason: Optional[str] = None
    usage: Optional[dict] = None


class HttpChatClient:
    """Thread-safe JSON-over-HTTPS chat-completion adapter."""

    def __init__(self, config: DatagenConfig, session=None):
        self.config = config
        self._session = session if session is not None else requests.Session()

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        config = self.config
        if config.auth_env:
            token = os.environ.get(config.auth_env)
            if not token:
                raise DatagenError(
                    f"auth environment variable {config.auth_env!r} is not set"
                )
            shape = config.shape
            value = f"{shape.auth_scheme} {token}" if shape.auth_scheme else token
            headers[shape.auth_header] = value
        return headers

    def complete(self, request: CompletionRequest) -> CompletionResponse:
        shape = self.config.shape
        body = {
            shape.model_key: request.model,
            shape.temperature_key: request.temperature,
            shape.max_tokens_key: request.max_tokens,
        }
        if shape.prompt_mode == "messages":
            body[shape.prompt_key] = [{"role": "user", "content": request.prompt}]
        else:
            body[shape.prompt_key] = request.prompt
        response = self._session.post(
            self.config.endpoint,
            json=body,
            headers=self._headers(),
            timeout=self.config.timeout_seconds,
        )
        response.raise_for_status()
        doc = response.json()
        node = doc
        for step in shape.response_path:
            try:
                node = node[step]
            except (KeyError, IndexError, TypeError) as exc:
                raise DatagenError(
                    f"response missing text at path {list(shape.response_path)}: {exc}"
                ) from exc
        if not isinstance(node, str):
            raise DatagenError(
                f"response text at path {list(shape.response_path)} is not a string"
            )
        return CompletionResponse(
            text=node,
            finish_reason=_dig(doc, ("choices", 0, "finish_reason")),
            usage=doc.get("usage") if isinstance(doc, dict) else None,
        )


def _dig(doc, path):
    node = doc
    for step in path:
        try:
            node = node[step]
        except (KeyError, IndexError, TypeError):
            return None
    return node


@dataclass
class GenerationStats:
    requested: int = 0
    produced: int = 0
    skipped_no: int = 0
    skipped_echo: int = 0
    skipped_invalid: int = 0
    failed: int = 0
    retries: int = 0
    retries_by_key: dict = field(default_factory=dict)
    failures: list = field(default_factory=list)

    def to_json_dict(self) -> dict:
        return {
            "requested": self.requested,
            "produced": self.produced,
            "skipped_no": self.skipped_no,
            "skipped_echo": self.skipped_echo,
            "skipped_invalid": self.skipped_invalid,
            "failed": self.failed,
            "retries": self.retries,
            "retries_by_key": {f"{i}:{c}": n for (i, c), n in self.retries_by_key.items()},
            "failures": list(self.failures),
        }


@dataclass(frozen=True)
class GenerationResult:
    samples: list
    stats: GenerationStats


def generate_dataset(
    client,
    items,
    specs=CATEGORY_SPECS,
    config: Optional[DatagenConfig] = None,
    template: PromptTemplate = DEFAULT_TEMPLATE,
    sleep=time.sleep,
) -> GenerationResult:
    """Fan (item x category) units out to the client and assemble samples.

    ``items`` holds (ImageRef, real caption) pairs.  Each unit renders the
    category's prompt, calls the client with retries and exponential backoff,
    and parses the answer: "NO" and echoes of the input are skipped, other
    answers become samples.  Units that exhaust their retries are recorded as
    failed; the run aborts if more than ``config.max_failure_fraction`` of all
    units fail.  Output order is (item index, category order), independent of
    scheduling.  ``sleep`` is injectable so tests can skip real backoff waits.
    """
    item_list = list(items)
    if not item_list:
        raise ValueError("items must be non-empty")
    spec_list = list(specs)
    if not spec_list:
        raise ValueError("specs must be non-empty")
    spec_categories = [s.category for s in spec_list]
    if len(set(spec_categories)) != len(spec_categories):
        raise ValueError("specs must cover distinct categories")
    if config is None:
        config = DatagenConfig(endpoint="https://unused.invalid", model="mock")
    stats = GenerationStats()
    units = [
        (item_index, image, caption, spec)
        for item_index, (image, caption) in enumerate(item_list)
        for spec in spec_list
    ]
    stats.requested = len(units)

    def run_unit(unit):
        item_index, image, caption, spec = unit
        prompt = render_prompt(template, spec, caption)
        request = CompletionRequest(
            prompt=prompt,
            model=config.model,
            temperature=config.temperature,
            max_tokens=config.max_tokens,
        )
        retries = 0
        while True:
            try:
                response = client.complete(request)
                break
            except Exception as exc:
                if retries >= config.max_retries:
                    return ("failed", retries, f"item {item_index} {spec.category.value}: {exc}")
                sleep(config.backoff_base_ms / 1000.0 * 2**retries)
                retries += 1
        try:
            text = parse_generation(response.text)
        except ValueError as exc:
            return ("invalid", retries, f"item {item_index} {spec.category.value}: {exc}")
        if text is None:
            return ("no", retries, None)
        if text == caption.strip():
            return ("echo", retries, None)
        try:
            sample = BenchmarkSample(
                id=f"gen-{item_index:04d}-{spec.category.value.lower()}",
                image=image,
                real_caption=caption,
                hallucinated_caption=text,
                category=spec.category,
            )
        except ValueError as exc:
            return ("invalid", retries, f"item {item_index} {spec.category.value}: {exc}")
        return ("ok", retries, sample)

    if config.max_in_flight == 1:
        outcomes = [run_unit(u) for u in units]
    else:
        with ThreadPoolExecutor(max_workers=config.max_in_flight) as pool:
            outcomes = list(pool.map(run_unit, units))

    samples = []
    for unit, (status, retries, payload) in zip(units, outcomes):
        item_index, _, _, spec = unit
        if retries:
            stats.retries += retries
            stats.retries_by_key[(item_index, spec.category.value)] = retries
        if status == "ok":
            samples.append(payload)
            stats.produced += 1
        elif status == "no":
            stats.skipped_no += 1
        elif status == "echo":
            stats.skipped_echo += 1
        elif status == "invalid":
            stats.skipped_invalid += 1
            stats.failures.append(payload)
        else:
            stats.failed += 1
            stats.failures.append(payload)

    logger.info(
        "generated %d samples from %d units (%d NO, %d echo, %d invalid, %d failed, %d retries)",
        stats.produced, stats.requested, stats.skipped_no, stats.skipped_echo,
        stats.skipped_invalid, stats.failed, stats.retries,
    )
    if stats.failed > config.max_failure_fraction * stats.requested:
        first = "; ".join(stats.failures[:3])
        raise DatagenError(
            f"{stats.failed}/{stats.requested} units failed "
            f"(budget {config.max_failure_fraction:.0%}): {first}"
        )
    return GenerationResult(samples=samples, stats=stats)


def loads_caption_items(text: str) -> list:
    """Parse JSONL {"image": <image ref>, "caption": <text>} item lines."""
    items = []
    for line_num, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            doc = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DatasetError(f"line {line_num}: invalid JSON: {exc}") from exc
        try:
            image = image_ref_from_json_dict(doc["image"])
            caption = str(doc["caption"])
        except KeyError as exc:
            raise DatasetError(f"line {line_num}: missing field {exc}") from exc
        except ValueError as exc:
            raise DatasetError(f"line {line_num}: {exc}") from exc
        if not caption.strip():
            raise DatasetError(f"line {line_num}: caption must be non-empty")
        items.append((image, caption))
    if not items:
        raise DatasetError("item file contains no entries")
    return items


def load_caption_items(path) -> list:
    return loads_caption_items(Path(path).read_text(encoding="utf-8"))


def dumps_caption_items(items) -> str:
    return "".join(
        json.dumps(
            {"image": image_ref_to_json_dict(image), "caption": caption},
            sort_keys=True,
            separators=(",", ":"),
        )
        + "\n"
        for image, caption in items
    )
