"""
Backend-agnostic multimodal model client.

Backends:
  - live: chat-completions (OpenAI SDK) or messages-style HTTP (requests),
    with bounded exponential-backoff transport retries
  - oracle: answers from ground truth with optional, seeded corruption
  - replay: serves recorded responses by request fingerprint
Any backend can be wrapped by `RecordingBackend` to write a JSON-lines transcript.

Transport retries here are separate from the pipeline's structural retries.
"""

from __future__ import annotations

import base64
import hashlib
import io
import json
import logging
import os
import re
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, FrozenSet, List, Mapping, Optional, Protocol, Sequence, Tuple, Union

import numpy as np
import requests
from PIL import Image
from tenacity import Retrying, retry_if_exception_type, stop_after_attempt, wait_exponential

from . import prompt_engine as pe
from .errors import (
    AuthError,
    BackendFormatError,
    ConfigError,
    EncodeError,
    TransportError,
    UnknownModelError,
)
from .hand_model import ContactVector, PartSegmentation, PathLike, contact_parts, contact_to_grids
from .transcripts import TranscriptStore

logger = logging.getLogger(__name__)

DEFAULT_MODEL = "gpt-5.5"
IMAGE_TOKEN_ESTIMATE = 85
ANTHROPIC_VERSION = "2023-06-01"
_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


# ---------------------------------------------------------------------------
# Requests and responses
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ChatMessage:
    role: str
    text: str


@dataclass(frozen=True)
class ImagePayload:
    data: str  # base64
    width: int
    height: int
    media_type: str = "image/jpeg"

    @property
    def digest(self) -> str:
        return hashlib.sha256(self.data.encode("ascii")).hexdigest()

    def data_url(self) -> str:
        return f"data:{self.media_type};base64,{self.data}"


@dataclass(frozen=True)
class MllmRequest:
    model: str
    messages: Tuple[ChatMessage, ...]
    images: Tuple[ImagePayload, ...] = ()
    max_output_tokens: int = 16384
    temperature: float = 0.0
    metadata: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.messages:
            raise ValueError("A request needs at least one message")

    @property
    def prompt_text(self) -> str:
        return "\n\n".join(m.text for m in self.messages)

    @property
    def fingerprint(self) -> str:
        """Stable id of what the model sees: model, messages and image digests."""
        body = {
            "model": self.model,
            "messages": [[m.role, m.text] for m in self.messages],
            "images": [img.digest for img in self.images],
        }
        return hashlib.sha256(json.dumps(body, sort_keys=True).encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class Usage:
    input_tokens: int = 0
    output_tokens: int = 0

    def __add__(self, other: "Usage") -> "Usage":
        return Usage(self.input_tokens + other.input_tokens, self.output_tokens + other.output_tokens)

    def to_dict(self) -> Dict[str, int]:
        return {"input_tokens": self.input_tokens, "output_tokens": self.output_tokens}

    @classmethod
    def from_dict(cls, data: Optional[Mapping[str, Any]]) -> "Usage":
        data = data or {}
        return cls(int(data.get("input_tokens", 0) or 0), int(data.get("output_tokens", 0) or 0))


@dataclass(frozen=True)
class MllmResponse:
    text: str
    usage: Usage = Usage()
    latency_ms: float = 0.0
    model: str = ""


def estimate_tokens(text: str) -> int:
    """Word/punctuation count; a stand-in where a backend reports no usage."""
    return len(_TOKEN_RE.findall(text or ""))


def estimate_request_tokens(request: MllmRequest) -> int:
    return sum(estimate_tokens(m.text) for m in request.messages) + IMAGE_TOKEN_ESTIMATE * len(request.images)


# ---------------------------------------------------------------------------
# Pricing
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ModelPrice:
    usd_per_1m_output: float
    usd_per_1m_input: Optional[float] = None

    def __post_init__(self) -> None:
        if self.usd_per_1m_output < 0 or (self.usd_per_1m_input is not None and self.usd_per_1m_input < 0):
            raise ConfigError("Token prices must be non-negative")


class PricingTable:
    def __init__(self, prices: Mapping[str, ModelPrice]) -> None:
        self._prices = dict(prices)

    @property
    def models(self) -> Tuple[str, ...]:
        return tuple(sorted(self._prices))

    def get(self, model: str) -> ModelPrice:
        price = self._prices.get(model)
        if price is None:
            raise UnknownModelError(model)
        return price

    def __contains__(self, model: object) -> bool:
        return model in self._prices

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "PricingTable":
        prices = {}
        for model, raw in data.items():
            if not isinstance(raw, Mapping) or "usd_per_1m_output" not in raw:
                raise ConfigError(f"pricing.{model}: usd_per_1m_output is required")
            try:
                prices[model] = ModelPrice(
                    usd_per_1m_output=float(raw["usd_per_1m_output"]),
                    usd_per_1m_input=None if raw.get("usd_per_1m_input") is None else float(raw["usd_per_1m_input"]),
                )
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"pricing.{model}: {exc}") from exc
        return cls(prices)

    def to_dict(self) -> Dict[str, Dict[str, Optional[float]]]:
        return {
            m: {"usd_per_1m_output": p.usd_per_1m_output, "usd_per_1m_input": p.usd_per_1m_input}
            for m, p in sorted(self._prices.items())
        }


DEFAULT_PRICING = PricingTable(
    {
        "gpt-5.5": ModelPrice(usd_per_1m_output=30.0),
        "gpt-5.4": ModelPrice(usd_per_1m_output=15.0),
    }
)


def compute_cost(usage: Usage, model: str, pricing: PricingTable) -> float:
    """Output-token cost in USD; input tokens are priced separately."""
    return usage.output_tokens * pricing.get(model).usd_per_1m_output / 1e6


def compute_input_cost(usage: Usage, model: str, pricing: PricingTable) -> Optional[float]:
    rate = pricing.get(model).usd_per_1m_input
    return None if rate is None else usage.input_tokens * rate / 1e6


def format_usd(amount: float) -> str:
    return f"${amount:.3f}"


# ---------------------------------------------------------------------------
# Images
# ---------------------------------------------------------------------------

def encode_image(image: Union[Image.Image, np.ndarray], quality: int = 90) -> ImagePayload:
    if isinstance(image, np.ndarray):
        if image.ndim not in (2, 3) or image.size == 0:
            raise EncodeError(f"Cannot encode raster of shape {image.shape}")
        try:
            image = Image.fromarray(np.ascontiguousarray(image, dtype=np.uint8))
        except (TypeError, ValueError) as exc:
            raise EncodeError(f"Cannot encode raster: {exc}") from exc
    if not isinstance(image, Image.Image):
        raise EncodeError(f"Unsupported image type: {type(image).__name__}")
    width, height = image.size
    if width == 0 or height == 0:
        raise EncodeError("Cannot encode an empty image")

    buf = io.BytesIO()
    try:
        image.convert("RGB").save(buf, format="JPEG", quality=quality)
    except (OSError, ValueError) as exc:
        raise EncodeError(f"JPEG encoding failed: {exc}") from exc
    return ImagePayload(data=base64.b64encode(buf.getvalue()).decode("ascii"), width=width, height=height)


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Limits:
    max_in_flight: int = 4
    requests_per_minute: float = 0.0  # 0 = unlimited
    transport_attempts: int = 3
    backoff_seconds: float = 1.0
    timeout_seconds: float = 120.0
    max_output_tokens: int = 16384
    temperature: float = 0.0


STAGE0_INJECTABLE = frozenset({pe.EMPTY_RESPONSE})
STAGE1_INJECTABLE = frozenset({pe.NOT_JSON, pe.EMPTY_RESPONSE, pe.MISSING_KEY, pe.UNKNOWN_PART, pe.NON_TEXT_ENTRY})
STAGE2_INJECTABLE = frozenset(
    {
        pe.NOT_JSON,
        pe.EMPTY_RESPONSE,
        pe.MISSING_PART,
        pe.EXTRA_PART,
        pe.INVALID_GRID,
        pe.ROW_COUNT_MISMATCH,
        pe.ROW_LENGTH_MISMATCH,
        pe.NON_BINARY_VALUE,
    }
)
_INJECTABLE = {0: STAGE0_INJECTABLE, 1: STAGE1_INJECTABLE, 2: STAGE2_INJECTABLE}


@dataclass(frozen=True)
class FormatErrorRule:
    """Fail the listed attempts (1-based) of one stage with a named violation."""

    stage: int
    attempts: FrozenSet[int]
    violation: str
    parts: int = 1

    def __post_init__(self) -> None:
        if self.stage not in _INJECTABLE:
            raise ConfigError(f"format_errors: unknown stage {self.stage}")
        if self.violation not in _INJECTABLE[self.stage]:
            raise ConfigError(f"format_errors: stage {self.stage} cannot inject '{self.violation}'")
        if self.parts < 1:
            raise ConfigError("format_errors: parts must be >= 1")


@dataclass(frozen=True)
class CorruptionConfig:
    flip_probability: float = 0.0
    omit_probability: float = 0.0
    extra_part_probability: float = 0.0
    format_errors: Tuple[FormatErrorRule, ...] = ()

    def __post_init__(self) -> None:
        for name in ("flip_probability", "omit_probability", "extra_part_probability"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ConfigError(f"corruption.{name} must be in [0, 1], got {value}")

    def rule_for(self, stage: int, attempt: int) -> Optional[FormatErrorRule]:
        for rule in self.format_errors:
            if rule.stage == stage and attempt in rule.attempts:
                return rule
        return None

    @classmethod
    def from_dict(cls, data: Optional[Mapping[str, Any]]) -> "CorruptionConfig":
        if not data:
            return cls()
        rules = []
        for i, raw in enumerate(data.get("format_errors") or []):
            attempts = raw.get("attempts")
            if isinstance(attempts, int) and not isinstance(attempts, bool):
                attempt_set = frozenset(range(1, attempts + 1))
            elif isinstance(attempts, list) and all(isinstance(a, int) for a in attempts):
                attempt_set = frozenset(attempts)
            else:
                raise ConfigError(f"format_errors[{i}].attempts must be a count or a list of attempt numbers")
            rules.append(
                FormatErrorRule(
                    stage=int(raw.get("stage", -1)),
                    attempts=attempt_set,
                    violation=str(raw.get("violation", "")),
                    parts=int(raw.get("parts", 1)),
                )
            )
        return cls(
            flip_probability=float(data.get("flip_probability", 0.0)),
            omit_probability=float(data.get("omit_probability", 0.0)),
            extra_part_probability=float(data.get("extra_part_probability", 0.0)),
            format_errors=tuple(rules),
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "flip_probability": self.flip_probability,
            "omit_probability": self.omit_probability,
            "extra_part_probability": self.extra_part_probability,
            "format_errors": [
                {"stage": r.stage, "attempts": sorted(r.attempts), "violation": r.violation, "parts": r.parts}
                for r in self.format_errors
            ],
        }


BACKEND_KINDS = ("live", "oracle", "replay")
DIALECTS = ("openai", "anthropic")


@dataclass(frozen=True)
class BackendConfig:
    kind: str = "oracle"
    model: str = DEFAULT_MODEL
    dialect: str = "openai"
    endpoint: Optional[str] = None
    api_key_env: str = "OPENAI_API_KEY"
    auth_header: Optional[str] = None
    pricing: PricingTable = DEFAULT_PRICING
    limits: Limits = Limits()
    corruption: CorruptionConfig = CorruptionConfig()
    transcript_path: Optional[str] = None
    record_path: Optional[str] = None

    def __post_init__(self) -> None:
        if self.kind not in BACKEND_KINDS:
            raise ConfigError(f"Backend kind must be one of {BACKEND_KINDS}, got '{self.kind}'")
        if self.dialect not in DIALECTS:
            raise ConfigError(f"Dialect must be one of {DIALECTS}, got '{self.dialect}'")
        if self.kind == "replay" and not self.transcript_path:
            raise ConfigError("Replay backend needs transcript_path")
        if self.kind == "live" and self.dialect == "anthropic" and not self.endpoint:
            raise ConfigError("The anthropic dialect needs an endpoint")
        if self.limits.max_in_flight < 1 or self.limits.transport_attempts < 1:
            raise ConfigError("limits.max_in_flight and limits.transport_attempts must be >= 1")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "kind": self.kind,
            "model": self.model,
            "dialect": self.dialect,
            "endpoint": self.endpoint,
            "api_key_env": self.api_key_env,
            "auth_header": self.auth_header,
            "pricing": self.pricing.to_dict(),
            "limits": dict(self.limits.__dict__),
            "corruption": self.corruption.to_dict(),
            "transcript_path": self.transcript_path,
            "record_path": self.record_path,
        }


def backend_config_from_dict(data: Mapping[str, Any], *, base_dir: Optional[Path] = None) -> BackendConfig:
    if not isinstance(data, Mapping):
        raise ConfigError("Backend config must be a JSON object")
    known_limits = set(Limits.__dataclass_fields__)
    raw_limits = data.get("limits") or {}
    unknown = set(raw_limits) - known_limits
    if unknown:
        raise ConfigError(f"Unknown limits: {sorted(unknown)}")
    try:
        limits = Limits(**{k: type(getattr(Limits(), k))(v) for k, v in raw_limits.items()})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"limits: {exc}") from exc

    pricing = DEFAULT_PRICING
    if data.get("pricing"):
        merged = DEFAULT_PRICING.to_dict()
        merged.update(data["pricing"])
        pricing = PricingTable.from_dict(merged)

    def _path(key: str) -> Optional[str]:
        value = data.get(key)
        if not value:
            return None
        p = Path(value)
        if base_dir is not None and not p.is_absolute():
            p = base_dir / p
        return str(p)

    return BackendConfig(
        kind=str(data.get("kind", "oracle")),
        model=str(data.get("model", DEFAULT_MODEL)),
        dialect=str(data.get("dialect", "openai")),
        endpoint=data.get("endpoint"),
        api_key_env=str(data.get("api_key_env", "OPENAI_API_KEY")),
        auth_header=data.get("auth_header"),
        pricing=pricing,
        limits=limits,
        corruption=CorruptionConfig.from_dict(data.get("corruption")),
        transcript_path=_path("transcript_path"),
        record_path=_path("record_path"),
    )


def load_backend_config(path: PathLike) -> BackendConfig:
    p = Path(path)
    try:
        data = json.loads(p.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigError(f"Backend config not found: {p}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON ({exc})") from exc
    return backend_config_from_dict(data, base_dir=p.parent)


# ---------------------------------------------------------------------------
# Backends
# ---------------------------------------------------------------------------

class MllmBackend(Protocol):
    def send(self, request: MllmRequest) -> MllmResponse: ...


def _status_error(status: Optional[int], message: str) -> Exception:
    if status in (401, 403):
        return AuthError(f"Backend rejected credentials ({status}): {message}")
    if status is None or status == 429 or status >= 500:
        return TransportError(f"Transient backend failure ({status}): {message}")
    return BackendFormatError(f"Backend rejected request ({status}): {message}")


class LiveBackend:
    """HTTP backend for real model endpoints."""

    def __init__(self, config: BackendConfig) -> None:
        self.config = config
        self._client = None

    def _api_key(self) -> str:
        key = os.environ.get(self.config.api_key_env)
        if not key:
            raise AuthError(f"Environment variable {self.config.api_key_env} is not set")
        return key

    def send(self, request: MllmRequest) -> MllmResponse:
        limits = self.config.limits

        def _log_retry(retry_state: Any) -> None:
            exc = retry_state.outcome.exception() if retry_state.outcome else None
            logger.warning(
                "Retrying model call (attempt %d/%d) after error: %s",
                retry_state.attempt_number, limits.transport_attempts, exc,
            )

        retrying = Retrying(
            retry=retry_if_exception_type(TransportError),
            stop=stop_after_attempt(limits.transport_attempts),
            wait=wait_exponential(multiplier=limits.backoff_seconds, max=max(limits.backoff_seconds * 8, 0)),
            reraise=True,
            before_sleep=_log_retry,
        )
        call = self._send_openai if self.config.dialect == "openai" else self._send_anthropic
        started = time.perf_counter()
        text, usage = retrying(call, request)
        if usage is None:
            usage = Usage(estimate_request_tokens(request), estimate_tokens(text))
        latency = (time.perf_counter() - started) * 1000.0
        return MllmResponse(text=text, usage=usage, latency_ms=latency, model=request.model)

    # OpenAI chat-completions dialect
    def _openai_client(self) -> Any:
        if self._client is None:
            try:
                from openai import OpenAI
            except ImportError as exc:
                raise ConfigError("The openai package is required for the openai dialect") from exc
            self._client = OpenAI(
                api_key=self._api_key(),
                base_url=self.config.endpoint or None,
                timeout=self.config.limits.timeout_seconds,
            )
        return self._client

    def _send_openai(self, request: MllmRequest) -> Tuple[str, Optional[Usage]]:
        client = self._openai_client()
        messages = []
        for i, m in enumerate(request.messages):
            content: List[Dict[str, Any]] = [{"type": "text", "text": m.text}]
            if i == len(request.messages) - 1:
                content += [{"type": "image_url", "image_url": {"url": img.data_url()}} for img in request.images]
            messages.append({"role": m.role, "content": content})
        try:
            response = client.chat.completions.create(
                model=request.model,
                messages=messages,
                max_completion_tokens=request.max_output_tokens,
                temperature=request.temperature,
            )
        except Exception as exc:
            raise _status_error(getattr(exc, "status_code", None), str(exc)) from exc

        try:
            text = response.choices[0].message.content or ""
        except (AttributeError, IndexError, TypeError) as exc:
            raise BackendFormatError(f"Unexpected chat-completions response: {exc}") from exc
        usage = None
        if getattr(response, "usage", None) is not None:
            usage = Usage(
                input_tokens=int(getattr(response.usage, "prompt_tokens", 0) or 0),
                output_tokens=int(getattr(response.usage, "completion_tokens", 0) or 0),
            )
        return text, usage

    # Messages-style dialect over plain HTTP
    def _send_anthropic(self, request: MllmRequest) -> Tuple[str, Optional[Usage]]:
        messages = []
        for i, m in enumerate(request.messages):
            content: List[Dict[str, Any]] = [{"type": "text", "text": m.text}]
            if i == len(request.messages) - 1:
                content += [
                    {"type": "image", "source": {"type": "base64", "media_type": img.media_type, "data": img.data}}
                    for img in request.images
                ]
            messages.append({"role": m.role, "content": content})
        headers = {
            self.config.auth_header or "x-api-key": self._api_key(),
            "anthropic-version": ANTHROPIC_VERSION,
            "content-type": "application/json",
        }
        payload = {
            "model": request.model,
            "max_tokens": request.max_output_tokens,
            "temperature": request.temperature,
            "messages": messages,
        }
        try:
            resp = requests.post(
                self.config.endpoint,
                headers=headers,
                json=payload,
                timeout=self.config.limits.timeout_seconds,
            )
        except requests.RequestException as exc:
            raise TransportError(f"Request to {self.config.endpoint} failed: {exc}") from exc
        if resp.status_code != 200:
            raise _status_error(resp.status_code, resp.text[:200])

        try:
            data = resp.json()
            text = "".join(b.get("text", "") for b in data.get("content", []) if b.get("type") == "text")
        except (ValueError, AttributeError) as exc:
            raise BackendFormatError(f"Unexpected messages response: {exc}") from exc
        usage = None
        if isinstance(data.get("usage"), dict):
            usage = Usage.from_dict(data["usage"])
        return text, usage


def _seeded_rng(seed: int, *parts: Any) -> np.random.Generator:
    key = "|".join(str(p) for p in (seed, *parts))
    return np.random.default_rng(int.from_bytes(hashlib.sha256(key.encode("utf-8")).digest()[:8], "big"))


class OracleBackend:
    """Answers every stage from the sample's ground truth contact."""

    def __init__(
        self,
        seg: PartSegmentation,
        ground_truth: Mapping[str, ContactVector],
        *,
        corruption: Optional[CorruptionConfig] = None,
        seed: int = 0,
        model: str = DEFAULT_MODEL,
    ) -> None:
        self.seg = seg
        self.ground_truth = ground_truth
        self.corruption = corruption or CorruptionConfig()
        self.seed = seed
        self.model = model

    def send(self, request: MllmRequest) -> MllmResponse:
        meta = request.metadata
        sample_id = str(meta.get("sample_id", ""))
        stage = int(meta.get("stage", -1))
        attempt = int(meta.get("attempt", 1))
        gt = self.ground_truth.get(sample_id)
        if gt is None:
            raise BackendFormatError(f"Oracle has no ground truth for sample '{sample_id}'")

        rng = _seeded_rng(self.seed, sample_id, stage, attempt)
        rule = self.corruption.rule_for(stage, attempt)
        if stage == 0:
            text = "" if rule else self._describe(gt)
        elif stage == 1:
            text = self._part_answer(gt, rng, rule)
        elif stage == 2:
            text = self._dense_answer(gt, list(meta.get("selected_parts") or []), rng, rule)
        else:
            raise BackendFormatError(f"Oracle cannot answer stage {stage}")
        usage = Usage(estimate_request_tokens(request), estimate_tokens(text))
        return MllmResponse(text=text, usage=usage, latency_ms=0.0, model=request.model)

    def _describe(self, gt: ContactVector) -> str:
        names = contact_parts(self.seg, gt)
        if not names:
            return "The right hand is visible but does not touch the object."
        return (
            "The right hand holds the object. Contact is made with "
            + ", ".join(names)
            + f" ({gt.count()} vertices in contact)."
        )

    def _part_answer(self, gt: ContactVector, rng: np.random.Generator, rule: Optional[FormatErrorRule]) -> str:
        names = list(contact_parts(self.seg, gt))
        c = self.corruption
        if c.omit_probability > 0 and names:
            keep = rng.random(len(names)) >= c.omit_probability
            names = [n for n, k in zip(names, keep) if k]
        if c.extra_part_probability > 0:
            others = [p.name for p in self.seg.parts if p.name not in names]
            if others and rng.random() < c.extra_part_probability:
                names.append(others[int(rng.integers(len(others)))])

        if rule is None:
            return json.dumps({"contact_parts": names})
        kind = rule.violation
        if kind == pe.EMPTY_RESPONSE:
            return ""
        if kind == pe.NOT_JSON:
            return "The contact parts are " + ", ".join(names or ["none"])
        if kind == pe.MISSING_KEY:
            return json.dumps({"parts": names})
        if kind == pe.UNKNOWN_PART:
            return json.dumps({"contact_parts": names + [f"not_a_part_{i}" for i in range(rule.parts)]})
        return json.dumps({"contact_parts": names + list(range(rule.parts))})  # non-text entries

    def _dense_answer(
        self,
        gt: ContactVector,
        selected: Sequence[str],
        rng: np.random.Generator,
        rule: Optional[FormatErrorRule],
    ) -> str:
        grids = contact_to_grids(self.seg, gt, selected).to_dict()
        flip = self.corruption.flip_probability
        if flip > 0:
            for name in sorted(grids, key=lambda n: self.seg.part(n).index):
                grids[name] = [[v ^ int(rng.random() < flip) for v in row] for row in grids[name]]

        if rule is None:
            return json.dumps(grids)
        kind = rule.violation
        if kind == pe.EMPTY_RESPONSE:
            return ""
        if kind == pe.NOT_JSON:
            return "Here are the grids: " + "; ".join(grids)
        targets = list(grids)[: rule.parts]
        if kind == pe.MISSING_PART:
            for name in targets:
                del grids[name]
        elif kind == pe.EXTRA_PART:
            unselected = [p.name for p in self.seg.parts if p.name not in grids]
            for i in range(rule.parts):
                if i < len(unselected):
                    grids[unselected[i]] = [[0] * n for n in self.seg.grid(unselected[i]).row_lengths]
                else:
                    grids[f"not_a_part_{i}"] = [[0]]
        elif kind == pe.INVALID_GRID:
            for name in targets:
                grids[name] = "".join(str(v) for row in grids[name] for v in row)
        elif kind == pe.ROW_COUNT_MISMATCH:
            for name in targets:
                rows = grids[name]
                grids[name] = rows[:-1] if len(rows) > 1 else rows + [list(rows[0])]
        elif kind == pe.ROW_LENGTH_MISMATCH:
            for name in targets:
                row = grids[name][0]
                grids[name][0] = row[:-1] if len(row) > 1 else row + [0]
        elif kind == pe.NON_BINARY_VALUE:
            for name in targets:
                grids[name][0][0] = 2
        return json.dumps(grids)


class ReplayBackend:
    """Serves recorded responses; repeated identical requests get successive records."""

    def __init__(self, store: TranscriptStore) -> None:
        self.store = store
        self._served: Dict[str, int] = {}
        self._lock = threading.Lock()

    def send(self, request: MllmRequest) -> MllmResponse:
        fingerprint = request.fingerprint
        records = self.store.lookup(fingerprint)
        if not records:
            meta = request.metadata
            raise BackendFormatError(
                f"No recorded response for request {fingerprint[:12]} "
                f"(sample={meta.get('sample_id')}, stage={meta.get('stage')}, attempt={meta.get('attempt')})"
            )
        with self._lock:
            n = self._served.get(fingerprint, 0)
            self._served[fingerprint] = n + 1
        record = records[min(n, len(records) - 1)]
        response = record.get("response") or {}
        return MllmResponse(
            text=str(response.get("text", "")),
            usage=Usage.from_dict(response.get("usage")),
            latency_ms=float(response.get("latency_ms", 0.0)),
            model=str(record.get("model", request.model)),
        )


class RecordingBackend:
    def __init__(self, inner: MllmBackend, store: TranscriptStore) -> None:
        self.inner = inner
        self.store = store

    def send(self, request: MllmRequest) -> MllmResponse:
        response = self.inner.send(request)
        meta = request.metadata
        self.store.append(
            {
                "fingerprint": request.fingerprint,
                "model": request.model,
                "sample_id": meta.get("sample_id"),
                "stage": meta.get("stage"),
                "attempt": meta.get("attempt"),
                "request": {
                    "messages": [{"role": m.role, "text": m.text} for m in request.messages],
                    "image_digests": [img.digest for img in request.images],
                },
                "response": {
                    "text": response.text,
                    "usage": response.usage.to_dict(),
                    "latency_ms": response.latency_ms,
                },
            }
        )
        return response


def build_backend(
    config: BackendConfig,
    *,
    seg: Optional[PartSegmentation] = None,
    ground_truth: Optional[Mapping[str, ContactVector]] = None,
    seed: int = 0,
) -> MllmBackend:
    if config.kind == "live":
        backend: MllmBackend = LiveBackend(config)
    elif config.kind == "oracle":
        if seg is None or ground_truth is None:
            raise ConfigError("The oracle backend needs a segmentation and ground truth")
        backend = OracleBackend(seg, ground_truth, corruption=config.corruption, seed=seed, model=config.model)
    else:
        backend = ReplayBackend(TranscriptStore(config.transcript_path))
    if config.record_path:
        backend = RecordingBackend(backend, TranscriptStore(config.record_path))
    return backend


# ---------------------------------------------------------------------------
# Client
# ---------------------------------------------------------------------------

class MllmClient:
    """Shared by all sample workers: caps in-flight calls, paces requests and totals usage."""

    def __init__(self, backend: MllmBackend, config: Optional[BackendConfig] = None) -> None:
        self.backend = backend
        self.config = config or BackendConfig()
        self._slots = threading.BoundedSemaphore(self.config.limits.max_in_flight)
        self._pace_lock = threading.Lock()
        self._next_start = 0.0
        self._usage_lock = threading.Lock()
        self._usage = Usage()
        self._calls = 0

    @property
    def model(self) -> str:
        return self.config.model

    def build_request(
        self,
        prompt: str,
        images: Sequence[ImagePayload] = (),
        **metadata: Any,
    ) -> MllmRequest:
        limits = self.config.limits
        return MllmRequest(
            model=self.config.model,
            messages=(ChatMessage("user", prompt),),
            images=tuple(images),
            max_output_tokens=limits.max_output_tokens,
            temperature=limits.temperature,
            metadata=dict(metadata),
        )

    def _pace(self) -> None:
        rpm = self.config.limits.requests_per_minute
        if rpm <= 0:
            return
        interval = 60.0 / rpm
        with self._pace_lock:
            now = time.monotonic()
            start = max(now, self._next_start)
            self._next_start = start + interval
        if start > now:
            time.sleep(start - now)

    def send(self, request: MllmRequest) -> MllmResponse:
        with self._slots:
            self._pace()
            response = self.backend.send(request)
        with self._usage_lock:
            self._usage = self._usage + response.usage
            self._calls += 1
        return response

    @property
    def usage(self) -> Usage:
        with self._usage_lock:
            return self._usage

    @property
    def call_count(self) -> int:
        with self._usage_lock:
            return self._calls

    def cost(self) -> float:
        return compute_cost(self.usage, self.config.model, self.config.pricing)
