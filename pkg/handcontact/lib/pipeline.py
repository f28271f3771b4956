"""
Three-stage contact reasoning for one sample, and dataset runs.

Stage 0 asks for a free-form interaction description, stage 1 for the set of
contact parts, stage 2 for binary vertex grids of the selected parts. Stages 1
and 2 are re-asked with violation feedback until the response passes
validation or the attempt budget runs out; exhausted stages fall back to a
conservative answer and mark the sample degraded. Vertices outside the
selected parts are always non-contact.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple

from PIL import Image

from . import prompt_engine as pe
from .config import AblationFlags
from .errors import ConfigError, HandContactError
from .hand_model import (
    ContactVector,
    DenseGridPrediction,
    PartSegmentation,
    PathLike,
    grids_to_contact,
    vertices_of_parts,
)
from .mllm_client import ImagePayload, MllmClient, encode_image
from .prompt_engine import GridManifest, PromptTemplate, Violation

logger = logging.getLogger(__name__)

FREEFORM_ATTEMPTS = 2
PART_STAGE_ATTEMPTS = 3
DENSE_STAGE_ATTEMPTS = 5
STAGE_NAMES = {0: "freeform", 1: "parts", 2: "dense"}


@dataclass(frozen=True, eq=False)
class InputSample:
    id: str
    image: Image.Image
    gt: Optional[ContactVector] = None
    hand: str = "right"

    def __post_init__(self) -> None:
        width, height = self.image.size
        if width == 0 or height == 0:
            raise ValueError(f"Sample {self.id}: empty image")


@dataclass(frozen=True)
class InteractionDescription:
    text: str


@dataclass(frozen=True)
class PartPrediction:
    part_names: Tuple[str, ...] = ()

    @property
    def count(self) -> int:
        return len(self.part_names)


@dataclass(frozen=True)
class ParseResult:
    value: Any = None
    violations: Tuple[Violation, ...] = ()
    # Grids that passed every check, kept even when other parts failed.
    valid_grids: Mapping[str, Tuple[Tuple[int, ...], ...]] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return not self.violations


# ---------------------------------------------------------------------------
# Transcripts
# ---------------------------------------------------------------------------

@dataclass
class AttemptRecord:
    attempt: int
    prompt: str
    response: str
    input_tokens: int = 0
    output_tokens: int = 0
    latency_ms: float = 0.0
    violations: List[Violation] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "attempt": self.attempt,
            "prompt": self.prompt,
            "response": self.response,
            "input_tokens": self.input_tokens,
            "output_tokens": self.output_tokens,
            "latency_ms": self.latency_ms,
            "violations": [v.to_dict() for v in self.violations],
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "AttemptRecord":
        return cls(
            attempt=int(data["attempt"]),
            prompt=data.get("prompt", ""),
            response=data.get("response", ""),
            input_tokens=int(data.get("input_tokens", 0)),
            output_tokens=int(data.get("output_tokens", 0)),
            latency_ms=float(data.get("latency_ms", 0.0)),
            violations=[Violation.from_dict(v) for v in data.get("violations", [])],
        )


@dataclass
class StageRecord:
    stage: int
    attempts: List[AttemptRecord] = field(default_factory=list)
    skipped: bool = False
    degraded: bool = False
    fallback: Optional[str] = None
    result: Any = None

    @property
    def name(self) -> str:
        return STAGE_NAMES[self.stage]

    @property
    def attempts_used(self) -> int:
        return len(self.attempts)

    @property
    def output_tokens(self) -> int:
        return sum(a.output_tokens for a in self.attempts)

    @property
    def input_tokens(self) -> int:
        return sum(a.input_tokens for a in self.attempts)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "stage": self.stage,
            "name": self.name,
            "skipped": self.skipped,
            "degraded": self.degraded,
            "fallback": self.fallback,
            "attempts_used": self.attempts_used,
            "output_tokens": self.output_tokens,
            "result": self.result,
            "attempts": [a.to_dict() for a in self.attempts],
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "StageRecord":
        return cls(
            stage=int(data["stage"]),
            attempts=[AttemptRecord.from_dict(a) for a in data.get("attempts", [])],
            skipped=bool(data.get("skipped", False)),
            degraded=bool(data.get("degraded", False)),
            fallback=data.get("fallback"),
            result=data.get("result"),
        )


@dataclass
class StageTranscript:
    sample_id: str
    model: str = ""
    ablation: str = "full"
    stages: Dict[int, StageRecord] = field(default_factory=dict)
    contact: Optional[ContactVector] = None
    selected_parts: Tuple[str, ...] = ()
    manifest_vertices: int = 0
    active_vertices: int = 0
    error: Optional[str] = None

    @property
    def degraded(self) -> bool:
        return self.error is not None or any(s.degraded for s in self.stages.values())

    @property
    def output_tokens(self) -> int:
        return sum(s.output_tokens for s in self.stages.values())

    def output_tokens_by_stage(self) -> Dict[int, int]:
        return {stage: self.stages[stage].output_tokens if stage in self.stages else 0 for stage in STAGE_NAMES}

    def to_dict(self) -> Dict[str, Any]:
        return {
            "sample_id": self.sample_id,
            "model": self.model,
            "ablation": self.ablation,
            "degraded": self.degraded,
            "error": self.error,
            "output_tokens": self.output_tokens,
            "selected_parts": list(self.selected_parts),
            "manifest_vertices": self.manifest_vertices,
            "active_vertices": self.active_vertices,
            "stages": [self.stages[k].to_dict() for k in sorted(self.stages)],
            "contact": self.contact.to_list() if self.contact is not None else None,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "StageTranscript":
        stages = {int(s["stage"]): StageRecord.from_dict(s) for s in data.get("stages", [])}
        contact = data.get("contact")
        return cls(
            sample_id=str(data["sample_id"]),
            model=data.get("model", ""),
            ablation=data.get("ablation", "full"),
            stages=stages,
            contact=ContactVector(contact) if contact is not None else None,
            selected_parts=tuple(data.get("selected_parts", [])),
            manifest_vertices=int(data.get("manifest_vertices", 0)),
            active_vertices=int(data.get("active_vertices", 0)),
            error=data.get("error"),
        )


class StageInterrupted(HandContactError):
    """A backend error stopped a stage; `record` holds the attempts already made."""

    def __init__(self, record: StageRecord, cause: HandContactError) -> None:
        self.record = record
        self.cause = cause
        super().__init__(f"stage {record.stage} attempt {record.attempts_used + 1}: {cause}")


# ---------------------------------------------------------------------------
# Response parsing
# ---------------------------------------------------------------------------

def _balanced_object_end(text: str, start: int) -> Optional[int]:
    depth = 0
    in_string = False
    escaped = False
    for i in range(start, len(text)):
        ch = text[i]
        if in_string:
            if escaped:
                escaped = False
            elif ch == "\\":
                escaped = True
            elif ch == '"':
                in_string = False
        elif ch == '"':
            in_string = True
        elif ch == "{":
            depth += 1
        elif ch == "}":
            depth -= 1
            if depth == 0:
                return i
    return None


def extract_json_object(text: str) -> Optional[Dict[str, Any]]:
    """First balanced `{...}` in `text` that parses as a JSON object."""
    start = text.find("{")
    while start != -1:
        end = _balanced_object_end(text, start)
        if end is None:
            start = text.find("{", start + 1)
            continue
        try:
            obj = json.loads(text[start:end + 1])
        except json.JSONDecodeError:
            obj = None
        if isinstance(obj, dict):
            return obj
        start = text.find("{", start + 1)
    return None


def parse_part_response(text: str, seg: PartSegmentation) -> ParseResult:
    if not text or not text.strip():
        return ParseResult(violations=(Violation(pe.EMPTY_RESPONSE),))
    obj = extract_json_object(text)
    if obj is None:
        return ParseResult(violations=(Violation(pe.NOT_JSON, detail="no JSON object found"),))
    raw = obj.get("contact_parts")
    if not isinstance(raw, list):
        got = "not a list" if "contact_parts" in obj else sorted(obj)
        return ParseResult(violations=(Violation(pe.MISSING_KEY, expected="contact_parts", got=got),))

    violations: List[Violation] = []
    names: List[str] = []
    for entry in raw:
        if not isinstance(entry, str):
            violations.append(Violation(pe.NON_TEXT_ENTRY, got=entry))
        elif not seg.has_part(entry):
            violations.append(Violation(pe.UNKNOWN_PART, part=entry))
        elif entry not in names:
            names.append(entry)
    if violations:
        return ParseResult(violations=tuple(violations))
    return ParseResult(value=PartPrediction(tuple(names)))


def _is_binary(value: Any) -> bool:
    return type(value) is int and value in (0, 1)


def parse_dense_response(text: str, manifest: GridManifest) -> ParseResult:
    """Check every selected part's grid; all violations are collected."""
    if not text or not text.strip():
        return ParseResult(violations=(Violation(pe.EMPTY_RESPONSE),))
    obj = extract_json_object(text)
    if obj is None:
        return ParseResult(violations=(Violation(pe.NOT_JSON, detail="no JSON object found"),))
    if set(obj) == {"grids"} and isinstance(obj["grids"], dict) and manifest.entry("grids") is None:
        obj = obj["grids"]

    violations: List[Violation] = []
    valid: Dict[str, Tuple[Tuple[int, ...], ...]] = {}
    for entry in manifest.entries:
        name = entry.part_name
        if name not in obj:
            violations.append(Violation(pe.MISSING_PART, part=name))
            continue
        grid = obj[name]
        if not isinstance(grid, list) or not all(isinstance(row, list) for row in grid):
            violations.append(Violation(pe.INVALID_GRID, part=name, detail="expected a list of rows"))
            continue

        before = len(violations)
        if len(grid) != entry.num_rows:
            violations.append(Violation(pe.ROW_COUNT_MISMATCH, part=name, expected=entry.num_rows, got=len(grid)))
        for r, (row, expected) in enumerate(zip(grid, entry.row_lengths)):
            if len(row) != expected:
                violations.append(Violation(pe.ROW_LENGTH_MISMATCH, part=name, row=r, expected=expected, got=len(row)))
        for r, row in enumerate(grid):
            for c, value in enumerate(row):
                if not _is_binary(value):
                    violations.append(Violation(pe.NON_BINARY_VALUE, part=name, row=r, col=c, got=value))
        if len(violations) == before:
            valid[name] = tuple(tuple(row) for row in grid)

    for name in obj:
        if manifest.entry(name) is None:
            violations.append(Violation(pe.EXTRA_PART, part=str(name)))

    if violations:
        return ParseResult(violations=tuple(violations), valid_grids=valid)
    ordered = {e.part_name: valid[e.part_name] for e in manifest.entries}
    return ParseResult(value=DenseGridPrediction(ordered), valid_grids=valid)


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------

def _run_attempts(
    *,
    stage: int,
    template: PromptTemplate,
    context: Dict[str, Optional[str]],
    images: Sequence[ImagePayload],
    client: MllmClient,
    sample_id: str,
    max_attempts: int,
    parse: Callable[[str], ParseResult],
    with_feedback: bool = True,
    metadata: Optional[Mapping[str, Any]] = None,
) -> Tuple[ParseResult, StageRecord]:
    record = StageRecord(stage=stage)
    feedback: Optional[str] = None
    parsed = ParseResult()
    for attempt in range(1, max_attempts + 1):
        prompt = pe.render_prompt(template, {**context, "error_feedback": feedback})
        request = client.build_request(
            prompt, images, sample_id=sample_id, stage=stage, attempt=attempt, **dict(metadata or {})
        )
        try:
            response = client.send(request)
        except HandContactError as exc:
            raise StageInterrupted(record, exc) from exc
        parsed = parse(response.text)
        record.attempts.append(
            AttemptRecord(
                attempt=attempt,
                prompt=prompt,
                response=response.text,
                input_tokens=response.usage.input_tokens,
                output_tokens=response.usage.output_tokens,
                latency_ms=response.latency_ms,
                violations=list(parsed.violations),
            )
        )
        if parsed.ok:
            return parsed, record
        if with_feedback:
            feedback = pe.build_error_feedback(parsed.violations)
        logger.info(
            "Sample %s stage %d attempt %d rejected: %s",
            sample_id, stage, attempt, ", ".join(v.kind for v in parsed.violations),
        )
    return parsed, record


def _parse_description(text: str) -> ParseResult:
    if not text or not text.strip():
        return ParseResult(violations=(Violation(pe.EMPTY_RESPONSE),))
    return ParseResult(value=InteractionDescription(text))


def run_stage0(
    sample_id: str,
    image: ImagePayload,
    templates: Mapping[int, PromptTemplate],
    client: MllmClient,
) -> Tuple[InteractionDescription, StageRecord]:
    parsed, record = _run_attempts(
        stage=0,
        template=templates[0],
        context={},
        images=[image],
        client=client,
        sample_id=sample_id,
        max_attempts=FREEFORM_ATTEMPTS,
        parse=_parse_description,
        with_feedback=False,
    )
    if parsed.ok:
        description = parsed.value
    else:
        logger.warning("Sample %s: empty interaction description; continuing without one", sample_id)
        description = InteractionDescription("")
        record.degraded = True
        record.fallback = "empty_description"
    record.result = description.text
    return description, record


def run_stage1(
    sample_id: str,
    image: ImagePayload,
    z: str,
    seg: PartSegmentation,
    part_prompt: ImagePayload,
    templates: Mapping[int, PromptTemplate],
    client: MllmClient,
) -> Tuple[PartPrediction, StageRecord]:
    parsed, record = _run_attempts(
        stage=1,
        template=templates[1],
        context={"z": z, "part_list": pe.format_part_list(seg.parts)},
        images=[image, part_prompt],
        client=client,
        sample_id=sample_id,
        max_attempts=PART_STAGE_ATTEMPTS,
        parse=lambda text: parse_part_response(text, seg),
    )
    if parsed.ok:
        prediction = parsed.value
    else:
        logger.warning("Sample %s: part stage exhausted %d attempts; predicting no contact", sample_id, PART_STAGE_ATTEMPTS)
        prediction = PartPrediction(())
        record.degraded = True
        record.fallback = "no_contact"
    record.result = list(prediction.part_names)
    return prediction, record


def run_stage2(
    sample_id: str,
    image: ImagePayload,
    z: str,
    selected: Sequence[str],
    seg: PartSegmentation,
    full_prompt: ImagePayload,
    templates: Mapping[int, PromptTemplate],
    client: MllmClient,
) -> Tuple[DenseGridPrediction, StageRecord, GridManifest]:
    manifest = pe.build_grid_manifest(seg, selected)
    if not manifest.entries:
        record = StageRecord(stage=2, skipped=True, result={})
        return DenseGridPrediction({}), record, manifest

    selected_parts = [seg.part(name) for name in manifest.part_names]
    parsed, record = _run_attempts(
        stage=2,
        template=templates[2],
        context={
            "z": z,
            "part_list": pe.format_part_list(selected_parts),
            "grid_manifest": manifest.to_json(),
        },
        images=[image, full_prompt],
        client=client,
        sample_id=sample_id,
        max_attempts=DENSE_STAGE_ATTEMPTS,
        parse=lambda text: parse_dense_response(text, manifest),
        metadata={"selected_parts": list(manifest.part_names)},
    )
    if parsed.ok:
        prediction = parsed.value
    else:
        grids: Dict[str, Tuple[Tuple[int, ...], ...]] = {}
        filled = []
        for entry in manifest.entries:
            if entry.part_name in parsed.valid_grids:
                grids[entry.part_name] = parsed.valid_grids[entry.part_name]
            else:
                grids[entry.part_name] = tuple((1,) * n for n in entry.row_lengths)
                filled.append(entry.part_name)
        logger.warning(
            "Sample %s: dense stage exhausted %d attempts; filled %d part(s) with contact",
            sample_id, DENSE_STAGE_ATTEMPTS, len(filled),
        )
        prediction = DenseGridPrediction(grids)
        record.degraded = True
        record.fallback = "all_ones:" + ",".join(filled)
    record.result = prediction.to_dict()
    return prediction, record, manifest


# ---------------------------------------------------------------------------
# Samples and datasets
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class PipelineContext:
    """Everything shared by the samples of one run; prompt images are rendered once."""

    seg: PartSegmentation
    templates: Mapping[int, PromptTemplate]
    client: MllmClient
    part_prompt: ImagePayload
    full_prompt: ImagePayload
    flags: AblationFlags = AblationFlags()
    jpeg_quality: int = 90


def run_sample(sample: InputSample, ctx: PipelineContext) -> StageTranscript:
    seg, flags = ctx.seg, ctx.flags
    transcript = StageTranscript(sample_id=sample.id, model=ctx.client.model, ablation=flags.name)
    try:
        image = encode_image(sample.image, quality=ctx.jpeg_quality)

        z = ""
        if flags.freeform:
            description, transcript.stages[0] = run_stage0(sample.id, image, ctx.templates, ctx.client)
            z = description.text
        else:
            transcript.stages[0] = StageRecord(stage=0, skipped=True)

        if flags.part_stage:
            prediction, transcript.stages[1] = run_stage1(
                sample.id, image, z, seg, ctx.part_prompt, ctx.templates, ctx.client
            )
        else:
            prediction = PartPrediction(seg.part_names)
            transcript.stages[1] = StageRecord(stage=1, skipped=True, result=list(seg.part_names))

        selected = prediction.part_names if flags.conditioning else seg.part_names
        grids, transcript.stages[2], manifest = run_stage2(
            sample.id, image, z, selected, seg, ctx.full_prompt, ctx.templates, ctx.client
        )

        active = vertices_of_parts(seg, manifest.part_names)
        transcript.selected_parts = manifest.part_names
        transcript.manifest_vertices = manifest.total_vertices
        transcript.active_vertices = active.size
        transcript.contact = grids_to_contact(seg, grids, active)
    except HandContactError as exc:
        if isinstance(exc, StageInterrupted):
            transcript.stages[exc.record.stage] = exc.record
            exc = exc.cause
        logger.error("Sample %s failed: %s", sample.id, exc)
        transcript.error = f"{type(exc).__name__}: {exc}"
        transcript.contact = ContactVector.zeros(seg.vertex_count)
    except Exception as exc:  # a bad sample never aborts the run
        logger.exception("Sample %s failed unexpectedly", sample.id)
        transcript.error = f"{type(exc).__name__}: {exc}"
        transcript.contact = ContactVector.zeros(seg.vertex_count)
    return transcript


def run_dataset(samples: Sequence[InputSample], ctx: PipelineContext, workers: int = 1) -> List[StageTranscript]:
    """Transcripts in sample order; samples run concurrently when workers > 1."""
    if workers <= 1:
        return [run_sample(s, ctx) for s in samples]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda s: run_sample(s, ctx), samples))


_UNSAFE = re.compile(r"[^A-Za-z0-9._-]+")


def transcript_filename(sample_id: str) -> str:
    """Filesystem-safe name; ids changed by sanitizing get a digest suffix so names stay unique."""
    safe = _UNSAFE.sub("_", sample_id)
    if safe != sample_id:
        safe += "-" + hashlib.sha1(sample_id.encode("utf-8")).hexdigest()[:8]
    return safe + ".json"


def write_transcripts(transcripts: Sequence[StageTranscript], out_dir: PathLike) -> Path:
    folder = Path(out_dir) / "transcripts"
    names: Dict[str, str] = {}
    for t in transcripts:
        name = transcript_filename(t.sample_id)
        if name in names:
            raise ConfigError(f"Samples {names[name]!r} and {t.sample_id!r} map to the same transcript file {name}")
        names[name] = t.sample_id
    folder.mkdir(parents=True, exist_ok=True)
    for t in transcripts:
        path = folder / transcript_filename(t.sample_id)
        path.write_text(json.dumps(t.to_dict(), indent=2) + "\n", encoding="utf-8")
    return folder


def load_transcripts(run_dir: PathLike) -> List[StageTranscript]:
    folder = Path(run_dir) / "transcripts"
    if not folder.is_dir():
        raise ConfigError(f"No transcripts in {run_dir}")
    return [
        StageTranscript.from_dict(json.loads(p.read_text(encoding="utf-8")))
        for p in sorted(folder.glob("*.json"))
    ]


def write_run_manifest(out_dir: PathLike, manifest: Mapping[str, Any]) -> Path:
    path = Path(out_dir) / "run_manifest.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path
