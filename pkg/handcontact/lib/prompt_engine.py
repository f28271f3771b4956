"""
Stage prompt templates, grid manifests and retry feedback.

Templates are plain text with `{z}`, `{part_list}`, `{grid_manifest}` and
`{error_feedback}` placeholders. Only those four names are substituted, so the
literal JSON braces in the bundled templates pass through untouched.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

from .errors import ConfigError, MissingContextError
from .hand_model import Part, PartSegmentation, PathLike

logger = logging.getLogger(__name__)

TEMPLATE_DIR = Path(__file__).resolve().parent.parent / "templates"
TEMPLATE_FILES = {
    0: "stage0_freeform.txt",
    1: "stage1_parts.txt",
    2: "stage2_dense.txt",
}
DEFAULT_TEMPLATE_DIGESTS = {
    0: "89de77a3a8aa3bdb5349d2de102fd13d31e349e9560e7daf4e6443854a1ab086",
    1: "719c3d58d42ecfecf0d7e1300d441787356d6175664e9681903e86fa846bc086",
    2: "95463d49046859bd431e4ec720e159b8ea4df921167395abab86ac0af957e69b",
}
# Sentences each stage's template must keep.
STAGE_MARKERS = {
    0: "Output free-form text only.",
    1: 'output format must be {"contact_parts":[part_a_name, part_b_name, ...]}',
    2: "each grid must exactly match the provided num_rows and row_lengths",
}
REQUIRED_CONTEXT: Dict[int, Tuple[str, ...]] = {
    0: (),
    1: ("z", "part_list"),
    2: ("z", "part_list", "grid_manifest"),
}
PLACEHOLDERS = ("z", "part_list", "grid_manifest", "error_feedback")
_PLACEHOLDER_RE = re.compile(r"\{(" + "|".join(PLACEHOLDERS) + r")\}")

EMPTY_DESCRIPTION = "(not available)"
FEEDBACK_HEADER = "Your previous response was rejected. Fix every violation below and answer again:"


@dataclass(frozen=True)
class PromptTemplate:
    stage: int
    body: str
    source: str = "default"

    @property
    def digest(self) -> str:
        return hashlib.sha256(self.body.encode("utf-8")).hexdigest()

    @property
    def placeholders(self) -> Tuple[str, ...]:
        return tuple(dict.fromkeys(_PLACEHOLDER_RE.findall(self.body)))

    @property
    def is_default(self) -> bool:
        return self.digest == DEFAULT_TEMPLATE_DIGESTS.get(self.stage)


def load_template(stage: int, templates_dir: Optional[PathLike] = None) -> PromptTemplate:
    if stage not in TEMPLATE_FILES:
        raise ConfigError(f"No template for stage {stage}")
    base = Path(templates_dir) if templates_dir else TEMPLATE_DIR
    path = base / TEMPLATE_FILES[stage]
    if not path.exists():
        raise ConfigError(f"Template not found: {path}")
    body = path.read_bytes().decode("utf-8")
    template = PromptTemplate(stage=stage, body=body, source=str(path))
    if STAGE_MARKERS[stage] not in body:
        logger.warning("Stage %d template %s lacks its output rule: %r", stage, path, STAGE_MARKERS[stage])
    return template


def load_templates(templates_dir: Optional[PathLike] = None) -> Dict[int, PromptTemplate]:
    return {stage: load_template(stage, templates_dir) for stage in sorted(TEMPLATE_FILES)}


def verify_default_templates(templates: Mapping[int, PromptTemplate]) -> List[str]:
    """Digest mismatches against the bundled templates, one message per stage."""
    problems = []
    for stage, expected in sorted(DEFAULT_TEMPLATE_DIGESTS.items()):
        template = templates.get(stage)
        if template is None:
            problems.append(f"stage {stage}: template missing")
        elif template.digest != expected:
            problems.append(f"stage {stage}: digest {template.digest[:12]} differs from bundled {expected[:12]}")
    return problems


def render_prompt(template: PromptTemplate, context: Mapping[str, Optional[str]]) -> str:
    """Substitute the stage's placeholders; feedback goes into `{error_feedback}`
    when the template has one and is appended as a final section otherwise."""
    required = list(REQUIRED_CONTEXT.get(template.stage, ()))
    required += [p for p in template.placeholders if p != "error_feedback" and p not in required]
    for name in required:
        if context.get(name) is None:
            raise MissingContextError(name)

    feedback = context.get("error_feedback") or ""
    values = {name: context.get(name) or "" for name in PLACEHOLDERS}
    if "z" in values and not values["z"].strip():
        values["z"] = EMPTY_DESCRIPTION
    values["error_feedback"] = feedback

    text = _PLACEHOLDER_RE.sub(lambda m: values[m.group(1)], template.body)
    if feedback and "error_feedback" not in template.placeholders:
        text = f"{text.rstrip()}\n\n{FEEDBACK_HEADER}\n{feedback}"
    return text


def format_part_list(parts: Iterable[Part]) -> str:
    return "\n".join(f"{p.index}: {p.name}" for p in sorted(parts, key=lambda p: p.index))


# ---------------------------------------------------------------------------
# Grid manifest
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ManifestEntry:
    part_name: str
    part_index: int
    num_rows: int
    row_lengths: Tuple[int, ...]
    total_vertices: int

    def to_dict(self) -> Dict[str, Any]:
        return {
            "part_name": self.part_name,
            "part_index": self.part_index,
            "num_rows": self.num_rows,
            "row_lengths": list(self.row_lengths),
            "total_vertices": self.total_vertices,
        }


@dataclass(frozen=True)
class GridManifest:
    entries: Tuple[ManifestEntry, ...] = ()

    @property
    def part_names(self) -> Tuple[str, ...]:
        return tuple(e.part_name for e in self.entries)

    @property
    def total_vertices(self) -> int:
        return sum(e.total_vertices for e in self.entries)

    def entry(self, part_name: str) -> Optional[ManifestEntry]:
        for e in self.entries:
            if e.part_name == part_name:
                return e
        return None

    def to_json(self) -> str:
        if not self.entries:
            return "[]"
        return "[\n" + ",\n".join(json.dumps(e.to_dict()) for e in self.entries) + "\n]"


def build_grid_manifest(seg: PartSegmentation, part_names: Iterable[str]) -> GridManifest:
    parts = sorted({seg.part(name).index: seg.part(name) for name in part_names}.values(), key=lambda p: p.index)
    entries = []
    for part in parts:
        grid = seg.grid(part.name)
        entries.append(
            ManifestEntry(
                part_name=part.name,
                part_index=part.index,
                num_rows=grid.num_rows,
                row_lengths=tuple(grid.row_lengths),
                total_vertices=sum(grid.row_lengths),
            )
        )
    return GridManifest(tuple(entries))


def emit_grid_manifest(seg: PartSegmentation, part_names: Iterable[str]) -> str:
    return build_grid_manifest(seg, part_names).to_json()


# ---------------------------------------------------------------------------
# Violations and feedback
# ---------------------------------------------------------------------------

NOT_JSON = "not_json"
EMPTY_RESPONSE = "empty_response"
MISSING_KEY = "missing_key"
UNKNOWN_PART = "unknown_part"
NON_TEXT_ENTRY = "non_text_entry"
MISSING_PART = "missing_part"
EXTRA_PART = "extra_part"
INVALID_GRID = "invalid_grid"
ROW_COUNT_MISMATCH = "row_count_mismatch"
ROW_LENGTH_MISMATCH = "row_length_mismatch"
NON_BINARY_VALUE = "non_binary_value"

VIOLATION_LABELS = {
    NOT_JSON: "response is not a JSON object",
    EMPTY_RESPONSE: "empty response",
    MISSING_KEY: "missing required key",
    UNKNOWN_PART: "unknown part name",
    NON_TEXT_ENTRY: "part list entry is not a string",
    MISSING_PART: "missing part",
    EXTRA_PART: "extra part",
    INVALID_GRID: "grid is not a list of rows",
    ROW_COUNT_MISMATCH: "row count mismatch",
    ROW_LENGTH_MISMATCH: "row length mismatch",
    NON_BINARY_VALUE: "non-binary value",
}

_VIOLATION_FIELDS = ("part", "row", "col", "expected", "got", "detail")


@dataclass(frozen=True)
class Violation:
    """One structural problem in a model response; rows and columns are 0-based."""

    kind: str
    part: Optional[str] = None
    row: Optional[int] = None
    col: Optional[int] = None
    expected: Any = None
    got: Any = None
    detail: Optional[str] = None

    def to_dict(self) -> Dict[str, Any]:
        out: Dict[str, Any] = {"kind": self.kind}
        for name in _VIOLATION_FIELDS:
            value = getattr(self, name)
            if value is not None:
                out[name] = value
        return out

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Violation":
        return cls(kind=data["kind"], **{k: data.get(k) for k in _VIOLATION_FIELDS})


def _format_value(value: Any) -> str:
    if isinstance(value, str):
        return value
    return json.dumps(value)


def format_violation(violation: Violation) -> str:
    label = VIOLATION_LABELS.get(violation.kind, violation.kind)
    fields = [
        f"{name}={_format_value(getattr(violation, name))}"
        for name in _VIOLATION_FIELDS
        if getattr(violation, name) is not None
    ]
    return f"- {label}: {' '.join(fields)}" if fields else f"- {label}"


def build_error_feedback(violations: Sequence[Violation]) -> str:
    if not violations:
        raise ValueError("Feedback needs at least one violation")
    return "\n".join(format_violation(v) for v in violations)
