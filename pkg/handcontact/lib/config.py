"""
Run configuration and ablation flags.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional

from .errors import ConfigError

SEGMENTATION_MODES = ("detailed", "coarse")


@dataclass(frozen=True)
class AblationFlags:
    name: str = "full"
    freeform: bool = True
    part_stage: bool = True
    conditioning: bool = True
    flatten_grids: bool = False
    segmentation: str = "detailed"

    def __post_init__(self) -> None:
        if self.segmentation not in SEGMENTATION_MODES:
            raise ConfigError(f"segmentation must be one of {SEGMENTATION_MODES}, got '{self.segmentation}'")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any], name: Optional[str] = None) -> "AblationFlags":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"Unknown ablation flags: {sorted(unknown)}")
        values = dict(data)
        for key in ("freeform", "part_stage", "conditioning", "flatten_grids"):
            if key in values and not isinstance(values[key], bool):
                raise ConfigError(f"Ablation flag {key} must be true or false")
        if name is not None:
            values["name"] = name
        return cls(**values)


ABLATION_PRESETS: Dict[str, AblationFlags] = {
    "full": AblationFlags(),
    "coarse_segmentation": AblationFlags(name="coarse_segmentation", segmentation="coarse"),
    "flat_grids": AblationFlags(name="flat_grids", flatten_grids=True),
    "dense_only": AblationFlags(name="dense_only", freeform=False, part_stage=False),
    "part_dense": AblationFlags(name="part_dense", freeform=False),
    "freeform_dense": AblationFlags(name="freeform_dense", part_stage=False),
    "no_conditioning": AblationFlags(name="no_conditioning", conditioning=False),
}


def resolve_ablation(value: Optional[str]) -> AblationFlags:
    """A preset name, a JSON object literal, or a path to a JSON file of flags."""
    if not value:
        return ABLATION_PRESETS["full"]
    if value in ABLATION_PRESETS:
        return ABLATION_PRESETS[value]
    text = value
    path = Path(value)
    if not value.lstrip().startswith("{"):
        if not path.exists():
            raise ConfigError(f"Unknown ablation preset or file: {value}")
        text = path.read_text(encoding="utf-8")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"Ablation flags are not valid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise ConfigError("Ablation flags must be a JSON object")
    return AblationFlags.from_dict(data, name=data.get("name", "custom"))


@dataclass(frozen=True)
class RunConfig:
    mesh_path: str
    seg_path: str
    dataset_path: Optional[str] = None
    out_dir: str = "results"
    templates_dir: Optional[str] = None
    backend_path: Optional[str] = None
    coarse_seg_path: Optional[str] = None
    vertex_map_path: Optional[str] = None
    workers: int = 1
    seed: int = 0
    ablation: AblationFlags = field(default_factory=AblationFlags)

    def missing_files(self) -> List[str]:
        required = [("--mesh", self.mesh_path), ("--seg", self.seg_path)]
        optional = [
            ("--dataset", self.dataset_path),
            ("--templates-dir", self.templates_dir),
            ("--backend", self.backend_path),
            ("--coarse-seg", self.coarse_seg_path),
            ("--vertex-map", self.vertex_map_path),
        ]
        missing = []
        for flag, value in required + [(f, v) for f, v in optional if v]:
            if not value or not Path(value).exists():
                missing.append(f"{flag} {value}")
        return missing

    def validate(self) -> "RunConfig":
        problems = self.missing_files()
        if self.workers < 1:
            problems.append(f"--workers must be >= 1, got {self.workers}")
        if self.ablation.segmentation == "coarse" and not self.coarse_seg_path:
            problems.append("--coarse-seg is required for the coarse segmentation ablation")
        if problems:
            raise ConfigError("Invalid run configuration: " + "; ".join(problems))
        return self

    def with_ablation(self, flags: AblationFlags) -> "RunConfig":
        return replace(self, ablation=flags)

    def to_dict(self) -> Dict[str, Any]:
        out = asdict(self)
        out["ablation"] = self.ablation.to_dict()
        return out


def config_hash(data: Mapping[str, Any]) -> str:
    return hashlib.sha256(json.dumps(data, sort_keys=True, default=str).encode("utf-8")).hexdigest()[:16]
