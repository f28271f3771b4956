"""
Builds part-wise vertex grids from mesh topology.

Rows are breadth-first distance layers from a part's distal seed(s) over the
vertex graph induced by the part, so row 0 is the fingertip-most layer and rows
run toward the wrist. Within a row, vertices are ordered left to right in the
hint's canonical view (ties broken by vertex id).
"""

from __future__ import annotations

import json
import logging
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, DisconnectedPartError, ParseError, SeedNotInPartError
from .hand_model import GridSpec, HandMesh, Part, PartSegmentation, PathLike
from .visual_prompt import VIEW_FRAMES

logger = logging.getLogger(__name__)

# Consecutive vertices in a row further apart than this (in graph hops) get a warning.
MAX_ROW_HOPS = 2


@dataclass(frozen=True)
class OrientationHint:
    part_index: int
    distal_seeds: Tuple[int, ...]
    view_axis: str = "palmar"

    def __post_init__(self) -> None:
        if not self.distal_seeds:
            raise ValueError(f"Hint for part {self.part_index} has no distal seed")
        if self.view_axis not in VIEW_FRAMES:
            raise ValueError(f"Hint for part {self.part_index}: unknown view_axis '{self.view_axis}'")

    @property
    def distal_seed(self) -> int:
        return self.distal_seeds[0]


def hints_from_list(data: Any) -> Dict[int, OrientationHint]:
    if not isinstance(data, list):
        raise ParseError("Hints file must contain a JSON list")
    hints: Dict[int, OrientationHint] = {}
    for i, raw in enumerate(data):
        if not isinstance(raw, dict) or not isinstance(raw.get("part_index"), int):
            raise ParseError(f"hints[{i}]: part_index is required")
        if "distal_seeds" in raw:
            seeds = raw["distal_seeds"]
        elif "distal_seed" in raw:
            seeds = [raw["distal_seed"]]
        else:
            raise ParseError(f"hints[{i}]: distal_seed or distal_seeds is required")
        if not isinstance(seeds, list) or any(isinstance(s, bool) or not isinstance(s, int) for s in seeds):
            raise ParseError(f"hints[{i}]: seeds must be integers")
        try:
            hint = OrientationHint(
                part_index=raw["part_index"],
                distal_seeds=tuple(seeds),
                view_axis=raw.get("view_axis", "palmar"),
            )
        except ValueError as exc:
            raise ParseError(f"hints[{i}]: {exc}") from exc
        if hint.part_index in hints:
            raise ParseError(f"Duplicate hint for part {hint.part_index}")
        hints[hint.part_index] = hint
    return hints


def hints_to_list(hints: Mapping[int, OrientationHint]) -> List[Dict[str, Any]]:
    out = []
    for idx in sorted(hints):
        h = hints[idx]
        entry: Dict[str, Any] = {"part_index": h.part_index, "view_axis": h.view_axis}
        if len(h.distal_seeds) == 1:
            entry["distal_seed"] = h.distal_seed
        else:
            entry["distal_seeds"] = list(h.distal_seeds)
        out.append(entry)
    return out


def load_hints(path: PathLike) -> Dict[int, OrientationHint]:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON ({exc})") from exc
    return hints_from_list(data)


def save_hints(hints: Mapping[int, OrientationHint], path: PathLike) -> None:
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(hints_to_list(hints), indent=2) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# Graph helpers
# ---------------------------------------------------------------------------

def induced_adjacency(mesh: HandMesh, vertex_ids: Iterable[int]) -> Dict[int, Tuple[int, ...]]:
    members = set(vertex_ids)
    return {v: tuple(n for n in mesh.adjacency[v] if n in members) for v in sorted(members)}


def bfs_layers(adjacency: Mapping[int, Sequence[int]], seeds: Iterable[int]) -> Tuple[List[List[int]], Dict[int, int]]:
    """Distance layers from a seed set; returns (layers, distance by vertex)."""
    frontier = sorted(set(seeds))
    dist = {v: 0 for v in frontier}
    layers = [frontier] if frontier else []
    while frontier:
        nxt = set()
        for v in frontier:
            for n in adjacency[v]:
                if n not in dist:
                    dist[n] = len(layers)
                    nxt.add(n)
        if not nxt:
            break
        frontier = sorted(nxt)
        layers.append(frontier)
    return layers, dist


def hop_distance(adjacency: Mapping[int, Sequence[int]], a: int, b: int, limit: int) -> Optional[int]:
    if a == b:
        return 0
    seen = {a}
    queue = deque([(a, 0)])
    while queue:
        v, d = queue.popleft()
        if d == limit:
            continue
        for n in adjacency.get(v, ()):
            if n == b:
                return d + 1
            if n not in seen:
                seen.add(n)
                queue.append((n, d + 1))
    return None


# ---------------------------------------------------------------------------
# Builder
# ---------------------------------------------------------------------------

def build_part_grid(mesh: HandMesh, part: Part, hint: OrientationHint) -> GridSpec:
    members = set(part.vertex_ids)
    stray = [s for s in hint.distal_seeds if s not in members]
    if stray:
        raise SeedNotInPartError(f"Part {part.name}: seeds {stray} are not part vertices")

    adjacency = induced_adjacency(mesh, part.vertex_ids)
    layers, dist = bfs_layers(adjacency, hint.distal_seeds)
    if len(dist) != len(members):
        unreachable = sorted(members - set(dist))
        raise DisconnectedPartError(
            f"Part {part.name}: {len(unreachable)} vertices unreachable from the distal seeds "
            f"(first: {unreachable[:5]})"
        )

    right = np.asarray(VIEW_FRAMES[hint.view_axis].right, dtype=np.float64)
    rows: List[Tuple[int, ...]] = []
    for layer in layers:
        xs = mesh.vertices[layer] @ right
        order = sorted(range(len(layer)), key=lambda i: (float(xs[i]), layer[i]))
        rows.append(tuple(layer[i] for i in order))

    for r, row in enumerate(rows):
        for a, b in zip(row, row[1:]):
            if hop_distance(adjacency, a, b, MAX_ROW_HOPS) is None:
                logger.warning(
                    "Part %s row %d: vertices %d and %d are more than %d hops apart",
                    part.name, r, a, b, MAX_ROW_HOPS,
                )

    return GridSpec(
        part_index=part.index,
        num_rows=len(rows),
        row_lengths=tuple(len(r) for r in rows),
        row_vertex_ids=tuple(rows),
    )


def build_segmentation_grids(
    mesh: HandMesh,
    parts: Sequence[Part],
    hints: Mapping[int, OrientationHint],
    *,
    name: str = "detailed",
) -> PartSegmentation:
    ordered = sorted(parts, key=lambda p: p.index)
    missing = [p.name for p in ordered if p.index not in hints]
    if missing:
        raise ConfigError(f"No orientation hint for parts: {', '.join(missing)}")
    grids = tuple(build_part_grid(mesh, p, hints[p.index]) for p in ordered)
    return PartSegmentation(parts=tuple(ordered), grids=grids, vertex_count=mesh.vertex_count, name=name)


# ---------------------------------------------------------------------------
# Diagnostics
# ---------------------------------------------------------------------------

@dataclass
class GridDiagnostics:
    part_name: str
    part_index: int
    bijection_ok: bool
    adjacency_warnings: int
    monotone: bool
    errors: List[str] = field(default_factory=list)


@dataclass
class GridReport:
    parts: List[GridDiagnostics]

    @property
    def error_count(self) -> int:
        return sum(len(p.errors) for p in self.parts)

    @property
    def warning_count(self) -> int:
        return sum(p.adjacency_warnings for p in self.parts)

    @property
    def ok(self) -> bool:
        return self.error_count == 0


def _row_distance_means(
    adjacency: Mapping[int, Sequence[int]],
    rows: Sequence[Sequence[int]],
    seeds: Sequence[int],
) -> List[float]:
    _, dist = bfs_layers(adjacency, [s for s in seeds if s in adjacency])
    means = []
    for row in rows:
        known = [dist[v] for v in row if v in dist]
        means.append(float(np.mean(known)) if known else float("nan"))
    return means


def validate_grids(
    seg: PartSegmentation,
    mesh: HandMesh,
    hints: Optional[Mapping[int, OrientationHint]] = None,
) -> GridReport:
    """Report-only check of every part grid: bijection, row adjacency and distal ordering."""
    diagnostics: List[GridDiagnostics] = []
    for part, grid in zip(seg.parts, seg.grids):
        errors: List[str] = []
        flat = grid.flattened()
        bijection_ok = (
            len(grid.row_lengths) == grid.num_rows
            and all(len(r) == n for r, n in zip(grid.row_vertex_ids, grid.row_lengths))
            and sorted(flat) == sorted(part.vertex_ids)
        )
        if not bijection_ok:
            missing = sorted(set(part.vertex_ids) - set(flat))
            extra = sorted(set(flat) - set(part.vertex_ids))
            errors.append(f"grid is not a bijection onto the part (missing={missing[:10]} extra={extra[:10]})")

        adjacency = induced_adjacency(mesh, part.vertex_ids)
        warnings = 0
        for row in grid.row_vertex_ids:
            for a, b in zip(row, row[1:]):
                if a in adjacency and b in adjacency and hop_distance(adjacency, a, b, MAX_ROW_HOPS) is None:
                    warnings += 1

        hint = (hints or {}).get(part.index)
        seeds = list(hint.distal_seeds) if hint else list(grid.row_vertex_ids[0]) if grid.row_vertex_ids else []
        means = _row_distance_means(adjacency, grid.row_vertex_ids, seeds)
        monotone = all(b > a for a, b in zip(means, means[1:]))
        if not monotone:
            errors.append("mean distance from the distal seeds does not increase with row index")

        diagnostics.append(
            GridDiagnostics(
                part_name=part.name,
                part_index=part.index,
                bijection_ok=bijection_ok,
                adjacency_warnings=warnings,
                monotone=monotone,
                errors=errors,
            )
        )
    return GridReport(diagnostics)
