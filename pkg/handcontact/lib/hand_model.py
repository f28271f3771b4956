"""
Hand mesh, part segmentation, part-wise vertex grids and contact vectors.

Shared pure data model used by the grid builder, the renderer, the pipeline and
the evaluation harness. Vertex ids are 0-based in memory and in every JSON file;
OBJ face records are 1-based as the OBJ format defines.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Any, Dict, FrozenSet, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import (
    GridMismatchError,
    LengthMismatchError,
    ParseError,
    PartitionError,
    ShapeError,
    TopologyError,
    UnknownPartError,
)

STANDARD_VERTEX_COUNT = 778
SEGMENTATION_VERSION = "1.0"

PathLike = Union[str, Path]
GridRows = Tuple[Tuple[int, ...], ...]

# OBJ records we tolerate and skip; anything else is a parse error.
_IGNORED_OBJ_RECORDS = {"vn", "vt", "o", "g", "s", "usemtl", "mtllib", "l"}


@dataclass(frozen=True, eq=False)
class HandMesh:
    vertices: np.ndarray
    faces: np.ndarray

    @property
    def vertex_count(self) -> int:
        return int(self.vertices.shape[0])

    def bounding_box(self) -> Tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    @cached_property
    def adjacency(self) -> Tuple[Tuple[int, ...], ...]:
        return vertex_adjacency(self.vertex_count, self.faces)


@dataclass(frozen=True)
class Part:
    name: str
    index: int
    vertex_ids: Tuple[int, ...]


@dataclass(frozen=True)
class GridSpec:
    part_index: int
    num_rows: int
    row_lengths: Tuple[int, ...]
    row_vertex_ids: Tuple[Tuple[int, ...], ...]

    @property
    def total_vertices(self) -> int:
        return sum(self.row_lengths)

    def flattened(self) -> Tuple[int, ...]:
        return tuple(v for row in self.row_vertex_ids for v in row)


@dataclass(frozen=True)
class PartSegmentation:
    parts: Tuple[Part, ...]
    grids: Tuple[GridSpec, ...]
    vertex_count: int
    name: str = "detailed"

    @property
    def part_count(self) -> int:
        return len(self.parts)

    @property
    def part_names(self) -> Tuple[str, ...]:
        return tuple(p.name for p in self.parts)

    @cached_property
    def _position_by_name(self) -> Dict[str, int]:
        return {p.name: i for i, p in enumerate(self.parts)}

    def has_part(self, name: str) -> bool:
        return name in self._position_by_name

    def part(self, name: str) -> Part:
        pos = self._position_by_name.get(name)
        if pos is None:
            raise UnknownPartError(name)
        return self.parts[pos]

    def grid(self, name: str) -> GridSpec:
        pos = self._position_by_name.get(name)
        if pos is None:
            raise UnknownPartError(name)
        return self.grids[pos]

    @cached_property
    def vertex_part(self) -> np.ndarray:
        """Part index of every vertex."""
        owner = np.full(self.vertex_count, -1, dtype=np.int32)
        for part in self.parts:
            owner[list(part.vertex_ids)] = part.index
        return owner


@dataclass(frozen=True, eq=False)
class ContactVector:
    values: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.values)
        if arr.ndim != 1:
            raise ShapeError(f"Contact vector must be 1-D, got shape {arr.shape}")
        if arr.size and not np.isin(arr, (0, 1)).all():
            raise ShapeError("Contact values must be 0 or 1")
        arr = arr.astype(np.uint8, copy=True)
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    @classmethod
    def zeros(cls, vertex_count: int) -> "ContactVector":
        return cls(np.zeros(vertex_count, dtype=np.uint8))

    @classmethod
    def ones(cls, vertex_count: int) -> "ContactVector":
        return cls(np.ones(vertex_count, dtype=np.uint8))

    @property
    def vertex_count(self) -> int:
        return int(self.values.shape[0])

    def count(self) -> int:
        return int(self.values.sum())

    def to_list(self) -> List[int]:
        return [int(v) for v in self.values]

    def __len__(self) -> int:
        return self.vertex_count

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ContactVector):
            return NotImplemented
        return bool(np.array_equal(self.values, other.values))

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True)
class ActiveVertexSet:
    vertex_ids: FrozenSet[int] = field(default_factory=frozenset)

    @property
    def size(self) -> int:
        return len(self.vertex_ids)

    def mask(self, vertex_count: int) -> np.ndarray:
        out = np.zeros(vertex_count, dtype=bool)
        if self.vertex_ids:
            out[sorted(self.vertex_ids)] = True
        return out


@dataclass(frozen=True)
class DenseGridPrediction:
    """Part-wise binary grids keyed by part name."""

    grids: Mapping[str, GridRows] = field(default_factory=dict)

    @property
    def part_names(self) -> Tuple[str, ...]:
        return tuple(self.grids.keys())

    def to_dict(self) -> Dict[str, List[List[int]]]:
        return {name: [list(row) for row in rows] for name, rows in self.grids.items()}


# ---------------------------------------------------------------------------
# Mesh
# ---------------------------------------------------------------------------

def vertex_adjacency(vertex_count: int, faces: np.ndarray) -> Tuple[Tuple[int, ...], ...]:
    neighbors: List[set] = [set() for _ in range(vertex_count)]
    for a, b, c in np.asarray(faces, dtype=np.int64).tolist():
        neighbors[a].update((b, c))
        neighbors[b].update((a, c))
        neighbors[c].update((a, b))
    return tuple(tuple(sorted(n)) for n in neighbors)


def count_components(vertex_count: int, faces: np.ndarray) -> int:
    """Connected components over face edges (isolated vertices count as components)."""
    parent = list(range(vertex_count))

    def find(x: int) -> int:
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    def union(a: int, b: int) -> None:
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)

    for a, b, c in np.asarray(faces, dtype=np.int64).tolist():
        union(a, b)
        union(b, c)
    return len({find(v) for v in range(vertex_count)})


def validate_mesh(
    vertices: Any,
    faces: Any,
    *,
    expected_vertex_count: Optional[int] = None,
) -> HandMesh:
    verts = np.array(vertices, dtype=np.float64)
    if verts.ndim != 2 or verts.shape[1] != 3 or verts.shape[0] == 0:
        raise ParseError(f"Vertices must be a non-empty (N, 3) array, got shape {verts.shape}")
    face_arr = np.array(faces, dtype=np.int64).reshape(-1, 3) if len(faces) else np.zeros((0, 3), dtype=np.int64)

    n = verts.shape[0]
    if expected_vertex_count is not None and n != expected_vertex_count:
        raise TopologyError(f"Mesh has {n} vertices; expected {expected_vertex_count}")
    if face_arr.size:
        bad = np.argwhere((face_arr < 0) | (face_arr >= n))
        if bad.size:
            fi, ci = bad[0]
            raise TopologyError(
                f"Face {int(fi)} references vertex {int(face_arr[fi, ci])} outside [0, {n})"
            )

    components = count_components(n, face_arr)
    if components != 1:
        raise TopologyError(f"Mesh has {components} connected components; expected 1")

    verts.setflags(write=False)
    face_arr.setflags(write=False)
    return HandMesh(vertices=verts, faces=face_arr)


def parse_obj_text(text: str, *, expected_vertex_count: Optional[int] = STANDARD_VERTEX_COUNT) -> HandMesh:
    vertices: List[Tuple[float, float, float]] = []
    faces: List[Tuple[int, int, int]] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        record = tokens[0]
        if record == "v":
            if len(tokens) < 4:
                raise ParseError(f"Line {lineno}: vertex record needs 3 coordinates")
            try:
                vertices.append((float(tokens[1]), float(tokens[2]), float(tokens[3])))
            except ValueError as exc:
                raise ParseError(f"Line {lineno}: bad vertex coordinate ({exc})") from exc
        elif record == "f":
            if len(tokens) != 4:
                raise ParseError(f"Line {lineno}: only triangle faces are supported")
            try:
                idx = tuple(int(tok.split("/", 1)[0]) for tok in tokens[1:])
            except ValueError as exc:
                raise ParseError(f"Line {lineno}: bad face index ({exc})") from exc
            if any(i <= 0 for i in idx):
                raise ParseError(f"Line {lineno}: face indices are 1-based and positive")
            faces.append((idx[0] - 1, idx[1] - 1, idx[2] - 1))
        elif record in _IGNORED_OBJ_RECORDS:
            continue
        else:
            raise ParseError(f"Line {lineno}: unsupported OBJ record '{record}'")

    if not vertices:
        raise ParseError("OBJ file contains no vertices")
    return validate_mesh(vertices, faces, expected_vertex_count=expected_vertex_count)


def load_mesh(path: PathLike, *, expected_vertex_count: Optional[int] = STANDARD_VERTEX_COUNT) -> HandMesh:
    text = Path(path).read_text(encoding="utf-8")
    return parse_obj_text(text, expected_vertex_count=expected_vertex_count)


def save_mesh(mesh: HandMesh, path: PathLike) -> None:
    lines = [f"# hand mesh, {mesh.vertex_count} vertices, faces 1-based"]
    lines += [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.vertices.tolist()]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces.tolist()]
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# Segmentation
# ---------------------------------------------------------------------------

def _read_json(path: PathLike) -> Any:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON ({exc})") from exc


def _as_int_list(value: Any, what: str) -> List[int]:
    if not isinstance(value, list) or any(isinstance(v, bool) or not isinstance(v, int) for v in value):
        raise ParseError(f"{what} must be a list of integers")
    return list(value)


def _parse_parts(data: Any, vertex_count: int) -> List[Tuple[Part, Any]]:
    if not isinstance(data, dict) or not isinstance(data.get("parts"), list):
        raise ParseError("Segmentation must be an object with a 'parts' list")
    raw_parts = data["parts"]
    declared = data.get("part_count")
    if declared is not None and declared != len(raw_parts):
        raise ParseError(f"part_count is {declared} but {len(raw_parts)} parts are listed")

    parsed: List[Tuple[Part, Any]] = []
    seen_names = set()
    for i, raw in enumerate(raw_parts):
        if not isinstance(raw, dict):
            raise ParseError(f"parts[{i}] must be an object")
        name = raw.get("name")
        index = raw.get("index")
        if not isinstance(name, str) or not name:
            raise ParseError(f"parts[{i}]: name must be a non-empty string")
        if isinstance(index, bool) or not isinstance(index, int):
            raise ParseError(f"parts[{i}] ({name}): index must be an integer")
        if name in seen_names:
            raise ParseError(f"Duplicate part name: {name}")
        seen_names.add(name)

        ids = _as_int_list(raw.get("vertex_ids"), f"parts[{i}] ({name}).vertex_ids")
        if not ids:
            raise ParseError(f"Part {name} has no vertices")
        if len(set(ids)) != len(ids):
            raise ParseError(f"Part {name} lists a vertex more than once")
        out_of_range = [v for v in ids if v < 0 or v >= vertex_count]
        if out_of_range:
            raise ParseError(f"Part {name} has vertex ids outside [0, {vertex_count}): {out_of_range[:10]}")
        parsed.append((Part(name=name, index=index, vertex_ids=tuple(ids)), raw.get("grid")))

    indices = sorted(p.index for p, _ in parsed)
    if indices != list(range(len(parsed))):
        raise ParseError(f"Part indices must be unique and dense in [0, {len(parsed)})")
    parsed.sort(key=lambda item: item[0].index)
    return parsed


def validate_partition(parts: Sequence[Part], vertex_count: int) -> None:
    counts = np.zeros(vertex_count, dtype=np.int64)
    for part in parts:
        counts[list(part.vertex_ids)] += 1
    overlapping = np.flatnonzero(counts > 1).tolist()
    uncovered = np.flatnonzero(counts == 0).tolist()
    if overlapping or uncovered:
        detail = []
        if overlapping:
            detail.append(f"{len(overlapping)} overlapping")
        if uncovered:
            detail.append(f"{len(uncovered)} uncovered")
        raise PartitionError(
            f"Parts do not partition the mesh ({', '.join(detail)})",
            overlapping + uncovered,
        )


def validate_grid(part: Part, raw_grid: Any) -> GridSpec:
    if not isinstance(raw_grid, dict):
        raise GridMismatchError(f"Part {part.name}: missing grid")
    num_rows = raw_grid.get("num_rows")
    if isinstance(num_rows, bool) or not isinstance(num_rows, int) or num_rows < 1:
        raise GridMismatchError(f"Part {part.name}: num_rows must be a positive integer")
    try:
        row_lengths = _as_int_list(raw_grid.get("row_lengths"), "row_lengths")
        rows = raw_grid.get("row_vertex_ids")
        if not isinstance(rows, list):
            raise ParseError("row_vertex_ids must be a list")
        rows = [_as_int_list(r, f"row_vertex_ids[{i}]") for i, r in enumerate(rows)]
    except ParseError as exc:
        raise GridMismatchError(f"Part {part.name}: {exc}") from exc

    if len(row_lengths) != num_rows or len(rows) != num_rows:
        raise GridMismatchError(
            f"Part {part.name}: num_rows={num_rows} but {len(row_lengths)} row_lengths "
            f"and {len(rows)} rows are given"
        )
    for r, (length, row) in enumerate(zip(row_lengths, rows)):
        if length < 1 or len(row) != length:
            raise GridMismatchError(f"Part {part.name}: row {r} has {len(row)} vertices, row_lengths says {length}")
    if sum(row_lengths) != len(part.vertex_ids):
        raise GridMismatchError(
            f"Part {part.name}: row lengths sum to {sum(row_lengths)} but the part has {len(part.vertex_ids)} vertices"
        )
    if sorted(v for row in rows for v in row) != sorted(part.vertex_ids):
        raise GridMismatchError(f"Part {part.name}: grid vertices are not a permutation of the part's vertices")

    return GridSpec(
        part_index=part.index,
        num_rows=num_rows,
        row_lengths=tuple(row_lengths),
        row_vertex_ids=tuple(tuple(r) for r in rows),
    )


def labeling_from_dict(data: Any, vertex_count: int) -> Tuple[Part, ...]:
    parts = tuple(p for p, _ in _parse_parts(data, vertex_count))
    validate_partition(parts, vertex_count)
    return parts


def segmentation_from_dict(data: Any, mesh: HandMesh, *, name: Optional[str] = None) -> PartSegmentation:
    parsed = _parse_parts(data, mesh.vertex_count)
    parts = tuple(p for p, _ in parsed)
    validate_partition(parts, mesh.vertex_count)
    grids = tuple(validate_grid(part, raw_grid) for part, raw_grid in parsed)
    return PartSegmentation(
        parts=parts,
        grids=grids,
        vertex_count=mesh.vertex_count,
        name=name or str(data.get("name") or "detailed"),
    )


def load_segmentation(path: PathLike, mesh: HandMesh) -> PartSegmentation:
    return segmentation_from_dict(_read_json(path), mesh)


def load_labeling(path: PathLike, mesh: HandMesh) -> Tuple[Part, ...]:
    return labeling_from_dict(_read_json(path), mesh.vertex_count)


def labeling_to_dict(parts: Sequence[Part]) -> Dict[str, Any]:
    return {
        "version": SEGMENTATION_VERSION,
        "part_count": len(parts),
        "parts": [{"name": p.name, "index": p.index, "vertex_ids": list(p.vertex_ids)} for p in parts],
    }


def segmentation_to_dict(seg: PartSegmentation) -> Dict[str, Any]:
    out = labeling_to_dict(seg.parts)
    out["name"] = seg.name
    for entry, grid in zip(out["parts"], seg.grids):
        entry["grid"] = {
            "num_rows": grid.num_rows,
            "row_lengths": list(grid.row_lengths),
            "row_vertex_ids": [list(r) for r in grid.row_vertex_ids],
        }
    return out


def _write_json(data: Any, path: PathLike) -> None:
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(data, indent=2) + "\n", encoding="utf-8")


def save_segmentation(seg: PartSegmentation, path: PathLike) -> None:
    _write_json(segmentation_to_dict(seg), path)


def save_labeling(parts: Sequence[Part], path: PathLike) -> None:
    _write_json(labeling_to_dict(parts), path)


def flatten_segmentation(seg: PartSegmentation) -> PartSegmentation:
    """Collapse every grid into a single row, keeping the within-part vertex order."""
    grids = tuple(
        GridSpec(
            part_index=g.part_index,
            num_rows=1,
            row_lengths=(g.total_vertices,),
            row_vertex_ids=(g.flattened(),),
        )
        for g in seg.grids
    )
    return PartSegmentation(parts=seg.parts, grids=grids, vertex_count=seg.vertex_count, name=f"{seg.name}-flat")


# ---------------------------------------------------------------------------
# Grid <-> vertex mappings
# ---------------------------------------------------------------------------

def vertices_of_parts(seg: PartSegmentation, part_names: Iterable[str]) -> ActiveVertexSet:
    ids: set = set()
    for name in part_names:
        ids.update(seg.part(name).vertex_ids)
    return ActiveVertexSet(frozenset(ids))


def grids_to_contact(
    seg: PartSegmentation,
    grids: DenseGridPrediction,
    active: ActiveVertexSet,
) -> ContactVector:
    values = np.zeros(seg.vertex_count, dtype=np.uint8)
    for name, rows in grids.grids.items():
        spec = seg.grid(name)
        if len(rows) != spec.num_rows:
            raise ShapeError(f"Grid for {name} has {len(rows)} rows; expected {spec.num_rows}")
        for r, (row, vertex_ids) in enumerate(zip(rows, spec.row_vertex_ids)):
            if len(row) != len(vertex_ids):
                raise ShapeError(f"Grid for {name} row {r} has {len(row)} values; expected {len(vertex_ids)}")
            cells = np.asarray(row, dtype=np.int64)
            if cells.size and not np.isin(cells, (0, 1)).all():
                raise ShapeError(f"Grid for {name} row {r} has non-binary values")
            values[list(vertex_ids)] = cells.astype(np.uint8)

    values[~active.mask(seg.vertex_count)] = 0
    return ContactVector(values)


def contact_to_grids(
    seg: PartSegmentation,
    contact: ContactVector,
    part_names: Optional[Iterable[str]] = None,
) -> DenseGridPrediction:
    if contact.vertex_count != seg.vertex_count:
        raise LengthMismatchError(
            f"Contact vector has {contact.vertex_count} entries; segmentation expects {seg.vertex_count}"
        )
    if part_names is None:
        selected = list(seg.parts)
    else:
        selected = sorted((seg.part(n) for n in set(part_names)), key=lambda p: p.index)

    values = contact.values
    grids: Dict[str, GridRows] = {}
    for part in selected:
        spec = seg.grid(part.name)
        grids[part.name] = tuple(tuple(int(values[v]) for v in row) for row in spec.row_vertex_ids)
    return DenseGridPrediction(grids)


def contact_parts(seg: PartSegmentation, contact: ContactVector) -> Tuple[str, ...]:
    """Names of parts holding at least one contact vertex, in part index order."""
    touched = set(seg.vertex_part[contact.values.astype(bool)].tolist())
    return tuple(p.name for p in seg.parts if p.index in touched)


# ---------------------------------------------------------------------------
# Left-hand index remap
# ---------------------------------------------------------------------------

def load_vertex_map(path: PathLike, vertex_count: int = STANDARD_VERTEX_COUNT) -> np.ndarray:
    """`vertex_map[i]` is the left-hand vertex matching right-hand vertex `i`."""
    data = _read_json(path)
    raw = data.get("vertex_map") if isinstance(data, dict) else None
    ids = _as_int_list(raw, "vertex_map")
    if sorted(ids) != list(range(vertex_count)):
        raise ParseError(f"vertex_map must be a permutation of 0..{vertex_count - 1}")
    return np.asarray(ids, dtype=np.int64)


def remap_values(values: np.ndarray, vertex_map: np.ndarray) -> np.ndarray:
    if values.shape[0] != vertex_map.shape[0]:
        raise LengthMismatchError(f"Cannot remap {values.shape[0]} values with a {vertex_map.shape[0]}-entry map")
    return values[vertex_map]
