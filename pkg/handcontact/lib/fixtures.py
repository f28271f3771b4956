"""
Synthetic hand assets: a 778-vertex lattice hand, its segmentations, hints and
a small contact dataset with images.

The hand is a curved sheet: an 18 x 21 palm lattice with five 20 x 4 finger
strips attached to its distal row (thumb first, on the radial side). Every
quad is split along the same diagonal, so BFS layers from a full row are the
lattice rows themselves.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import ImageOps

from .grid_builder import OrientationHint, build_segmentation_grids, save_hints
from .hand_model import (
    ContactVector,
    HandMesh,
    Part,
    PartSegmentation,
    PathLike,
    save_labeling,
    save_mesh,
    save_segmentation,
    validate_mesh,
)
from .visual_prompt import ViewConfig, render_contact

PALM_ROWS = 18
PALM_COLS = 21
FINGER_ROWS = 20
FINGER_COLS = 4
FINGERS = ("thumb", "index", "middle", "ring", "pinky")
PALM_OFFSET = 0
FINGER_OFFSET = PALM_ROWS * PALM_COLS
FINGER_SIZE = FINGER_ROWS * FINGER_COLS

PALM_BANDS = ("distal", "middle", "proximal")
PALM_SIDES = ("radial", "center", "ulnar")
FINGER_SEGMENTS = (("fingertip", 15, 20), ("distal", 10, 15), ("intermediate", 5, 10), ("proximal", 0, 5))
COARSE_SEGMENTS = (("distal", 10, 20), ("middle", 5, 10), ("proximal", 0, 5))

DATASET_SIZE = 20


def _bulge(x: float) -> float:
    return 0.6 * math.sin(math.pi * x / 20.0)


def palm_vertex(row: int, col: int) -> int:
    return PALM_OFFSET + row * PALM_COLS + col


def finger_vertex(finger: int, row: int, col: int) -> int:
    return FINGER_OFFSET + finger * FINGER_SIZE + row * FINGER_COLS + col


def _quad_faces(a: int, b: int, d: int, e: int) -> List[Tuple[int, int, int]]:
    """Quad a-b (top), d-e (bottom), split along b-d."""
    return [(a, b, d), (b, e, d)]


def lattice_mesh(rows: int, cols: int) -> HandMesh:
    """Flat rows x cols lattice; vertex (r, c) is r * cols + c."""
    vertices = [(float(c), float(r), 0.0) for r in range(rows) for c in range(cols)]
    faces: List[Tuple[int, int, int]] = []
    for r in range(rows - 1):
        for c in range(cols - 1):
            faces += _quad_faces(r * cols + c, r * cols + c + 1, (r + 1) * cols + c, (r + 1) * cols + c + 1)
    return validate_mesh(vertices, faces)


def synthetic_hand_mesh() -> HandMesh:
    vertices: List[Tuple[float, float, float]] = []
    for r in range(PALM_ROWS):
        for c in range(PALM_COLS):
            vertices.append((float(c), float(r), _bulge(c)))
    for f in range(len(FINGERS)):
        for j in range(FINGER_ROWS):
            for c in range(FINGER_COLS):
                x = 4 * f + 0.2 + 0.8 * c
                vertices.append((x, PALM_ROWS + 0.9 * j, _bulge(x)))

    faces: List[Tuple[int, int, int]] = []
    for r in range(PALM_ROWS - 1):
        for c in range(PALM_COLS - 1):
            faces += _quad_faces(palm_vertex(r, c), palm_vertex(r, c + 1), palm_vertex(r + 1, c), palm_vertex(r + 1, c + 1))
    for f in range(len(FINGERS)):
        base = 4 * f
        for c in range(FINGER_COLS - 1):
            faces += _quad_faces(
                palm_vertex(PALM_ROWS - 1, base + c),
                palm_vertex(PALM_ROWS - 1, base + c + 1),
                finger_vertex(f, 0, c),
                finger_vertex(f, 0, c + 1),
            )
        for j in range(FINGER_ROWS - 1):
            for c in range(FINGER_COLS - 1):
                faces += _quad_faces(
                    finger_vertex(f, j, c),
                    finger_vertex(f, j, c + 1),
                    finger_vertex(f, j + 1, c),
                    finger_vertex(f, j + 1, c + 1),
                )
    return validate_mesh(vertices, faces, expected_vertex_count=FINGER_OFFSET + len(FINGERS) * FINGER_SIZE)


# ---------------------------------------------------------------------------
# Segmentations
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class _Block:
    name: str
    rows: Tuple[Tuple[int, ...], ...]  # distal row first

    @property
    def vertex_ids(self) -> Tuple[int, ...]:
        return tuple(sorted(v for row in self.rows for v in row))


def _palm_block(name: str, row_lo: int, row_hi: int, col_lo: int, col_hi: int) -> _Block:
    rows = tuple(tuple(palm_vertex(r, c) for c in range(col_lo, col_hi)) for r in reversed(range(row_lo, row_hi)))
    return _Block(name, rows)


def _finger_block(name: str, finger: int, row_lo: int, row_hi: int) -> _Block:
    rows = tuple(tuple(finger_vertex(finger, j, c) for c in range(FINGER_COLS)) for j in reversed(range(row_lo, row_hi)))
    return _Block(name, rows)


def _detailed_blocks() -> List[_Block]:
    blocks = []
    for b, band in enumerate(PALM_BANDS):
        row_hi = PALM_ROWS - 6 * b
        for s, side in enumerate(PALM_SIDES):
            blocks.append(_palm_block(f"palm_{band}_{side}", row_hi - 6, row_hi, 7 * s, 7 * s + 7))
    for f, finger in enumerate(FINGERS):
        for segment, lo, hi in FINGER_SEGMENTS:
            blocks.append(_finger_block(f"{finger}_{segment}", f, lo, hi))
    return blocks


def _coarse_blocks() -> List[_Block]:
    blocks = [_palm_block("palm", 0, PALM_ROWS, 0, PALM_COLS)]
    for f, finger in enumerate(FINGERS):
        for segment, lo, hi in COARSE_SEGMENTS:
            blocks.append(_finger_block(f"{finger}_{segment}", f, lo, hi))
    return blocks


def _parts_and_hints(blocks: Sequence[_Block]) -> Tuple[Tuple[Part, ...], Dict[int, OrientationHint]]:
    parts = tuple(Part(name=b.name, index=i, vertex_ids=b.vertex_ids) for i, b in enumerate(blocks))
    hints = {i: OrientationHint(part_index=i, distal_seeds=b.rows[0]) for i, b in enumerate(blocks)}
    return parts, hints


def detailed_labeling() -> Tuple[Tuple[Part, ...], Dict[int, OrientationHint]]:
    """29 parts: nine palm blocks, then four segments per finger."""
    return _parts_and_hints(_detailed_blocks())


def coarse_labeling() -> Tuple[Tuple[Part, ...], Dict[int, OrientationHint]]:
    """16 parts: the whole palm and three segments per finger."""
    return _parts_and_hints(_coarse_blocks())


def detailed_segmentation(mesh: Optional[HandMesh] = None) -> PartSegmentation:
    parts, hints = detailed_labeling()
    return build_segmentation_grids(mesh or synthetic_hand_mesh(), parts, hints, name="detailed")


def coarse_segmentation(mesh: Optional[HandMesh] = None) -> PartSegmentation:
    parts, hints = coarse_labeling()
    return build_segmentation_grids(mesh or synthetic_hand_mesh(), parts, hints, name="coarse")


def mirror_vertex_map() -> np.ndarray:
    """Left/right index correspondence: palm columns and finger order reversed."""
    out = np.empty(FINGER_OFFSET + len(FINGERS) * FINGER_SIZE, dtype=np.int64)
    for r in range(PALM_ROWS):
        for c in range(PALM_COLS):
            out[palm_vertex(r, c)] = palm_vertex(r, PALM_COLS - 1 - c)
    last = len(FINGERS) - 1
    for f in range(len(FINGERS)):
        for j in range(FINGER_ROWS):
            for c in range(FINGER_COLS):
                out[finger_vertex(f, j, c)] = finger_vertex(last - f, j, FINGER_COLS - 1 - c)
    return out


# ---------------------------------------------------------------------------
# Dataset
# ---------------------------------------------------------------------------

def random_contact(seg: PartSegmentation, rng: np.random.Generator, max_parts: int = 6) -> ContactVector:
    """Rectangular patches on 1..max_parts random parts, in grid coordinates."""
    values = np.zeros(seg.vertex_count, dtype=np.uint8)
    k = int(rng.integers(1, max_parts + 1))
    chosen = rng.choice(seg.part_count, size=min(k, seg.part_count), replace=False)
    for index in sorted(int(i) for i in chosen):
        grid = seg.grids[index]
        r0 = int(rng.integers(0, grid.num_rows))
        r1 = int(rng.integers(r0, grid.num_rows)) + 1
        for row in grid.row_vertex_ids[r0:r1]:
            c0 = int(rng.integers(0, len(row)))
            c1 = int(rng.integers(c0, len(row))) + 1
            values[list(row[c0:c1])] = 1
    return ContactVector(values)


def _soft_labels(contact: ContactVector, rng: np.random.Generator) -> np.ndarray:
    """Annotator-style soft labels that binarize back to `contact` at 0.5."""
    hard = contact.values.astype(bool)
    soft = np.where(hard, rng.uniform(0.6, 1.0, hard.size), 0.0)
    noise = (~hard) & (rng.random(hard.size) < 0.05)
    soft[noise] = rng.uniform(0.05, 0.45, int(noise.sum()))
    return np.round(soft, 3)


@dataclass(frozen=True)
class FixtureAssets:
    root: Path
    mesh: Path
    labeling: Path
    hints: Path
    segmentation: Path
    coarse_labeling: Path
    coarse_hints: Path
    coarse_segmentation: Path
    vertex_map: Path
    dataset: Path
    backend: Path


def write_dataset(
    mesh: HandMesh,
    seg: PartSegmentation,
    out_dir: PathLike,
    *,
    count: int = DATASET_SIZE,
    seed: int = 0,
    vertex_map: Optional[np.ndarray] = None,
) -> Path:
    """Sample 0 has no contact; every fifth sample is a left hand when a map is given."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    image_cfg = ViewConfig(views=("palmar",), image_width=96, image_height=96, margin=4)

    lines = []
    for i in range(count):
        sample_id = f"synthetic_{i:03d}"
        contact = ContactVector.zeros(seg.vertex_count) if i == 0 else random_contact(seg, rng)
        image = render_contact(mesh, contact, image_cfg).image
        labels = _soft_labels(contact, rng)
        hand = "right"
        if vertex_map is not None and i % 5 == 4:
            hand = "left"
            left = np.empty_like(labels)
            left[vertex_map] = labels
            labels = left
            image = ImageOps.mirror(image)
        image_name = f"images/{sample_id}.png"
        image.save(out / image_name, format="PNG")
        lines.append(
            json.dumps({"id": sample_id, "image_path": image_name, "gt_contact": labels.tolist(), "hand": hand})
        )
    path = out / "dataset.jsonl"
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def write_fixture_assets(out_dir: PathLike, *, samples: int = DATASET_SIZE, seed: int = 0) -> FixtureAssets:
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    mesh = synthetic_hand_mesh()
    parts, hints = detailed_labeling()
    coarse_parts, coarse_hints = coarse_labeling()
    seg = build_segmentation_grids(mesh, parts, hints, name="detailed")
    coarse = build_segmentation_grids(mesh, coarse_parts, coarse_hints, name="coarse")
    vertex_map = mirror_vertex_map()

    assets = FixtureAssets(
        root=root,
        mesh=root / "hand.obj",
        labeling=root / "labeling.json",
        hints=root / "hints.json",
        segmentation=root / "segmentation.json",
        coarse_labeling=root / "coarse_labeling.json",
        coarse_hints=root / "coarse_hints.json",
        coarse_segmentation=root / "coarse_segmentation.json",
        vertex_map=root / "vertex_map.json",
        dataset=root / "dataset" / "dataset.jsonl",
        backend=root / "backend_oracle.json",
    )
    save_mesh(mesh, assets.mesh)
    save_labeling(parts, assets.labeling)
    save_hints(hints, assets.hints)
    save_segmentation(seg, assets.segmentation)
    save_labeling(coarse_parts, assets.coarse_labeling)
    save_hints(coarse_hints, assets.coarse_hints)
    save_segmentation(coarse, assets.coarse_segmentation)
    assets.vertex_map.write_text(json.dumps({"vertex_map": vertex_map.tolist()}) + "\n", encoding="utf-8")
    write_dataset(mesh, seg, assets.dataset.parent, count=samples, seed=seed, vertex_map=vertex_map)
    assets.backend.write_text(
        json.dumps({"kind": "oracle", "model": "gpt-5.5", "limits": {"max_in_flight": 4}}, indent=2) + "\n",
        encoding="utf-8",
    )
    return assets
