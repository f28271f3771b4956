import json

import numpy as np
import pytest

from handcontact.lib.errors import ConfigError, RenderError
from handcontact.lib.hand_model import ContactVector, GridSpec, Part, PartSegmentation
from handcontact.lib.visual_prompt import (
    CONTACT_COLOR,
    ViewConfig,
    face_parts,
    fit_camera,
    part_palette,
    project,
    rasterize_view,
    render_contact,
    render_full_prompt,
    render_part_prompt,
    visible_vertices,
    write_prompt_images,
)


PALMAR = ViewConfig(views=("palmar",))
TWO_VIEWS = ViewConfig(views=("palmar", "dorsal"), image_width=128, image_height=128, margin=8)


@pytest.fixture(scope="module")
def full_palmar(hand_mesh, detailed_seg):
    return render_full_prompt(hand_mesh, detailed_seg, PALMAR)


def test_view_config_rejects_unknown_views():
    with pytest.raises(ConfigError, match="Unknown views"):
        ViewConfig(views=("top",))
    with pytest.raises(ConfigError, match="no drawable area"):
        ViewConfig(image_width=20, image_height=20)
    with pytest.raises(ConfigError, match="must be positive"):
        ViewConfig(image_width=0)


def test_camera_fits_mesh_inside_margin(hand_mesh):
    camera = fit_camera(hand_mesh.vertices, "palmar", PALMAR)
    xy, _ = camera.project_points(hand_mesh.vertices)
    assert xy.min() >= PALMAR.margin - 1e-6
    assert xy.max() <= PALMAR.image_width - PALMAR.margin + 1e-6


def test_degenerate_camera_is_a_render_error():
    with pytest.raises(RenderError):
        fit_camera(np.zeros((3, 3)), "palmar", PALMAR)


def test_rasterizer_nearest_surface_wins():
    cfg = ViewConfig(views=("palmar",), image_width=10, image_height=10, margin=1)
    xy = np.array([[0, 0], [10, 0], [0, 10], [0, 0], [10, 0], [0, 10]], dtype=np.float64)
    depth = np.array([0.0, 0.0, 0.0, 1.0, 1.0, 1.0])
    faces = np.array([[0, 1, 2], [3, 4, 5]])
    colors = np.array([[255, 0, 0], [0, 0, 255]], dtype=np.uint8)
    rgb, zbuf = rasterize_view(xy, depth, faces, colors, cfg)
    assert tuple(rgb[1, 1]) == (0, 0, 255)
    assert zbuf[1, 1] == pytest.approx(1.0)
    # outside the triangle
    assert tuple(rgb[9, 9]) == (255, 255, 255)
    assert np.isneginf(zbuf[9, 9])


def test_hidden_vertex_is_not_visible():
    zbuf = np.full((4, 4), 1.0)
    xy = np.array([[2.0, 2.0], [2.0, 2.0]])
    depth = np.array([1.0, 0.5])
    assert visible_vertices(xy, depth, zbuf, 1e-3).tolist() == [True, False]


def test_face_parts_majority_and_ties():
    parts = (Part("a", 0, (0, 1)), Part("b", 1, (2,)), Part("c", 2, (3,)))
    grids = tuple(GridSpec(p.index, 1, (len(p.vertex_ids),), (p.vertex_ids,)) for p in parts)
    seg = PartSegmentation(parts, grids, 4)
    faces = np.array([[0, 1, 2], [1, 2, 3], [3, 2, 0]])
    assert face_parts(seg, faces).tolist() == [0, 0, 0]
    assert face_parts(seg, np.array([[2, 3, 2]])).tolist() == [1]


def test_palette_is_seeded():
    assert part_palette(29, 7) == part_palette(29, 7)
    assert part_palette(29, 7) != part_palette(29, 8)


def test_row_start_dots_match_projection(hand_mesh, detailed_seg, full_palmar):
    panel = full_palmar.panel("palmar:grid")
    camera = fit_camera(hand_mesh.vertices, "palmar", PALMAR)
    assert full_palmar.projected["palmar:grid"].visible.all()

    overlays = {o.part_index: o for o in full_palmar.overlays if o.panel == "palmar:grid"}
    assert len(overlays) == detailed_seg.part_count
    for grid in detailed_seg.grids:
        dots = overlays[grid.part_index].dots
        assert len(dots) == grid.num_rows
        for dot, row in zip(dots, grid.row_vertex_ids):
            px, py, _ = project(hand_mesh.vertices[row[0]], camera)
            assert abs(dot[0] - (px + panel.x)) <= 1.0
            assert abs(dot[1] - (py + panel.y)) <= 1.0


def test_labels_sit_on_part_centroids(hand_mesh, detailed_seg, full_palmar):
    camera = fit_camera(hand_mesh.vertices, "palmar", PALMAR)
    labels = {lab.part_index: lab for lab in full_palmar.labels}
    assert sorted(labels) == list(range(detailed_seg.part_count))
    for part in detailed_seg.parts:
        label = labels[part.index]
        assert label.panel == "palmar"
        points = np.array([project(hand_mesh.vertices[v], camera)[:2] for v in part.vertex_ids])
        cx, cy = points.mean(axis=0)
        assert abs(label.position[0] - cx) <= 1.0
        assert abs(label.position[1] - cy) <= 1.0


def test_full_prompt_layout(hand_mesh, detailed_seg):
    prompt = render_full_prompt(hand_mesh, detailed_seg, TWO_VIEWS)
    assert prompt.image.size == (256, 256)
    names = [p.name for p in prompt.layout]
    assert names == ["palmar", "dorsal", "palmar:grid", "dorsal:grid"]
    assert prompt.panel("dorsal:grid").x == 128
    assert prompt.panel("dorsal:grid").y == 128


def test_part_prompt_has_no_overlays(hand_mesh, detailed_seg):
    prompt = render_part_prompt(hand_mesh, detailed_seg, TWO_VIEWS)
    assert prompt.image.size == (256, 128)
    assert prompt.overlays == ()
    assert len(prompt.labels) == detailed_seg.part_count


def test_renders_are_byte_identical(hand_mesh, detailed_seg):
    first = render_full_prompt(hand_mesh, detailed_seg, TWO_VIEWS).to_png_bytes()
    second = render_full_prompt(hand_mesh, detailed_seg, TWO_VIEWS).to_png_bytes()
    assert first == second


def test_segmentation_must_match_mesh(hand_mesh):
    parts = (Part("a", 0, (0, 1, 2)),)
    seg = PartSegmentation(parts, (GridSpec(0, 1, (3,), ((0, 1, 2),)),), 3)
    with pytest.raises(RenderError):
        render_part_prompt(hand_mesh, seg, TWO_VIEWS)


def test_contact_render_marks_contact_faces(hand_mesh, detailed_seg):
    cfg = ViewConfig(views=("palmar",), image_width=96, image_height=96, margin=4)
    none = np.asarray(render_contact(hand_mesh, ContactVector.zeros(hand_mesh.vertex_count), cfg).image)
    assert not (none == np.asarray(CONTACT_COLOR, dtype=np.uint8)).all(axis=2).any()

    values = np.zeros(hand_mesh.vertex_count, dtype=np.uint8)
    values[list(detailed_seg.part("palm_middle_center").vertex_ids)] = 1
    some = np.asarray(render_contact(hand_mesh, ContactVector(values), cfg).image)
    assert (some == np.asarray(CONTACT_COLOR, dtype=np.uint8)).all(axis=2).sum() > 50


def test_write_prompt_images(tmp_path, hand_mesh, detailed_seg):
    part = render_part_prompt(hand_mesh, detailed_seg, TWO_VIEWS)
    full = render_full_prompt(hand_mesh, detailed_seg, TWO_VIEWS)
    paths = write_prompt_images(part, full, tmp_path / "prompts", TWO_VIEWS)
    assert paths["part"].read_bytes()[:2] == b"\xff\xd8"
    sidecar = json.loads(paths["sidecar"].read_text())
    assert sidecar["full"]["image_size"] == [256, 256]
    assert len(sidecar["part"]["labels"]) == detailed_seg.part_count
    assert {o["panel"] for o in sidecar["full"]["overlays"]} == {"palmar:grid", "dorsal:grid"}
