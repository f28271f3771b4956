import functools
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from handcontact.lib import fixtures
from handcontact.lib.errors import (
    GridMismatchError,
    LengthMismatchError,
    ParseError,
    PartitionError,
    ShapeError,
    TopologyError,
    UnknownPartError,
)
from handcontact.lib.hand_model import (
    STANDARD_VERTEX_COUNT,
    ActiveVertexSet,
    ContactVector,
    DenseGridPrediction,
    Part,
    contact_parts,
    contact_to_grids,
    flatten_segmentation,
    grids_to_contact,
    labeling_from_dict,
    load_mesh,
    load_segmentation,
    load_vertex_map,
    parse_obj_text,
    remap_values,
    save_mesh,
    save_segmentation,
    segmentation_from_dict,
    segmentation_to_dict,
    validate_partition,
    vertices_of_parts,
)


_detailed = functools.lru_cache(maxsize=None)(fixtures.detailed_segmentation)

TRIANGLE_OBJ = "v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n"


def test_synthetic_hand_is_one_standard_component(hand_mesh):
    assert hand_mesh.vertex_count == STANDARD_VERTEX_COUNT
    assert all(hand_mesh.adjacency[v] for v in range(hand_mesh.vertex_count))


def test_obj_round_trip(tmp_path, hand_mesh):
    path = tmp_path / "hand.obj"
    save_mesh(hand_mesh, path)
    loaded = load_mesh(path)
    assert loaded.vertex_count == hand_mesh.vertex_count
    assert np.array_equal(loaded.faces, hand_mesh.faces)
    assert np.allclose(loaded.vertices, hand_mesh.vertices, atol=1e-6)


def test_obj_parser_skips_normals_and_reads_slashed_faces():
    text = "# comment\nv 0 0 0\nv 1 0 0\nv 0 1 0\nvn 0 0 1\nf 1//1 2//1 3//1\n"
    mesh = parse_obj_text(text, expected_vertex_count=3)
    assert mesh.faces.tolist() == [[0, 1, 2]]


def test_obj_parser_rejects_quads():
    with pytest.raises(ParseError, match="triangle"):
        parse_obj_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nv 1 1 0\nf 1 2 3 4\n", expected_vertex_count=None)


def test_obj_parser_rejects_out_of_range_face():
    with pytest.raises(TopologyError, match="outside"):
        parse_obj_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 9\n", expected_vertex_count=None)


def test_obj_parser_checks_vertex_count():
    with pytest.raises(TopologyError, match="expected 778"):
        parse_obj_text(TRIANGLE_OBJ)


def test_disconnected_mesh_is_rejected():
    text = TRIANGLE_OBJ + "v 5 5 0\nv 6 5 0\nv 5 6 0\nf 4 5 6\n"
    with pytest.raises(TopologyError, match="2 connected components"):
        parse_obj_text(text, expected_vertex_count=None)


def test_loaded_mesh_arrays_are_read_only(hand_mesh):
    with pytest.raises(ValueError):
        hand_mesh.vertices[0, 0] = 1.0


def test_partition_reports_overlapping_and_uncovered_vertices():
    parts = [Part("a", 0, (0, 1, 2)), Part("b", 1, (2, 3))]
    with pytest.raises(PartitionError) as exc:
        validate_partition(parts, 5)
    assert exc.value.vertex_ids == [2, 4]


def test_labeling_requires_dense_indices():
    data = {"parts": [{"name": "a", "index": 0, "vertex_ids": [0, 1]}, {"name": "b", "index": 2, "vertex_ids": [2]}]}
    with pytest.raises(ParseError, match="dense"):
        labeling_from_dict(data, 3)


def test_segmentation_file_round_trip(tmp_path, hand_mesh, detailed_seg):
    path = tmp_path / "seg.json"
    save_segmentation(detailed_seg, path)
    loaded = load_segmentation(path, hand_mesh)
    assert loaded.part_names == detailed_seg.part_names
    assert loaded.grids == detailed_seg.grids
    assert loaded.name == "detailed"


def test_grid_that_is_not_a_permutation_is_rejected(hand_mesh, detailed_seg):
    data = segmentation_to_dict(detailed_seg)
    grid = data["parts"][0]["grid"]
    grid["row_vertex_ids"][0][0] = grid["row_vertex_ids"][1][0]
    with pytest.raises(GridMismatchError, match="permutation"):
        segmentation_from_dict(data, hand_mesh)


def test_grid_row_lengths_must_sum_to_part_size(hand_mesh, detailed_seg):
    data = segmentation_to_dict(detailed_seg)
    grid = data["parts"][3]["grid"]
    grid["row_lengths"][0] += 1
    with pytest.raises(GridMismatchError):
        segmentation_from_dict(data, hand_mesh)


def test_detailed_fixture_shapes(detailed_seg, coarse_seg):
    assert detailed_seg.part_count == 29
    assert coarse_seg.part_count == 16
    palm = detailed_seg.grid("palm_distal_radial")
    assert palm.row_lengths == (7,) * 6
    tip = detailed_seg.grid("index_fingertip")
    assert tip.row_lengths == (4,) * 5
    assert coarse_seg.grid("palm").row_lengths == (21,) * 18
    assert coarse_seg.grid("thumb_distal").num_rows == 10


def test_unknown_part_lookup(detailed_seg):
    with pytest.raises(UnknownPartError) as exc:
        detailed_seg.grid("sixth_finger")
    assert exc.value.part_name == "sixth_finger"


def test_contact_vector_rejects_non_binary_values():
    with pytest.raises(ShapeError):
        ContactVector([0, 1, 2])


def test_contact_grid_round_trip_random_vectors(detailed_seg):
    rng = np.random.default_rng(0)
    everything = vertices_of_parts(detailed_seg, detailed_seg.part_names)
    mismatches = 0
    for _ in range(1000):
        contact = ContactVector(rng.integers(0, 2, detailed_seg.vertex_count))
        back = grids_to_contact(detailed_seg, contact_to_grids(detailed_seg, contact), everything)
        mismatches += int(back != contact)
    assert mismatches == 0


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), keep=st.sets(st.integers(0, 28), max_size=29))
def test_conditioned_round_trip_zeroes_unselected_parts(seed, keep):
    seg = _detailed()
    names = [seg.parts[i].name for i in sorted(keep)]
    contact = ContactVector(np.random.default_rng(seed).integers(0, 2, seg.vertex_count))
    active = vertices_of_parts(seg, names)
    back = grids_to_contact(seg, contact_to_grids(seg, contact, names), active)
    mask = active.mask(seg.vertex_count)
    assert np.array_equal(back.values[mask], contact.values[mask])
    assert back.values[~mask].sum() == 0


def test_grids_to_contact_rejects_wrong_shape(detailed_seg):
    name = "thumb_fingertip"
    rows = [[0] * 4 for _ in range(4)]
    with pytest.raises(ShapeError, match="rows"):
        grids_to_contact(detailed_seg, DenseGridPrediction({name: rows}), vertices_of_parts(detailed_seg, [name]))


def test_grids_to_contact_ignores_grids_outside_active_set(detailed_seg):
    name = "middle_distal"
    grids = DenseGridPrediction({name: tuple((1, 1, 1, 1) for _ in range(5))})
    contact = grids_to_contact(detailed_seg, grids, ActiveVertexSet())
    assert contact.count() == 0


def test_contact_to_grids_checks_length(detailed_seg):
    with pytest.raises(LengthMismatchError):
        contact_to_grids(detailed_seg, ContactVector.zeros(10))


def test_contact_parts_in_index_order(detailed_seg):
    values = np.zeros(detailed_seg.vertex_count, dtype=np.uint8)
    values[detailed_seg.part("pinky_proximal").vertex_ids[0]] = 1
    values[detailed_seg.part("palm_middle_center").vertex_ids[0]] = 1
    assert contact_parts(detailed_seg, ContactVector(values)) == ("palm_middle_center", "pinky_proximal")


def test_flatten_keeps_within_part_order(detailed_seg):
    flat = flatten_segmentation(detailed_seg)
    assert flat.name == "detailed-flat"
    for original, collapsed in zip(detailed_seg.grids, flat.grids):
        assert collapsed.num_rows == 1
        assert collapsed.row_vertex_ids[0] == original.flattened()


def test_vertex_map_must_be_a_permutation(tmp_path):
    path = tmp_path / "map.json"
    path.write_text(json.dumps({"vertex_map": [0, 0, 1]}))
    with pytest.raises(ParseError, match="permutation"):
        load_vertex_map(path, vertex_count=3)


def test_mirror_map_remaps_palm_columns(tmp_path):
    vertex_map = fixtures.mirror_vertex_map()
    path = tmp_path / "map.json"
    path.write_text(json.dumps({"vertex_map": vertex_map.tolist()}))
    loaded = load_vertex_map(path)
    values = np.zeros(STANDARD_VERTEX_COUNT, dtype=np.uint8)
    values[fixtures.palm_vertex(0, 20)] = 1
    remapped = remap_values(values, loaded)
    assert remapped[fixtures.palm_vertex(0, 0)] == 1
    assert remapped.sum() == 1
