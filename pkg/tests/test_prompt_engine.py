import json

import pytest

from handcontact.lib.errors import ConfigError, MissingContextError, UnknownPartError
from handcontact.lib.prompt_engine import (
    EMPTY_DESCRIPTION,
    FEEDBACK_HEADER,
    ROW_LENGTH_MISMATCH,
    PromptTemplate,
    Violation,
    build_error_feedback,
    build_grid_manifest,
    emit_grid_manifest,
    format_part_list,
    format_violation,
    load_template,
    render_prompt,
    verify_default_templates,
)


def test_bundled_templates_match_their_digests(templates):
    assert verify_default_templates(templates) == []
    assert all(t.is_default for t in templates.values())
    assert sorted(templates) == [0, 1, 2]


def test_edited_template_is_reported(tmp_path, templates):
    for stage, template in templates.items():
        name = template.source.rsplit("/", 1)[-1]
        (tmp_path / name).write_text(template.body + ("\nextra rule" if stage == 2 else ""))
    edited = {stage: load_template(stage, tmp_path) for stage in templates}
    problems = verify_default_templates(edited)
    assert len(problems) == 1
    assert problems[0].startswith("stage 2")


def test_missing_template_file(tmp_path):
    with pytest.raises(ConfigError, match="Template not found"):
        load_template(1, tmp_path)


def test_template_without_output_rule_logs_a_warning(tmp_path, caplog):
    (tmp_path / "stage1_parts.txt").write_text("Parts: {part_list}\n{z}\n")
    load_template(1, tmp_path)
    assert any("lacks its output rule" in r.getMessage() for r in caplog.records)


def test_stage_one_needs_part_list(templates):
    with pytest.raises(MissingContextError) as exc:
        render_prompt(templates[1], {"z": "a mug"})
    assert exc.value.placeholder == "part_list"


def test_stage_zero_needs_no_context(templates):
    assert render_prompt(templates[0], {}) == templates[0].body


def test_json_braces_in_templates_survive(templates, detailed_seg):
    text = render_prompt(templates[1], {"z": "a mug", "part_list": format_part_list(detailed_seg.parts)})
    assert '{"contact_parts":[part_a_name, part_b_name, ...]}' in text
    assert "{part_list}" not in text
    assert "28: pinky_proximal" in text


def test_empty_description_is_substituted(templates):
    text = render_prompt(templates[1], {"z": "   ", "part_list": "0: palm"})
    assert EMPTY_DESCRIPTION in text


def test_feedback_is_appended_when_template_has_no_slot(templates):
    text = render_prompt(templates[1], {"z": "a", "part_list": "0: palm", "error_feedback": "- empty response"})
    assert text.endswith(f"{FEEDBACK_HEADER}\n- empty response")


def test_feedback_fills_its_placeholder():
    template = PromptTemplate(stage=1, body="{z}|{part_list}|{error_feedback}")
    assert render_prompt(template, {"z": "a", "part_list": "b", "error_feedback": "c"}) == "a|b|c"
    assert render_prompt(template, {"z": "a", "part_list": "b"}) == "a|b|"


def test_grid_manifest_lists_parts_in_index_order(detailed_seg):
    manifest = build_grid_manifest(detailed_seg, ["ring_distal", "palm_distal_radial", "ring_distal"])
    assert manifest.part_names == ("palm_distal_radial", "ring_distal")
    entry = manifest.entry("ring_distal")
    assert entry.num_rows == 5
    assert entry.row_lengths == (4,) * 5
    assert manifest.total_vertices == 42 + 20

    decoded = json.loads(manifest.to_json())
    assert decoded[0] == {
        "part_name": "palm_distal_radial",
        "part_index": 0,
        "num_rows": 6,
        "row_lengths": [7] * 6,
        "total_vertices": 42,
    }


def test_empty_manifest(detailed_seg):
    assert emit_grid_manifest(detailed_seg, []) == "[]"


def test_manifest_rejects_unknown_part(detailed_seg):
    with pytest.raises(UnknownPartError):
        build_grid_manifest(detailed_seg, ["elbow"])


def test_format_violation_names_the_location():
    violation = Violation(ROW_LENGTH_MISMATCH, part="index_distal", row=2, expected=4, got=3)
    line = format_violation(violation)
    assert line == "- row length mismatch: part=index_distal row=2 expected=4 got=3"


def test_violation_dict_round_trip():
    violation = Violation("non_binary_value", part="palm", row=0, col=5, got=0.5)
    assert Violation.from_dict(violation.to_dict()) == violation
    assert "detail" not in violation.to_dict()


def test_feedback_needs_violations():
    with pytest.raises(ValueError):
        build_error_feedback([])
    feedback = build_error_feedback([Violation("empty_response"), Violation("missing_key", expected="contact_parts")])
    assert feedback.splitlines() == ["- empty response", "- missing required key: expected=contact_parts"]
