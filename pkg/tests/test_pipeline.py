import json

import numpy as np
import pytest
from PIL import Image

from handcontact.lib import fixtures
from handcontact.lib import prompt_engine as pe
from handcontact.lib.config import ABLATION_PRESETS
from handcontact.lib.errors import ConfigError, TransportError
from handcontact.lib.hand_model import ContactVector, vertices_of_parts
from handcontact.lib.mllm_client import CorruptionConfig, FormatErrorRule
from handcontact.lib.pipeline import (
    DENSE_STAGE_ATTEMPTS,
    PART_STAGE_ATTEMPTS,
    InputSample,
    StageTranscript,
    extract_json_object,
    load_transcripts,
    parse_dense_response,
    parse_part_response,
    run_dataset,
    run_sample,
    transcript_filename,
    write_transcripts,
)

IMAGE = Image.new("RGB", (48, 32), (120, 110, 100))


def _sample(sample_id):
    return InputSample(id=sample_id, image=IMAGE)


def _contact(seg, *names):
    values = np.zeros(seg.vertex_count, dtype=np.uint8)
    for name in names:
        values[list(seg.part(name).vertex_ids)] = 1
    return ContactVector(values)


def _schedule(*rules):
    return CorruptionConfig(
        format_errors=tuple(
            FormatErrorRule(stage=stage, attempts=frozenset(attempts), violation=kind, parts=parts)
            for stage, attempts, kind, parts in rules
        )
    )


# ---------------------------------------------------------------------------
# End to end with the oracle
# ---------------------------------------------------------------------------

def test_clean_oracle_reproduces_ground_truth(detailed_seg, make_context):
    rng = np.random.default_rng(3)
    gt = {f"s{i}": fixtures.random_contact(detailed_seg, rng) for i in range(10)}
    ctx = make_context(gt)
    transcripts = run_dataset([_sample(k) for k in gt], ctx)

    for t in transcripts:
        assert t.contact == gt[t.sample_id]
        assert not t.degraded
        assert [s.attempts_used for _, s in sorted(t.stages.items())] == [1, 1, 1]
        assert t.output_tokens > 0
    assert ctx.client.call_count == 30


def test_no_contact_skips_the_dense_stage(detailed_seg, make_context):
    ctx = make_context({"empty": ContactVector.zeros(detailed_seg.vertex_count)})
    t = run_sample(_sample("empty"), ctx)
    assert t.stages[2].skipped
    assert t.selected_parts == ()
    assert t.contact.count() == 0
    assert t.manifest_vertices == 0
    assert ctx.client.call_count == 2


def test_workers_keep_sample_order(detailed_seg, make_context):
    rng = np.random.default_rng(5)
    gt = {f"s{i:02d}": fixtures.random_contact(detailed_seg, rng) for i in range(12)}
    ctx = make_context(gt)
    transcripts = run_dataset([_sample(k) for k in gt], ctx, workers=4)
    assert [t.sample_id for t in transcripts] == list(gt)
    assert all(t.contact == gt[t.sample_id] for t in transcripts)


def test_failed_sample_does_not_abort_the_run(detailed_seg, make_context):
    gt = {"known": _contact(detailed_seg, "thumb_fingertip")}
    transcripts = run_dataset([_sample("unknown"), _sample("known")], make_context(gt))
    failed, ok = transcripts
    assert failed.error.startswith("BackendFormatError")
    assert failed.degraded
    assert failed.contact.count() == 0
    assert ok.error is None
    assert ok.contact == gt["known"]


# ---------------------------------------------------------------------------
# Retries and fallbacks
# ---------------------------------------------------------------------------

def test_part_stage_recovers_on_second_attempt(detailed_seg, make_context):
    gt = {"s": _contact(detailed_seg, "palm_middle_center", "index_distal")}
    ctx = make_context(gt, corruption=_schedule((1, {1}, pe.NOT_JSON, 1)))
    t = run_sample(_sample("s"), ctx)

    stage = t.stages[1]
    assert stage.attempts_used == 2
    assert not stage.degraded
    assert [v.kind for v in stage.attempts[0].violations] == [pe.NOT_JSON]
    assert pe.FEEDBACK_HEADER not in stage.attempts[0].prompt
    assert pe.FEEDBACK_HEADER in stage.attempts[1].prompt
    assert "response is not a JSON object" in stage.attempts[1].prompt
    assert t.contact == gt["s"]


def test_dense_retry_prompt_names_the_bad_row(detailed_seg, make_context):
    gt = {"s": _contact(detailed_seg, "palm_middle_center")}
    ctx = make_context(gt, corruption=_schedule((2, {1}, pe.ROW_LENGTH_MISMATCH, 1)))
    t = run_sample(_sample("s"), ctx)

    stage = t.stages[2]
    assert stage.attempts_used == 2
    violation = stage.attempts[0].violations[0]
    assert violation.kind == pe.ROW_LENGTH_MISMATCH
    assert violation.row == 0
    assert violation.got == violation.expected - 1
    assert pe.format_violation(violation) in stage.attempts[1].prompt
    assert t.contact == gt["s"]


@pytest.mark.parametrize("kind", [pe.NOT_JSON, pe.UNKNOWN_PART, pe.MISSING_KEY])
def test_part_stage_budget_falls_back_to_no_contact(detailed_seg, make_context, kind):
    gt = {"s": _contact(detailed_seg, "ring_fingertip")}
    ctx = make_context(gt, corruption=_schedule((1, range(1, 10), kind, 1)))
    t = run_sample(_sample("s"), ctx)

    assert t.stages[1].attempts_used == PART_STAGE_ATTEMPTS
    assert t.stages[1].degraded
    assert t.stages[1].fallback == "no_contact"
    assert t.stages[2].skipped
    assert t.contact.count() == 0
    assert t.degraded


def test_dense_stage_budget_fills_only_failing_parts(detailed_seg, make_context):
    names = ("palm_distal_center", "middle_fingertip")
    gt = {"s": _contact(detailed_seg, *names)}
    # the first grid is partial contact so an all-ones fill is visible
    values = gt["s"].values.copy()
    values[detailed_seg.part("palm_distal_center").vertex_ids[0]] = 0
    gt["s"] = ContactVector(values)
    ctx = make_context(gt, corruption=_schedule((2, range(1, 10), pe.NON_BINARY_VALUE, 1)))
    t = run_sample(_sample("s"), ctx)

    stage = t.stages[2]
    assert stage.attempts_used == DENSE_STAGE_ATTEMPTS
    assert stage.degraded
    assert stage.fallback == "all_ones:palm_distal_center"
    palm = list(detailed_seg.part("palm_distal_center").vertex_ids)
    tip = list(detailed_seg.part("middle_fingertip").vertex_ids)
    assert t.contact.values[palm].all()
    assert np.array_equal(t.contact.values[tip], gt["s"].values[tip])


def test_empty_description_is_tolerated(detailed_seg, make_context):
    gt = {"s": _contact(detailed_seg, "thumb_distal")}
    ctx = make_context(gt, corruption=_schedule((0, {1, 2}, pe.EMPTY_RESPONSE, 1)))
    t = run_sample(_sample("s"), ctx)
    assert t.stages[0].attempts_used == 2
    assert t.stages[0].fallback == "empty_description"
    assert pe.EMPTY_DESCRIPTION in t.stages[1].attempts[0].prompt
    assert t.contact == gt["s"]


def test_attempt_budgets_are_never_exceeded(detailed_seg, make_context):
    rng = np.random.default_rng(11)
    gt = {f"s{i}": fixtures.random_contact(detailed_seg, rng) for i in range(20)}
    corruption = _schedule(
        (0, range(1, 10), pe.EMPTY_RESPONSE, 1),
        (1, {1, 2}, pe.UNKNOWN_PART, 2),
        (2, range(1, 10), pe.MISSING_PART, 1),
    )
    ctx = make_context(gt, corruption=corruption)
    for t in run_dataset([_sample(k) for k in gt], ctx):
        assert t.stages[0].attempts_used <= 2
        assert t.stages[1].attempts_used == 3
        assert t.stages[2].attempts_used <= DENSE_STAGE_ATTEMPTS
        assert t.degraded


# ---------------------------------------------------------------------------
# Conditioning
# ---------------------------------------------------------------------------

def test_unselected_parts_are_never_in_contact(detailed_seg, make_context):
    rng = np.random.default_rng(17)
    gt = {f"s{i:03d}": fixtures.random_contact(detailed_seg, rng) for i in range(200)}
    corruption = CorruptionConfig(flip_probability=0.3, omit_probability=0.3, extra_part_probability=0.5)
    ctx = make_context(gt, corruption=corruption, seed=9)
    for t in run_dataset([_sample(k) for k in gt], ctx, workers=4):
        mask = vertices_of_parts(detailed_seg, t.selected_parts).mask(detailed_seg.vertex_count)
        assert t.contact.values[~mask].sum() == 0
        assert t.active_vertices == int(mask.sum())


def test_dense_only_asks_for_every_part(detailed_seg, make_context):
    gt = {"s": _contact(detailed_seg, "pinky_proximal")}
    ctx = make_context(gt, flags=ABLATION_PRESETS["dense_only"])
    t = run_sample(_sample("s"), ctx)
    assert t.ablation == "dense_only"
    assert t.stages[0].skipped and t.stages[1].skipped
    assert t.manifest_vertices == detailed_seg.vertex_count
    assert t.contact == gt["s"]
    assert ctx.client.call_count == 1


def test_no_conditioning_widens_the_manifest(detailed_seg, make_context):
    gt = {"s": _contact(detailed_seg, "pinky_proximal")}
    conditioned = run_sample(_sample("s"), make_context(gt))
    unconditioned = run_sample(_sample("s"), make_context(gt, flags=ABLATION_PRESETS["no_conditioning"]))
    assert conditioned.manifest_vertices == 20
    assert unconditioned.manifest_vertices == detailed_seg.vertex_count
    assert unconditioned.contact == conditioned.contact


class _DropsOneCall:
    def __init__(self, backend, stage, attempt):
        self.backend = backend
        self.key = (stage, attempt)

    def send(self, request):
        if (request.metadata.get("stage"), request.metadata.get("attempt")) == self.key:
            raise TransportError("connection reset")
        return self.backend.send(request)


def test_transport_failure_keeps_attempts_already_made(detailed_seg, make_context):
    gt = {"s": _contact(detailed_seg, "index_distal")}
    ctx = make_context(gt, corruption=_schedule((2, {1}, pe.ROW_LENGTH_MISMATCH, 1)))
    ctx.client.backend = _DropsOneCall(ctx.client.backend, stage=2, attempt=2)
    t = run_sample(_sample("s"), ctx)

    assert t.error == "TransportError: connection reset"
    assert t.degraded
    assert t.contact.count() == 0
    assert t.stages[2].attempts_used == 1
    assert t.stages[2].attempts[0].violations
    assert t.output_tokens == ctx.client.usage.output_tokens
    assert ctx.client.call_count == 3


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------

def test_json_is_found_inside_prose():
    text = 'Reasoning: {not json}. Answer: {"contact_parts": ["a {b}"]} done'
    assert extract_json_object(text) == {"contact_parts": ["a {b}"]}
    assert extract_json_object("no braces here") is None
    assert extract_json_object('{"open": ') is None
    assert extract_json_object('draft {"contact_parts": [ then {"contact_parts": ["thumb_distal"]}') == {
        "contact_parts": ["thumb_distal"]
    }


def test_part_response_deduplicates_and_checks_names(detailed_seg):
    ok = parse_part_response('```json\n{"contact_parts": ["thumb_distal", "thumb_distal"]}\n```', detailed_seg)
    assert ok.value.part_names == ("thumb_distal",)

    bad = parse_part_response('{"contact_parts": ["thumb_distal", "elbow", 3]}', detailed_seg)
    assert [v.kind for v in bad.violations] == [pe.UNKNOWN_PART, pe.NON_TEXT_ENTRY]
    assert bad.violations[0].part == "elbow"

    missing = parse_part_response('{"parts": []}', detailed_seg)
    assert missing.violations[0].kind == pe.MISSING_KEY


def test_dense_response_keeps_valid_grids(detailed_seg):
    manifest = pe.build_grid_manifest(detailed_seg, ["thumb_fingertip", "index_fingertip"])
    good = [[0, 1, 1, 0]] * 5
    text = json.dumps({"thumb_fingertip": good, "index_fingertip": [[0, 1]] * 5})
    result = parse_dense_response(text, manifest)
    assert not result.ok
    assert set(result.valid_grids) == {"thumb_fingertip"}
    assert {v.kind for v in result.violations} == {pe.ROW_LENGTH_MISMATCH}
    assert len(result.violations) == 5


def test_dense_response_accepts_a_grids_wrapper(detailed_seg):
    manifest = pe.build_grid_manifest(detailed_seg, ["thumb_fingertip"])
    result = parse_dense_response(json.dumps({"grids": {"thumb_fingertip": [[1, 1, 1, 1]] * 5}}), manifest)
    assert result.ok
    assert result.value.part_names == ("thumb_fingertip",)


def _mutate(grids, kind, rng, seg):
    names = list(grids)
    target = names[int(rng.integers(len(names)))]
    rows = grids[target]
    if kind == pe.EMPTY_RESPONSE:
        return " \n"
    if kind == pe.NOT_JSON:
        return "contact on " + ", ".join(names)
    if kind == pe.MISSING_PART:
        del grids[target]
    elif kind == pe.EXTRA_PART:
        extra = [p.name for p in seg.parts if p.name not in grids]
        name = extra[int(rng.integers(len(extra)))]
        grids[name] = [[0] * n for n in seg.grid(name).row_lengths]
    elif kind == pe.INVALID_GRID:
        grids[target] = ["1010", 7, {"rows": rows}][int(rng.integers(3))]
    elif kind == pe.ROW_COUNT_MISMATCH:
        grids[target] = rows[:-1] if rng.random() < 0.5 else rows + [rows[-1]]
    elif kind == pe.ROW_LENGTH_MISMATCH:
        r = int(rng.integers(len(rows)))
        rows[r] = rows[r][:-1] if rng.random() < 0.5 else rows[r] + [0]
    elif kind == pe.NON_BINARY_VALUE:
        r = int(rng.integers(len(rows)))
        c = int(rng.integers(len(rows[r])))
        rows[r][c] = [2, -1, 0.5, "1", True, None][int(rng.integers(6))]
    return json.dumps(grids)


def test_malformed_dense_responses_are_rejected(detailed_seg):
    kinds = [
        pe.EMPTY_RESPONSE,
        pe.NOT_JSON,
        pe.MISSING_PART,
        pe.EXTRA_PART,
        pe.INVALID_GRID,
        pe.ROW_COUNT_MISMATCH,
        pe.ROW_LENGTH_MISMATCH,
        pe.NON_BINARY_VALUE,
    ]
    rng = np.random.default_rng(23)
    for i in range(1000):
        chosen = rng.choice(detailed_seg.part_count, size=int(rng.integers(1, 10)), replace=False)
        names = [detailed_seg.parts[int(k)].name for k in sorted(chosen)]
        manifest = pe.build_grid_manifest(detailed_seg, names)
        grids = {
            n: [[int(v) for v in rng.integers(0, 2, length)] for length in detailed_seg.grid(n).row_lengths]
            for n in names
        }
        kind = kinds[i % len(kinds)]
        result = parse_dense_response(_mutate(grids, kind, rng, detailed_seg), manifest)
        assert not result.ok, kind
        assert kind in {v.kind for v in result.violations}, kind


# ---------------------------------------------------------------------------
# Transcripts
# ---------------------------------------------------------------------------

def test_sanitized_ids_get_distinct_transcript_files(tmp_path):
    ids = ["left/007", "left_007", "left 007"]
    assert transcript_filename("left_007") == "left_007.json"
    assert len({transcript_filename(i) for i in ids}) == 3

    write_transcripts([StageTranscript(sample_id=i) for i in ids], tmp_path)
    assert sorted(t.sample_id for t in load_transcripts(tmp_path)) == sorted(ids)


def test_duplicate_sample_ids_are_not_overwritten(tmp_path):
    with pytest.raises(ConfigError, match="same transcript file"):
        write_transcripts([StageTranscript(sample_id="a"), StageTranscript(sample_id="a")], tmp_path)
    assert not (tmp_path / "transcripts").exists()


def test_transcripts_round_trip(tmp_path, detailed_seg, make_context):
    gt = {"left/007": _contact(detailed_seg, "palm_proximal_ulnar")}
    ctx = make_context(gt, corruption=_schedule((1, {1}, pe.MISSING_KEY, 1)))
    original = run_sample(_sample("left/007"), ctx)
    folder = write_transcripts([original], tmp_path)
    assert (folder / transcript_filename("left/007")).exists()

    (loaded,) = load_transcripts(tmp_path)
    assert loaded.to_dict() == original.to_dict()
    assert loaded.output_tokens_by_stage() == original.output_tokens_by_stage()
    assert isinstance(loaded, StageTranscript)


def test_loading_transcripts_from_an_empty_run(tmp_path):
    with pytest.raises(ConfigError):
        load_transcripts(tmp_path)
