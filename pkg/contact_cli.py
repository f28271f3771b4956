#!/usr/bin/env python3
"""
Dense hand contact from a single image with a multimodal LLM.

Subcommands:
  validate        check a mesh + segmentation (partition, grids, templates)
  build-grids     build part-wise vertex grids from a labeling and orientation hints
  render-prompts  write the part-label and grid-overlay prompt images
  run             run the three-stage pipeline over a dataset, writing transcripts
  eval            score a run directory against the dataset ground truth
  ablate          run a matrix of pipeline variants and write a comparison table

Errors are printed to stderr as one JSON object; exit status is 0 on success,
1 when validation finds problems, 2 for bad input or configuration.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from dotenv import load_dotenv

REPO_ROOT = Path(__file__).resolve().parent
sys.path.insert(0, str(REPO_ROOT))

from handcontact.lib.ablation import parse_variants, run_ablation  # noqa: E402
from handcontact.lib.config import RunConfig, resolve_ablation  # noqa: E402
from handcontact.lib.errors import HandContactError  # noqa: E402
from handcontact.lib.eval_harness import evaluate_run, format_summary_table, load_dataset, write_report  # noqa: E402
from handcontact.lib.grid_builder import build_segmentation_grids, load_hints, validate_grids  # noqa: E402
from handcontact.lib.hand_model import (  # noqa: E402
    load_labeling,
    load_mesh,
    load_segmentation,
    load_vertex_map,
    save_segmentation,
)
from handcontact.lib.mllm_client import BackendConfig, Usage, compute_cost, format_usd, load_backend_config  # noqa: E402
from handcontact.lib.pipeline import load_transcripts, transcript_filename  # noqa: E402
from handcontact.lib.prompt_engine import load_templates, verify_default_templates  # noqa: E402
from handcontact.lib.runner import execute_run, load_run_assets  # noqa: E402
from handcontact.lib.visual_prompt import (  # noqa: E402
    DEFAULT_VIEWS,
    ViewConfig,
    render_contact,
    render_full_prompt,
    render_part_prompt,
    write_prompt_images,
)


def _print_table(headers: Sequence[str], rows: Sequence[Sequence[Any]], right_align_cols: Sequence[int] = ()) -> None:
    widths = [len(h) for h in headers]
    for row in rows:
        for i, cell in enumerate(row):
            widths[i] = max(widths[i], len(str(cell)))

    def fmt(row: Sequence[Any]) -> str:
        cells = []
        for i, cell in enumerate(row):
            text = str(cell)
            cells.append(text.rjust(widths[i]) if i in right_align_cols else text.ljust(widths[i]))
        return " | ".join(cells)

    print(fmt(headers))
    print("-+-".join("-" * w for w in widths))
    for row in rows:
        print(fmt(row))


def _error(exc: BaseException, **extra: Any) -> int:
    payload: Dict[str, Any] = {"error": type(exc).__name__, "message": str(exc)}
    for attr in ("vertex_ids", "part_name", "placeholder", "sample_ids", "model"):
        value = getattr(exc, attr, None)
        if value is not None:
            payload[attr] = list(value) if isinstance(value, (list, tuple, set, frozenset)) else value
    payload.update(extra)
    print(json.dumps(payload, sort_keys=True), file=sys.stderr)
    return 2


def _run_config(args: argparse.Namespace) -> RunConfig:
    return RunConfig(
        mesh_path=args.mesh,
        seg_path=args.seg,
        dataset_path=getattr(args, "dataset", None),
        out_dir=args.out,
        templates_dir=args.templates_dir,
        backend_path=args.backend,
        coarse_seg_path=getattr(args, "coarse_seg", None),
        vertex_map_path=getattr(args, "vertex_map", None),
        workers=args.workers,
        seed=args.seed,
        ablation=resolve_ablation(getattr(args, "ablation", None)),
    )


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_validate(args: argparse.Namespace) -> int:
    mesh = load_mesh(args.mesh)
    seg = load_segmentation(args.seg, mesh)
    hints = load_hints(args.hints) if args.hints else None
    report = validate_grids(seg, mesh, hints)

    template_problems: List[str] = []
    templates = load_templates(args.templates_dir)
    if args.templates_dir is None:
        template_problems = verify_default_templates(templates)

    rows = [
        [d.part_index, d.part_name, "ok" if d.bijection_ok else "FAIL", "ok" if d.monotone else "FAIL", d.adjacency_warnings]
        for d in report.parts
        if args.all or d.errors or d.adjacency_warnings
    ]
    if rows:
        _print_table(["Part", "Name", "Bijection", "Monotone", "Adjacency warnings"], rows, right_align_cols=[0, 4])
    errors = report.error_count + len(template_problems)
    print(f"mesh: {mesh.vertex_count} vertices, {len(mesh.faces)} faces")
    print(f"segmentation: {seg.name}, {seg.part_count} parts")
    print(f"{errors} errors, {report.warning_count} warnings")
    if errors:
        for d in report.parts:
            for e in d.errors:
                print(f"  {d.part_name}: {e}", file=sys.stderr)
        for p in template_problems:
            print(f"  {p}", file=sys.stderr)
        return 1
    return 0


def cmd_build_grids(args: argparse.Namespace) -> int:
    mesh = load_mesh(args.mesh)
    parts = load_labeling(args.labeling, mesh)
    hints = load_hints(args.hints)
    seg = build_segmentation_grids(mesh, parts, hints, name=args.name)
    save_segmentation(seg, args.out)
    print(f"Wrote {seg.part_count} part grids ({sum(g.total_vertices for g in seg.grids)} vertices) to {args.out}")
    return 0


def cmd_render_prompts(args: argparse.Namespace) -> int:
    mesh = load_mesh(args.mesh)
    seg = load_segmentation(args.seg, mesh)
    cfg = ViewConfig(views=tuple(args.views), image_width=args.size, image_height=args.size)
    paths = write_prompt_images(render_part_prompt(mesh, seg, cfg), render_full_prompt(mesh, seg, cfg), args.out, cfg)
    for key in ("part", "full", "sidecar"):
        print(f"Wrote {paths[key]}")
    return 0


def cmd_run(args: argparse.Namespace) -> int:
    config = _run_config(args)
    assets = load_run_assets(config)
    result = execute_run(config, assets)
    transcripts = result.transcripts
    client = result.context.client

    if args.render_contact:
        folder = result.out_dir / "contact"
        folder.mkdir(parents=True, exist_ok=True)
        for t in transcripts:
            if t.contact is not None:
                name = Path(transcript_filename(t.sample_id)).with_suffix(".png")
                render_contact(assets.mesh, t.contact).image.save(folder / name)

    failed = [t for t in transcripts if t.error]
    degraded = [t for t in transcripts if t.degraded]
    usage = client.usage
    print(f"Wrote {len(transcripts)} transcripts to {result.out_dir / 'transcripts'}")
    print(f"Calls: {client.call_count}  output tokens: {usage.output_tokens:,}  cost: {format_usd(client.cost())}")
    print(f"Degraded: {len(degraded)}  failed: {len(failed)}")
    if failed:
        print(f"Failures: {len(failed)} samples", file=sys.stderr)
        for t in failed:
            print(f"  {t.sample_id}: {t.error}", file=sys.stderr)
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    backend = load_backend_config(args.backend) if args.backend else BackendConfig()
    vertex_map = load_vertex_map(args.vertex_map) if args.vertex_map else None
    dataset = load_dataset(args.dataset, vertex_map=vertex_map, check_images=False)
    transcripts = load_transcripts(args.out)
    model = args.model or backend.model
    label = transcripts[0].ablation if transcripts else "full"
    report = evaluate_run(transcripts, dataset.ground_truth(), backend.pricing, model=model, label=label)
    paths = write_report(report, args.out)

    print(format_summary_table([report.summary_row()]))
    m = report.metrics
    print(f"micro: P={m.micro_precision:.3f} R={m.micro_recall:.3f} F1={m.micro_f1:.3f}")
    if args.compare_models:
        rows = []
        tokens = report.ledger.total_output_tokens
        for name in backend.pricing.models:
            cost = compute_cost(Usage(output_tokens=tokens), name, backend.pricing)
            rows.append([name, f"{tokens:,}", format_usd(cost), format_usd(cost / max(m.count, 1))])
        _print_table(["Model", "Output tokens", "Total cost", "Cost / sample"], rows, right_align_cols=[1, 2, 3])
    print(f"Wrote {paths['json']}, {paths['csv']}, {paths['table']}")
    return 0


def cmd_ablate(args: argparse.Namespace) -> int:
    config = _run_config(args)
    variants = parse_variants(args.variants)
    result = run_ablation(config, variants)
    print(format_summary_table(result.table.to_dict("records")))
    print(f"Wrote {len(result.reports)} variants to {result.out_dir}")
    return 0


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Training-free dense hand contact estimation with a multimodal LLM.")
    parser.add_argument("--verbose", action="store_true", help="Debug logging.")
    sub = parser.add_subparsers(dest="command", required=True)

    assets = argparse.ArgumentParser(add_help=False)
    assets.add_argument("--mesh", required=True, help="Hand mesh (.obj, 778 vertices).")
    assets.add_argument("--seg", required=True, help="Segmentation JSON with part grids.")
    assets.add_argument("--templates-dir", default=None, help="Directory with stage templates (default: bundled).")

    running = argparse.ArgumentParser(add_help=False)
    running.add_argument("--dataset", required=True, help="Dataset manifest (JSON lines).")
    running.add_argument("--backend", default=None, help="Backend config JSON (default: uncorrupted oracle).")
    running.add_argument("--out", default="results", help="Output directory (default: results).")
    running.add_argument("--workers", type=int, default=1, help="Samples processed concurrently (default: 1).")
    running.add_argument("--seed", type=int, default=0, help="Oracle corruption seed (default: 0).")
    running.add_argument("--coarse-seg", default=None, help="Coarse segmentation JSON for the coarse variant.")
    running.add_argument("--vertex-map", default=None, help="Left-to-right hand vertex index map JSON.")

    p = sub.add_parser("validate", parents=[assets], help="Check mesh, segmentation and templates.")
    p.add_argument("--hints", default=None, help="Orientation hints JSON (enables the row order check).")
    p.add_argument("--all", action="store_true", help="Print every part, not just parts with findings.")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("build-grids", help="Build part grids from a labeling and hints.")
    p.add_argument("--mesh", required=True, help="Hand mesh (.obj).")
    p.add_argument("--labeling", required=True, help="Labeling JSON (parts without grids).")
    p.add_argument("--hints", required=True, help="Orientation hints JSON.")
    p.add_argument("--name", default="detailed", help="Segmentation name (default: detailed).")
    p.add_argument("--out", required=True, help="Output segmentation JSON.")
    p.set_defaults(func=cmd_build_grids)

    p = sub.add_parser("render-prompts", parents=[assets], help="Write the two visual prompt images.")
    p.add_argument("--out", required=True, help="Output directory.")
    p.add_argument("--views", nargs="+", default=list(DEFAULT_VIEWS), choices=list(DEFAULT_VIEWS))
    p.add_argument("--size", type=int, default=320, help="Panel size in pixels (default: 320).")
    p.set_defaults(func=cmd_render_prompts)

    p = sub.add_parser("run", parents=[assets, running], help="Run the pipeline over a dataset.")
    p.add_argument("--ablation", default=None, help="Preset name, JSON flags, or a flags file (default: full).")
    p.add_argument("--render-contact", action="store_true", help="Also write a contact render per sample.")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", help="Score a run directory.")
    p.add_argument("--out", required=True, help="Run directory (contains transcripts/).")
    p.add_argument("--dataset", required=True, help="Dataset manifest (JSON lines).")
    p.add_argument("--backend", default=None, help="Backend config JSON (model id and pricing).")
    p.add_argument("--model", default=None, help="Price the run as this model id.")
    p.add_argument("--vertex-map", default=None, help="Left-to-right hand vertex index map JSON.")
    p.add_argument("--compare-models", action="store_true", help="Print the run's cost under every priced model.")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", parents=[assets, running], help="Run a matrix of pipeline variants.")
    p.add_argument(
        "--variants",
        "--ablation",
        dest="variants",
        default=None,
        help="Comma-separated presets, 'all', or a JSON list (default: every preset except coarse_segmentation).",
    )
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    load_dotenv(".env.local")
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except HandContactError as exc:
        return _error(exc, command=args.command)
    except FileNotFoundError as exc:
        return _error(exc, command=args.command)


if __name__ == "__main__":
    raise SystemExit(main())
