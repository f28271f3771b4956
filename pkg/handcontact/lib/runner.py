"""
Assemble and execute pipeline runs from a RunConfig.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from .config import AblationFlags, RunConfig, config_hash
from .errors import ConfigError
from .eval_harness import DatasetManifest, load_dataset, load_samples
from .hand_model import (
    HandMesh,
    PartSegmentation,
    flatten_segmentation,
    load_mesh,
    load_segmentation,
    load_vertex_map,
)
from .mllm_client import BackendConfig, MllmClient, build_backend, encode_image, load_backend_config
from .pipeline import (
    InputSample,
    PipelineContext,
    StageTranscript,
    run_dataset,
    write_run_manifest,
    write_transcripts,
)
from .prompt_engine import PromptTemplate, load_templates
from .visual_prompt import ViewConfig, render_full_prompt, render_part_prompt

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class RunAssets:
    mesh: HandMesh
    seg: PartSegmentation
    templates: Dict[int, PromptTemplate]
    backend: BackendConfig
    dataset: Optional[DatasetManifest] = None
    samples: Tuple[InputSample, ...] = ()
    coarse_seg: Optional[PartSegmentation] = None


def load_run_assets(config: RunConfig, *, with_dataset: bool = True) -> RunAssets:
    config.validate()
    mesh = load_mesh(config.mesh_path)
    seg = load_segmentation(config.seg_path, mesh)
    coarse = None
    if config.coarse_seg_path:
        coarse = load_segmentation(config.coarse_seg_path, mesh)
        if coarse.name == seg.name:
            coarse = PartSegmentation(coarse.parts, coarse.grids, coarse.vertex_count, name="coarse")
    templates = load_templates(config.templates_dir)
    backend = load_backend_config(config.backend_path) if config.backend_path else BackendConfig()

    dataset = None
    samples: Tuple[InputSample, ...] = ()
    if with_dataset:
        if not config.dataset_path:
            raise ConfigError("--dataset is required")
        vertex_map: Optional[np.ndarray] = None
        if config.vertex_map_path:
            vertex_map = load_vertex_map(config.vertex_map_path, mesh.vertex_count)
        dataset = load_dataset(config.dataset_path, vertex_count=mesh.vertex_count, vertex_map=vertex_map)
        samples = tuple(load_samples(dataset))
    return RunAssets(
        mesh=mesh,
        seg=seg,
        templates=templates,
        backend=backend,
        dataset=dataset,
        samples=samples,
        coarse_seg=coarse,
    )


def variant_segmentation(assets: RunAssets, flags: AblationFlags) -> PartSegmentation:
    seg = assets.seg
    if flags.segmentation == "coarse":
        if assets.coarse_seg is None:
            raise ConfigError(f"Variant {flags.name} needs a coarse segmentation (--coarse-seg)")
        seg = assets.coarse_seg
    if flags.flatten_grids:
        seg = flatten_segmentation(seg)
    return seg


def build_context(
    assets: RunAssets,
    flags: AblationFlags,
    *,
    seed: int = 0,
    view_cfg: Optional[ViewConfig] = None,
) -> PipelineContext:
    """Prompt images and the backend are built against the variant's segmentation."""
    cfg = view_cfg or ViewConfig()
    seg = variant_segmentation(assets, flags)
    part_prompt = render_part_prompt(assets.mesh, seg, cfg)
    full_prompt = render_full_prompt(assets.mesh, seg, cfg)
    ground_truth = assets.dataset.ground_truth() if assets.dataset is not None else None
    backend = build_backend(assets.backend, seg=seg, ground_truth=ground_truth, seed=seed)
    return PipelineContext(
        seg=seg,
        templates=assets.templates,
        client=MllmClient(backend, assets.backend),
        part_prompt=encode_image(part_prompt.image, quality=cfg.jpeg_quality),
        full_prompt=encode_image(full_prompt.image, quality=cfg.jpeg_quality),
        flags=flags,
        jpeg_quality=cfg.jpeg_quality,
    )


@dataclass(frozen=True, eq=False)
class RunResult:
    out_dir: Path
    transcripts: List[StageTranscript]
    context: PipelineContext


def execute_run(
    config: RunConfig,
    assets: Optional[RunAssets] = None,
    *,
    flags: Optional[AblationFlags] = None,
    out_dir: Optional[Path] = None,
) -> RunResult:
    assets = assets or load_run_assets(config)
    flags = flags or config.ablation
    out = Path(out_dir or config.out_dir)
    ctx = build_context(assets, flags, seed=config.seed)
    logger.info(
        "Running %d samples (variant=%s, segmentation=%s, model=%s, workers=%d)",
        len(assets.samples), flags.name, ctx.seg.name, ctx.client.model, config.workers,
    )
    transcripts = run_dataset(assets.samples, ctx, workers=config.workers)
    write_transcripts(transcripts, out)

    usage = ctx.client.usage
    manifest = {
        "config": config.with_ablation(flags).to_dict(),
        "config_hash": config_hash(config.with_ablation(flags).to_dict()),
        "backend": assets.backend.to_dict(),
        "segmentation": {"name": ctx.seg.name, "part_count": ctx.seg.part_count},
        "template_digests": {str(stage): t.digest for stage, t in sorted(assets.templates.items())},
        "samples": len(transcripts),
        "failed": sorted(t.sample_id for t in transcripts if t.error),
        "degraded": sorted(t.sample_id for t in transcripts if t.degraded),
        "calls": ctx.client.call_count,
        "usage": usage.to_dict(),
    }
    write_run_manifest(out, manifest)
    return RunResult(out_dir=out, transcripts=transcripts, context=ctx)
