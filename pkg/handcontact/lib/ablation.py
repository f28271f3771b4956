"""
Run a matrix of pipeline variants over one dataset and tabulate the results.

Each variant gets its own output folder (transcripts, run manifest, report)
under `<out>/ablation/<variant>/`; the comparison table is written next to them.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import pandas as pd

from .config import ABLATION_PRESETS, AblationFlags, RunConfig, resolve_ablation
from .errors import ConfigError
from .eval_harness import EvalReport, evaluate_run, format_summary_table, write_report
from .runner import RunAssets, execute_run, load_run_assets

logger = logging.getLogger(__name__)

DEFAULT_VARIANTS = ("full", "flat_grids", "dense_only", "part_dense", "freeform_dense", "no_conditioning")


def parse_variants(value: Optional[str]) -> List[AblationFlags]:
    """Comma-separated preset names, `all`, or a JSON list of names / flag objects."""
    if not value:
        return [ABLATION_PRESETS[name] for name in DEFAULT_VARIANTS]
    text = value.strip()
    if text == "all":
        return list(ABLATION_PRESETS.values())
    if text.startswith("["):
        try:
            items = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"Variant list is not valid JSON ({exc})") from exc
        flags = []
        for item in items:
            if isinstance(item, str):
                flags.append(resolve_ablation(item))
            elif isinstance(item, dict):
                flags.append(AblationFlags.from_dict(item, name=item.get("name", f"custom_{len(flags)}")))
            else:
                raise ConfigError("Variant list entries must be preset names or flag objects")
    else:
        flags = [resolve_ablation(name.strip()) for name in text.split(",") if name.strip()]
    names = [f.name for f in flags]
    duplicates = sorted({n for n in names if names.count(n) > 1})
    if duplicates:
        raise ConfigError(f"Duplicate variant names: {duplicates}")
    if not flags:
        raise ConfigError("No ablation variants given")
    return flags


@dataclass(frozen=True, eq=False)
class AblationResult:
    reports: List[EvalReport]
    table: pd.DataFrame
    out_dir: Path

    def report(self, name: str) -> EvalReport:
        for r in self.reports:
            if r.label == name:
                return r
        raise KeyError(name)


def comparison_table(reports: Sequence[EvalReport]) -> pd.DataFrame:
    return pd.DataFrame([r.summary_row() for r in reports])


def run_ablation(
    config: RunConfig,
    variants: Sequence[AblationFlags],
    assets: Optional[RunAssets] = None,
) -> AblationResult:
    assets = assets or load_run_assets(config)
    if assets.dataset is None:
        raise ConfigError("Ablation needs a dataset")
    root = Path(config.out_dir) / "ablation"
    ground_truth = assets.dataset.ground_truth()

    reports: List[EvalReport] = []
    manifest_sizes: Dict[str, List[int]] = {}
    for flags in variants:
        result = execute_run(config, assets, flags=flags, out_dir=root / flags.name)
        report = evaluate_run(
            result.transcripts,
            ground_truth,
            assets.backend.pricing,
            model=assets.backend.model,
            label=flags.name,
        )
        write_report(report, root / flags.name)
        reports.append(report)
        manifest_sizes[flags.name] = [t.manifest_vertices for t in result.transcripts]
        logger.info("Variant %s: F1=%.3f over %d samples", flags.name, report.metrics.f1, report.metrics.count)

    table = comparison_table(reports)
    root.mkdir(parents=True, exist_ok=True)
    table.to_csv(root / "comparison.csv", index=False, float_format="%.6f")
    (root / "comparison.txt").write_text(format_summary_table(table.to_dict("records")) + "\n", encoding="utf-8")
    (root / "manifest_vertices.json").write_text(json.dumps(manifest_sizes, indent=2) + "\n", encoding="utf-8")
    return AblationResult(reports=reports, table=table, out_dir=root)
