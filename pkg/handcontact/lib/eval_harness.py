"""
Dataset loading, vertex-level contact metrics and usage/cost reports.

Dataset-level precision, recall and F1 are unweighted means over samples
(macro); pooled-count (micro) values are reported next to them. When a
metric's denominator is zero it is 1 if both the predicted and the true
contact sets are empty, else 0.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from PIL import Image, UnidentifiedImageError

from .errors import EmptyDatasetError, LengthMismatchError, MissingImageError, ParseError
from .hand_model import STANDARD_VERTEX_COUNT, ContactVector, PathLike, remap_values
from .mllm_client import PricingTable, Usage, compute_cost, format_usd
from .pipeline import STAGE_NAMES, InputSample, StageTranscript

logger = logging.getLogger(__name__)

CONTACT_THRESHOLD = 0.5
HANDS = ("right", "left")


# ---------------------------------------------------------------------------
# Dataset
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class DatasetEntry:
    id: str
    image_path: Path
    gt: ContactVector
    hand: str = "right"


@dataclass(frozen=True)
class DatasetManifest:
    samples: Tuple[DatasetEntry, ...]
    path: Optional[Path] = None

    @property
    def ids(self) -> Tuple[str, ...]:
        return tuple(s.id for s in self.samples)

    def ground_truth(self) -> Dict[str, ContactVector]:
        return {s.id: s.gt for s in self.samples}

    def __len__(self) -> int:
        return len(self.samples)


def binarize(values: Any, threshold: float = CONTACT_THRESHOLD) -> np.ndarray:
    if isinstance(values, ContactVector):
        values = values.values
    return (np.asarray(values, dtype=np.float64) >= threshold).astype(np.uint8)


def load_dataset(
    path: PathLike,
    *,
    vertex_count: int = STANDARD_VERTEX_COUNT,
    vertex_map: Optional[np.ndarray] = None,
    check_images: bool = True,
) -> DatasetManifest:
    """Read a JSON-lines manifest. Soft labels are binarized at 0.5; left-hand
    ground truth goes through `vertex_map` when one is given."""
    manifest_path = Path(path)
    try:
        lines = manifest_path.read_text(encoding="utf-8").splitlines()
    except FileNotFoundError as exc:
        raise ParseError(f"Dataset manifest not found: {manifest_path}") from exc

    entries: List[DatasetEntry] = []
    seen = set()
    missing_images: List[str] = []
    for lineno, raw in enumerate(lines, start=1):
        if not raw.strip():
            continue
        try:
            row = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{manifest_path}:{lineno}: invalid JSON ({exc})") from exc
        if not isinstance(row, dict):
            raise ParseError(f"{manifest_path}:{lineno}: expected an object")

        sample_id = row.get("id")
        if not isinstance(sample_id, str) or not sample_id:
            raise ParseError(f"{manifest_path}:{lineno}: id is required")
        if sample_id in seen:
            raise ParseError(f"Duplicate sample id: {sample_id}")
        seen.add(sample_id)

        gt_raw = row.get("gt_contact")
        if not isinstance(gt_raw, list) or len(gt_raw) != vertex_count:
            got = len(gt_raw) if isinstance(gt_raw, list) else type(gt_raw).__name__
            raise ParseError(f"Sample {sample_id}: gt_contact must have {vertex_count} values, got {got}")
        bad = [i for i, v in enumerate(gt_raw) if isinstance(v, bool) or not isinstance(v, (int, float))]
        if bad:
            raise ParseError(
                f"Sample {sample_id}: gt_contact[{bad[0]}] must be a number, got {json.dumps(gt_raw[bad[0]])}"
            )
        gt_values = np.asarray(gt_raw, dtype=np.float64)
        out_of_range = np.flatnonzero(~np.isfinite(gt_values) | (gt_values < 0) | (gt_values > 1))
        if out_of_range.size:
            i = int(out_of_range[0])
            raise ParseError(f"Sample {sample_id}: gt_contact[{i}] must lie in [0, 1], got {gt_raw[i]}")

        hand = row.get("hand", "right")
        if hand not in HANDS:
            raise ParseError(f"Sample {sample_id}: hand must be one of {HANDS}")
        gt = binarize(gt_values)
        if hand == "left":
            if vertex_map is not None:
                gt = remap_values(gt, vertex_map)
            else:
                logger.warning("Sample %s is a left hand and no vertex map was given; using indices as-is", sample_id)

        image_path = Path(row.get("image_path", ""))
        if not image_path.is_absolute():
            image_path = manifest_path.parent / image_path
        if check_images and not image_path.is_file():
            missing_images.append(sample_id)

        entries.append(DatasetEntry(id=sample_id, image_path=image_path, gt=ContactVector(gt), hand=hand))

    if missing_images:
        raise MissingImageError(missing_images)
    return DatasetManifest(samples=tuple(entries), path=manifest_path)


def load_samples(manifest: DatasetManifest) -> List[InputSample]:
    samples = []
    for entry in manifest.samples:
        try:
            with Image.open(entry.image_path) as img:
                image = img.convert("RGB")
        except (UnidentifiedImageError, OSError) as exc:
            raise ParseError(f"Sample {entry.id}: cannot read image {entry.image_path} ({exc})") from exc
        samples.append(InputSample(id=entry.id, image=image, gt=entry.gt, hand=entry.hand))
    return samples


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SampleMetrics:
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    fn: int
    tn: int


def _ratio(num: int, den: int, both_empty: bool) -> float:
    if den == 0:
        return 1.0 if both_empty else 0.0
    return num / den


def _scores(tp: int, fp: int, fn: int) -> Tuple[float, float, float]:
    both_empty = tp + fp == 0 and tp + fn == 0
    precision = _ratio(tp, tp + fp, both_empty)
    recall = _ratio(tp, tp + fn, both_empty)
    if precision + recall > 0:
        f1 = 2 * precision * recall / (precision + recall)
    else:
        f1 = 1.0 if both_empty else 0.0
    return precision, recall, f1


def sample_metrics(
    pred: Union[ContactVector, Sequence[float], np.ndarray],
    gt: Union[ContactVector, Sequence[float], np.ndarray],
    threshold: float = CONTACT_THRESHOLD,
) -> SampleMetrics:
    p = binarize(pred, threshold).astype(bool)
    g = binarize(gt, threshold).astype(bool)
    if p.shape != g.shape:
        raise LengthMismatchError(f"Prediction has {p.size} values; ground truth has {g.size}")
    tp = int(np.sum(p & g))
    fp = int(np.sum(p & ~g))
    fn = int(np.sum(~p & g))
    tn = int(np.sum(~p & ~g))
    precision, recall, f1 = _scores(tp, fp, fn)
    return SampleMetrics(precision, recall, f1, tp, fp, fn, tn)


@dataclass(frozen=True)
class DatasetMetrics:
    count: int
    precision: float
    recall: float
    f1: float
    micro_precision: float
    micro_recall: float
    micro_f1: float


def aggregate_metrics(metrics: Sequence[SampleMetrics]) -> DatasetMetrics:
    if not metrics:
        raise EmptyDatasetError("Cannot aggregate metrics over zero samples")
    tp = sum(m.tp for m in metrics)
    fp = sum(m.fp for m in metrics)
    fn = sum(m.fn for m in metrics)
    micro = _scores(tp, fp, fn)
    return DatasetMetrics(
        count=len(metrics),
        precision=float(np.mean([m.precision for m in metrics])),
        recall=float(np.mean([m.recall for m in metrics])),
        f1=float(np.mean([m.f1 for m in metrics])),
        micro_precision=micro[0],
        micro_recall=micro[1],
        micro_f1=micro[2],
    )


# ---------------------------------------------------------------------------
# Usage and cost
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SampleUsage:
    sample_id: str
    output_tokens: int
    output_tokens_by_stage: Dict[int, int]
    output_tokens_by_attempt: Dict[int, List[int]]
    cost_usd: float


@dataclass(frozen=True)
class UsageLedger:
    model: str
    samples: Tuple[SampleUsage, ...]

    @property
    def total_output_tokens(self) -> int:
        return sum(s.output_tokens for s in self.samples)

    @property
    def total_cost(self) -> float:
        return sum(s.cost_usd for s in self.samples)

    @property
    def mean_output_tokens(self) -> float:
        return self.total_output_tokens / len(self.samples) if self.samples else 0.0

    @property
    def mean_cost(self) -> float:
        return self.total_cost / len(self.samples) if self.samples else 0.0

    def to_dict(self) -> Dict[str, Any]:
        return {
            "model": self.model,
            "total_output_tokens": self.total_output_tokens,
            "total_cost_usd": self.total_cost,
            "mean_output_tokens": self.mean_output_tokens,
            "mean_cost_usd": self.mean_cost,
            "samples": [asdict(s) for s in self.samples],
        }


def usage_report(
    transcripts: Sequence[StageTranscript],
    pricing: PricingTable,
    model: Optional[str] = None,
) -> UsageLedger:
    """Per-sample output tokens over all stages and attempts, priced for `model`
    (defaults to the model recorded in the transcripts)."""
    model_id = model or (transcripts[0].model if transcripts else "")
    rows = []
    for t in transcripts:
        by_attempt = {
            stage: [a.output_tokens for a in t.stages[stage].attempts] if stage in t.stages else []
            for stage in STAGE_NAMES
        }
        tokens = t.output_tokens
        rows.append(
            SampleUsage(
                sample_id=t.sample_id,
                output_tokens=tokens,
                output_tokens_by_stage=t.output_tokens_by_stage(),
                output_tokens_by_attempt=by_attempt,
                cost_usd=compute_cost(Usage(output_tokens=tokens), model_id, pricing),
            )
        )
    return UsageLedger(model=model_id, samples=tuple(rows))


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EvalReport:
    label: str
    metrics: DatasetMetrics
    ledger: UsageLedger
    per_sample: Tuple[Tuple[str, SampleMetrics], ...]
    degraded: int
    mean_manifest_vertices: float

    def summary_row(self) -> Dict[str, Any]:
        return {
            "Method": self.label,
            "Precision": self.metrics.precision,
            "Recall": self.metrics.recall,
            "F1": self.metrics.f1,
            "# output tokens": self.ledger.mean_output_tokens,
            "Cost": self.ledger.mean_cost,
            "Degraded": self.degraded,
            "Manifest vertices": self.mean_manifest_vertices,
        }

    def to_dict(self) -> Dict[str, Any]:
        return {
            "label": self.label,
            "metrics": asdict(self.metrics),
            "usage": self.ledger.to_dict(),
            "degraded": self.degraded,
            "mean_manifest_vertices": self.mean_manifest_vertices,
            "per_sample": [{"sample_id": sid, **asdict(m)} for sid, m in self.per_sample],
        }


def evaluate_run(
    transcripts: Sequence[StageTranscript],
    ground_truth: Mapping[str, ContactVector],
    pricing: PricingTable,
    *,
    model: Optional[str] = None,
    label: str = "full",
) -> EvalReport:
    scored = []
    kept = []
    for t in transcripts:
        gt = ground_truth.get(t.sample_id)
        if gt is None:
            logger.warning("Transcript %s has no ground truth; skipped", t.sample_id)
            continue
        pred = t.contact if t.contact is not None else ContactVector.zeros(gt.vertex_count)
        scored.append((t.sample_id, sample_metrics(pred, gt)))
        kept.append(t)
    metrics = aggregate_metrics([m for _, m in scored])
    return EvalReport(
        label=label,
        metrics=metrics,
        ledger=usage_report(kept, pricing, model),
        per_sample=tuple(scored),
        degraded=sum(1 for t in kept if t.degraded),
        mean_manifest_vertices=float(np.mean([t.manifest_vertices for t in kept])),
    )


def format_summary_table(rows: Sequence[Mapping[str, Any]]) -> str:
    """Plain-text table in the usual results layout (3-decimal scores, $ cost)."""
    df = pd.DataFrame(list(rows))
    formatters = {
        "Precision": "{:.3f}".format,
        "Recall": "{:.3f}".format,
        "F1": "{:.3f}".format,
        "# output tokens": lambda v: f"{v:,.0f}",
        "Cost": format_usd,
        "Manifest vertices": lambda v: f"{v:.1f}",
    }
    return df.to_string(index=False, formatters={k: f for k, f in formatters.items() if k in df.columns})


def per_sample_frame(report: EvalReport) -> pd.DataFrame:
    usage = {s.sample_id: s for s in report.ledger.samples}
    rows = []
    for sample_id, m in report.per_sample:
        u = usage.get(sample_id)
        rows.append(
            {
                "sample_id": sample_id,
                "precision": m.precision,
                "recall": m.recall,
                "f1": m.f1,
                "tp": m.tp,
                "fp": m.fp,
                "fn": m.fn,
                "tn": m.tn,
                "output_tokens": u.output_tokens if u else 0,
                "cost_usd": u.cost_usd if u else 0.0,
            }
        )
    return pd.DataFrame(rows)


def write_report(report: EvalReport, out_dir: PathLike) -> Dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"json": out / "report.json", "csv": out / "per_sample.csv", "table": out / "report.txt"}
    paths["json"].write_text(json.dumps(report.to_dict(), indent=2) + "\n", encoding="utf-8")
    per_sample_frame(report).to_csv(paths["csv"], index=False, float_format="%.6f")
    table = format_summary_table([report.summary_row()])
    micro = report.metrics
    paths["table"].write_text(
        table
        + f"\n\nmicro: P={micro.micro_precision:.3f} R={micro.micro_recall:.3f} F1={micro.micro_f1:.3f}"
        + f"\nsamples: {micro.count}  total output tokens: {report.ledger.total_output_tokens:,}"
        + f"  total cost: {format_usd(report.ledger.total_cost)}\n",
        encoding="utf-8",
    )
    return paths
