#!/usr/bin/env python3
"""
Write the synthetic asset bundle (mesh, segmentations, hints, vertex map,
dataset with images, oracle backend config) used by the examples and tests.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

REPO_ROOT = Path(__file__).resolve().parent
sys.path.insert(0, str(REPO_ROOT))

from handcontact.lib.fixtures import DATASET_SIZE, write_fixture_assets  # noqa: E402


def main() -> int:
    parser = argparse.ArgumentParser(description="Write the synthetic hand contact asset bundle.")
    parser.add_argument("--out", default="fixtures", help="Output directory (default: fixtures).")
    parser.add_argument("--samples", type=int, default=DATASET_SIZE, help=f"Dataset size (default: {DATASET_SIZE}).")
    parser.add_argument("--seed", type=int, default=0, help="Dataset seed (default: 0).")
    args = parser.parse_args()

    if args.samples < 1:
        print("--samples must be >= 1", file=sys.stderr)
        return 2
    assets = write_fixture_assets(Path(args.out), samples=args.samples, seed=args.seed)
    for name in ("mesh", "segmentation", "coarse_segmentation", "hints", "vertex_map", "dataset", "backend"):
        print(f"{name:20s} {getattr(assets, name)}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
