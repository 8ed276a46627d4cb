"""
collect_results.py — lutnet training-log consolidator
=====================================================
Gathers the per-run metrics_<condition>_seed_<seed>.csv files written by
`lutnet train-toy` into a single results.csv, one row per (run, epoch).

Usage:
    python collect_results.py --run-dir ./runs --output results.csv
"""

import argparse
import glob
import os
import re
import sys
from pathlib import Path

import pandas as pd

METRIC_COLUMNS = ["seed", "epoch", "step", "method", "train_loss", "train_acc", "val_acc",
                  "distinct_params", "requant_events"]
OUTPUT_FIELDS = ["run_id", "condition"] + METRIC_COLUMNS

_RUN_NAME = re.compile(r"^metrics_(?P<condition>.+)_seed_(?P<seed>-?\d+)$")


def extract_run_id(filepath: str) -> str:
    """'metrics_moons_mlp_octave_seed_3.csv' → 'moons_mlp_octave_seed_3'; other stems as-is."""
    stem = Path(filepath).stem
    return stem[len("metrics_"):] if stem.startswith("metrics_") else stem


def extract_condition(filepath: str) -> str:
    m = _RUN_NAME.match(Path(filepath).stem)
    return m.group("condition") if m else extract_run_id(filepath)


def parse_file(filepath) -> pd.DataFrame:
    """One metrics CSV as a frame; files missing required columns yield an empty frame."""
    try:
        df = pd.read_csv(filepath)
    except pd.errors.EmptyDataError:
        return pd.DataFrame(columns=METRIC_COLUMNS)
    missing = [c for c in METRIC_COLUMNS if c not in df.columns]
    if missing:
        print(f"WARNING: '{Path(filepath).name}' lacks column(s) {', '.join(missing)}; skipped.")
        return pd.DataFrame(columns=METRIC_COLUMNS)
    return df[METRIC_COLUMNS]


def main():
    parser = argparse.ArgumentParser(
        description="Consolidate lutnet metrics_*.csv training logs into results.csv")
    parser.add_argument("--run-dir", default="runs",
                        help="Directory containing metrics_*.csv files (default: runs)")
    parser.add_argument("--output", default="results.csv",
                        help="Output CSV path (default: results.csv)")
    parser.add_argument("--pattern", default="metrics_*_seed_*.csv",
                        help="Glob pattern for metrics files")
    parser.add_argument("--sample", action="store_true",
                        help="Print the first 3 rows from each file for verification")
    args = parser.parse_args()

    files = sorted(glob.glob(os.path.join(args.run_dir, args.pattern)))
    if not files:
        print(f"ERROR: No files found matching '{os.path.join(args.run_dir, args.pattern)}'")
        sys.exit(1)

    print(f"Found {len(files)} metrics file(s) in '{args.run_dir}'")
    frames = []
    for filepath in files:
        df = parse_file(filepath)
        print(f"  {Path(filepath).name}: {len(df)} epochs parsed")
        if args.sample and len(df):
            print(df.head(3).to_string(index=False))
        if len(df):
            frames.append(df.assign(run_id=extract_run_id(filepath),
                                    condition=extract_condition(filepath)))

    if not frames:
        print("\nERROR: No data rows were extracted from the metrics files.")
        sys.exit(1)

    results = (pd.concat(frames, ignore_index=True)[OUTPUT_FIELDS]
               .sort_values(["run_id", "epoch"], kind="stable"))
    results.to_csv(args.output, index=False)
    print(f"\nDone. {len(results)} total rows written to '{args.output}'")
    print("Columns: " + ", ".join(OUTPUT_FIELDS))


if __name__ == "__main__":
    main()
