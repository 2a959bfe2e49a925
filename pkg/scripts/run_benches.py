#!/usr/bin/env python3
"""Run every benchmark suite and drop the JSON reports in one directory.

Usage: python3 scripts/run_benches.py [--out reports] [--seed 42] [--repeats 5]
The stage-shapes suite tunes each layer and takes a couple of minutes; pass
--skip-stage for a quick packing/kernels-only run.
"""

import argparse
import json
from pathlib import Path

from cwnm.cli import main as cwnm_main


def run(argv):
    print("$ cwnm " + " ".join(argv))
    rc = cwnm_main(argv)
    if rc != 0:
        raise SystemExit(rc)


def summarize_stage(path: Path):
    doc = json.loads(path.read_text())
    pairs = {}
    for row in doc["rows"]:
        kind = row["config"].get("kind")
        if kind in ("columnwise", "inner_nm"):
            pairs.setdefault(row["case"], {})[kind] = row["median_ns"]
    print(f"{'case':<16} {'columnwise':>12} {'inner_nm':>12} {'speedup':>8}")
    for case, p in pairs.items():
        ratio = p["inner_nm"] / p["columnwise"]
        print(f"{case:<16} {p['columnwise']/1e6:>10.3f}ms {p['inner_nm']/1e6:>10.3f}ms "
              f"{ratio:>7.1f}x")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="reports")
    ap.add_argument("--seed", type=int, default=42)
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--skip-stage", action="store_true")
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    common = ["--seed", str(args.seed), "--repeats", str(args.repeats)]
    run(["bench", "--suite", "packing", "--json", str(out / "packing.json")] + common)
    run(["bench", "--suite", "kernels", "--json", str(out / "kernels.json")] + common)
    if not args.skip_stage:
        run(["bench", "--suite", "stage-shapes",
             "--json", str(out / "stage_shapes.json")] + common)
        summarize_stage(out / "stage_shapes.json")


if __name__ == "__main__":
    main()
