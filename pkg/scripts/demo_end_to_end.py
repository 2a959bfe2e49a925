#!/usr/bin/env python3
"""End-to-end walkthrough on generated data.

Builds a three-layer model (3x3 sparse, 1x1 sparse, 3x3 stride-2 dense),
prunes the sparse layers through the CLI, tunes the 'auto' layers, runs the
model with oracle verification, and prints where everything landed.

Usage: python3 scripts/demo_end_to_end.py [--dir demo] [--sparsity 0.5]
"""

import argparse
import json
from pathlib import Path

import numpy as np

from cwnm.cli import main as cwnm_main
from cwnm.tensor import Tensor, write_tensor


def run(argv):
    print("$ cwnm " + " ".join(argv))
    rc = cwnm_main(argv)
    if rc != 0:
        raise SystemExit(rc)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--dir", default="demo")
    ap.add_argument("--sparsity", type=float, default=0.5)
    ap.add_argument("--seed", type=int, default=42)
    args = ap.parse_args()

    d = Path(args.dir)
    d.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    cin, mid1, mid2, cout, hw = 8, 16, 12, 10, 12

    def dense(rows, cols):
        return (0.05 + 0.95 * rng.random((rows, cols))).astype(np.float32)

    write_tensor(Tensor.from_matrix(dense(mid1, cin * 9)), d / "w1.cwnm")
    write_tensor(Tensor.from_matrix(dense(mid2, mid1)), d / "w2.cwnm")
    write_tensor(Tensor.from_matrix(dense(cout, mid2 * 9)), d / "w3.cwnm")
    write_tensor(Tensor.from_matrix(rng.random((1, cout)).astype(np.float32)),
                 d / "b3.cwnm")

    run(["prune", "--weights", str(d / "w1.cwnm"), "--out", str(d / "w1.cwsw"),
         "--sparsity", str(args.sparsity), "--tile", "4"])
    run(["prune", "--weights", str(d / "w2.cwnm"), "--out", str(d / "w2.cwsw"),
         "--sparsity", str(args.sparsity), "--tile", "4", "--m", "8"])

    manifest = {
        "layers": [
            {"weights": "w1.cwsw", "kernel": 3, "stride": 1, "padding": 1,
             "kernel_config": "auto"},
            {"weights": "w2.cwsw", "kernel": 1, "kernel_config": "auto"},
            {"weights": "w3.cwnm", "bias": "b3.cwnm", "kernel": 3, "stride": 2,
             "padding": 1, "kernel_config": "auto", "relu": True},
        ]
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2))
    x = rng.random((1, hw, hw, cin)).astype(np.float32)
    write_tensor(Tensor.from_nhwc(x), d / "input.cwnm")

    run(["tune", "--manifest", str(d / "manifest.json"),
         "--input", str(d / "input.cwnm"), "--cache", str(d / "tune_cache.jsonl"),
         "--repeats", "5"])
    run(["conv", "--manifest", str(d / "manifest.json"),
         "--input", str(d / "input.cwnm"), "--out", str(d / "output.cwnm"),
         "--cache", str(d / "tune_cache.jsonl"), "--verify"])
    print(f"\nartifacts in {d}/: manifest.json, *.cwsw weights, tune_cache.jsonl, "
          f"output.cwnm")


if __name__ == "__main__":
    main()
