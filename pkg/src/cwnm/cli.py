"""Command-line front end: prune, convert, conv, tune, bench.

Bench suites emit versioned JSON reports with one row per measured case:
``{"case", "config", "median_ns", "counters"}`` plus suite-specific extras.
The ``packing`` suite compares the two-step im2col+pack pipeline against the
fused single pass, the ``kernels`` suite sweeps every kernel schedule over
every legal (t, lmul), and the ``stage-shapes`` suite tunes the column-wise
kernel per layer shape and reports it against a row-schedule baseline at the
same configuration, with the NHWC-to-CNHW conversion cost as its own line.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from . import conv as convmod
from . import tuner
from .kernels import KernelConfig, KernelKind, TrafficCounters, VectorEnv
from .packer import ConvGeometry, PackStats, fused_im2col_pack, im2col, pack
from .pruner import (PruneMode, PruneSpec, SparseWeight, decompress,
                     group_kept_counts, prune, read_sparse, select_mask,
                     write_sparse)
from .tensor import Layout, Tensor, convert_layout, read_tensor, write_tensor

REPORT_VERSION = 1

KIND_NAMES = {k.value: k for k in KernelKind}


# ---------------------------------------------------------------------------
# manifest handling


def load_manifest(path) -> list[dict]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    layers = doc.get("layers")
    if not isinstance(layers, list):
        raise ValueError(f"{path}: manifest needs a 'layers' list")
    base = Path(path).parent
    out = []
    for i, entry in enumerate(layers):
        weights_path = base / entry["weights"]
        if read_magic(weights_path) == b"CWSW":
            weights = read_sparse(weights_path)
        else:
            weights = read_tensor(weights_path).matrix()
        bias = None
        if entry.get("bias"):
            bias = read_tensor(base / entry["bias"]).data
        kh, kw = _pair(entry["kernel"])
        sh, sw = _pair(entry.get("stride", 1))
        ph, pw = _pair(entry.get("padding", 0))
        out.append({
            "index": i,
            "weights": weights,
            "bias": bias,
            "kernel": (kh, kw),
            "stride": (sh, sw),
            "padding": (ph, pw),
            "kernel_config": entry.get("kernel_config", "auto"),
            "relu": bool(entry.get("relu", False)),
        })
    return out


def read_magic(path) -> bytes:
    with open(path, "rb") as f:
        return f.read(4)


def _pair(v):
    if isinstance(v, (list, tuple)):
        if len(v) != 2:
            raise ValueError(f"expected [a, b] pair, got {v}")
        return int(v[0]), int(v[1])
    return int(v), int(v)


def _layer_sparsity(weights) -> float:
    if isinstance(weights, SparseWeight):
        return 1.0 - weights.n / weights.m
    return 0.0


def build_layers(entries: list[dict], input_dims: tuple[int, ...],
                 vlen_bits: int, cache_path=None) -> list[convmod.ConvLayer]:
    """Resolve manifest entries to ConvLayers, chaining geometries."""
    n, c, h, w = input_dims
    env = tuner.env_fingerprint(vlen_bits)
    layers = []
    for e in entries:
        weights = e["weights"]
        rows = weights.rows if isinstance(weights, SparseWeight) else weights.shape[0]
        cols = weights.cols if isinstance(weights, SparseWeight) else weights.shape[1]
        kh, kw = e["kernel"]
        if cols != c * kh * kw:
            raise convmod.ShapeError(
                f"layer {e['index']}: weights K={cols} but cin*kh*kw={c * kh * kw}"
            )
        g = ConvGeometry(batch=n, cin=c, in_h=h, in_w=w, kh=kh, kw=kw,
                         sh=e["stride"][0], sw=e["stride"][1],
                         ph=e["padding"][0], pw=e["padding"][1])
        kc = e["kernel_config"]
        if kc == "auto":
            if cache_path is None:
                raise convmod.ShapeError(
                    f"layer {e['index']} is 'auto' but no tune cache was given; "
                    f"run 'cwnm tune' first"
                )
            key = tuner.shape_key(g, rows, _layer_sparsity(weights))
            rec = tuner.cache_get(cache_path, key, env=env)
            if rec is None:
                raise convmod.ShapeError(
                    f"layer {e['index']}: no tune cache entry for {key}; "
                    f"run 'cwnm tune' first"
                )
            cfg = tuner.config_from_dict(rec["winner"], vlen_bits)
        else:
            cfg = KernelConfig(KIND_NAMES[kc["kind"]], int(kc["t"]),
                               VectorEnv(vlen_bits, int(kc["lmul"])))
        layers.append(convmod.ConvLayer(geometry=g, weights=weights, config=cfg,
                                        bias=e["bias"], relu=e["relu"]))
        c, h, w = rows, g.out_h, g.out_w
    return layers


# ---------------------------------------------------------------------------
# bench suites


def load_stage_shapes(path=None) -> dict:
    if path is not None:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    return json.loads(resources.files("cwnm.data").joinpath("stage_shapes.json")
                      .read_text(encoding="utf-8"))


def _shape_geometry(shape: dict, batch: int) -> ConvGeometry:
    return ConvGeometry(batch=batch, cin=shape["cin"], in_h=shape["hw"],
                        in_w=shape["hw"], kh=shape["k"], kw=shape["k"],
                        sh=shape["stride"], sw=shape["stride"],
                        ph=shape["pad"], pw=shape["pad"])


def _rand_input(rng, g: ConvGeometry) -> Tensor:
    arr = rng.random((g.cin, g.batch, g.in_h, g.in_w), dtype=np.float32)
    return Tensor((g.batch, g.cin, g.in_h, g.in_w), Layout.CNHW, arr.reshape(-1))


def _rand_weights(rng, rows: int, cols: int) -> np.ndarray:
    return (0.05 + 0.95 * rng.random((rows, cols))).astype(np.float32)


def bench_packing_suite(seed: int = 42, repeats: int = 3, shapes: dict | None = None):
    """Two-step im2col+pack vs the fused pass, across LMUL settings."""
    doc = shapes or load_stage_shapes()
    cases = [s for s in doc["shapes"] if s["k"] > 1]
    rng = np.random.default_rng(seed)
    rows = []
    for shape in cases:
        g = _shape_geometry(shape, doc.get("batch", 1))
        src = _rand_input(rng, g)
        for lmul in (1, 2, 4, 8):
            vl = VectorEnv(256, lmul).vl_f32
            sep_stats = PackStats()
            pack(im2col(src, g, stats=sep_stats), vl, stats=sep_stats)
            fus_stats = PackStats()
            fused_im2col_pack(src, g, vl, stats=fus_stats)
            sep_ns = tuner.measure_median_ns(
                lambda: pack(im2col(src, g), vl), repeats, 1)
            fus_ns = tuner.measure_median_ns(
                lambda: fused_im2col_pack(src, g, vl), repeats, 1)
            for variant, ns, reads in (("separate", sep_ns, sep_stats.total_reads),
                                       ("fused", fus_ns, fus_stats.src_reads)):
                rows.append({
                    "case": shape["name"],
                    "config": {"lmul": lmul, "vl": vl, "variant": variant},
                    "median_ns": ns,
                    "counters": {"source_elem_reads": reads},
                })
    return rows


def bench_kernels_suite(seed: int = 42, repeats: int = 3, vlen_bits: int = 256):
    """Every kernel kind at every legal (t, lmul) on small GEMM cases."""
    rng = np.random.default_rng(seed)
    cases = [
        {"name": "gemm-32x64x64", "rows": 32, "k": 64, "cols": 64},
        {"name": "gemm-64x128x48", "rows": 64, "k": 128, "cols": 48},
    ]
    rows = []
    for case in cases:
        dense = _rand_weights(rng, case["rows"], case["k"])
        mat = rng.random((case["k"], case["cols"]), dtype=np.float32)
        for base in tuner.enumerate_candidates(case["rows"], 0.5, vlen_bits):
            spec = PruneSpec.from_ratio(0.5, case["k"], tile_t=base.t)
            sw = prune(dense, spec)
            pm = pack(mat, base.env.vl_f32)
            for kind in KernelKind:
                cfg = KernelConfig(kind, base.t, base.env)
                weights = dense if kind is KernelKind.DENSE else sw
                counters = TrafficCounters()
                convmod.sparse_gemm(weights, pm, cfg, counters=counters)
                ns = tuner.measure_median_ns(
                    lambda: convmod.sparse_gemm(weights, pm, cfg), repeats, 1)
                rows.append({
                    "case": case["name"],
                    "config": {"kind": kind.value, "t": cfg.t, "lmul": cfg.env.lmul},
                    "median_ns": ns,
                    "counters": counters.as_dict(),
                })
    return rows


def bench_stage_suite(seed: int = 42, repeats: int = 3, sparsity: float = 0.5,
                      shapes: dict | None = None, vlen_bits: int = 256,
                      candidates=None):
    """Tune the column-wise kernel per stage shape; compare to the
    row-schedule baseline at the winner's (t, lmul)."""
    doc = shapes or load_stage_shapes()
    cases = [s for s in doc["shapes"] if not s["name"].startswith("stem")]
    batch = doc.get("batch", 1)
    rng = np.random.default_rng(seed)
    rows = []
    for shape in cases:
        g = _shape_geometry(shape, batch)
        src = _rand_input(rng, g)
        dense = _rand_weights(rng, shape["cout"], g.k_rows)

        nhwc = convert_layout(src, Layout.NHWC)
        convert_ns = tuner.measure_median_ns(
            lambda: convert_layout(nhwc, Layout.CNHW), repeats, 1)
        rows.append({
            "case": f"{shape['name']}-layout-nhwc-to-cnhw",
            "config": {},
            "median_ns": convert_ns,
            "counters": {},
        })

        report = tuner.tune_layer(g, dense, src, sparsity, repeats=repeats,
                                  warmups=1, vlen_bits=vlen_bits,
                                  candidates=candidates)
        wcfg = report.winner.config
        sw = prune(dense, PruneSpec.from_ratio(sparsity, g.k_rows, tile_t=wcfg.t))
        pm = fused_im2col_pack(src, g, wcfg.env.vl_f32)
        counters = TrafficCounters()
        convmod.sparse_gemm(sw, pm, wcfg, counters=counters)
        rows.append({
            "case": shape["name"],
            "config": {"kind": wcfg.kind.value, "t": wcfg.t, "lmul": wcfg.env.lmul},
            "median_ns": report.winner.median_ns,
            "counters": counters.as_dict(),
            "macs": counters.weight_elem_loads * wcfg.env.vl_f32,
        })

        icfg = KernelConfig(KernelKind.INNER_NM, wcfg.t, wcfg.env)
        icounters = TrafficCounters()
        convmod.sparse_gemm(sw, pm, icfg, counters=icounters)
        inner_ns = tuner.measure_median_ns(
            lambda: convmod.sparse_gemm(sw, pm, icfg), repeats, 1)
        rows.append({
            "case": shape["name"],
            "config": {"kind": icfg.kind.value, "t": icfg.t, "lmul": icfg.env.lmul},
            "median_ns": inner_ns,
            "counters": icounters.as_dict(),
            "macs": icounters.weight_elem_loads * icfg.env.vl_f32,
        })
    return rows


def write_report(path, suite: str, rows: list, seed: int) -> None:
    doc = {"report_version": REPORT_VERSION, "suite": suite, "seed": seed,
           "rows": rows}
    Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# commands


def cmd_prune(args) -> int:
    w = read_tensor(args.weights).matrix()
    m = args.m if args.m is not None else w.shape[1]
    mode = PruneMode.ROW_WISE if args.mode == "row" else PruneMode.COLUMN_WISE
    tile = 1 if mode is PruneMode.ROW_WISE else args.tile
    try:
        if args.sparsity is not None:
            spec = PruneSpec.from_ratio(args.sparsity, m, tile_t=tile, mode=mode)
        else:
            spec = PruneSpec(n=args.n, m=m, tile_t=tile, mode=mode)
    except Exception as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    mask = select_mask(w, spec)
    sw = prune(w, spec)
    write_sparse(sw, args.out)
    element_sparsity = 1.0 - float(mask.mean())
    print(f"pruned {w.shape[0]}x{w.shape[1]} -> {args.out}")
    print(f"n={spec.n} m={spec.m} tile={spec.tile_t} mode={spec.mode.value}")
    print(f"achieved element sparsity: {element_sparsity:.4f}")
    print(f"achieved column sparsity:  {sw.column_sparsity():.4f}")
    counts = group_kept_counts(mask, spec.m, spec.tile_t)
    for kept, groups in sorted(counts.items()):
        print(f"kept {kept} per group: {groups} groups")
    return 0


def cmd_convert(args) -> int:
    t = read_tensor(args.input)
    target = Layout.NHWC if args.layout == "nhwc" else Layout.CNHW
    write_tensor(convert_layout(t, target), args.out)
    print(f"wrote {args.out} ({target.name}, dims {t.dims})")
    return 0


def _threads(args) -> int:
    env = os.environ.get("CWNM_THREADS")
    if env is not None:
        return max(1, int(env))
    if args.threads is not None:
        return max(1, args.threads)
    return os.cpu_count() or 1


def cmd_conv(args) -> int:
    entries = load_manifest(args.manifest)
    x = read_tensor(args.input)
    layers = build_layers(entries, x.dims, args.vlen_bits, cache_path=args.cache)
    threads = _threads(args)
    if args.dump_packed:
        # debug: persist each layer's packed data matrix, strip-major
        dump_dir = Path(args.dump_packed)
        dump_dir.mkdir(parents=True, exist_ok=True)
        cur = convert_layout(x, Layout.CNHW)
        for i, layer in enumerate(layers):
            pm = fused_im2col_pack(cur, layer.geometry, layer.config.env.vl_f32)
            flat = pm.strips.reshape(pm.num_strips * pm.rows, pm.vl)
            write_tensor(Tensor.from_matrix(flat), dump_dir / f"layer{i}_packed.cwnm")
            cur = convmod.conv_forward(layer, cur, workers=threads)
        out = convert_layout(cur, Layout.NHWC)
    else:
        out = convmod.run_model(layers, x, workers=threads)
    write_tensor(out, args.out)
    print(f"wrote {args.out} (dims {out.dims}, threads={threads})")
    if args.verify:
        ref = x
        cur = convert_layout(ref, Layout.CNHW)
        for layer in layers:
            cur = convmod.conv_forward_reference(
                layer.geometry, convmod.dense_weights_of(layer), cur,
                bias=layer.bias, relu=layer.relu)
        ref_out = convert_layout(cur, Layout.NHWC)
        err = convmod.max_rel_err(out, ref_out)
        print(f"max relative error vs reference: {err:.3e}")
        if err > 1e-4:
            print("verification FAILED (tolerance 1e-4)", file=sys.stderr)
            return 1
    return 0


def cmd_tune(args) -> int:
    entries = load_manifest(args.manifest)
    x = read_tensor(args.input)
    env = tuner.env_fingerprint(args.vlen_bits)
    n, c, h, w = x.dims
    cur = convert_layout(x, Layout.CNHW)
    tuned = reused = 0
    for e in entries:
        weights = e["weights"]
        rows = weights.rows if isinstance(weights, SparseWeight) else weights.shape[0]
        kh, kw = e["kernel"]
        g = ConvGeometry(batch=n, cin=cur.dims[1], in_h=cur.dims[2], in_w=cur.dims[3],
                         kh=kh, kw=kw, sh=e["stride"][0], sw=e["stride"][1],
                         ph=e["padding"][0], pw=e["padding"][1])
        sparsity = _layer_sparsity(weights)
        if e["kernel_config"] == "auto":
            key = tuner.shape_key(g, rows, sparsity)
            if tuner.cache_get(args.cache, key, env=env) is not None:
                reused += 1
            else:
                if isinstance(weights, SparseWeight):
                    dense = decompress(weights)
                    # the weight file fixes the pruning tile, so only lmul is free
                    cands = [cfg for cfg in
                             tuner.enumerate_candidates(rows, sparsity, args.vlen_bits)
                             if cfg.t == weights.tile_t]
                    m_val = weights.m
                else:
                    dense, cands, m_val = weights, None, None
                report = tuner.tune_layer(g, dense, cur, sparsity, m=m_val,
                                          repeats=args.repeats,
                                          vlen_bits=args.vlen_bits,
                                          candidates=cands)
                tuner.cache_put(args.cache, report)
                tuned += 1
                w_cfg = report.winner.config
                print(f"layer {e['index']}: winner t={w_cfg.t} lmul={w_cfg.env.lmul} "
                      f"({report.winner.median_ns / 1e6:.3f} ms)")
        cur = Tensor((n, rows, g.out_h, g.out_w), Layout.CNHW,
                     np.zeros(n * rows * g.out_h * g.out_w, dtype=np.float32))
    print(f"tuned {tuned} layers, reused {reused} cached entries")
    return 0


def cmd_bench(args) -> int:
    shapes = load_stage_shapes(args.shapes) if args.shapes else None
    if args.suite == "packing":
        rows = bench_packing_suite(seed=args.seed, repeats=args.repeats, shapes=shapes)
    elif args.suite == "kernels":
        rows = bench_kernels_suite(seed=args.seed, repeats=args.repeats,
                                   vlen_bits=args.vlen_bits)
    else:
        rows = bench_stage_suite(seed=args.seed, repeats=args.repeats,
                                 shapes=shapes, vlen_bits=args.vlen_bits)
    write_report(args.json, args.suite, rows, args.seed)
    print(f"wrote {len(rows)} rows to {args.json}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cwnm",
                                description="column-wise N:M sparse convolution toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    pp = sub.add_parser("prune", help="prune a dense weight matrix to the sparse format")
    pp.add_argument("--weights", required=True)
    pp.add_argument("--out", required=True)
    group = pp.add_mutually_exclusive_group(required=True)
    group.add_argument("--sparsity", type=float)
    group.add_argument("--n", type=int)
    pp.add_argument("--m", type=int, default=None,
                    help="group size in columns (default: the whole row)")
    pp.add_argument("--tile", type=int, default=8)
    pp.add_argument("--mode", choices=("row", "column"), default="column")
    pp.set_defaults(func=cmd_prune)

    pc = sub.add_parser("convert", help="convert a 4-D tensor between NHWC and CNHW")
    pc.add_argument("--input", required=True)
    pc.add_argument("--out", required=True)
    pc.add_argument("--layout", choices=("nhwc", "cnhw"), required=True)
    pc.set_defaults(func=cmd_convert)

    pv = sub.add_parser("conv", help="run a model manifest on an input tensor")
    pv.add_argument("--manifest", required=True)
    pv.add_argument("--input", required=True)
    pv.add_argument("--out", required=True)
    pv.add_argument("--threads", type=int, default=None,
                    help="worker threads (CWNM_THREADS overrides)")
    pv.add_argument("--cache", default=None, help="tune cache for 'auto' layers")
    pv.add_argument("--verify", action="store_true",
                    help="also run the naive reference and check <= 1e-4")
    pv.add_argument("--vlen-bits", type=int, default=256)
    pv.add_argument("--dump-packed", default=None, metavar="DIR",
                    help="debug: write each layer's packed data matrix to DIR")
    pv.set_defaults(func=cmd_conv)

    pt = sub.add_parser("tune", help="populate the tune cache for 'auto' layers")
    pt.add_argument("--manifest", required=True)
    pt.add_argument("--input", required=True)
    pt.add_argument("--cache", required=True)
    pt.add_argument("--repeats", type=int, default=9)
    pt.add_argument("--vlen-bits", type=int, default=256)
    pt.set_defaults(func=cmd_tune)

    pb = sub.add_parser("bench", help="run a benchmark suite, write a JSON report")
    pb.add_argument("--suite", choices=("stage-shapes", "packing", "kernels"),
                    required=True)
    pb.add_argument("--json", required=True)
    pb.add_argument("--seed", type=int, default=42)
    pb.add_argument("--repeats", type=int, default=3)
    pb.add_argument("--shapes", default=None, help="alternative shapes JSON")
    pb.add_argument("--vlen-bits", type=int, default=256)
    pb.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
