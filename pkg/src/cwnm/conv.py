"""End-to-end convolution: fused packing, tiled sparse GEMM, bias, layouts.

``conv_forward`` packs the CNHW input once, then walks row-tiles of the
weight matrix; each tile runs the configured kernel schedule across all
strips, adds bias at tile store, and writes a disjoint slice of the output
matrix.  Because the data-matrix column order is (n, oh, ow) with ow fastest,
the row-major GEMM output *is* the CNHW output tensor.

Row-tiles are independent, so the optional worker pool partitions them
statically; any worker count produces byte-identical output.

``conv_forward_reference`` is the deliberately naive direct-convolution
ground truth (explicit output loops, float64 accumulation) used by every
equivalence check; it shares no code with the GEMM path.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import kernels
from .kernels import KernelConfig, KernelKind, TrafficCounters
from .packer import ConvGeometry, PackedMatrix, PackStats, fused_im2col_pack
from .pruner import SparseWeight, compress, decompress
from .tensor import Layout, Tensor, convert_layout


class ShapeError(ValueError):
    pass


@dataclass
class ConvLayer:
    geometry: ConvGeometry
    weights: SparseWeight | np.ndarray
    config: KernelConfig
    bias: np.ndarray | None = None
    relu: bool = False

    def __post_init__(self):
        if isinstance(self.weights, SparseWeight):
            rows, cols = self.weights.rows, self.weights.cols
            if self.weights.tile_t != self.config.t:
                raise ShapeError(
                    f"weights pruned at tile_t={self.weights.tile_t} cannot run with "
                    f"kernel t={self.config.t}; re-prune at the kernel tile"
                )
        else:
            self.weights = np.ascontiguousarray(self.weights, dtype=np.float32)
            if self.weights.ndim != 2:
                raise ShapeError(f"dense weights must be 2-D, got {self.weights.shape}")
            rows, cols = self.weights.shape
        if cols != self.geometry.k_rows:
            raise ShapeError(
                f"weights have K={cols}, geometry needs cin*kh*kw={self.geometry.k_rows}"
            )
        if self.bias is not None:
            self.bias = np.ascontiguousarray(self.bias, dtype=np.float32).reshape(-1)
            if self.bias.size != rows:
                raise ShapeError(f"bias length {self.bias.size} != out channels {rows}")

    @property
    def out_channels(self) -> int:
        return self.weights.rows if isinstance(self.weights, SparseWeight) else self.weights.shape[0]


def _prepare_tiles(weights, cfg: KernelConfig):
    """Per-tile kernel inputs, shared read-only by all workers."""
    t = cfg.t
    if isinstance(weights, SparseWeight):
        rows = weights.rows
        if cfg.kind is KernelKind.DENSE:
            dense = decompress(weights)
        else:
            blocks = list(zip(weights.values, weights.col_index))
    else:
        rows = weights.shape[0]
        dense = weights
    num_tiles = -(-rows // t)

    tiles = []
    for ti in range(num_tiles):
        r0 = ti * t
        rt = min(t, rows - r0)
        if cfg.kind is KernelKind.DENSE or not isinstance(weights, SparseWeight):
            w_tile = np.zeros((t, dense.shape[1]), dtype=np.float32)
            w_tile[:rt] = dense[r0:r0 + rt]
            if cfg.kind is KernelKind.DENSE:
                tiles.append(w_tile)
                continue
            # dense weights through a sparse schedule: every column survives
            idx = np.arange(dense.shape[1], dtype=np.uint32)
            block = np.ascontiguousarray(w_tile.T)
        else:
            block, idx = blocks[ti]
        if cfg.kind is KernelKind.COLUMN_WISE:
            tiles.append((block, idx))
        elif cfg.kind is KernelKind.INNER_NM:
            tiles.append(kernels.rows_from_block(block, idx, t))
        elif cfg.kind is KernelKind.OUTER_NM:
            tiles.append(kernels.cols_from_block(block, idx, t))
        else:
            raise ShapeError(f"unsupported kernel kind {cfg.kind}")
    return rows, num_tiles, tiles


def sparse_gemm(weights, pm: PackedMatrix, cfg: KernelConfig,
                bias: np.ndarray | None = None, relu: bool = False,
                workers: int = 1,
                counters: TrafficCounters | None = None) -> np.ndarray:
    """Multiply a (sparse or dense) weight matrix by a packed data matrix."""
    k_cols = weights.cols if isinstance(weights, SparseWeight) else weights.shape[1]
    if pm.rows != k_cols:
        raise ShapeError(f"packed matrix has {pm.rows} rows, weights need {k_cols}")
    if pm.vl != cfg.env.vl_f32:
        raise ShapeError(f"packed vl={pm.vl} does not match config vl={cfg.env.vl_f32}")
    t, vl = cfg.t, cfg.env.vl_f32
    rows, num_tiles, tiles = _prepare_tiles(weights, cfg)
    strips = pm.strips
    num_strips, cols = pm.num_strips, pm.logical_cols
    out = np.zeros((rows, cols), dtype=np.float32)
    tile_counters: list[TrafficCounters | None] = [None] * num_tiles

    def run_tile(ti: int):
        r0 = ti * t
        rt = min(t, rows - r0)
        acc = np.zeros((num_strips, t, vl), dtype=np.float32)
        if cfg.kind is KernelKind.COLUMN_WISE:
            block, idx = tiles[ti]
            cnt = kernels.columnwise_pass(block, idx, strips, cfg, acc)
        elif cfg.kind is KernelKind.INNER_NM:
            cnt = kernels.inner_pass(tiles[ti], strips, cfg, acc)
        elif cfg.kind is KernelKind.OUTER_NM:
            cnt = kernels.outer_pass(tiles[ti], strips, cfg, acc)
        else:
            cnt = kernels.dense_pass(tiles[ti], strips, cfg, acc)
        live_rows = acc[:, :rt, :]
        if bias is not None:
            live_rows += bias[r0:r0 + rt][None, :, None]
        if relu:
            np.maximum(live_rows, 0.0, out=live_rows)
        for s in range(num_strips):
            c0 = s * vl
            live = min(vl, cols - c0)
            out[r0:r0 + rt, c0:c0 + live] = live_rows[s, :, :live]
        tile_counters[ti] = cnt

    if workers <= 1 or num_tiles == 1:
        for ti in range(num_tiles):
            run_tile(ti)
    else:
        def run_slice(start: int):
            for ti in range(start, num_tiles, workers):
                run_tile(ti)
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(run_slice, range(workers)))

    if counters is not None:
        for cnt in tile_counters:
            counters.merge(cnt)
    return out


def conv_forward(layer: ConvLayer, input_tensor: Tensor, workers: int = 1,
                 counters: TrafficCounters | None = None,
                 pack_stats: PackStats | None = None,
                 copy_vl: int | str | None = None) -> Tensor:
    """Run one convolution layer on a CNHW input, returning a CNHW output."""
    g = layer.geometry
    pm = fused_im2col_pack(input_tensor, g, layer.config.env.vl_f32,
                           copy_vl=copy_vl, stats=pack_stats)
    out_mat = sparse_gemm(layer.weights, pm, layer.config, bias=layer.bias,
                          relu=layer.relu, workers=workers, counters=counters)
    dims = (g.batch, layer.out_channels, g.out_h, g.out_w)
    return Tensor(dims, Layout.CNHW, out_mat.reshape(-1))


def conv_forward_reference(g: ConvGeometry, dense_weights: np.ndarray,
                           input_tensor: Tensor, bias: np.ndarray | None = None,
                           relu: bool = False) -> Tensor:
    """Naive direct convolution, the oracle for every equivalence test."""
    x = input_tensor.cnhw().astype(np.float64)
    xp = np.pad(x, ((0, 0), (0, 0), (g.ph, g.ph), (g.pw, g.pw)))
    w = np.asarray(dense_weights, dtype=np.float64)
    cout = w.shape[0]
    if w.shape != (cout, g.k_rows):
        raise ShapeError(f"weights {w.shape} do not match K={g.k_rows}")
    w4 = w.reshape(cout, g.cin, g.kh, g.kw)
    out = np.zeros((cout, g.batch, g.out_h, g.out_w), dtype=np.float64)
    for co in range(cout):
        for n in range(g.batch):
            for oh in range(g.out_h):
                for ow in range(g.out_w):
                    win = xp[:, n, oh * g.sh: oh * g.sh + g.kh,
                             ow * g.sw: ow * g.sw + g.kw]
                    out[co, n, oh, ow] = np.sum(w4[co] * win)
    if bias is not None:
        out += np.asarray(bias, dtype=np.float64)[:, None, None, None]
    if relu:
        np.maximum(out, 0.0, out=out)
    dims = (g.batch, cout, g.out_h, g.out_w)
    return Tensor(dims, Layout.CNHW, out.astype(np.float32).reshape(-1))


def run_model(layers: list[ConvLayer], input_nhwc: Tensor, workers: int = 1,
              counters: TrafficCounters | None = None) -> Tensor:
    """Chain layers in CNHW; converts from/to NHWC once at the boundaries."""
    if input_nhwc.layout is not Layout.NHWC:
        raise ShapeError(f"model input must be NHWC, got {input_nhwc.layout.name}")
    cur = convert_layout(input_nhwc, Layout.CNHW)
    for li, layer in enumerate(layers):
        g = layer.geometry
        if cur.dims != (g.batch, g.cin, g.in_h, g.in_w):
            raise ShapeError(
                f"layer {li} expects input dims ({g.batch}, {g.cin}, {g.in_h}, "
                f"{g.in_w}), got {cur.dims}"
            )
        cur = conv_forward(layer, cur, workers=workers, counters=counters)
    return convert_layout(cur, Layout.NHWC)


def dense_weights_of(layer: ConvLayer) -> np.ndarray:
    w = layer.weights
    return decompress(w) if isinstance(w, SparseWeight) else w


def max_rel_err(out: Tensor | np.ndarray, ref: Tensor | np.ndarray) -> float:
    """Largest per-element |out - ref| / |ref|; exact zeros agree at 0.0."""
    a = (out.data if isinstance(out, Tensor) else np.asarray(out)).astype(np.float64).ravel()
    r = (ref.data if isinstance(ref, Tensor) else np.asarray(ref)).astype(np.float64).ravel()
    if a.size != r.size:
        raise ShapeError(f"size mismatch {a.size} != {r.size}")
    err = np.abs(a - r)
    denom = np.abs(r)
    rel = np.where(denom > 0, err / np.where(denom > 0, denom, 1.0),
                   np.where(err > 0, np.inf, 0.0))
    return float(rel.max(initial=0.0))


def full_keep(weights: np.ndarray, tile_t: int) -> SparseWeight:
    """Compress a dense matrix with an all-keep mask (n == m == K)."""
    weights = np.asarray(weights, dtype=np.float32)
    mask = np.ones(weights.shape, dtype=bool)
    return compress(weights, mask, tile_t, n=weights.shape[1], m=weights.shape[1])
