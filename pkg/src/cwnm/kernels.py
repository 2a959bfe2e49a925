"""Sparse GEMM micro-kernels over a software model of RVV vector execution.

The vector model: ``vlen_bits``-wide registers, grouped by ``lmul`` into
logical registers of ``vl_f32 = vlen_bits/32 * lmul`` f32 lanes, out of 32
architectural registers.  Kernels execute as vl-wide numpy operations: plain
IEEE f32 arithmetic, deterministic for fixed inputs and shapes.

Four schedules compute the same t x vl output tile from a weight tile and a
packed data strip, differing only in memory behavior, which the
``TrafficCounters`` make countable (logical element accesses, not cache
lines):

* ``DENSE``        every column visited, data row loaded once per tile.
* ``COLUMN_WISE``  kept columns shared by all tile rows; one data-row load
  per kept column, t register accumulators, one final store.
* ``INNER_NM``     row-at-a-time over per-row kept columns; data rows are
  re-loaded for every row, so data traffic is t times the column-wise cost.
* ``OUTER_NM``     column-at-a-time over an irregular (row-wise) mask; a
  fully-kept column accumulates in registers, a partial column scatters each
  product through memory (one output-row load + store per surviving weight).

Per-strip kernels (``microkernel_*``) implement the contracts one strip at a
time with the schedule's exact accumulation order; the ``*_pass`` variants
run all strips of a packed matrix batched into one array axis.  The regular
schedules batch their tile update into one vectorized multiply-accumulate
(f32 reassociation only; equivalence is tolerance-checked), while the
irregular schedules keep element-wise execution and match their per-strip
kernels bitwise.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

REGISTER_COUNT = 32
LMUL_VALUES = (1, 2, 4, 8)


class ConfigError(ValueError):
    pass


class KernelShapeError(ValueError):
    pass


class KernelKind(Enum):
    DENSE = "dense"
    INNER_NM = "inner_nm"
    OUTER_NM = "outer_nm"
    COLUMN_WISE = "columnwise"


@dataclass(frozen=True)
class VectorEnv:
    vlen_bits: int = 256
    lmul: int = 1

    def __post_init__(self):
        if self.vlen_bits < 32 or self.vlen_bits % 32:
            raise ConfigError(f"vlen_bits must be a positive multiple of 32, got {self.vlen_bits}")
        if self.lmul not in LMUL_VALUES:
            raise ConfigError(f"lmul must be one of {LMUL_VALUES}, got {self.lmul}")

    @property
    def vl_f32(self) -> int:
        return (self.vlen_bits // 32) * self.lmul

    @property
    def logical_regs(self) -> int:
        return REGISTER_COUNT // self.lmul


@dataclass(frozen=True)
class KernelConfig:
    kind: KernelKind
    t: int
    env: VectorEnv = VectorEnv()

    def __post_init__(self):
        if self.t < 1:
            raise ConfigError(f"tile height t must be >= 1, got {self.t}")
        if self.kind is KernelKind.COLUMN_WISE:
            # t accumulators plus one data register, each lmul regs wide
            if (self.t + 1) * self.env.lmul > REGISTER_COUNT:
                raise ConfigError(
                    f"column-wise config needs (t+1)*lmul <= {REGISTER_COUNT}, "
                    f"got t={self.t} lmul={self.env.lmul}"
                )


@dataclass
class TrafficCounters:
    data_elem_loads: int = 0
    weight_elem_loads: int = 0
    output_elem_loads: int = 0
    output_elem_stores: int = 0

    def merge(self, other: "TrafficCounters") -> None:
        self.data_elem_loads += other.data_elem_loads
        self.weight_elem_loads += other.weight_elem_loads
        self.output_elem_loads += other.output_elem_loads
        self.output_elem_stores += other.output_elem_stores

    def as_dict(self) -> dict:
        return {
            "data_elem_loads": self.data_elem_loads,
            "weight_elem_loads": self.weight_elem_loads,
            "output_elem_loads": self.output_elem_loads,
            "output_elem_stores": self.output_elem_stores,
        }


def _check_strip(strip: np.ndarray, cfg: KernelConfig):
    if strip.ndim != 2 or strip.shape[1] != cfg.env.vl_f32:
        raise KernelShapeError(
            f"strip shape {strip.shape} does not match vl={cfg.env.vl_f32}"
        )


def _check_acc(acc: np.ndarray, cfg: KernelConfig):
    if acc.shape != (cfg.t, cfg.env.vl_f32) or acc.dtype != np.float32:
        raise KernelShapeError(
            f"acc must be f32 ({cfg.t}, {cfg.env.vl_f32}), got {acc.dtype} {acc.shape}"
        )


# ---------------------------------------------------------------------------
# per-strip micro-kernels


def microkernel_columnwise(values: np.ndarray, col_index: np.ndarray,
                           strip: np.ndarray, cfg: KernelConfig,
                           acc: np.ndarray) -> TrafficCounters:
    """acc[i,l] += sum_j values[j,i] * strip[col_index[j], l].

    Columns outer, tile rows inner; the caller owns ``acc`` (zeroed for a
    fresh tile), so partial sums never touch memory until the single store
    at the end.
    """
    _check_strip(strip, cfg)
    _check_acc(acc, cfg)
    kept = int(col_index.shape[0])
    if values.shape != (kept, cfg.t):
        raise KernelShapeError(f"value block {values.shape} != ({kept}, {cfg.t})")
    vl = cfg.env.vl_f32
    for j in range(kept):
        row = strip[int(col_index[j])]
        acc += values[j][:, None] * row[None, :]
    return TrafficCounters(
        data_elem_loads=kept * vl,
        weight_elem_loads=kept * cfg.t,
        output_elem_stores=cfg.t * vl,
    )


def microkernel_inner_nm(row_cols: list, strip: np.ndarray, cfg: KernelConfig,
                         acc: np.ndarray) -> TrafficCounters:
    """Row-at-a-time schedule: ``row_cols[i]`` is the (indices, values) pair
    of row i's kept columns.  Every data row is re-fetched per weight row."""
    _check_strip(strip, cfg)
    _check_acc(acc, cfg)
    if len(row_cols) != cfg.t:
        raise KernelShapeError(f"need {cfg.t} row entries, got {len(row_cols)}")
    vl = cfg.env.vl_f32
    data = weights = 0
    for i, (idx, vals) in enumerate(row_cols):
        arow = acc[i]
        for k in range(idx.shape[0]):
            arow += vals[k] * strip[int(idx[k])]
        data += int(idx.shape[0]) * vl
        weights += int(idx.shape[0])
    return TrafficCounters(
        data_elem_loads=data,
        weight_elem_loads=weights,
        output_elem_stores=cfg.t * vl,
    )


def microkernel_outer_nm(col_entries: list, strip: np.ndarray, cfg: KernelConfig,
                         acc: np.ndarray) -> TrafficCounters:
    """Column-at-a-time schedule over an irregular mask.

    ``col_entries`` holds (column, row_indices, values) per surviving column.
    Data rows are loaded once per column and reused, but any column whose row
    set is not the full tile scatters its products: each one costs an output
    row load plus store.  A fully-kept column accumulates in registers, so on
    a column-wise mask this kernel degenerates to the column-wise traffic.
    """
    _check_strip(strip, cfg)
    _check_acc(acc, cfg)
    vl = cfg.env.vl_f32
    reg = np.zeros_like(acc)
    data = weights = out_loads = out_stores = 0
    for col, rows_j, vals_j in col_entries:
        drow = strip[int(col)]
        data += vl
        weights += int(len(rows_j))
        if len(rows_j) == cfg.t:
            reg += vals_j[:, None] * drow[None, :]
        else:
            for pos in range(len(rows_j)):
                acc[int(rows_j[pos])] += vals_j[pos] * drow
                out_loads += vl
                out_stores += vl
    acc += reg
    out_stores += cfg.t * vl
    return TrafficCounters(
        data_elem_loads=data,
        weight_elem_loads=weights,
        output_elem_loads=out_loads,
        output_elem_stores=out_stores,
    )


def microkernel_dense(w_tile: np.ndarray, strip: np.ndarray, cfg: KernelConfig,
                      acc: np.ndarray) -> TrafficCounters:
    """Reference tiled GEMM over every column of a dense t x K weight tile."""
    _check_strip(strip, cfg)
    _check_acc(acc, cfg)
    if w_tile.shape != (cfg.t, strip.shape[0]):
        raise KernelShapeError(
            f"weight tile {w_tile.shape} != ({cfg.t}, {strip.shape[0]})"
        )
    vl = cfg.env.vl_f32
    k_len = strip.shape[0]
    for k in range(k_len):
        acc += w_tile[:, k][:, None] * strip[k][None, :]
    return TrafficCounters(
        data_elem_loads=k_len * vl,
        weight_elem_loads=cfg.t * k_len,
        output_elem_stores=cfg.t * vl,
    )


# ---------------------------------------------------------------------------
# all-strip passes: same operands as looping the per-strip kernels, with the
# strip axis folded into the arrays.
#
# The column-wise (and dense) schedules share one kept-column list across the
# whole tile, which is what permits a single bulk gather and one vectorized
# multiply-accumulate over the tile; its reduction order is the f32 matmul's
# (deterministic, but not the per-column chain), so batched and per-strip
# results agree to f32 reassociation tolerance rather than bitwise.  The
# irregular schedules get no such batching: the inner-product kernel consumes
# its indices row by row and the outer-product kernel scatters partial sums
# element by element, so those paths execute their loads and updates one at
# a time, exactly as modeled (and bitwise-equal to their per-strip kernels).


def columnwise_pass(values, col_index, strips, cfg, acc) -> TrafficCounters:
    kept = int(col_index.shape[0])
    vl = cfg.env.vl_f32
    num_strips = strips.shape[0]
    if kept:
        sub = strips[:, col_index, :]  # (S, kept, vl) gather, one per tile
        acc += np.matmul(values.T[None, :, :], sub)
    return TrafficCounters(
        data_elem_loads=kept * vl * num_strips,
        weight_elem_loads=kept * cfg.t * num_strips,
        output_elem_stores=cfg.t * vl * num_strips,
    )


def inner_pass(row_cols, strips, cfg, acc) -> TrafficCounters:
    vl = cfg.env.vl_f32
    num_strips = strips.shape[0]
    tmp = np.empty((num_strips, vl), dtype=np.float32)
    data = weights = 0
    for i, (idx, vals) in enumerate(row_cols):
        arow = acc[:, i, :]
        for k in range(idx.shape[0]):
            # indexed re-load per surviving weight: the schedule's cost
            np.multiply(vals[k], strips[:, int(idx[k]), :], out=tmp)
            np.add(arow, tmp, out=arow)
        data += int(idx.shape[0]) * vl * num_strips
        weights += int(idx.shape[0]) * num_strips
    return TrafficCounters(
        data_elem_loads=data,
        weight_elem_loads=weights,
        output_elem_stores=cfg.t * vl * num_strips,
    )


def outer_pass(col_entries, strips, cfg, acc) -> TrafficCounters:
    vl = cfg.env.vl_f32
    num_strips = strips.shape[0]
    reg = np.zeros_like(acc)
    tmp = np.empty((num_strips, vl), dtype=np.float32)
    data = weights = out_loads = out_stores = 0
    full_cols: list[int] = []
    full_vals: list[np.ndarray] = []
    for col, rows_j, vals_j in col_entries:
        data += vl * num_strips
        weights += int(len(rows_j)) * num_strips
        if len(rows_j) == cfg.t:
            # register-resident path; applied after the scatter loop below,
            # which is sound because the two paths touch disjoint buffers
            full_cols.append(int(col))
            full_vals.append(vals_j)
        else:
            drow = strips[:, int(col), :]
            for pos in range(len(rows_j)):
                arow = acc[:, int(rows_j[pos]), :]
                np.multiply(vals_j[pos], drow, out=tmp)
                np.add(arow, tmp, out=arow)
                out_loads += vl * num_strips
                out_stores += vl * num_strips
    if full_cols:
        sub = strips[:, np.asarray(full_cols), :]
        reg += np.matmul(np.stack(full_vals).T[None, :, :], sub)
    np.add(acc, reg, out=acc)
    out_stores += cfg.t * vl * num_strips
    return TrafficCounters(
        data_elem_loads=data,
        weight_elem_loads=weights,
        output_elem_loads=out_loads,
        output_elem_stores=out_stores,
    )


def dense_pass(w_tile, strips, cfg, acc) -> TrafficCounters:
    vl = cfg.env.vl_f32
    num_strips, k_len = strips.shape[0], strips.shape[1]
    acc += np.matmul(w_tile[None, :, :], strips)
    return TrafficCounters(
        data_elem_loads=k_len * vl * num_strips,
        weight_elem_loads=cfg.t * k_len * num_strips,
        output_elem_stores=cfg.t * vl * num_strips,
    )


# ---------------------------------------------------------------------------
# tile adapters


def rows_from_block(values: np.ndarray, col_index: np.ndarray, t: int) -> list:
    """Per-row view of a column-block tile: every row shares the kept set."""
    return [(col_index, values[:, i]) for i in range(t)]


def rows_from_mask(w_tile: np.ndarray, mask_tile: np.ndarray) -> list:
    return [(np.flatnonzero(mask_tile[i]), w_tile[i, mask_tile[i]])
            for i in range(w_tile.shape[0])]


def cols_from_block(values: np.ndarray, col_index: np.ndarray, t: int) -> list:
    all_rows = np.arange(t)
    return [(int(col_index[j]), all_rows, values[j]) for j in range(col_index.shape[0])]


def cols_from_mask(w_tile: np.ndarray, mask_tile: np.ndarray) -> list:
    entries = []
    for col in np.flatnonzero(mask_tile.any(axis=0)):
        rows_j = np.flatnonzero(mask_tile[:, col])
        entries.append((int(col), rows_j, w_tile[rows_j, col]))
    return entries
