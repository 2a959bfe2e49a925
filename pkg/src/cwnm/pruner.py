"""N:M magnitude pruning and the compressed column-block weight format.

Two mask flavors over a row-major weight matrix (rows = output channels,
cols = reduction length K):

* row-wise: within each row, each group of ``m`` consecutive weights keeps
  the ``n`` largest magnitudes.
* column-wise: rows are split into tiles of ``tile_t`` rows; within a tile,
  each group of ``m`` consecutive *columns* keeps the ``n`` column segments
  with the largest L1 norm, and a kept column keeps all of its tile values.

Ties always resolve toward the lower column index so masks are reproducible.
A trailing group of width ``g < m`` keeps ``min(n, ceil(n*g/m))`` columns,
which preserves the target ratio on ragged K and never drops a group
entirely.  The same rule applies to both flavors, so a column-wise mask at
``tile_t == 1`` equals the row-wise mask on every input.

Surviving weights are compressed per row-tile into a dense block of kept
columns (``tile_t`` values per column) plus an ascending column-index array.

Sparse weight file format, little-endian::

    magic "CWSW" | version u32=1 | rows u32 | cols u32 | tile_t u32 |
    n u32 | m u32 | per tile: kept u32, kept x u32 indices,
    kept x tile_t x f32 value block
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

SPARSE_MAGIC = b"CWSW"
SPARSE_VERSION = 1

_SW_HEADER = struct.Struct("<4sI5I")


class PruneError(ValueError):
    pass


class SparseFormatError(ValueError):
    pass


class PruneMode(Enum):
    ROW_WISE = "row"
    COLUMN_WISE = "column"


@dataclass(frozen=True)
class PruneSpec:
    n: int
    m: int
    tile_t: int = 1
    mode: PruneMode = PruneMode.COLUMN_WISE
    sparsity_ratio: float | None = None

    def __post_init__(self):
        if not 1 <= self.n <= self.m:
            raise PruneError(f"need 1 <= n <= m, got n={self.n} m={self.m}")
        if self.tile_t < 1:
            raise PruneError(f"tile_t must be >= 1, got {self.tile_t}")
        if self.mode is PruneMode.ROW_WISE and self.tile_t != 1:
            raise PruneError("row-wise pruning uses tile_t == 1")
        if self.sparsity_ratio is None:
            object.__setattr__(self, "sparsity_ratio", 1.0 - self.n / self.m)

    @classmethod
    def from_ratio(cls, sparsity_ratio: float, m: int,
                   tile_t: int = 1, mode: PruneMode = PruneMode.COLUMN_WISE) -> "PruneSpec":
        """Build a spec with n = round((1 - sparsity_ratio) * m)."""
        if not 0.0 <= sparsity_ratio < 1.0:
            raise PruneError(f"sparsity_ratio must be in [0, 1), got {sparsity_ratio}")
        n = round((1.0 - sparsity_ratio) * m)
        if n < 1:
            raise PruneError(
                f"sparsity {sparsity_ratio} with m={m} rounds to n=0; use a larger m"
            )
        return cls(n=n, m=m, tile_t=tile_t, mode=mode, sparsity_ratio=sparsity_ratio)


@dataclass
class SparseWeight:
    """Tile-compressed column-wise sparse weight matrix."""

    rows: int
    cols: int
    tile_t: int
    n: int
    m: int
    col_index: list[np.ndarray] = field(repr=False)  # per tile, ascending u32
    values: list[np.ndarray] = field(repr=False)     # per tile, (kept, tile_t) f32

    def __post_init__(self):
        if len(self.col_index) != self.num_tiles or len(self.values) != self.num_tiles:
            raise PruneError("per-tile arrays do not match the tile count")
        for idx, vals in zip(self.col_index, self.values):
            if idx.ndim != 1 or vals.shape != (idx.size, self.tile_t):
                raise PruneError("tile value block shape mismatch")
            if idx.size and (np.any(np.diff(idx.astype(np.int64)) <= 0)
                             or idx[0] < 0 or idx[-1] >= self.cols):
                raise PruneError("tile column indices must be strictly increasing and < cols")

    @property
    def num_tiles(self) -> int:
        return -(-self.rows // self.tile_t)

    @property
    def kept_total(self) -> int:
        return sum(int(idx.size) for idx in self.col_index)

    def column_sparsity(self) -> float:
        return 1.0 - self.kept_total / (self.num_tiles * self.cols)


def _kept_for_group(n: int, m: int, width: int) -> int:
    if width == m:
        return n
    return min(n, -(-n * width // m))


def apply_mask(w: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return np.where(mask, np.asarray(w, dtype=np.float32), np.float32(0.0))


def _as_matrix(w) -> np.ndarray:
    w = np.asarray(w, dtype=np.float32)
    if w.ndim != 2:
        raise PruneError(f"weights must be a 2-D matrix, got shape {w.shape}")
    return w


def _topk_keep(scores: np.ndarray, k: int) -> np.ndarray:
    # stable argsort on -scores keeps the lower index on ties
    order = np.argsort(-scores, kind="stable")
    return order[:k]


def select_mask_rowwise(w, n: int, m: int) -> np.ndarray:
    """Keep the ``n`` largest |w| per group of ``m`` consecutive row elements."""
    w = _as_matrix(w)
    if not 1 <= n <= m:
        raise PruneError(f"need 1 <= n <= m, got n={n} m={m}")
    rows, cols = w.shape
    mask = np.zeros((rows, cols), dtype=bool)
    mag = np.abs(w)
    for g0 in range(0, cols, m):
        g1 = min(g0 + m, cols)
        k = _kept_for_group(n, m, g1 - g0)
        for r in range(rows):
            keep = _topk_keep(mag[r, g0:g1], k)
            mask[r, g0 + keep] = True
    return mask


def select_mask_columnwise(w, n: int, m: int, tile_t: int) -> np.ndarray:
    """Keep the ``n`` largest-L1 column segments per group of ``m`` columns.

    L1 norms are taken over the tile's existing rows only; a trailing tile
    shorter than ``tile_t`` is scored on the rows it actually has.
    """
    w = _as_matrix(w)
    if not 1 <= n <= m:
        raise PruneError(f"need 1 <= n <= m, got n={n} m={m}")
    if tile_t < 1:
        raise PruneError(f"tile_t must be >= 1, got {tile_t}")
    rows, cols = w.shape
    mask = np.zeros((rows, cols), dtype=bool)
    mag = np.abs(w)
    for r0 in range(0, rows, tile_t):
        r1 = min(r0 + tile_t, rows)
        l1 = mag[r0:r1].sum(axis=0)
        for g0 in range(0, cols, m):
            g1 = min(g0 + m, cols)
            k = _kept_for_group(n, m, g1 - g0)
            keep = _topk_keep(l1[g0:g1], k)
            mask[r0:r1, g0 + keep] = True
    return mask


def select_mask(w, spec: PruneSpec) -> np.ndarray:
    if spec.mode is PruneMode.ROW_WISE:
        return select_mask_rowwise(w, spec.n, spec.m)
    return select_mask_columnwise(w, spec.n, spec.m, spec.tile_t)


def compress(w, mask: np.ndarray, tile_t: int, n: int, m: int) -> SparseWeight:
    """Pack the kept columns of a column-wise-consistent mask.

    Within every row-tile each column must be entirely kept or entirely
    pruned.  Trailing tiles shorter than ``tile_t`` are zero-padded so every
    value block is uniformly ``tile_t`` tall.
    """
    w = _as_matrix(w)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != w.shape:
        raise PruneError(f"mask shape {mask.shape} != weight shape {w.shape}")
    rows, cols = w.shape
    col_index: list[np.ndarray] = []
    values: list[np.ndarray] = []
    for r0 in range(0, rows, tile_t):
        r1 = min(r0 + tile_t, rows)
        tile_mask = mask[r0:r1]
        consistent = np.all(tile_mask == tile_mask[0:1], axis=0)
        if not consistent.all():
            bad = int(np.flatnonzero(~consistent)[0])
            raise PruneError(
                f"mask is not column-wise consistent in tile rows {r0}:{r1} (column {bad})"
            )
        idx = np.flatnonzero(tile_mask[0]).astype(np.uint32)
        block = np.zeros((idx.size, tile_t), dtype=np.float32)
        block[:, : r1 - r0] = w[r0:r1, idx].T
        col_index.append(idx)
        values.append(block)
    return SparseWeight(rows=rows, cols=cols, tile_t=tile_t, n=n, m=m,
                        col_index=col_index, values=values)


def decompress(sw: SparseWeight) -> np.ndarray:
    """Expand back to a dense rows x cols matrix with zeros at pruned spots."""
    out = np.zeros((sw.rows, sw.cols), dtype=np.float32)
    for ti, (idx, block) in enumerate(zip(sw.col_index, sw.values)):
        r0 = ti * sw.tile_t
        r1 = min(r0 + sw.tile_t, sw.rows)
        out[r0:r1, idx] = block[:, : r1 - r0].T
    return out


def prune(w, spec: PruneSpec) -> SparseWeight:
    """Select a mask per ``spec`` and compress in one step."""
    mask = select_mask(w, spec)
    return compress(w, mask, spec.tile_t, spec.n, spec.m)


def group_kept_counts(mask: np.ndarray, m: int, tile_t: int) -> dict[int, int]:
    """Histogram of kept-column counts per (tile, group), for reporting."""
    mask = np.asarray(mask, dtype=bool)
    rows, cols = mask.shape
    counts: dict[int, int] = {}
    for r0 in range(0, rows, tile_t):
        r1 = min(r0 + tile_t, rows)
        kept_cols = mask[r0:r1].any(axis=0)
        for g0 in range(0, cols, m):
            k = int(kept_cols[g0:min(g0 + m, cols)].sum())
            counts[k] = counts.get(k, 0) + 1
    return counts


def write_sparse(sw: SparseWeight, path) -> None:
    parts = [_SW_HEADER.pack(SPARSE_MAGIC, SPARSE_VERSION,
                             sw.rows, sw.cols, sw.tile_t, sw.n, sw.m)]
    for idx, block in zip(sw.col_index, sw.values):
        parts.append(struct.pack("<I", idx.size))
        parts.append(idx.astype("<u4", copy=False).tobytes())
        parts.append(block.astype("<f4", copy=False).tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_sparse(path) -> SparseWeight:
    raw = Path(path).read_bytes()
    if len(raw) < _SW_HEADER.size:
        raise SparseFormatError(f"{path}: truncated header")
    magic, version, rows, cols, tile_t, n, m = _SW_HEADER.unpack_from(raw)
    if magic != SPARSE_MAGIC:
        raise SparseFormatError(f"{path}: bad magic {magic!r}, expected {SPARSE_MAGIC!r}")
    if version != SPARSE_VERSION:
        raise SparseFormatError(f"{path}: unsupported version {version}")
    if rows < 1 or cols < 1 or tile_t < 1:
        raise SparseFormatError(f"{path}: bad dimensions rows={rows} cols={cols} tile_t={tile_t}")
    off = _SW_HEADER.size
    num_tiles = -(-rows // tile_t)
    col_index: list[np.ndarray] = []
    values: list[np.ndarray] = []
    for _ in range(num_tiles):
        if len(raw) < off + 4:
            raise SparseFormatError(f"{path}: truncated tile header")
        (kept,) = struct.unpack_from("<I", raw, off)
        off += 4
        need = 4 * kept + 4 * kept * tile_t
        if len(raw) < off + need:
            raise SparseFormatError(f"{path}: truncated tile payload")
        idx = np.frombuffer(raw, dtype="<u4", count=kept, offset=off).astype(np.uint32)
        off += 4 * kept
        block = np.frombuffer(raw, dtype="<f4", count=kept * tile_t, offset=off)
        block = block.astype(np.float32).reshape(kept, tile_t)
        off += 4 * kept * tile_t
        col_index.append(idx)
        values.append(block)
    if off != len(raw):
        raise SparseFormatError(f"{path}: {len(raw) - off} trailing bytes")
    try:
        return SparseWeight(rows=rows, cols=cols, tile_t=tile_t, n=n, m=m,
                            col_index=col_index, values=values)
    except PruneError as e:
        raise SparseFormatError(f"{path}: {e}") from None
