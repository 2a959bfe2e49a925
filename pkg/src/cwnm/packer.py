"""GEMM data-matrix construction from CNHW feature maps.

``im2col`` lowers a convolution input to the 2-D data matrix: row ``r``
encodes the weight tap ``(c, kh_off, kw_off)`` with ``kw_off`` fastest,
column ``col`` encodes the output position ``(n, oh, ow)`` with ``ow``
fastest.  ``pack`` reorganizes a matrix into vector-aligned strips of ``vl``
consecutive logical columns, stored row-major over (row, lane), final strip
zero-padded.

``fused_im2col_pack`` produces the packed strips in one pass straight from
the feature maps.  Because W is innermost in CNHW, the source taps of one
output row form contiguous runs (for unit horizontal stride), which are
copied in vector-length chunks; the final chunk shrinks to the remaining
element count instead of reading past the row.  Padding positions are never
read: the strip buffer starts zeroed and run offsets skip padded regions.
The result is bit-identical to ``pack(im2col(src, g), vl)``.

With ``PackStats`` attached, every function counts the source elements it
reads, which is how the single-pass saving over the two-step pipeline is
measured (the two-step pipeline re-reads the whole intermediate matrix).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Layout, Tensor

COPY_CHUNK_CHOICES = (8, 16, 32, 64)  # 8*lmul f32 lanes at vlen=256


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class ConvGeometry:
    batch: int
    cin: int
    in_h: int
    in_w: int
    kh: int
    kw: int
    sh: int = 1
    sw: int = 1
    ph: int = 0
    pw: int = 0

    def __post_init__(self):
        for name in ("batch", "cin", "in_h", "in_w", "kh", "kw", "sh", "sw"):
            if getattr(self, name) < 1:
                raise GeometryError(f"{name} must be >= 1")
        if self.ph < 0 or self.pw < 0:
            raise GeometryError("padding must be >= 0")
        if self.out_h < 1 or self.out_w < 1:
            raise GeometryError(
                f"empty output: in {self.in_h}x{self.in_w}, kernel {self.kh}x{self.kw}, "
                f"stride {self.sh}x{self.sw}, pad {self.ph}x{self.pw}"
            )

    @property
    def out_h(self) -> int:
        return (self.in_h + 2 * self.ph - self.kh) // self.sh + 1

    @property
    def out_w(self) -> int:
        return (self.in_w + 2 * self.pw - self.kw) // self.sw + 1

    @property
    def k_rows(self) -> int:
        return self.cin * self.kh * self.kw

    @property
    def out_cols(self) -> int:
        return self.batch * self.out_h * self.out_w


@dataclass(frozen=True)
class PackedMatrix:
    rows: int
    logical_cols: int
    vl: int
    strips: np.ndarray  # (num_strips, rows, vl) f32

    @property
    def num_strips(self) -> int:
        return self.strips.shape[0]


@dataclass
class PackStats:
    src_reads: int = 0      # feature-map / matrix elements actually read
    matrix_reads: int = 0   # intermediate-matrix elements read by pack()
    runs: list = field(default_factory=list)

    @property
    def total_reads(self) -> int:
        return self.src_reads + self.matrix_reads


def _check_src(src: Tensor, g: ConvGeometry) -> np.ndarray:
    if src.layout is not Layout.CNHW:
        raise GeometryError(f"input must be CNHW, got {src.layout.name}")
    n, c, h, w = src.dims
    if (n, c, h, w) != (g.batch, g.cin, g.in_h, g.in_w):
        raise GeometryError(f"input dims {src.dims} do not match geometry "
                            f"({g.batch}, {g.cin}, {g.in_h}, {g.in_w})")
    return src.cnhw()


def _valid_out_range(pad: int, off: int, stride: int, in_extent: int, out_extent: int):
    """Output positions whose source tap ``o*stride + off - pad`` is in bounds."""
    lo = max(0, -(-(pad - off) // stride))
    top = in_extent - 1 + pad - off
    hi = min(out_extent, top // stride + 1) if top >= 0 else 0
    return lo, max(lo, hi)


def im2col(src: Tensor, g: ConvGeometry, stats: PackStats | None = None) -> np.ndarray:
    """Materialize the k_rows x out_cols patch matrix (padding taps are 0.0)."""
    x = _check_src(src, g)
    mat = np.zeros((g.k_rows, g.out_cols), dtype=np.float32)
    mat4 = mat.reshape(g.cin, g.kh, g.kw, g.out_cols)
    xp = np.pad(x, ((0, 0), (0, 0), (g.ph, g.ph), (g.pw, g.pw)))
    for kh_off in range(g.kh):
        for kw_off in range(g.kw):
            win = xp[:, :,
                     kh_off: kh_off + g.sh * g.out_h: g.sh,
                     kw_off: kw_off + g.sw * g.out_w: g.sw]
            mat4[:, kh_off, kw_off, :] = win.reshape(g.cin, g.out_cols)
            if stats is not None:
                oh0, oh1 = _valid_out_range(g.ph, kh_off, g.sh, g.in_h, g.out_h)
                ow0, ow1 = _valid_out_range(g.pw, kw_off, g.sw, g.in_w, g.out_w)
                stats.src_reads += g.cin * g.batch * (oh1 - oh0) * (ow1 - ow0)
    return mat


def pack(m: np.ndarray, vl: int, stats: PackStats | None = None) -> PackedMatrix:
    """Split a matrix into vl-wide strips; the final strip is zero-padded."""
    m = np.asarray(m, dtype=np.float32)
    if m.ndim != 2:
        raise GeometryError(f"pack expects a 2-D matrix, got shape {m.shape}")
    if vl < 1:
        raise GeometryError(f"vl must be >= 1, got {vl}")
    rows, cols = m.shape
    num_strips = -(-cols // vl)
    strips = np.zeros((num_strips, rows, vl), dtype=np.float32)
    for s in range(num_strips):
        c0 = s * vl
        live = min(vl, cols - c0)
        strips[s, :, :live] = m[:, c0:c0 + live]
    if stats is not None:
        stats.matrix_reads += rows * cols
    return PackedMatrix(rows=rows, logical_cols=cols, vl=vl, strips=strips)


def unpack(pm: PackedMatrix) -> np.ndarray:
    wide = pm.strips.transpose(1, 0, 2).reshape(pm.rows, pm.num_strips * pm.vl)
    return np.ascontiguousarray(wide[:, : pm.logical_cols])


def auto_copy_vl(in_w: int) -> int:
    """Copy-chunk length closest to the feature-map width (ties go wider)."""
    return min(COPY_CHUNK_CHOICES, key=lambda c: (abs(c - in_w), -c))


def fused_im2col_pack(src: Tensor, g: ConvGeometry, vl: int,
                      copy_vl: int | str | None = None,
                      stats: PackStats | None = None) -> PackedMatrix:
    """Build the packed strips directly from the CNHW feature maps.

    ``copy_vl`` sets the chunk length for the W-direction copy runs: ``None``
    uses ``vl``, ``"auto"`` picks the choice closest to ``in_w``, any int >= 1
    is used as-is.  Chunking only changes how runs are split, never the strip
    contents.
    """
    x = _check_src(src, g)
    if vl < 1:
        raise GeometryError(f"vl must be >= 1, got {vl}")
    if copy_vl is None:
        chunk = vl
    elif copy_vl == "auto":
        chunk = auto_copy_vl(g.in_w)
    else:
        chunk = int(copy_vl)
        if chunk < 1:
            raise GeometryError(f"copy_vl must be >= 1, got {copy_vl}")

    cols = g.out_cols
    num_strips = -(-cols // vl)
    strips = np.zeros((num_strips, g.k_rows, vl), dtype=np.float32)

    if stats is not None:
        _fused_counted(x, g, vl, chunk, strips, stats)
    else:
        _fused_fast(x, g, vl, chunk, strips)
    return PackedMatrix(rows=g.k_rows, logical_cols=cols, vl=vl, strips=strips)


def _fused_counted(x, g: ConvGeometry, vl: int, chunk: int, strips, stats: PackStats):
    """Reference walk: one copy run at a time, per data-matrix row, recording
    every run length and source-element read."""
    for r in range(g.k_rows):
        c, rem = divmod(r, g.kh * g.kw)
        kh_off, kw_off = divmod(rem, g.kw)
        ow0, ow1 = _valid_out_range(g.pw, kw_off, g.sw, g.in_w, g.out_w)
        if ow1 <= ow0:
            continue
        for n in range(g.batch):
            for oh in range(g.out_h):
                h = oh * g.sh + kh_off - g.ph
                if h < 0 or h >= g.in_h:
                    continue  # vertical padding row: stays zero, nothing read
                plane = x[c, n, h]
                col_base = (n * g.out_h + oh) * g.out_w
                ow = ow0
                while ow < ow1:
                    run = min(chunk, ow1 - ow)
                    w0 = ow * g.sw + kw_off - g.pw
                    if g.sw == 1:
                        vals = plane[w0: w0 + run]
                    else:
                        vals = plane[w0: w0 + (run - 1) * g.sw + 1: g.sw]
                    stats.src_reads += run
                    stats.runs.append(run)
                    # scatter the run into strips, splitting at strip edges
                    col = col_base + ow
                    off = 0
                    while off < run:
                        s, lane = divmod(col + off, vl)
                        take = min(run - off, vl - lane)
                        strips[s, r, lane: lane + take] = vals[off: off + take]
                        off += take
                    ow += run


def _fused_fast(x, g: ConvGeometry, vl: int, chunk: int, strips):
    """Same writes as the counted walk, batched over the channel axis: rows
    sharing a (kh_off, kw_off) tap sit at a fixed stride in the data matrix,
    so one assignment moves the run for every channel."""
    khkw = g.kh * g.kw
    for kh_off in range(g.kh):
        for kw_off in range(g.kw):
            r0 = kh_off * g.kw + kw_off
            rows = slice(r0, r0 + (g.cin - 1) * khkw + 1, khkw)
            ow0, ow1 = _valid_out_range(g.pw, kw_off, g.sw, g.in_w, g.out_w)
            if ow1 <= ow0:
                continue
            for n in range(g.batch):
                for oh in range(g.out_h):
                    h = oh * g.sh + kh_off - g.ph
                    if h < 0 or h >= g.in_h:
                        continue
                    col_base = (n * g.out_h + oh) * g.out_w
                    ow = ow0
                    while ow < ow1:
                        run = min(chunk, ow1 - ow)
                        w0 = ow * g.sw + kw_off - g.pw
                        if g.sw == 1:
                            vals = x[:, n, h, w0: w0 + run]
                        else:
                            vals = x[:, n, h, w0: w0 + (run - 1) * g.sw + 1: g.sw]
                        col = col_base + ow
                        off = 0
                        while off < run:
                            s, lane = divmod(col + off, vl)
                            take = min(run - off, vl - lane)
                            strips[s, rows, lane: lane + take] = vals[:, off: off + take]
                            off += take
                        ow += run
