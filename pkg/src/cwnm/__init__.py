"""Column-wise N:M sparse GEMM convolution with fused im2col/packing and a
VL/LMUL-aware kernel auto-tuner."""

from .conv import (ConvLayer, ShapeError, conv_forward, conv_forward_reference,
                   full_keep, max_rel_err, run_model, sparse_gemm)
from .kernels import (KernelConfig, KernelKind, TrafficCounters, VectorEnv,
                      microkernel_columnwise, microkernel_dense,
                      microkernel_inner_nm, microkernel_outer_nm)
from .packer import (ConvGeometry, PackedMatrix, PackStats, auto_copy_vl,
                     fused_im2col_pack, im2col, pack, unpack)
from .pruner import (PruneMode, PruneSpec, SparseWeight, apply_mask, compress,
                     decompress, prune, read_sparse, select_mask,
                     select_mask_columnwise, select_mask_rowwise, write_sparse)
from .tensor import (Layout, Tensor, convert_layout, read_tensor, write_tensor)
from .tuner import (TuneCandidate, TuneReport, cache_get, cache_put,
                    enumerate_candidates, shape_key, tune_layer)

__version__ = "0.1.0"
