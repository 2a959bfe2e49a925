"""Per-layer kernel auto-tuning: enumerate, verify, time, cache.

Candidates are the cross product of tile heights and LMUL values that fit the
register budget ((t+1)*lmul <= 32, so t <= 31 even at lmul=1) and the layer's
row count.  Each candidate is verified against a float64 matmul oracle before
it is timed; a mis-computing candidate is disqualified rather than ranked.
Timing is median-of-repeats on a single thread, covering the fused packing
pass plus the full GEMM, with identical sample inputs for every candidate.

Sparse layers couple the pruning tile to the kernel tile, so each candidate
re-prunes the sample weights at its own tile height from the same dense
source; the verification oracle uses that candidate's own masked weights.

Winners are cached as JSON lines keyed by layer shape.  A cache record
carries an environment fingerprint; a lookup from a different environment
warns and misses instead of silently reusing a stale decision.
"""

from __future__ import annotations

import json
import os
import platform
import statistics
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from .conv import sparse_gemm
from .kernels import LMUL_VALUES, REGISTER_COUNT, KernelConfig, KernelKind, VectorEnv
from .packer import ConvGeometry, fused_im2col_pack, im2col
from .pruner import PruneSpec, decompress, prune
from .tensor import Tensor

try:
    import fcntl
except ImportError:  # pragma: no cover
    fcntl = None

VERIFY_REL_TOL = 1e-4


class TuningError(RuntimeError):
    pass


class CacheError(ValueError):
    pass


@dataclass(frozen=True)
class TuneCandidate:
    config: KernelConfig
    median_ns: float
    repeats: int
    warmups: int


@dataclass
class TuneReport:
    key: str
    candidates: list[TuneCandidate]
    winner: TuneCandidate
    env: dict
    disqualified: list[KernelConfig] = field(default_factory=list)


def env_fingerprint(vlen_bits: int = 256, threads: int = 1) -> dict:
    return {"vlen_bits": int(vlen_bits), "threads": int(threads),
            "host": platform.node() or "unknown"}


def shape_key(g: ConvGeometry, rows: int, sparsity: float) -> str:
    return (f"n{g.batch}c{g.cin}h{g.in_h}w{g.in_w}"
            f"_k{g.kh}x{g.kw}_s{g.sh}x{g.sw}_p{g.ph}x{g.pw}"
            f"_rows{rows}_sp{sparsity:g}")


def enumerate_candidates(rows: int, sparsity: float,
                         vlen_bits: int = 256) -> list[KernelConfig]:
    """All (t, lmul) pairs with (t+1)*lmul <= 32 and t <= rows, ordered."""
    if rows < 1:
        raise TuningError(f"rows must be >= 1, got {rows}")
    kind = KernelKind.COLUMN_WISE if sparsity > 0 else KernelKind.DENSE
    out = []
    for t in range(1, REGISTER_COUNT):
        if t > rows:
            break
        for lmul in LMUL_VALUES:
            if (t + 1) * lmul <= REGISTER_COUNT:
                out.append(KernelConfig(kind, t, VectorEnv(vlen_bits, lmul)))
    return out


def measure_median_ns(fn, repeats: int, warmups: int) -> float:
    for _ in range(warmups):
        fn()
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter_ns()
        fn()
        samples.append(time.perf_counter_ns() - t0)
    return float(statistics.median(samples))


def tune_layer(g: ConvGeometry, dense_weights: np.ndarray, input_tensor: Tensor,
               sparsity: float, *, m: int | None = None, repeats: int = 9,
               warmups: int = 3, vlen_bits: int = 256,
               candidates: list[KernelConfig] | None = None,
               per_run_hook=None, threads_fingerprint: int = 1) -> TuneReport:
    """Profile every candidate on the layer shape and pick the fastest.

    ``per_run_hook(config)``, when given, runs inside each timed repetition
    (test hook for injecting artificial delays).
    """
    if repeats < 3:
        raise TuningError(f"repeats must be >= 3 for a meaningful median, got {repeats}")
    dense_weights = np.ascontiguousarray(dense_weights, dtype=np.float32)
    rows = dense_weights.shape[0]
    if dense_weights.shape[1] != g.k_rows:
        raise TuningError(f"weights K={dense_weights.shape[1]} != geometry K={g.k_rows}")
    if candidates is None:
        candidates = enumerate_candidates(rows, sparsity, vlen_bits)
    if not candidates:
        raise TuningError("empty candidate list")

    # oracle data matrix via the two-step path, independent of the fused pass
    mat64 = im2col(input_tensor, g).astype(np.float64)

    measured: list[TuneCandidate] = []
    disqualified: list[KernelConfig] = []
    for cfg in candidates:
        if sparsity > 0:
            spec = PruneSpec.from_ratio(sparsity, m if m is not None else g.k_rows,
                                        tile_t=cfg.t)
            weights = prune(dense_weights, spec)
            w64 = decompress(weights).astype(np.float64)
        else:
            weights = dense_weights
            w64 = dense_weights.astype(np.float64)

        def run():
            if per_run_hook is not None:
                per_run_hook(cfg)
            pm = fused_im2col_pack(input_tensor, g, cfg.env.vl_f32)
            return sparse_gemm(weights, pm, cfg)

        got = run().astype(np.float64)
        ref = w64 @ mat64
        err = np.abs(got - ref)
        denom = np.abs(ref)
        bad = err > VERIFY_REL_TOL * np.maximum(denom, np.finfo(np.float64).tiny)
        ok = not bad.any() or float((err[bad] / denom[bad]).max()) <= VERIFY_REL_TOL
        if not ok:
            disqualified.append(cfg)
            continue
        median = measure_median_ns(run, repeats, warmups)
        measured.append(TuneCandidate(cfg, median, repeats, warmups))

    if not measured:
        raise TuningError("all candidates disqualified: kernel outputs do not match the oracle")
    winner = min(measured, key=lambda c: (c.median_ns, c.config.t, c.config.env.lmul))
    return TuneReport(
        key=shape_key(g, rows, sparsity),
        candidates=measured,
        winner=winner,
        env=env_fingerprint(vlen_bits, threads_fingerprint),
        disqualified=disqualified,
    )


# ---------------------------------------------------------------------------
# cache: JSON lines, one record per shape key


def _config_dict(cfg: KernelConfig) -> dict:
    return {"kind": cfg.kind.value, "t": cfg.t, "lmul": cfg.env.lmul}


def config_from_dict(d: dict, vlen_bits: int = 256) -> KernelConfig:
    return KernelConfig(KernelKind(d["kind"]), int(d["t"]),
                        VectorEnv(vlen_bits, int(d["lmul"])))


def report_record(report: TuneReport) -> dict:
    return {
        "key": report.key,
        "winner": _config_dict(report.winner.config),
        "median_ns": report.winner.median_ns,
        "env": report.env,
        "candidates": [
            {**_config_dict(c.config), "median_ns": c.median_ns,
             "repeats": c.repeats, "warmups": c.warmups}
            for c in report.candidates
        ],
    }


def _read_records(path) -> dict[str, dict]:
    records: dict[str, dict] = {}
    try:
        text = open(path, "r", encoding="utf-8").read()
    except FileNotFoundError:
        return records
    for ln, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            key = rec["key"]
            rec["winner"]["kind"], rec["winner"]["t"], rec["winner"]["lmul"]
        except (json.JSONDecodeError, KeyError, TypeError) as e:
            raise CacheError(f"{path}:{ln}: corrupt cache record ({e})") from None
        records[key] = rec
    return records


def cache_put(path, report: TuneReport) -> None:
    lock_path = str(path) + ".lock"
    lock = open(lock_path, "w")
    try:
        if fcntl is not None:
            fcntl.flock(lock, fcntl.LOCK_EX)
        records = _read_records(path)
        records[report.key] = report_record(report)
        tmp = str(path) + ".tmp"
        with open(tmp, "w", encoding="utf-8") as f:
            for rec in records.values():
                f.write(json.dumps(rec) + "\n")
        os.replace(tmp, path)
    finally:
        lock.close()


def cache_get(path, key: str, env: dict | None = None) -> dict | None:
    """Return the cached record for ``key``, or None.

    With ``env`` given, a record whose fingerprint differs warns and is
    treated as a miss so a stale host decision is never silently reused.
    """
    records = _read_records(path)
    rec = records.get(key)
    if rec is None:
        return None
    if env is not None and rec.get("env") != env:
        warnings.warn(
            f"tune cache entry for {key} was recorded on {rec.get('env')}, "
            f"current environment is {env}; retune required",
            stacklevel=2,
        )
        return None
    return rec
