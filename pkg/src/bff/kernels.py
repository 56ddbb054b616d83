"""Hot numeric kernels with a numba fast path and a pure-numpy fallback.

The env flag ``BFF_NUMBA`` selects the path: unset or ``1`` compiles the
kernels with ``numba.njit``; ``0``/``false``/``off`` runs the same functions
uncompiled (token sampling additionally gets a vectorized numpy fallback).
Both paths are bitwise identical because all randomness is drawn outside the
kernels and floating-point evaluation order is the same.

``benchmarks/bench_kernels.py`` times the two paths against each other.
"""

from __future__ import annotations

import math
import os

import numpy as np


def _flag_enabled() -> bool:
    raw = os.environ.get("BFF_NUMBA", "1").strip().lower()
    return raw not in ("0", "false", "off", "no")


NUMBA_ENABLED = False
if _flag_enabled():
    try:
        from numba import njit as _njit

        NUMBA_ENABLED = True
    except ImportError:  # pragma: no cover - numba is a hard dependency
        NUMBA_ENABLED = False


def _maybe_jit(fn):
    if NUMBA_ENABLED:
        return _njit(cache=True)(fn)
    return fn


# ---------------------------------------------------------------------------
# CBOW negative-sampling epoch
# ---------------------------------------------------------------------------


def _cbow_epoch_impl(emb_in, emb_out, tokens, offsets, window, k_neg,
                     neg_table, win_draws, neg_draws, lr_start, lr_end):
    """One pass over the corpus, updating both embedding matrices in place.

    tokens/offsets give sequences as a flat int64 array with boundary
    offsets. win_draws holds one uniform per corpus position (window
    shrinking), neg_draws holds k_neg uniforms per position (negative
    sampling). Returns (summed loss, number of trained positions).
    """
    dim = emb_in.shape[1]
    table_size = neg_table.shape[0]
    n_seq = offsets.shape[0] - 1
    total_loss = 0.0
    trained = 0
    n_positions = tokens.shape[0]
    pos = 0
    h = np.empty(dim, dtype=np.float64)
    gh = np.empty(dim, dtype=np.float64)
    for s in range(n_seq):
        start = offsets[s]
        stop = offsets[s + 1]
        for center_pos in range(start, stop):
            frac = pos / max(n_positions, 1)
            lr = lr_start + (lr_end - lr_start) * frac
            b = 1 + int(win_draws[pos] * window)
            if b > window:
                b = window
            lo = center_pos - b
            if lo < start:
                lo = start
            hi = center_pos + b + 1
            if hi > stop:
                hi = stop
            n_ctx = hi - lo - 1
            if n_ctx <= 0:
                pos += 1
                continue
            center = tokens[center_pos]
            for d in range(dim):
                h[d] = 0.0
            for c in range(lo, hi):
                if c == center_pos:
                    continue
                row = tokens[c]
                for d in range(dim):
                    h[d] += emb_in[row, d]
            inv = 1.0 / n_ctx
            for d in range(dim):
                h[d] *= inv
                gh[d] = 0.0
            for neg in range(k_neg + 1):
                if neg == 0:
                    target = center
                    label = 1.0
                else:
                    idx = int(neg_draws[pos, neg - 1] * table_size)
                    if idx >= table_size:
                        idx = table_size - 1
                    target = neg_table[idx]
                    if target == center:
                        continue
                    label = 0.0
                dot = 0.0
                for d in range(dim):
                    dot += h[d] * emb_out[target, d]
                if dot >= 0.0:
                    f = 1.0 / (1.0 + math.exp(-dot))
                else:
                    e = math.exp(dot)
                    f = e / (1.0 + e)
                if label > 0.5:
                    total_loss += -math.log(max(f, 1e-12))
                else:
                    total_loss += -math.log(max(1.0 - f, 1e-12))
                gscale = (label - f) * lr
                for d in range(dim):
                    gh[d] += gscale * emb_out[target, d]
                    emb_out[target, d] += gscale * h[d]
            gctx = inv
            for c in range(lo, hi):
                if c == center_pos:
                    continue
                row = tokens[c]
                for d in range(dim):
                    emb_in[row, d] += gh[d] * gctx
            trained += 1
            pos += 1
    return total_loss, trained


cbow_epoch = _maybe_jit(_cbow_epoch_impl)


# ---------------------------------------------------------------------------
# Row-wise categorical sampling (token emission)
# ---------------------------------------------------------------------------


def _sample_rows_impl(cdf, row_of_draw, uniforms, out):
    """For each draw i, binary-search cdf[row_of_draw[i]] for uniforms[i]."""
    n = uniforms.shape[0]
    width = cdf.shape[1]
    for i in range(n):
        row = row_of_draw[i]
        u = uniforms[i]
        lo = 0
        hi = width
        while lo < hi:
            mid = (lo + hi) // 2
            if cdf[row, mid] <= u:
                lo = mid + 1
            else:
                hi = mid
        if lo >= width:
            lo = width - 1
        out[i] = lo
    return out


_sample_rows_kernel = _maybe_jit(_sample_rows_impl)


def _sample_rows_numpy(cdf, row_of_draw, uniforms, out, chunk: int = 65536):
    """Vectorized fallback; same tie semantics as the binary search."""
    width = cdf.shape[1]
    for start in range(0, uniforms.shape[0], chunk):
        stop = min(start + chunk, uniforms.shape[0])
        block = (cdf[row_of_draw[start:stop]] <= uniforms[start:stop, None]).sum(axis=1)
        np.minimum(block, width - 1, out=out[start:stop])
    return out


def sample_categorical_rows(cdf: np.ndarray, row_of_draw: np.ndarray,
                            uniforms: np.ndarray) -> np.ndarray:
    """Sample categorical indices given per-row CDFs and pre-drawn uniforms."""
    out = np.empty(uniforms.shape[0], dtype=np.int64)
    cdf = np.ascontiguousarray(cdf, dtype=np.float64)
    row_of_draw = np.ascontiguousarray(row_of_draw, dtype=np.int64)
    uniforms = np.ascontiguousarray(uniforms, dtype=np.float64)
    if NUMBA_ENABLED:
        return _sample_rows_kernel(cdf, row_of_draw, uniforms, out)
    return _sample_rows_numpy(cdf, row_of_draw, uniforms, out)
