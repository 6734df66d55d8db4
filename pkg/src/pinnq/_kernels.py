"""JIT kernels for block-quantized tensors.

The layouts here are the padded internal form used by the quantized
codec: element grids whose row/column counts are multiples of 4, plus an
int8 exponent per 4x4 block.  The GEMM kernels take the right-hand
operand in transposed (N x K) layout so both inner loops stream
contiguously.

Determinism contract: within one 4-element k-group all products share a
single power-of-two scale, so the integer partial dot is exact; the only
floating-point rounding happens when the per-group partials are added in
ascending k-group order.  Both GEMM variants follow that exact order, as
does the pure-python reference the tests compare against.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

__all__ = ["quantize_blocks", "gemm_i32", "gemm_i64"]

ZERO_BLOCK_EXP = -128  # sentinel exponent for all-zero blocks


@njit(cache=True)
def quantize_blocks(xp, emax, qmax, elems, exps):  # pragma: no cover - jit
    """Quantize a padded (4R x 4C) float64 grid in place.

    Per block: shared_exp = floor(log2(max|x|)) - emax, elements are
    x * 2^-shared_exp rounded to nearest-even and clamped to +-qmax.
    All-zero blocks get the sentinel exponent and zero elements.
    """
    nbr = xp.shape[0] // 4
    nbc = xp.shape[1] // 4
    for bi in range(nbr):
        for bj in range(nbc):
            r0 = 4 * bi
            c0 = 4 * bj
            m = 0.0
            for i in range(4):
                for j in range(4):
                    a = abs(xp[r0 + i, c0 + j])
                    if a > m:
                        m = a
            if m == 0.0:
                exps[bi, bj] = ZERO_BLOCK_EXP
                for i in range(4):
                    for j in range(4):
                        elems[r0 + i, c0 + j] = 0
            else:
                # frexp gives m = fr * 2^ex with fr in [0.5, 1), so
                # floor(log2 m) == ex - 1 exactly, powers of two included.
                fr, ex = math.frexp(m)
                e = ex - 1 - emax
                if e < -127:
                    e = -127
                elif e > 127:
                    e = 127
                inv_s = math.ldexp(1.0, -e)
                any_nonzero = False
                for i in range(4):
                    for j in range(4):
                        q = np.rint(xp[r0 + i, c0 + j] * inv_s)
                        if q > qmax:
                            q = qmax
                        elif q < -qmax:
                            q = -qmax
                        if q != 0.0:
                            any_nonzero = True
                        elems[r0 + i, c0 + j] = np.int16(q)
                # A block can round to all zeros only when the exponent
                # clamp floor made the step larger than the data; store
                # it in the canonical zero-block form so requantizing the
                # reconstruction is a fixed point.
                exps[bi, bj] = e if any_nonzero else ZERO_BLOCK_EXP


@njit(cache=True)
def gemm_i32(ae, aexp, bte, btexp, out):  # pragma: no cover - jit
    """out = A @ B with B supplied transposed; int32 partial dots.

    Valid when the two operand bit widths sum to at most 31, so a
    4-product group cannot overflow int32.
    """
    M, K = ae.shape
    N = bte.shape[0]
    KB = K // 4
    prod = np.empty(K, np.int32)
    srow = np.empty(KB, np.float64)
    for bi in range(M // 4):
        for bj in range(N // 4):
            for kb in range(KB):
                srow[kb] = math.ldexp(1.0, int(aexp[bi, kb]) + int(btexp[bj, kb]))
            for ii in range(4):
                i = 4 * bi + ii
                for jj in range(4):
                    j = 4 * bj + jj
                    for k in range(K):
                        prod[k] = np.int32(ae[i, k]) * np.int32(bte[j, k])
                    acc = 0.0
                    for kb in range(KB):
                        k0 = 4 * kb
                        acc += np.float64(prod[k0] + prod[k0 + 1]
                                          + prod[k0 + 2] + prod[k0 + 3]) * srow[kb]
                    out[i, j] = acc


@njit(cache=True)
def gemm_i64(ae, aexp, bte, btexp, out):  # pragma: no cover - jit
    """Same contract and summation order as gemm_i32, int64 partial dots."""
    M, K = ae.shape
    N = bte.shape[0]
    KB = K // 4
    prod = np.empty(K, np.int64)
    srow = np.empty(KB, np.float64)
    for bi in range(M // 4):
        for bj in range(N // 4):
            for kb in range(KB):
                srow[kb] = math.ldexp(1.0, int(aexp[bi, kb]) + int(btexp[bj, kb]))
            for ii in range(4):
                i = 4 * bi + ii
                for jj in range(4):
                    j = 4 * bj + jj
                    for k in range(K):
                        prod[k] = np.int64(ae[i, k]) * np.int64(bte[j, k])
                    acc = 0.0
                    for kb in range(KB):
                        k0 = 4 * kb
                        acc += np.float64(prod[k0] + prod[k0 + 1]
                                          + prod[k0 + 2] + prod[k0 + 3]) * srow[kb]
                    out[i, j] = acc
