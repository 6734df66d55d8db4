"""Single GEMM entry point for the layer stack.

Every matrix product in the network and tensor-train paths funnels
through :func:`gemm`, which applies the precision policy to its operands
(quantize on read, accumulate in full precision) and reports logical
multiply-accumulate sizes to an optional counter.  Counting logical
(unpadded) dimensions keeps instrumented totals equal to closed-form
cost formulas.
"""

from __future__ import annotations

import numpy as np

from .smx import PrecisionPolicy, quantize, smx_matmul

__all__ = ["gemm"]


def gemm(a: np.ndarray, b: np.ndarray, *,
         transpose_a: bool = False, transpose_b: bool = False,
         policy: PrecisionPolicy | None = None,
         kind_a: str = "activation", kind_b: str = "weight",
         counter=None) -> np.ndarray:
    """a @ b with optional transposes, operand quantization, and MAC count.

    kind_* name the tensor class ("weight" / "activation" / "gradient")
    used to pick each operand's bit width when a policy is active.
    """
    m = a.shape[1] if transpose_a else a.shape[0]
    k = a.shape[0] if transpose_a else a.shape[1]
    n = b.shape[0] if transpose_b else b.shape[1]
    if counter is not None:
        counter.add(m, k, n)
    if policy is None:
        aa = a.T if transpose_a else a
        bb = b.T if transpose_b else b
        return aa @ bb
    qa = quantize(a, policy.spec_for(kind_a))
    qb = quantize(b, policy.spec_for(kind_b))
    return smx_matmul(qa, qb, transpose_a=transpose_a, transpose_b=transpose_b)
