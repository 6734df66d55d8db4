"""Dense real-tensor substrate: shaped float64 arrays plus seeded sampling.

Everything downstream (quantization, tensor-train contraction, network
layers) builds on the operations here.  Dense values are plain
``numpy.ndarray`` objects in float64 with row-major layout; the functions
in this module are thin, validated wrappers that pin down shape rules,
summation determinism, and reproducible random streams.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "RngStream",
    "as_dense",
    "matmul",
    "reshape",
    "transpose",
    "contract",
    "sample_gaussian",
    "sample_uniform",
]


@dataclass(frozen=True)
class RngStream:
    """A named, replayable random stream.

    Identical (seed, stream) pairs produce identical sample sequences:
    the generator is counter-based (Philox) and keyed directly by the two
    ids, so streams never overlap and do not depend on draw order in
    other streams.
    """

    seed: int
    stream: int = 0

    def generator(self) -> np.random.Generator:
        key = np.array([self.seed & 0xFFFFFFFFFFFFFFFF,
                        self.stream & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key))

    def child(self, offset: int) -> "RngStream":
        return RngStream(self.seed, self.stream + offset)


def as_dense(x, name: str = "tensor") -> np.ndarray:
    """Coerce to a contiguous float64 array, rejecting non-finite input."""
    a = np.ascontiguousarray(x, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        bad = np.argwhere(~np.isfinite(a))[0]
        raise ValueError(
            f"{name} has non-finite entry at index {tuple(int(v) for v in bad)}")
    return a


def matmul(a: np.ndarray, b: np.ndarray,
           transpose_a: bool = False, transpose_b: bool = False) -> np.ndarray:
    """Real matrix product with optional operand transposes.

    Runs on the platform BLAS; with a fixed thread count the summation
    order, and therefore the bit pattern of the result, is reproducible.
    """
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("matmul expects 2-D operands")
    aa = a.T if transpose_a else a
    bb = b.T if transpose_b else b
    if aa.shape[1] != bb.shape[0]:
        raise ValueError(f"inner dimensions differ: {aa.shape} x {bb.shape}")
    return aa @ bb


def reshape(x: np.ndarray, new_shape) -> np.ndarray:
    new_shape = tuple(int(s) for s in new_shape)
    if int(np.prod(new_shape)) != x.size:
        raise ValueError(f"cannot reshape {x.shape} to {new_shape}")
    return np.ascontiguousarray(x).reshape(new_shape)


def transpose(x: np.ndarray, perm=None) -> np.ndarray:
    """Materialized (contiguous) axis permutation."""
    if perm is None:
        perm = tuple(reversed(range(x.ndim)))
    perm = tuple(int(p) for p in perm)
    if sorted(perm) != list(range(x.ndim)):
        raise ValueError(f"invalid permutation {perm} for rank {x.ndim}")
    return np.ascontiguousarray(np.transpose(x, perm))


def contract(a: np.ndarray, b: np.ndarray, axes) -> np.ndarray:
    """Tensor contraction over paired axes.

    Equivalent to flattening the paired axes of each operand into a single
    inner dimension (row-major) and running one matrix product; free axes
    keep their original relative order, a's first.
    """
    ax_a, ax_b = axes
    ax_a = [int(v) for v in np.atleast_1d(ax_a)]
    ax_b = [int(v) for v in np.atleast_1d(ax_b)]
    if len(ax_a) != len(ax_b):
        raise ValueError("paired axis lists differ in length")
    for i, j in zip(ax_a, ax_b):
        if a.shape[i] != b.shape[j]:
            raise ValueError(
                f"contracted axis mismatch: a axis {i} ({a.shape[i]}) vs "
                f"b axis {j} ({b.shape[j]})")
    return np.tensordot(a, b, axes=(ax_a, ax_b))


def sample_gaussian(shape, sigma: float, rng: RngStream | np.random.Generator) -> np.ndarray:
    """i.i.d. N(0, sigma^2) tensor, reproducible per stream."""
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    gen = rng.generator() if isinstance(rng, RngStream) else rng
    return gen.standard_normal(tuple(shape)) * float(sigma)


def sample_uniform(shape, lo: float, hi: float,
                   rng: RngStream | np.random.Generator) -> np.ndarray:
    """i.i.d. U(lo, hi) tensor, reproducible per stream."""
    if not lo < hi:
        raise ValueError(f"need lo < hi, got [{lo}, {hi})")
    gen = rng.generator() if isinstance(rng, RngStream) else rng
    return gen.uniform(float(lo), float(hi), size=tuple(shape))
