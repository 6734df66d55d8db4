"""Square-block shared-exponent integer quantization.

A tensor is split into 4x4 blocks; each block stores one power-of-two
scale (as an int8 exponent) and integer elements of a configurable bit
width.  Dequantization is exact: value = element * 2^shared_exp, and the
quantized GEMM accumulates integer block products into a float64
accumulator under a fixed summation order, so results are reproducible
bit-for-bit.

Also houses the quantization-masking analyzer: the probability that a
Gaussian perturbation moves a value across a quantization threshold,
both as an adaptive-quadrature integral and as a Monte Carlo simulation.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate
from scipy.special import ndtr

from . import _kernels
from .tensor import RngStream

__all__ = [
    "QuantSpec",
    "PrecisionPolicy",
    "SMXTensor",
    "quantize",
    "dequantize",
    "smx_matmul",
    "flip_probability",
    "simulate_flip_rate",
    "packed_nbytes",
    "save_smx",
    "load_smx",
    "save_dense",
    "load_dense",
]

BLOCK = 4
ZERO_BLOCK_EXP = _kernels.ZERO_BLOCK_EXP


@dataclass(frozen=True)
class QuantSpec:
    """Element bit width and block geometry for one tensor class.

    emax = bit_width - 2 guarantees the block maximum rounds to at most
    2^(bit_width-1), which clamps back into range by at most one step;
    rounding is round-to-nearest, ties to even.
    """

    bit_width: int
    block_rows: int = BLOCK
    block_cols: int = BLOCK

    def __post_init__(self):
        if not 4 <= self.bit_width <= 16:
            raise ValueError(f"bit_width must be in [4, 16], got {self.bit_width}")
        if self.block_rows != BLOCK or self.block_cols != BLOCK:
            raise ValueError("block dimensions are fixed at 4x4")

    @property
    def emax(self) -> int:
        return self.bit_width - 2

    @property
    def qmax(self) -> int:
        return (1 << (self.bit_width - 1)) - 1


@dataclass(frozen=True)
class PrecisionPolicy:
    """Per-tensor-class bit widths for fully quantized training."""

    weight_bits: int = 8
    activation_bits: int = 8
    gradient_bits: int = 12
    overrides: dict | None = None

    def __post_init__(self):
        for kind in ("weight", "activation", "gradient"):
            QuantSpec(self.bits_for(kind))  # validates range

    def bits_for(self, kind: str) -> int:
        if self.overrides and kind in self.overrides:
            return int(self.overrides[kind])
        return {
            "weight": self.weight_bits,
            "activation": self.activation_bits,
            "gradient": self.gradient_bits,
        }[kind]

    def spec_for(self, kind: str) -> QuantSpec:
        return QuantSpec(self.bits_for(kind))


@dataclass
class SMXTensor:
    """Block-quantized tensor: padded integer elements + per-block exponents.

    ``elements`` is the zero-padded (rows, cols rounded up to 4) int16
    grid; ``exps`` holds one int8 exponent per 4x4 block.  ``shape`` is
    the logical shape (1-D or 2-D); padding cells are zero and never
    appear in dequantized output.
    """

    shape: tuple
    elements: np.ndarray  # int16, padded 2-D
    exps: np.ndarray      # int8, (padded_rows/4, padded_cols/4)
    spec: QuantSpec = field(default_factory=lambda: QuantSpec(8))

    @property
    def logical_2d(self) -> tuple:
        if len(self.shape) == 1:
            return (1, self.shape[0])
        return self.shape

    def transposed(self) -> "SMXTensor":
        """Exact transpose: blocks transpose with the element grid."""
        r, c = self.logical_2d
        return SMXTensor((c, r),
                         np.ascontiguousarray(self.elements.T),
                         np.ascontiguousarray(self.exps.T),
                         self.spec)


def _pad4(n: int) -> int:
    return (n + BLOCK - 1) // BLOCK * BLOCK


def quantize(x, spec: QuantSpec) -> SMXTensor:
    """Quantize a dense real tensor (1-D or 2-D) to SMX form.

    Shapes not divisible by 4 are zero-padded; padding never influences
    a block maximum upward (zeros cannot raise max|x|) and is dropped on
    dequantization.
    """
    a = np.asarray(x, dtype=np.float64)
    if a.ndim not in (1, 2):
        raise ValueError(f"quantize expects a 1-D or 2-D tensor, got rank {a.ndim}")
    if not np.all(np.isfinite(a)):
        bad = np.argwhere(~np.isfinite(np.atleast_2d(a)))[0]
        raise ValueError(f"non-finite input at index {tuple(int(v) for v in bad)}")
    shape = tuple(a.shape)
    a2 = np.atleast_2d(a)
    r, c = a2.shape
    rp, cp = _pad4(r), _pad4(c)
    if (rp, cp) == (r, c) and a2.flags.c_contiguous:
        xp = a2
    else:
        xp = np.zeros((rp, cp), dtype=np.float64)
        xp[:r, :c] = a2
    elems = np.empty((rp, cp), dtype=np.int16)
    exps = np.empty((rp // BLOCK, cp // BLOCK), dtype=np.int8)
    _kernels.quantize_blocks(xp, spec.emax, float(spec.qmax), elems, exps)
    return SMXTensor(shape, elems, exps, spec)


def dequantize(q: SMXTensor) -> np.ndarray:
    """Exact reconstruction: element * 2^shared_exp per block."""
    r, c = q.logical_2d
    exp_full = np.repeat(np.repeat(q.exps, BLOCK, axis=0), BLOCK, axis=1)
    out = np.ldexp(q.elements[:r, :c].astype(np.float64),
                   exp_full[:r, :c].astype(np.int32))
    return out.reshape(q.shape)


def smx_matmul(a: SMXTensor, b: SMXTensor,
               transpose_a: bool = False, transpose_b: bool = False) -> np.ndarray:
    """Quantized matrix product with a full-precision accumulator.

    Bit-exactly equals the dense product of the dequantized operands
    accumulated in ascending 4-wide k-group order (block-row-major):
    each group's integer partial dot is exact under its shared scale, and
    groups are then added in fixed order.
    """
    at = a.transposed() if transpose_a else a
    bt = b if transpose_b else b.transposed()  # need (N, K) layout
    m, k = at.logical_2d
    n, kb = bt.logical_2d
    if k != kb:
        raise ValueError(f"inner dimensions differ: {k} vs {kb}")
    out = np.empty((at.elements.shape[0], bt.elements.shape[0]), dtype=np.float64)
    if at.spec.bit_width + bt.spec.bit_width <= 31:
        _kernels.gemm_i32(at.elements, at.exps, bt.elements, bt.exps, out)
    else:
        _kernels.gemm_i64(at.elements, at.exps, bt.elements, bt.exps, out)
    return np.ascontiguousarray(out[:m, :n])


def flip_probability(s: float, sigma: float) -> float:
    """Probability a N(0, sigma^2) perturbation crosses a bin threshold.

    Evaluates (4/s) * integral_0^{s/2} Phi(-l/sigma) dl by adaptive
    quadrature (relative tolerance well under 1e-8), where Phi is the
    standard normal CDF and s is the quantization step.
    """
    if s <= 0:
        raise ValueError(f"quantization step must be positive, got {s}")
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    val, _err = integrate.quad(lambda l: ndtr(-l / sigma), 0.0, s / 2.0,
                               epsabs=0.0, epsrel=1e-11, limit=200)
    return 4.0 / s * val


def simulate_flip_rate(s: float, sigma: float, trials: int,
                       rng: RngStream | np.random.Generator | None = None) -> float:
    """Monte Carlo flip frequency: x uniform in one bin, delta Gaussian.

    A flip is counted when the perturbation magnitude exceeds the
    distance from x to the nearest bin threshold -- the masking event the
    analytic integral models (that model charges the nearest-threshold
    distance to both tails, so it sits slightly above the literal
    two-sided bin-exit rate).  sigma = 0 is allowed and yields exactly 0.
    """
    if s <= 0:
        raise ValueError(f"quantization step must be positive, got {s}")
    if sigma < 0:
        raise ValueError(f"sigma must be nonnegative, got {sigma}")
    trials = int(trials)
    if trials < 10 ** 5:
        raise ValueError(f"need at least 1e5 trials, got {trials}")
    if rng is None:
        rng = RngStream(2024, 0)
    gen = rng.generator() if isinstance(rng, RngStream) else rng
    flips = 0
    done = 0
    chunk = 4_000_000
    while done < trials:
        nn = min(chunk, trials - done)
        x = gen.uniform(-s / 2.0, s / 2.0, size=nn)
        near = s / 2.0 - np.abs(x)
        if sigma > 0:
            delta = gen.standard_normal(nn) * sigma
            flips += int(np.count_nonzero(np.abs(delta) > near))
        done += nn
    return flips / trials


# --- serialization ---------------------------------------------------------

_MAGIC = b"SMXT"
_VERSION = 1
_KIND_SMX = 0
_KIND_DENSE = 1


def packed_nbytes(shape, bit_width: int) -> int:
    """Serialized payload bytes: packed elements plus one exponent byte
    per 4x4 block (ceil on the final partial byte of the bitstream)."""
    r, c = (1, shape[0]) if len(shape) == 1 else shape
    rp, cp = _pad4(r), _pad4(c)
    nblocks = (rp // BLOCK) * (cp // BLOCK)
    elem_bits = rp * cp * bit_width
    return nblocks + (elem_bits + 7) // 8


def _pack_bits(vals: np.ndarray, bit_width: int) -> bytes:
    """Little-endian bitstream of two's-complement bit_width fields."""
    u = (vals.astype(np.int64) & ((1 << bit_width) - 1)).astype(np.uint16)
    bits = np.unpackbits(u.view(np.uint8).reshape(-1, 2), axis=1,
                         bitorder="little")[:, :bit_width]
    return np.packbits(bits.reshape(-1), bitorder="little").tobytes()


def _unpack_bits(buf: bytes, n: int, bit_width: int) -> np.ndarray:
    bits = np.unpackbits(np.frombuffer(buf, dtype=np.uint8),
                         bitorder="little", count=n * bit_width)
    full = np.zeros((n, 16), dtype=np.uint8)
    full[:, :bit_width] = bits.reshape(n, bit_width)
    u = np.packbits(full, axis=1, bitorder="little").view(np.uint16).reshape(n)
    v = u.astype(np.int32)
    v[v >= (1 << (bit_width - 1))] -= 1 << bit_width
    return v.astype(np.int16)


def save_smx(q: SMXTensor, path) -> None:
    """Bit-exact container: header, per-block exponents, packed elements
    in row-major block order (blocks row-major, elements row-major
    within each block)."""
    rp, cp = q.elements.shape
    blocks = q.elements.reshape(rp // BLOCK, BLOCK, cp // BLOCK, BLOCK)
    ordered = blocks.transpose(0, 2, 1, 3).reshape(-1)
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<HBB", _VERSION, _KIND_SMX, q.spec.bit_width))
        f.write(struct.pack("<BBB", BLOCK, BLOCK, len(q.shape)))
        f.write(struct.pack(f"<{len(q.shape)}q", *q.shape))
        f.write(q.exps.astype(np.int8).tobytes())
        f.write(_pack_bits(ordered, q.spec.bit_width))


def load_smx(path) -> SMXTensor:
    with open(path, "rb") as f:
        if f.read(4) != _MAGIC:
            raise ValueError(f"{path}: not a quantized-tensor container")
        version, kind, bw = struct.unpack("<HBB", f.read(4))
        if version != _VERSION:
            raise ValueError(f"{path}: unsupported container version {version}")
        if kind != _KIND_SMX:
            raise ValueError(f"{path}: container holds a dense tensor")
        br, bc, ndim = struct.unpack("<BBB", f.read(3))
        if (br, bc) != (BLOCK, BLOCK):
            raise ValueError(f"{path}: unsupported block geometry {br}x{bc}")
        shape = struct.unpack(f"<{ndim}q", f.read(8 * ndim))
        r, c = (1, shape[0]) if ndim == 1 else shape
        rp, cp = _pad4(r), _pad4(c)
        nbr, nbc = rp // BLOCK, cp // BLOCK
        exps = np.frombuffer(f.read(nbr * nbc), dtype=np.int8).reshape(nbr, nbc)
        n = rp * cp
        ordered = _unpack_bits(f.read((n * bw + 7) // 8), n, bw)
    blocks = ordered.reshape(nbr, nbc, BLOCK, BLOCK).transpose(0, 2, 1, 3)
    elems = np.ascontiguousarray(blocks.reshape(rp, cp))
    return SMXTensor(tuple(shape), elems, np.ascontiguousarray(exps), QuantSpec(bw))


def save_dense(x: np.ndarray, path) -> None:
    """Dense float64 variant of the container, for debug dumps and
    checkpoints."""
    a = np.ascontiguousarray(x, dtype=np.float64)
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<HBB", _VERSION, _KIND_DENSE, 0))
        f.write(struct.pack("<B", a.ndim))
        f.write(struct.pack(f"<{a.ndim}q", *a.shape))
        f.write(a.tobytes())


def load_dense(path) -> np.ndarray:
    with open(path, "rb") as f:
        if f.read(4) != _MAGIC:
            raise ValueError(f"{path}: not a quantized-tensor container")
        version, kind, _ = struct.unpack("<HBB", f.read(4))
        if version != _VERSION:
            raise ValueError(f"{path}: unsupported container version {version}")
        if kind != _KIND_DENSE:
            raise ValueError(f"{path}: container holds a quantized tensor")
        ndim = struct.unpack("<B", f.read(1))[0]
        shape = struct.unpack(f"<{ndim}q", f.read(8 * ndim))
        data = np.frombuffer(f.read(), dtype=np.float64)
    return data.reshape(shape).copy()
