"""Tensor-train linear layers.

A weight matrix W (M x N with M = prod(m_k), N = prod(n_k)) is stored as
a chain of 2d order-3 cores linked by ranks: core k has shape
(r_{k-1}, m_k, r_k) on the output half (k <= d) and (r_{k-1}, n_{k-d},
r_k) on the input half.  Three evaluation schemes are provided:

* ``reconstruct_full``: exact dense reconstruction; the oracle every
  other scheme is tested against.
* ``forward_sequential``: contracts the input through all 2d cores in
  descending core order, so a quantized run crosses 2d quantized
  contractions.
* ``forward_prs``: pre-contracts each half-chain into a partial matrix,
  A (r_d x M) from the output half and B (N x r_d) from the input half,
  so the activation path is Y = (X B) A and crosses exactly two
  quantized contractions.

``backward`` differentiates the partial-reconstruction graph by hand;
core gradients are assembled from dL/dA and dL/dB by contracting against
the other cores of the same half-chain.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._gemm import gemm
from .smx import PrecisionPolicy, dequantize, quantize
from .tensor import RngStream

__all__ = [
    "TTLayerSpec",
    "core_shapes",
    "spec_from_cores",
    "tt_init",
    "reconstruct_full",
    "build_partials",
    "forward_sequential",
    "forward_prs",
    "backward",
    "compression_ratio",
]


@dataclass(frozen=True)
class TTLayerSpec:
    """Factorization plan: output factors m, input factors n, rank chain r.

    The rank chain has 2d + 1 entries with r[0] == r[2d] == 1.
    """

    m: tuple
    n: tuple
    r: tuple

    def __post_init__(self):
        object.__setattr__(self, "m", tuple(int(v) for v in self.m))
        object.__setattr__(self, "n", tuple(int(v) for v in self.n))
        object.__setattr__(self, "r", tuple(int(v) for v in self.r))
        if not self.m or len(self.m) != len(self.n):
            raise ValueError("need equally many output and input factors")
        if len(self.r) != 2 * len(self.m) + 1:
            raise ValueError(
                f"rank chain needs {2 * len(self.m) + 1} entries, got {len(self.r)}")
        if self.r[0] != 1 or self.r[-1] != 1:
            raise ValueError("boundary ranks must be 1")
        if any(v < 1 for v in self.m + self.n + self.r):
            raise ValueError("factors and ranks must be positive")

    @property
    def d(self) -> int:
        return len(self.m)

    @property
    def out_width(self) -> int:
        return int(np.prod(self.m))

    @property
    def in_width(self) -> int:
        return int(np.prod(self.n))


def core_shapes(spec: TTLayerSpec) -> list:
    """Shapes (r_{k-1}, factor_k, r_k) for cores k = 1..2d."""
    shapes = []
    for k in range(1, 2 * spec.d + 1):
        f = spec.m[k - 1] if k <= spec.d else spec.n[k - spec.d - 1]
        shapes.append((spec.r[k - 1], f, spec.r[k]))
    return shapes


def spec_from_cores(cores) -> TTLayerSpec:
    """Recover the factorization plan implied by a core chain's shapes."""
    if not cores or len(cores) % 2:
        raise ValueError("need an even, positive number of cores")
    d = len(cores) // 2
    m = tuple(int(g.shape[1]) for g in cores[:d])
    n = tuple(int(g.shape[1]) for g in cores[d:])
    r = (int(cores[0].shape[0]),) + tuple(int(g.shape[2]) for g in cores)
    return TTLayerSpec(m, n, r)


def _check_cores(spec: TTLayerSpec, cores) -> None:
    want = core_shapes(spec)
    if len(cores) != len(want):
        raise ValueError(f"expected {len(want)} cores, got {len(cores)}")
    for i, (g, s) in enumerate(zip(cores, want)):
        if tuple(g.shape) != s:
            raise ValueError(f"core {i + 1} has shape {tuple(g.shape)}, want {s}")
        if not np.isfinite(g).all():
            raise ValueError(f"core {i + 1} contains non-finite entries")


def compression_ratio(spec: TTLayerSpec) -> float:
    """Dense parameter count (M*N) over TT core parameter count."""
    total = sum(int(np.prod(s)) for s in core_shapes(spec))
    return spec.out_width * spec.in_width / total


def tt_init(spec: TTLayerSpec, rng):
    """Gaussian cores calibrated so the reconstructed W has entrywise
    sample variance 2/(M+N), a Glorot-style fan rule.

    Rescaling all 2d cores by a common factor c scales W by c^(2d) and
    its variance by c^(4d), so a single calibration pass after the
    initial draw lands the target exactly.
    """
    gen = rng.generator() if isinstance(rng, RngStream) else rng
    d = spec.d
    target = 2.0 / (spec.out_width + spec.in_width)
    std0 = (target / float(np.prod(spec.r))) ** (1.0 / (4 * d))
    cores = [gen.standard_normal(s) * std0 for s in core_shapes(spec)]
    v = float(reconstruct_full(cores, spec).var())
    if v > 0.0:
        scale = (target / v) ** (1.0 / (4 * d))
        cores = [g * scale for g in cores]
    return cores


def reconstruct_full(cores, spec: TTLayerSpec | None = None) -> np.ndarray:
    """Exact dense W: contract the rank chain and reshape to M x N with
    the first output/input factors varying slowest."""
    spec = spec_from_cores(cores) if spec is None else spec
    _check_cores(spec, cores)
    t = cores[0][0]  # leading boundary rank is 1
    for g in cores[1:]:
        t = np.tensordot(t, g, axes=([-1], [0]))
    t = t[..., 0]  # trailing boundary rank is 1
    return np.ascontiguousarray(t.reshape(spec.out_width, spec.in_width))


def _quantized_cores(cores, policy: PrecisionPolicy | None):
    """Weight-bit view of each core, quantized in its (r_left, f * r_right)
    matricization; the cores themselves when no policy is active."""
    if policy is None:
        return list(cores)
    spec = policy.spec_for("weight")
    out = []
    for g in cores:
        q = dequantize(quantize(np.ascontiguousarray(g.reshape(g.shape[0], -1)), spec))
        out.append(q.reshape(g.shape))
    return out


def build_partials(cores, policy: PrecisionPolicy | None = None, *,
                   counter=None, spec: TTLayerSpec | None = None):
    """Contract the half-chains into A (r_d x M) and B (N x r_d).

    Under a policy the cores are first quantized at weight bits, but the
    chain contractions run in full precision; A and B are quantized later,
    as operands of the two activation-path GEMMs.
    """
    spec = spec_from_cores(cores) if spec is None else spec
    _check_cores(spec, cores)
    d = spec.d
    qc = _quantized_cores(cores, policy)
    t = qc[0][0]  # (m_1, r_1)
    for k in range(1, d):
        if counter is not None:
            counter.add(int(np.prod(t.shape[:-1])), t.shape[-1],
                        int(np.prod(qc[k].shape[1:])))
        t = np.tensordot(t, qc[k], axes=([-1], [0]))
    a_mat = np.ascontiguousarray(t.reshape(spec.out_width, spec.r[d]).T)
    t = qc[-1][..., 0]  # (r_{2d-1}, n_d)
    for k in range(2 * d - 2, d - 1, -1):
        if counter is not None:
            counter.add(int(np.prod(qc[k].shape[:2])), qc[k].shape[2],
                        int(np.prod(t.shape[1:])))
        t = np.tensordot(qc[k], t, axes=([-1], [0]))
    b_mat = np.ascontiguousarray(t.reshape(spec.r[d], spec.in_width).T)
    return a_mat, b_mat


def forward_prs(cores, x: np.ndarray, policy: PrecisionPolicy | None = None, *,
                counter=None, spec: TTLayerSpec | None = None, partials=None):
    """Partial-reconstruction forward: Y = (X B) A.

    ``partials`` accepts an (A, B) pair from ``build_partials`` so one
    optimizer step can share the contracted half-chains between forward
    and backward.
    """
    spec = spec_from_cores(cores) if spec is None else spec
    if x.ndim != 2 or x.shape[1] != spec.in_width:
        raise ValueError(f"input width {x.shape[-1]} != {spec.in_width}")
    if partials is None:
        partials = build_partials(cores, policy, counter=counter, spec=spec)
    a_mat, b_mat = partials
    z = gemm(x, b_mat, policy=policy, counter=counter)
    return gemm(z, a_mat, policy=policy, counter=counter)


def forward_sequential(cores, x: np.ndarray, policy: PrecisionPolicy | None = None, *,
                       counter=None, spec: TTLayerSpec | None = None):
    """Contract x with core 2d, then 2d-1, down to core 1.

    Exactly 2d matrix contractions.  When a policy is active both
    operands of every contraction are quantized (the running carry at
    activation bits, the core at weight bits) and products accumulate in
    full precision, so the activation crosses 2d quantized hops.
    """
    spec = spec_from_cores(cores) if spec is None else spec
    _check_cores(spec, cores)
    d = spec.d
    if x.ndim != 2 or x.shape[1] != spec.in_width:
        raise ValueError(f"input width {x.shape[-1]} != {spec.in_width}")
    batch = x.shape[0]
    carry = np.ascontiguousarray(x).reshape((batch,) + spec.n)
    # Input half, k = 2d..d+1: fold away n_{k-d} together with the rank
    # axis linking to the previous step.
    for k in range(2 * d, d, -1):
        g = cores[k - 1]
        if k == 2 * d:
            rhs = np.ascontiguousarray(g[:, :, 0].T)
            lead = carry.shape[:-1]
        else:
            rhs = np.ascontiguousarray(g.transpose(1, 2, 0).reshape(-1, g.shape[0]))
            lead = carry.shape[:-2]
        out = gemm(carry.reshape(-1, rhs.shape[0]), rhs,
                   policy=policy, counter=counter)
        carry = out.reshape(lead + (g.shape[0],))
    # Output half, k = d..1: each step consumes the open rank axis and
    # appends (m_k, r_{k-1}), so factors accumulate as m_d, ..., m_1.
    for k in range(d, 0, -1):
        g = cores[k - 1]
        rhs = np.ascontiguousarray(g.transpose(2, 1, 0).reshape(g.shape[2], -1))
        out = gemm(carry.reshape(-1, carry.shape[-1]), rhs,
                   policy=policy, counter=counter)
        carry = out.reshape(carry.shape[:-1] + (g.shape[1], g.shape[0]))
    carry = carry[..., 0]
    perm = (0,) + tuple(range(d, 0, -1))
    return np.ascontiguousarray(carry.transpose(perm).reshape(batch, spec.out_width))


def _prefix_chain(cores_out):
    """Left folds of the output half: entry k has shape (m_1..m_k, r_k)."""
    prefixes = [np.ones(())]
    t = cores_out[0][0]
    prefixes.append(t)
    for g in cores_out[1:]:
        t = np.tensordot(t, g, axes=([-1], [0]))
        prefixes.append(t)
    return prefixes


def _suffix_chain(cores_in):
    """Right folds of the input half: entry j (0-based) has shape
    (r_{d+j}, n_{j+1}..n_d); entry d is a scalar seed."""
    d = len(cores_in)
    suffixes = [None] * (d + 1)
    suffixes[d] = np.ones(())
    t = cores_in[-1][..., 0]
    suffixes[d - 1] = t
    for j in range(d - 2, -1, -1):
        t = np.tensordot(cores_in[j], t, axes=([-1], [0]))
        suffixes[j] = t
    return suffixes


def backward(cores, x: np.ndarray, upstream: np.ndarray,
             policy: PrecisionPolicy | None = None, *,
             counter=None, spec: TTLayerSpec | None = None, partials=None):
    """Chain rule through the partial-reconstruction graph.

    With Z = X B and Y = Z A:
        dL/dZ = dY A^T,  dL/dX = (dL/dZ) B^T,
        dL/dA = Z^T dY,  dL/dB = X^T (dL/dZ).
    Core gradients follow by contracting dL/dA (resp. dL/dB) against the
    other cores of the same half-chain, exactly mirroring how A and B are
    built.  Under a policy, gradient operands are quantized at gradient
    bits, reused activations at activation bits, A and B at weight bits;
    the straight-through convention treats the core quantizer as identity
    so the assembly chains use the quantized core values.

    ``partials`` may be (A, B) or (A, B, Z) from the matching forward
    call.  Returns (dL/dX, [dL/dG^(1), ..., dL/dG^(2d)]).
    """
    spec = spec_from_cores(cores) if spec is None else spec
    _check_cores(spec, cores)
    d = spec.d
    if x.ndim != 2 or x.shape[1] != spec.in_width:
        raise ValueError(f"input width {x.shape[-1]} != {spec.in_width}")
    if upstream.shape != (x.shape[0], spec.out_width):
        raise ValueError(
            f"upstream shape {tuple(upstream.shape)} != "
            f"{(x.shape[0], spec.out_width)}")
    z = None
    if partials is None:
        a_mat, b_mat = build_partials(cores, policy, counter=counter, spec=spec)
    elif len(partials) == 3:
        a_mat, b_mat, z = partials
    else:
        a_mat, b_mat = partials
    if z is None:
        z = gemm(x, b_mat, policy=policy, counter=counter)
    gz = gemm(upstream, a_mat, transpose_b=True, policy=policy,
              kind_a="gradient", kind_b="weight", counter=counter)
    dx = gemm(gz, b_mat, transpose_b=True, policy=policy,
              kind_a="gradient", kind_b="weight", counter=counter)
    da = gemm(z, upstream, transpose_a=True, policy=policy,
              kind_a="activation", kind_b="gradient", counter=counter)
    db = gemm(x, gz, transpose_a=True, policy=policy,
              kind_a="activation", kind_b="gradient", counter=counter)
    qc = _quantized_cores(cores, policy)
    dcores = [None] * (2 * d)

    # Output half.  Roll a fold v of dL/dA against cores k+1..d so that
    # v has shape (m_1..m_k, r_k); the gradient of core k contracts v
    # with the prefix fold of cores 1..k-1.
    da_t = np.moveaxis(np.ascontiguousarray(da).reshape((spec.r[d],) + spec.m), 0, -1)
    prefixes = _prefix_chain(qc[:d])
    v = da_t
    for k in range(d, 0, -1):
        if k == 1:
            dcores[0] = np.ascontiguousarray(v[None])
        else:
            ax = list(range(k - 1))
            dcores[k - 1] = np.ascontiguousarray(
                np.tensordot(prefixes[k - 1], v, axes=(ax, ax)))
            v = np.tensordot(v, qc[k - 1], axes=([k - 1, k], [1, 2]))

    # Input half, mirrored.  Roll a fold w of dL/dB against cores
    # d+1..d+j-1, shape (r_{d+j-1}, n_j..n_d); the gradient of core d+j
    # contracts w with the suffix fold of cores d+j+1..2d.
    db_t = np.moveaxis(np.ascontiguousarray(db).reshape(spec.n + (spec.r[d],)), -1, 0)
    suffixes = _suffix_chain(qc[d:])
    w = db_t
    for j in range(1, d + 1):
        if j == d:
            dcores[2 * d - 1] = np.ascontiguousarray(w[..., None])
        else:
            s = suffixes[j]
            dcores[d + j - 1] = np.ascontiguousarray(np.tensordot(
                w, s, axes=(list(range(2, w.ndim)), list(range(1, s.ndim)))))
            w = np.tensordot(qc[d + j - 1], w, axes=([0, 1], [0, 1]))
    return dx, dcores
