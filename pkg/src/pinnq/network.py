"""The PINN network: stacked affine layers with tanh activations.

Layers are either full-rank dense or tensor-train factorized; the first
and last layers are always dense (tiny input/output widths do not factor
usefully).  Every matrix product goes through the shared ``gemm`` entry
point, so supplying a ``PrecisionPolicy`` turns the same code path into
fully quantized integer arithmetic while master parameters stay in full
precision.

Perturbation pairs for the derivative estimators travel through the net
in two modes:

* ``forward_diffquant`` quantizes the base activation and the small
  perturbation separately per layer (one extra GEMM per direction), so
  perturbations far below the base quantization step survive;
* ``forward_naivequant`` quantizes the perturbed activation jointly,
  which masks small perturbations and exists for the ablation study.

``backward`` is a hand-written reverse pass returning full-precision
gradients for the optimizer; ``forward_hyperdual`` propagates second
order Taylor components to give exact gradients and Laplacians as a
reference oracle.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from ._gemm import gemm
from .smx import PrecisionPolicy
from .tensor import RngStream
from .tt import (
    TTLayerSpec,
    backward as tt_backward,
    build_partials,
    forward_sequential as tt_forward_sequential,
    reconstruct_full,
    tt_init,
)

__all__ = [
    "NetworkConfig",
    "DenseLayer",
    "TTLayer",
    "PerturbedBatch",
    "ForwardCache",
    "init_params",
    "flatten_params",
    "forward",
    "forward_diffquant",
    "forward_naivequant",
    "forward_hyperdual",
    "backward",
    "save_checkpoint",
    "load_checkpoint",
]


@dataclass(frozen=True)
class NetworkConfig:
    """Architecture plan: depth affine layers, tanh between them.

    ``tt`` tensorizes the hidden width-by-width layers only; ``tt_scheme``
    picks the contraction scheme those layers use in the forward pass
    ("prs" or "sequential").
    """

    input_dim: int
    width: int = 256
    depth: int = 4
    output_dim: int = 1
    tt: TTLayerSpec | None = None
    tt_scheme: str = "prs"

    def __post_init__(self):
        if self.depth < 2:
            raise ValueError("need at least input and output layers")
        if min(self.input_dim, self.width, self.output_dim) < 1:
            raise ValueError("dimensions must be positive")
        if self.tt_scheme not in ("prs", "sequential"):
            raise ValueError(f"unknown tt scheme {self.tt_scheme!r}")
        if self.tt is not None:
            if self.tt.out_width != self.width or self.tt.in_width != self.width:
                raise ValueError(
                    f"TT factorization is {self.tt.out_width}x{self.tt.in_width}, "
                    f"hidden layers are {self.width}x{self.width}")
            if self.depth < 3:
                raise ValueError("no hidden layers to tensorize at depth < 3")

    def layer_dims(self) -> list:
        dims = [self.input_dim] + [self.width] * (self.depth - 1) + [self.output_dim]
        return list(zip(dims[:-1], dims[1:]))


@dataclass
class DenseLayer:
    w: np.ndarray  # (out_dim, in_dim)
    b: np.ndarray  # (out_dim,)


@dataclass
class TTLayer:
    spec: TTLayerSpec
    cores: list
    b: np.ndarray  # (out_dim,)


@dataclass
class PerturbedBatch:
    """Final outputs of a perturbed forward: u(x), u(x+d)-u(x), u(x)-u(x-d).

    Deltas carry a leading direction axis when the input deltas did.
    """

    base: np.ndarray
    delta_plus: np.ndarray
    delta_minus: np.ndarray


@dataclass
class ForwardCache:
    """Everything backward needs from the matching forward call."""

    inputs: list                      # per-layer input activations
    tt_partials: dict = field(default_factory=dict)  # layer idx -> (A, B, Z)


def init_params(config: NetworkConfig, rng: RngStream) -> list:
    """Glorot-normal dense weights / calibrated TT cores, zero biases.

    Each layer draws from its own child stream, so parameters are
    reproducible regardless of evaluation order.
    """
    layers = []
    for l, (fan_in, fan_out) in enumerate(config.layer_dims()):
        child = rng.child(l + 1)
        hidden = 0 < l < config.depth - 1
        if config.tt is not None and hidden:
            layers.append(TTLayer(spec=config.tt,
                                  cores=tt_init(config.tt, child),
                                  b=np.zeros(fan_out)))
        else:
            std = math.sqrt(2.0 / (fan_in + fan_out))
            w = child.generator().standard_normal((fan_out, fan_in)) * std
            layers.append(DenseLayer(w=w, b=np.zeros(fan_out)))
    return layers


def flatten_params(layers) -> list:
    """Parameter arrays in a fixed order (per layer: weight(s), then bias).

    Returns references, not copies: the optimizer updates these in place.
    """
    flat = []
    for layer in layers:
        if isinstance(layer, DenseLayer):
            flat.append(layer.w)
        else:
            flat.extend(layer.cores)
        flat.append(layer.b)
    return flat


def flatten_grads(grads) -> list:
    flat = []
    for g in grads:
        flat.extend(g)
    return flat


def _in_width(layer) -> int:
    return layer.w.shape[1] if isinstance(layer, DenseLayer) else layer.spec.in_width


def _out_width(layer) -> int:
    return layer.w.shape[0] if isinstance(layer, DenseLayer) else layer.spec.out_width


def _check_input(layers, x):
    if x.ndim != 2 or x.shape[1] != _in_width(layers[0]):
        raise ValueError(
            f"input has shape {tuple(x.shape)}, expected (batch, {_in_width(layers[0])})")


def _affine(layer, x, policy, counter, scheme, partials=None, bias=True):
    """One affine map y = x W^T + b through whichever layer kind.

    ``partials`` short-circuits TT partial-reconstruction with shared
    (A, B); the bias add always runs in full precision.
    """
    if isinstance(layer, DenseLayer):
        y = gemm(x, layer.w, transpose_b=True, policy=policy, counter=counter)
    elif scheme == "sequential":
        y = tt_forward_sequential(layer.cores, x, policy,
                                  counter=counter, spec=layer.spec)
    else:
        if partials is None:
            partials = build_partials(layer.cores, policy,
                                      counter=counter, spec=layer.spec)
        a_mat, b_mat = partials
        z = gemm(x, b_mat, policy=policy, counter=counter)
        y = gemm(z, a_mat, policy=policy, counter=counter)
    return y + layer.b if bias else y


def forward(layers, x: np.ndarray, policy: PrecisionPolicy | None = None, *,
            counter=None, scheme: str = "prs", keep_cache: bool = False):
    """Run the network; returns (u, cache) with cache None unless kept.

    The cache stores each layer's input activation (the tanh outputs),
    which is exactly what the reverse pass needs: tanh' = 1 - tanh^2.
    """
    _check_input(layers, x)
    cache = ForwardCache(inputs=[]) if keep_cache else None
    h = x
    last = len(layers) - 1
    for l, layer in enumerate(layers):
        if keep_cache:
            cache.inputs.append(h)
        partials = None
        if isinstance(layer, TTLayer) and scheme == "prs":
            partials = build_partials(layer.cores, policy,
                                      counter=counter, spec=layer.spec)
            a_mat, b_mat = partials
            z = gemm(h, b_mat, policy=policy, counter=counter)
            y = gemm(z, a_mat, policy=policy, counter=counter) + layer.b
            if keep_cache:
                cache.tt_partials[l] = (a_mat, b_mat, z)
        else:
            y = _affine(layer, h, policy, counter, scheme)
        h = y if l == last else np.tanh(y)
    return h, cache


def _stack(delta):
    """Normalize a delta tensor to (S, batch, dim); remember if it was flat."""
    if delta.ndim == 2:
        return delta[None], False
    if delta.ndim == 3:
        return delta, True
    raise ValueError(f"delta must be 2-D or 3-D, got shape {tuple(delta.shape)}")


def _affine_stacked(layer, d3, policy, counter, scheme, partials=None):
    """Affine map (no bias) of a (S, batch, in) stack, flattened per GEMM."""
    s, b, _ = d3.shape
    out = _affine(layer, np.ascontiguousarray(d3).reshape(s * b, -1),
                  policy, counter, scheme, partials=partials, bias=False)
    return out.reshape(s, b, -1)


def forward_diffquant(layers, x: np.ndarray,
                      delta_plus: np.ndarray, delta_minus: np.ndarray,
                      policy: PrecisionPolicy | None = None, *,
                      counter=None, scheme: str = "prs") -> PerturbedBatch:
    """Perturbed forward that quantizes base and perturbation separately.

    Per affine layer: Y = Q(X) W^T + b and D = Q(delta) W^T, so the
    perturbed image is Y + D without ever quantizing X + delta jointly.
    Per tanh layer the deltas are re-derived from activated outputs:
    delta_plus' = tanh(Y + D+) - tanh(Y), delta_minus' = tanh(Y) -
    tanh(Y - D-).  Antithetic callers may pass the same array for both
    deltas; the first layer then runs one shared delta GEMM.

    Deltas may be (batch, dim) or stacked (S, batch, dim); outputs match.
    """
    _check_input(layers, x)
    dp, stacked = _stack(delta_plus)
    dm, _ = _stack(delta_minus)
    if dp.shape[1:] != x.shape or dm.shape[1:] != x.shape:
        raise ValueError("delta shape does not match input batch")
    shared = delta_plus is delta_minus
    h = x
    last = len(layers) - 1
    for l, layer in enumerate(layers):
        partials = None
        if isinstance(layer, TTLayer) and scheme == "prs":
            partials = build_partials(layer.cores, policy,
                                      counter=counter, spec=layer.spec)
        y = _affine(layer, h, policy, counter, scheme, partials=partials)
        gp = _affine_stacked(layer, dp, policy, counter, scheme, partials=partials)
        if shared and l == 0:
            gm = gp
        else:
            gm = _affine_stacked(layer, dm, policy, counter, scheme,
                                 partials=partials)
        if l == last:
            h, dp, dm = y, gp, gm
        else:
            t = np.tanh(y)
            dp = np.tanh(y[None] + gp) - t[None]
            dm = t[None] - np.tanh(y[None] - gm)
            h = t
    if not stacked:
        dp, dm = dp[0], dm[0]
    return PerturbedBatch(base=h, delta_plus=dp, delta_minus=dm)


def forward_naivequant(layers, x: np.ndarray,
                       delta_plus: np.ndarray, delta_minus: np.ndarray,
                       policy: PrecisionPolicy | None = None, *,
                       counter=None, scheme: str = "prs") -> PerturbedBatch:
    """Perturbed forward that quantizes X + delta as one tensor.

    Three independent chains (base, plus, minus); small perturbations are
    frequently masked to zero by the shared-exponent grid of the base
    activation.  Kept for the ablation study.
    """
    _check_input(layers, x)
    dp, stacked = _stack(delta_plus)
    dm, _ = _stack(delta_minus)
    if dp.shape[1:] != x.shape or dm.shape[1:] != x.shape:
        raise ValueError("delta shape does not match input batch")
    u, _ = forward(layers, x, policy, counter=counter, scheme=scheme)
    s, b, _ = dp.shape

    def chain(x3):
        y, _ = forward(layers, np.ascontiguousarray(x3).reshape(s * b, -1),
                       policy, counter=counter, scheme=scheme)
        return y.reshape(s, b, -1)

    up = chain(x[None] + dp)
    um = chain(x[None] - dm)
    dpo = up - u[None]
    dmo = u[None] - um
    if not stacked:
        dpo, dmo = dpo[0], dmo[0]
    return PerturbedBatch(base=u, delta_plus=dpo, delta_minus=dmo)


def backward(layers, cache: ForwardCache, dl_du: np.ndarray,
             policy: PrecisionPolicy | None = None, *, counter=None):
    """Reverse pass from dL/du to parameter gradients and dL/dx.

    Gradient-path GEMM operands are quantized at gradient bits when a
    policy is active; returned gradients are full precision.  ``grads``
    mirrors ``flatten_params`` order per layer: weight(s), then bias.
    """
    if cache is None or len(cache.inputs) != len(layers):
        raise ValueError("cache does not match this parameter stack")
    if dl_du.shape != (cache.inputs[0].shape[0], _out_width(layers[-1])):
        raise ValueError(
            f"upstream gradient has shape {tuple(dl_du.shape)}, expected "
            f"{(cache.inputs[0].shape[0], _out_width(layers[-1]))}")
    grads = [None] * len(layers)
    g = dl_du
    for l in range(len(layers) - 1, -1, -1):
        layer = layers[l]
        h = cache.inputs[l]
        if h.shape[0] != g.shape[0]:
            raise ValueError("cache batch size does not match upstream gradient")
        db = g.sum(axis=0)
        if isinstance(layer, DenseLayer):
            dw = gemm(g, h, transpose_a=True, policy=policy,
                      kind_a="gradient", kind_b="activation", counter=counter)
            dx = gemm(g, layer.w, policy=policy,
                      kind_a="gradient", kind_b="weight", counter=counter)
            grads[l] = [dw, db]
        else:
            dx, dcores = tt_backward(layer.cores, h, g, policy,
                                     counter=counter, spec=layer.spec,
                                     partials=cache.tt_partials.get(l))
            grads[l] = list(dcores) + [db]
        if l > 0:
            # h is a tanh output, so the local derivative is exact
            g = dx * (1.0 - h * h)
    return grads, dx


def forward_hyperdual(layers, x: np.ndarray, dims=None):
    """Exact value, gradient, and Laplacian via second-order forward mode.

    Propagates (value, first, second) Taylor components along the
    requested coordinate directions at once (default: all of them), in
    full precision; TT layers contract through their reconstructed dense
    matrix, which is exact.  Returns (u: batch x 1, grad: batch x D with
    zeros at unrequested coordinates, lap over the requested coordinates:
    batch x 1).
    """
    _check_input(layers, x)
    batch, dim = x.shape
    if dims is None:
        dims = tuple(range(dim))
    else:
        dims = tuple(int(v) for v in dims)
        if len(set(dims)) != len(dims) or min(dims) < 0 or max(dims) >= dim:
            raise ValueError(f"invalid direction set {dims} for input dim {dim}")
    v = x
    d1 = np.broadcast_to(np.eye(dim)[list(dims), None, :],
                         (len(dims), batch, dim)).copy()
    d2 = np.zeros((len(dims), batch, dim))
    last = len(layers) - 1
    for l, layer in enumerate(layers):
        w = layer.w if isinstance(layer, DenseLayer) else reconstruct_full(
            layer.cores, layer.spec)
        v = v @ w.T + layer.b
        d1 = d1 @ w.T
        d2 = d2 @ w.T
        if l != last:
            t = np.tanh(v)
            s = 1.0 - t * t
            d2 = s[None] * d2 - (2.0 * t * s)[None] * d1 * d1
            d1 = s[None] * d1
            v = t
    grad = np.zeros((batch, dim))
    grad[:, list(dims)] = d1[..., 0].T
    return v, grad, d2[..., 0].sum(axis=0)[:, None]


_CKPT_VERSION = 1


def _config_to_dict(config: NetworkConfig) -> dict:
    d = {
        "input_dim": config.input_dim,
        "width": config.width,
        "depth": config.depth,
        "output_dim": config.output_dim,
        "tt": None,
        "tt_scheme": config.tt_scheme,
    }
    if config.tt is not None:
        d["tt"] = {"m": list(config.tt.m), "n": list(config.tt.n),
                   "r": list(config.tt.r)}
    return d


def config_from_dict(d: dict) -> NetworkConfig:
    tt = d.get("tt")
    spec = None
    if tt is not None:
        spec = TTLayerSpec(m=tuple(tt["m"]), n=tuple(tt["n"]), r=tuple(tt["r"]))
    return NetworkConfig(input_dim=int(d["input_dim"]), width=int(d["width"]),
                         depth=int(d["depth"]), output_dim=int(d["output_dim"]),
                         tt=spec, tt_scheme=d.get("tt_scheme", "prs"))


def save_checkpoint(path, config: NetworkConfig, layers) -> None:
    """Single-file checkpoint: JSON header plus raw float64 arrays.

    Loading restores bit-identical parameters; the header records layer
    kinds so the structure round-trips without the original config object.
    """
    manifest = []
    arrays = []
    for layer in layers:
        if isinstance(layer, DenseLayer):
            manifest.append({"kind": "dense", "w": list(layer.w.shape)})
            arrays.extend([layer.w, layer.b])
        else:
            manifest.append({"kind": "tt",
                             "m": list(layer.spec.m), "n": list(layer.spec.n),
                             "r": list(layer.spec.r)})
            arrays.extend(layer.cores)
            arrays.append(layer.b)
    header = json.dumps({"version": _CKPT_VERSION,
                         "config": _config_to_dict(config),
                         "layers": manifest},
                        sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(b"PINNCKPT")
        f.write(np.asarray(len(header), dtype="<u4").tobytes())
        f.write(header)
        for a in arrays:
            a = np.ascontiguousarray(a, dtype="<f8")
            f.write(np.asarray(a.ndim, dtype="u1").tobytes())
            f.write(np.asarray(a.shape, dtype="<i8").tobytes())
            f.write(a.tobytes())


def load_checkpoint(path):
    """Inverse of save_checkpoint; returns (config, layers)."""
    with open(path, "rb") as f:
        blob = f.read()
    buf = io.BytesIO(blob)
    if buf.read(8) != b"PINNCKPT":
        raise ValueError("not a checkpoint file")
    hlen = int(np.frombuffer(buf.read(4), dtype="<u4")[0])
    header = json.loads(buf.read(hlen).decode())
    if header["version"] != _CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {header['version']}")

    def read_array():
        ndim = int(np.frombuffer(buf.read(1), dtype="u1")[0])
        shape = tuple(np.frombuffer(buf.read(8 * ndim), dtype="<i8").tolist())
        n = int(np.prod(shape)) if shape else 1
        return np.frombuffer(buf.read(8 * n), dtype="<f8").reshape(shape).copy()

    layers = []
    for entry in header["layers"]:
        if entry["kind"] == "dense":
            w = read_array()
            b = read_array()
            layers.append(DenseLayer(w=w, b=b))
        else:
            spec = TTLayerSpec(m=tuple(entry["m"]), n=tuple(entry["n"]),
                               r=tuple(entry["r"]))
            cores = [read_array() for _ in range(2 * spec.d)]
            b = read_array()
            layers.append(TTLayer(spec=spec, cores=cores, b=b))
    return config_from_dict(header["config"]), layers
