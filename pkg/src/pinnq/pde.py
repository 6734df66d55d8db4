"""Benchmark problem definitions: samplers, losses, references, metrics.

Three benchmarks are provided, each as a :class:`PDEProblem` bundle of
samplers, a residual operator over estimated derivatives, a boundary
mismatch operator, and a reference solution:

* ``poisson2d``: -lap u = sin(x1+x2) on the unit square, written as the
  residual lap u + sin(x1+x2); reference u*(x) = sin(x1+x2)/2.
* ``hjb20d``: du/dt + lap u - |grad u|^2/2 + 2 = 0 on [0,1]^20 x [0,1]
  with terminal value ||x||_1 at t = 1.  The reference follows from the
  Cole-Hopf substitution v = exp(-u/2): v solves v_t + lap v = v, and
  e^{1-t} v solves the backward heat equation, giving

      u(x,t) = 2(1-t) - 2 ln E[exp(-||x + sqrt(2(1-t)) Z||_1 / 2)]

  with Z standard normal, evaluated by seeded Monte Carlo and cached on
  disk keyed by the point set content, the MC seed, and the draw count.
* ``heat100d``: du/dt = lap u on the unit ball in 100 dimensions with
  initial value ||x||^2/(2N) and sphere value t + 1/(2N); reference
  u*(x,t) = ||x||^2/(2N) + t.

Conventions: the time coordinate, when present, is the last input
column; residual operators consume a :class:`ResidualParts` container so
the same operator runs on estimated or exact derivatives.
"""

import hashlib
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .network import forward
from .stein import (
    MLPFunction,
    SteinConfig,
    estimate_derivatives,
    estimate_time_derivative,
    sample_deltas,
)
from .tensor import RngStream

__all__ = [
    "ResidualParts",
    "EstimatorDraw",
    "LossWeights",
    "Metrics",
    "PDEProblem",
    "poisson2d",
    "hjb20d",
    "heat100d",
    "sample_unit_ball",
    "sample_unit_sphere",
    "hjb_reference",
    "default_cache_dir",
    "estimate_residual_parts",
    "exact_residual_parts",
    "residual_loss",
    "boundary_loss",
    "total_loss",
    "evaluate_metrics",
    "poisson_eval_grid",
    "default_eval_set",
    "EVAL_SEED",
]

EVAL_SEED = 7


@dataclass
class ResidualParts:
    """Derivative pieces a residual operator consumes.

    ``gradient`` spans all input columns but is zero at any coordinate
    that was not differentiated (for time-dependent problems the time
    column, whose derivative arrives separately in ``time_derivative``).
    ``laplacian`` sums second derivatives over spatial coordinates only.
    """

    u: np.ndarray
    gradient: np.ndarray
    laplacian: np.ndarray
    time_derivative: Optional[np.ndarray] = None


@dataclass
class EstimatorDraw:
    """The perturbation sets one residual estimate consumed, so a caller
    can rebuild per-evaluation weights from the identical draw."""

    space: np.ndarray
    time: Optional[np.ndarray] = None


@dataclass(frozen=True)
class LossWeights:
    """Loss term weights and per-iteration point counts."""

    w_c: float = 1.0
    w_b: float = 100.0
    w_d: float = 0.0
    n_c: int = 128
    n_b: int = 128
    n_d: int = 0

    def __post_init__(self):
        for name in ("w_c", "w_b", "w_d"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if not (self.w_c > 0 or self.w_b > 0 or self.w_d > 0):
            raise ValueError("at least one loss weight must be positive")
        for wname, nname in (("w_c", "n_c"), ("w_b", "n_b"), ("w_d", "n_d")):
            n = getattr(self, nname)
            if n < 0:
                raise ValueError(f"{nname} must be nonnegative")
            if getattr(self, wname) > 0 and n == 0:
                raise ValueError(f"{nname} must be positive when {wname} > 0")


@dataclass(frozen=True)
class Metrics:
    """Error summary over a fixed evaluation set."""

    mse: float
    l1_rel: float
    l2_rel: float


@dataclass
class PDEProblem:
    """A benchmark: domain and boundary samplers, residual and boundary
    operators, and the reference solution evaluator.

    Samplers map (count, rng) to point arrays of shape (count, input
    dim); operators and the reference are vectorized over rows.
    """

    name: str
    spatial_dim: int
    time_dependent: bool
    sample_domain: Callable
    sample_boundary: Callable
    residual: Callable
    boundary: Callable
    reference: Callable
    contains: Callable

    @property
    def input_dim(self) -> int:
        return self.spatial_dim + (1 if self.time_dependent else 0)


def _gen(rng):
    return rng.generator() if isinstance(rng, RngStream) else rng


def sample_unit_sphere(n: int, dim: int, rng) -> np.ndarray:
    """Uniform points on the unit sphere via normalized Gaussians."""
    z = _gen(rng).standard_normal((n, dim))
    return z / np.linalg.norm(z, axis=1, keepdims=True)


def sample_unit_ball(n: int, dim: int, rng) -> np.ndarray:
    """Uniform points in the unit ball.

    Direction uniform on the sphere, radius U^(1/dim); sampling the
    radius uniformly instead would pile essentially all mass at the
    center in high dimension, since ball volume scales like r^dim.
    """
    gen = _gen(rng)
    z = gen.standard_normal((n, dim))
    direction = z / np.linalg.norm(z, axis=1, keepdims=True)
    r = gen.uniform(0.0, 1.0, n) ** (1.0 / dim)
    return direction * r[:, None]


# --------------------------------------------------------------------
# Poisson, 2-D


def _poisson_sample_domain(n, rng):
    return _gen(rng).uniform(0.0, 1.0, (n, 2))


def _poisson_sample_boundary(n, rng):
    gen = _gen(rng)
    edge = gen.integers(0, 4, n)
    pos = gen.uniform(0.0, 1.0, n)
    x = np.empty((n, 2))
    x[:, 0] = np.choose(edge, [pos, np.ones(n), pos, np.zeros(n)])
    x[:, 1] = np.choose(edge, [np.zeros(n), pos, np.ones(n), pos])
    return x


def _poisson_target(x):
    return 0.5 * np.sin(x[:, :1] + x[:, 1:2])


def poisson2d() -> PDEProblem:
    """Poisson problem on the unit square with g(x) = -sin(x1 + x2)."""
    return PDEProblem(
        name="poisson2d",
        spatial_dim=2,
        time_dependent=False,
        sample_domain=_poisson_sample_domain,
        sample_boundary=_poisson_sample_boundary,
        residual=lambda x, parts: parts.laplacian + np.sin(x[:, :1] + x[:, 1:2]),
        boundary=lambda x, u: u - _poisson_target(x),
        reference=_poisson_target,
        contains=lambda x: np.all((x >= 0.0) & (x <= 1.0), axis=1),
    )


# --------------------------------------------------------------------
# Hamilton-Jacobi-Bellman, 20-D


_HJB_DIM = 20


def default_cache_dir() -> Path:
    env = os.environ.get("PINNQ_CACHE")
    if env:
        return Path(env)
    return Path.home() / ".cache" / "pinnq"


_hjb_z_slot: dict = {}


def _hjb_draws(mc_seed: int, draws: int) -> np.ndarray:
    # One Gaussian draw table serves every finite-difference stencil
    # evaluation of the same reference; keep only the latest to bound
    # memory (a 1e5-draw table is 16 MB).
    key = (int(mc_seed), int(draws))
    if _hjb_z_slot.get("key") != key:
        _hjb_z_slot["key"] = key
        _hjb_z_slot["z"] = np.random.default_rng(mc_seed).standard_normal(
            (draws, _HJB_DIM))
    return _hjb_z_slot["z"]


def _hjb_cache_path(cache_dir, x, mc_seed, draws) -> Path:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(x).tobytes())
    h.update(repr((x.shape, int(mc_seed), int(draws))).encode())
    return Path(cache_dir) / f"hjb-{h.hexdigest()[:20]}.npz"


def hjb_reference(x: np.ndarray, *, mc_seed: int = 0, draws: int = 100000,
                  cache_dir=None, return_stderr: bool = False):
    """Cole-Hopf Monte Carlo reference for the HJB benchmark.

    u(x,t) = 2(1-t) - 2 ln E[exp(-||x + sqrt(2(1-t)) Z||_1 / 2)]
    with one shared Z draw of shape (draws, 20) for every point (common
    random numbers, so the result is a smooth deterministic function of
    the inputs).  Results are cached on disk keyed by the point-set
    content hash, the seed, and the draw count; a missing or unreadable
    cache entry is recomputed.  The standard error comes from the delta
    method: sd(u) = 2 sd(w) / (mean(w) sqrt(draws)).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != _HJB_DIM + 1:
        raise ValueError(f"expected (n, {_HJB_DIM + 1}) points, got {x.shape}")
    cache_dir = Path(cache_dir) if cache_dir is not None else default_cache_dir()
    path = _hjb_cache_path(cache_dir, x, mc_seed, draws)
    if path.exists():
        try:
            with np.load(path) as data:
                values, stderr = data["values"], data["stderr"]
            if values.shape == (len(x), 1):
                return (values, stderr) if return_stderr else values
        except (OSError, ValueError, KeyError):
            pass

    z = _hjb_draws(mc_seed, draws)
    values = np.empty((len(x), 1))
    stderr = np.empty((len(x), 1))
    chunk = max(1, int(8e6 // max(draws, 1)))
    for lo in range(0, len(x), chunk):
        xs = x[lo:lo + chunk, :_HJB_DIM]
        ts = x[lo:lo + chunk, _HJB_DIM:]
        scale = np.sqrt(2.0 * (1.0 - ts))
        a = -0.5 * np.sum(
            np.abs(xs[:, None, :] + scale[:, :, None] * z[None]), axis=2)
        m = a.max(axis=1, keepdims=True)
        w = np.exp(a - m)
        mean_w = w.mean(axis=1, keepdims=True)
        sd_w = w.std(axis=1, keepdims=True)
        values[lo:lo + chunk] = 2.0 * (1.0 - ts) - 2.0 * (m + np.log(mean_w))
        stderr[lo:lo + chunk] = 2.0 * sd_w / (mean_w * np.sqrt(draws))

    try:
        cache_dir.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=cache_dir, suffix=".npz")
        os.close(fd)
        np.savez(tmp, values=values, stderr=stderr)
        os.replace(tmp, path)
    except OSError:
        pass
    return (values, stderr) if return_stderr else values


def _hjb_sample_domain(n, rng):
    return _gen(rng).uniform(0.0, 1.0, (n, _HJB_DIM + 1))


def _hjb_sample_boundary(n, rng):
    x = np.empty((n, _HJB_DIM + 1))
    x[:, :_HJB_DIM] = _gen(rng).uniform(0.0, 1.0, (n, _HJB_DIM))
    x[:, _HJB_DIM] = 1.0
    return x


def _hjb_residual(x, parts):
    grad_sq = np.sum(parts.gradient[:, :_HJB_DIM] ** 2, axis=1, keepdims=True)
    return parts.time_derivative + parts.laplacian - 0.5 * grad_sq + 2.0


def hjb20d(mc_seed: int = 0, mc_draws: int = 100000,
           cache_dir=None) -> PDEProblem:
    """HJB problem on [0,1]^20 x [0,1] with terminal value ||x||_1."""
    def reference(pts):
        return hjb_reference(pts, mc_seed=mc_seed, draws=mc_draws,
                             cache_dir=cache_dir)

    return PDEProblem(
        name="hjb20d",
        spatial_dim=_HJB_DIM,
        time_dependent=True,
        sample_domain=_hjb_sample_domain,
        sample_boundary=_hjb_sample_boundary,
        residual=_hjb_residual,
        boundary=lambda x, u: u - np.sum(
            np.abs(x[:, :_HJB_DIM]), axis=1, keepdims=True),
        reference=reference,
        contains=lambda x: np.all((x >= 0.0) & (x <= 1.0), axis=1),
    )


# --------------------------------------------------------------------
# Heat, 100-D


_HEAT_DIM = 100


def _heat_target(x):
    r2 = np.sum(x[:, :_HEAT_DIM] ** 2, axis=1, keepdims=True)
    return r2 / (2.0 * _HEAT_DIM) + x[:, _HEAT_DIM:]


def _heat_sample_domain(n, rng):
    gen = _gen(rng)
    pts = np.empty((n, _HEAT_DIM + 1))
    pts[:, :_HEAT_DIM] = sample_unit_ball(n, _HEAT_DIM, gen)
    pts[:, _HEAT_DIM] = gen.uniform(0.0, 1.0, n)
    return pts


def _heat_sample_boundary(n, rng):
    # First half: initial slice t = 0 over the ball; second half: the
    # lateral sphere with t uniform.  Both targets are the reference.
    gen = _gen(rng)
    n_init = (n + 1) // 2
    pts = np.empty((n, _HEAT_DIM + 1))
    pts[:n_init, :_HEAT_DIM] = sample_unit_ball(n_init, _HEAT_DIM, gen)
    pts[:n_init, _HEAT_DIM] = 0.0
    pts[n_init:, :_HEAT_DIM] = sample_unit_sphere(n - n_init, _HEAT_DIM, gen)
    pts[n_init:, _HEAT_DIM] = gen.uniform(0.0, 1.0, n - n_init)
    return pts


def _heat_contains(x):
    r = np.linalg.norm(x[:, :_HEAT_DIM], axis=1)
    t = x[:, _HEAT_DIM]
    return (r <= 1.0 + 1e-9) & (t >= 0.0) & (t <= 1.0)


def heat100d() -> PDEProblem:
    """Heat equation on the 100-D unit ball; u* = ||x||^2/(2N) + t."""
    return PDEProblem(
        name="heat100d",
        spatial_dim=_HEAT_DIM,
        time_dependent=True,
        sample_domain=_heat_sample_domain,
        sample_boundary=_heat_sample_boundary,
        residual=lambda x, parts: parts.time_derivative - parts.laplacian,
        boundary=lambda x, u: u - _heat_target(x),
        reference=_heat_target,
        contains=_heat_contains,
    )


# --------------------------------------------------------------------
# Derivative assembly


def estimate_residual_parts(problem: PDEProblem, fn, x: np.ndarray,
                            cfg: SteinConfig, rng=None,
                            draw: Optional[EstimatorDraw] = None):
    """Estimated derivatives for the problem's residual at points x.

    Spatial coordinates are perturbed jointly for the gradient and
    Laplacian; the time axis, when the problem has one, is perturbed
    separately with its own K draws.  Returns the parts and the
    perturbation sets consumed (for callers that must replay them).
    ``cfg.perturbed_dims`` must be unset; the problem fixes the axes.
    """
    if cfg.perturbed_dims is not None:
        raise ValueError("perturbed_dims is determined by the problem")
    if x.shape[1] != problem.input_dim:
        raise ValueError(
            f"{problem.name} expects {problem.input_dim} columns, "
            f"got {x.shape[1]}")
    if not problem.time_dependent:
        if draw is None:
            draw = EstimatorDraw(space=sample_deltas(
                cfg, problem.input_dim, len(x), _gen(rng)))
        est = estimate_derivatives(fn, x, cfg, deltas=draw.space)
        return (ResidualParts(u=est.base, gradient=est.gradient,
                              laplacian=est.laplacian), draw)

    space_dims = tuple(range(problem.spatial_dim))
    cfg_space = SteinConfig(
        k=cfg.k, sigma=cfg.sigma, perturbed_dims=space_dims,
        share_deltas_across_batch=cfg.share_deltas_across_batch)
    cfg_time = SteinConfig(
        k=cfg.k, sigma=cfg.sigma, perturbed_dims=(problem.input_dim - 1,),
        share_deltas_across_batch=cfg.share_deltas_across_batch)
    if draw is None:
        gen = _gen(rng)
        draw = EstimatorDraw(
            space=sample_deltas(cfg_space, problem.input_dim, len(x), gen),
            time=sample_deltas(cfg_time, problem.input_dim, len(x), gen))
    est = estimate_derivatives(fn, x, cfg_space, deltas=draw.space)
    dt = estimate_time_derivative(fn, x, cfg_time, problem.input_dim - 1,
                                  deltas=draw.time)
    return (ResidualParts(u=est.base, gradient=est.gradient,
                          laplacian=est.laplacian, time_derivative=dt), draw)


def exact_residual_parts(problem: PDEProblem, fn, x: np.ndarray,
                         fd_step: float = 1e-3) -> ResidualParts:
    """Exact (or finite-difference) derivatives for oracle evaluation.

    Network adapters use second-order forward mode restricted to the
    spatial axes; plain closures use central differences, sharing the
    stencil evaluations between gradient and Laplacian.
    """
    dim = problem.input_dim
    space = tuple(range(problem.spatial_dim))
    if hasattr(fn, "hyperdual"):
        u, grad, lap = fn.hyperdual(x, dims=space)
        dt = None
        if problem.time_dependent:
            _, gt, _ = fn.hyperdual(x, dims=(dim - 1,))
            dt = gt[:, dim - 1:dim]
        return ResidualParts(u=u, gradient=grad, laplacian=lap,
                             time_derivative=dt)
    u = fn(x)
    grad = np.zeros((len(x), dim))
    lap = np.zeros((len(x), 1))
    for j in space:
        e = np.zeros((1, dim))
        e[0, j] = fd_step
        fp, fm = fn(x + e), fn(x - e)
        grad[:, j:j + 1] = (fp - fm) / (2.0 * fd_step)
        lap += (fp + fm - 2.0 * u) / fd_step ** 2
    dt = None
    if problem.time_dependent:
        e = np.zeros((1, dim))
        e[0, dim - 1] = fd_step
        dt = (fn(x + e) - fn(x - e)) / (2.0 * fd_step)
    return ResidualParts(u=u, gradient=grad, laplacian=lap,
                         time_derivative=dt)


# --------------------------------------------------------------------
# Losses and metrics


def residual_loss(problem: PDEProblem, layers, points: np.ndarray,
                  cfg: SteinConfig, policy=None, *, scheme: str = "prs",
                  mode: str = "diffquant", rng=None,
                  draw: Optional[EstimatorDraw] = None,
                  counter=None) -> float:
    """Mean squared residual at collocation points."""
    if len(points) == 0:
        raise ValueError("empty collocation set")
    fn = MLPFunction(layers, policy, scheme=scheme, mode=mode,
                     counter=counter)
    parts, _ = estimate_residual_parts(problem, fn, points, cfg, rng, draw)
    r = problem.residual(points, parts)
    return float(np.mean(r ** 2))


def boundary_loss(problem: PDEProblem, layers, points: np.ndarray,
                  policy=None, *, scheme: str = "prs",
                  counter=None) -> float:
    """Mean squared boundary (or terminal/initial) mismatch."""
    if len(points) == 0:
        raise ValueError("empty boundary set")
    u, _ = forward(layers, points, policy, counter=counter, scheme=scheme)
    return float(np.mean(problem.boundary(points, u) ** 2))


def total_loss(weights: LossWeights, parts) -> float:
    """Weighted sum of the loss pieces.

    ``parts`` maps "residual" and "boundary" (and optionally "data") to
    scalars; a missing piece with zero weight contributes nothing.
    """
    total = 0.0
    for wname, key in (("w_c", "residual"), ("w_b", "boundary"),
                       ("w_d", "data")):
        w = getattr(weights, wname)
        if w > 0:
            if key not in parts:
                raise ValueError(f"missing loss part {key!r}")
            total += w * float(parts[key])
    return total


def evaluate_metrics(layers, problem: PDEProblem, eval_set: np.ndarray, *,
                     policy=None, scheme: str = "prs",
                     reference_values: Optional[np.ndarray] = None) -> Metrics:
    """MSE and relative l1/l2 errors against the reference solution."""
    if len(eval_set) == 0:
        raise ValueError("empty evaluation set")
    u, _ = forward(layers, eval_set, policy, scheme=scheme)
    ref = (np.asarray(reference_values, dtype=np.float64)
           if reference_values is not None else problem.reference(eval_set))
    ref = ref.reshape(len(eval_set), 1)
    denom1 = np.sum(np.abs(ref))
    denom2 = np.sqrt(np.sum(ref ** 2))
    if denom1 == 0.0 or denom2 == 0.0:
        raise ValueError("reference is identically zero on the eval set")
    diff = u - ref
    return Metrics(
        mse=float(np.mean(diff ** 2)),
        l1_rel=float(np.sum(np.abs(diff)) / denom1),
        l2_rel=float(np.sqrt(np.sum(diff ** 2)) / denom2),
    )


def poisson_eval_grid() -> np.ndarray:
    """The fixed 101 x 101 uniform grid on the unit square."""
    g = np.linspace(0.0, 1.0, 101)
    xx, yy = np.meshgrid(g, g, indexing="ij")
    return np.column_stack([xx.ravel(), yy.ravel()])


def default_eval_set(problem: PDEProblem, *, n: int = 2048,
                     seed: int = EVAL_SEED) -> np.ndarray:
    """The fixed evaluation set for a problem: the Poisson grid, or n
    seeded domain points for the high-dimensional benchmarks."""
    if problem.name == "poisson2d":
        return poisson_eval_grid()
    return problem.sample_domain(n, RngStream(seed, 0))
