"""Grids, stochastic batches and Gaussian latent draws.

Inputs are ordered physical axes first, then latent axes: ``(x, xi)`` in
1D and ``(x, y, xi, tau)`` in 2D. Every sample carries the unnormalized
Gaussian weight ``exp(-|latent|^2 / 2)`` used by the losses.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtri

PHYSICAL_AXES = ("x", "y")
LATENT_AXES = ("xi", "tau")
LATENT_SAMPLING_MODES = ("weighted-uniform", "importance-normal")
LATENT_DRAWS = ("stratified", "random")

# Named sub-streams of the master seed. Values are part of the
# reproducibility contract; do not renumber.
STREAMS = {"init": 0, "batching": 1, "analysis": 2}


def substream(seed: int, name: str, worker: int | None = None) -> np.random.Generator:
    """Independent generator for ``name`` derived from the master ``seed``."""
    key = (STREAMS[name],) if worker is None else (STREAMS[name], int(worker))
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=key))


@dataclass(frozen=True)
class Axis:
    name: str
    lo: float
    hi: float
    count: int = 2

    def __post_init__(self):
        if self.name not in PHYSICAL_AXES + LATENT_AXES:
            raise ValueError(f"unknown axis {self.name!r}")
        if not (math.isfinite(self.lo) and math.isfinite(self.hi)) or self.hi <= self.lo:
            raise ValueError(f"axis {self.name}: need finite lo < hi, got [{self.lo}, {self.hi}]")
        if self.count < 2:
            raise ValueError(f"axis {self.name}: need at least 2 points, got {self.count}")

    @property
    def latent(self) -> bool:
        return self.name in LATENT_AXES

    @property
    def width(self) -> float:
        return self.hi - self.lo

    def nodes(self) -> np.ndarray:
        return np.linspace(self.lo, self.hi, self.count)


@dataclass(frozen=True)
class GridSpec:
    axes: tuple[Axis, ...]

    def __post_init__(self):
        names = [a.name for a in self.axes]
        if names not in (["x", "xi"], ["x", "y", "xi", "tau"]):
            raise ValueError(f"axes must be (x, xi) or (x, y, xi, tau), got {names}")

    @property
    def dim(self) -> int:
        return len(self.axes)

    @property
    def physical(self) -> tuple[Axis, ...]:
        return tuple(a for a in self.axes if not a.latent)

    @property
    def latent(self) -> tuple[Axis, ...]:
        return tuple(a for a in self.axes if a.latent)

    @classmethod
    def unit(cls, dim: int, physical_count: int, latent_count: int,
             latent_range: float = 2.0) -> "GridSpec":
        """Unit interval/square with a symmetric latent box ``[-r, r]``."""
        names = ("x", "xi") if dim == 2 else ("x", "y", "xi", "tau")
        axes = []
        for name in names:
            if name in LATENT_AXES:
                axes.append(Axis(name, -latent_range, latent_range, latent_count))
            else:
                axes.append(Axis(name, 0.0, 1.0, physical_count))
        return cls(tuple(axes))


def gaussian_weight(latent: np.ndarray) -> np.ndarray:
    """``exp(-|z|^2/2)`` per row of ``latent`` (shape (P, k))."""
    latent = np.asarray(latent, dtype=np.float64)
    return np.exp(-0.5 * np.sum(latent * latent, axis=-1))


@dataclass
class Batch:
    """Sample coordinates, their Gaussian weights, and (for grids) the mesh axes.

    For mesh batches ``points`` enumerates the tensor product in C order of
    ``axes`` so that values reshape to ``mesh_shape``.
    """

    points: np.ndarray
    weights: np.ndarray
    physical_dim: int
    axes: tuple[np.ndarray, ...] | None = None
    rng_state: dict | None = field(default=None, repr=False)

    @property
    def size(self) -> int:
        return self.points.shape[0]

    @property
    def is_mesh(self) -> bool:
        return self.axes is not None

    @property
    def mesh_shape(self) -> tuple[int, ...] | None:
        return None if self.axes is None else tuple(len(a) for a in self.axes)

    @property
    def latent(self) -> np.ndarray:
        return self.points[:, self.physical_dim:]

    @property
    def physical(self) -> np.ndarray:
        return self.points[:, :self.physical_dim]

    def latent_weight_grid(self) -> np.ndarray:
        """Gaussian weights over the latent mesh axes only (shape (R,) or (R, T))."""
        if self.axes is None:
            raise ValueError("latent weight grid is only defined for mesh batches")
        lat = np.meshgrid(*self.axes[self.physical_dim:], indexing="ij")
        return np.exp(-0.5 * sum(a * a for a in lat))


def mesh_batch(*axes) -> Batch:
    """Tensor-product batch from explicit per-axis node arrays (physical first)."""
    axes = tuple(np.asarray(a, dtype=np.float64) for a in axes)
    if len(axes) not in (2, 4):
        raise ValueError("a mesh needs 2 axes (x, xi) or 4 axes (x, y, xi, tau)")
    grids = np.meshgrid(*axes, indexing="ij")
    points = np.stack([g.ravel() for g in grids], axis=1)
    pdim = len(axes) // 2
    return Batch(points, gaussian_weight(points[:, pdim:]), pdim, axes)


def uniform_grid(spec: GridSpec) -> Batch:
    """Endpoint-inclusive tensor-product grid with Gaussian weights attached."""
    return mesh_batch(*(a.nodes() for a in spec.axes))


def trapezoid_weights(nodes: np.ndarray) -> np.ndarray:
    """Trapezoidal quadrature weights for ascending ``nodes``."""
    nodes = np.asarray(nodes, dtype=np.float64)
    d = np.diff(nodes)
    w = np.zeros_like(nodes)
    w[:-1] += d / 2
    w[1:] += d / 2
    return w


def grid_weight_sum(axis: Axis) -> float:
    """Trapezoidal estimate of ``int exp(-s^2/2) ds`` over the axis nodes."""
    nodes = axis.nodes()
    return float(np.dot(trapezoid_weights(nodes), np.exp(-0.5 * nodes * nodes)))


def stochastic_meshgrid(spec: GridSpec, batch_size: int, rng: np.random.Generator,
                        latent_sampling: str = "weighted-uniform") -> Batch:
    """Independent random samples over the physical box and the latent space.

    ``weighted-uniform`` draws latents uniformly on the latent axis ranges and
    keeps the Gaussian weight. ``importance-normal`` draws standard normal
    latents and replaces the weight with the constant that makes both modes
    estimate the same integral (up to the latent truncation).
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    if latent_sampling not in LATENT_SAMPLING_MODES:
        raise ValueError(f"latent_sampling must be one of {LATENT_SAMPLING_MODES}")
    cols = []
    for axis in spec.physical:
        cols.append(rng.uniform(axis.lo, axis.hi, size=batch_size))
    if latent_sampling == "weighted-uniform":
        for axis in spec.latent:
            cols.append(rng.uniform(axis.lo, axis.hi, size=batch_size))
    else:
        for _ in spec.latent:
            cols.append(rng.standard_normal(batch_size))
    points = np.stack(cols, axis=1)
    pdim = len(spec.physical)
    if latent_sampling == "weighted-uniform":
        weights = gaussian_weight(points[:, pdim:])
    else:
        const = math.prod(math.sqrt(2 * math.pi) / a.width for a in spec.latent)
        weights = np.full(batch_size, const)
    return Batch(points, weights, pdim, None, rng.bit_generator.state)


def gaussian_samples(count: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    """``count`` i.i.d. standard normal latents; shape (count,) or (count, 2)."""
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    if dim not in (1, 2):
        raise ValueError(f"dim must be 1 or 2, got {dim}")
    z = rng.standard_normal((count, dim))
    return z[:, 0] if dim == 1 else z


def stratified_gaussian_samples(count: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    """Latin-hypercube standard normal latents; shape (count,) or (count, 2).

    Each component takes every midpoint quantile ``ndtri((k + 1/2) / count)``
    exactly once, in an independent random order, so the marginals carry no
    sampling noise (a sign map splits exactly in half for even ``count``).
    """
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    if dim not in (1, 2):
        raise ValueError(f"dim must be 1 or 2, got {dim}")
    q = ndtri((np.arange(count) + 0.5) / count)
    z = np.stack([q[rng.permutation(count)] for _ in range(dim)], axis=1)
    return z[:, 0] if dim == 1 else z


def latent_draw(kind: str, count: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    if kind == "stratified":
        return stratified_gaussian_samples(count, dim, rng)
    if kind == "random":
        return gaussian_samples(count, dim, rng)
    raise ValueError(f"latent draw must be one of {LATENT_DRAWS}, got {kind!r}")
