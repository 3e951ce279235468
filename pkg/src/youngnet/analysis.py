"""Post-training extraction: fields, pushforward histograms, barycenters,
energies and Wasserstein-2 diagnostics.

Nothing here mutates the network or touches the training random stream;
histogram latents come from the ``analysis`` sub-stream.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.interpolate import RegularGridInterpolator
from scipy.special import ndtri

from .network import PotentialNetwork
from .problems import XI, XI_1D, TAU, ProblemSpec, jet, model_input_dim
from .sampling import Batch, gaussian_weight, mesh_batch, trapezoid_weights

COMPONENTS = ("xi", "tau")
PATH_MODES = ("x-then-y", "y-then-x", "straight")

# Evaluation is chunked so peak memory stays bounded on large probe grids.
CHUNK = 65536


@dataclass(frozen=True)
class Atoms:
    """Finite discrete measure on the real line."""

    locations: tuple[float, ...]
    weights: tuple[float, ...]

    def __post_init__(self):
        if len(self.locations) != len(self.weights) or not self.locations:
            raise ValueError("need matching, non-empty locations and weights")
        if any(w < 0 for w in self.weights) or not math.isclose(sum(self.weights), 1.0, rel_tol=1e-12):
            raise ValueError("weights must be nonnegative and sum to 1")


BOLZA_MEASURE = Atoms((-1.0, 1.0), (0.5, 0.5))


@dataclass
class EmpiricalMeasure:
    anchor: tuple[float, ...]
    component: str
    samples: np.ndarray = field(repr=False)
    edges: np.ndarray = field(repr=False)
    counts: np.ndarray = field(repr=False)

    @property
    def count(self) -> int:
        return int(self.samples.size)

    def mass_near(self, center: float, radius: float = 0.25) -> float:
        return float(np.mean(np.abs(self.samples - center) <= radius))

    def well_fractions(self, radius: float = 0.25) -> tuple[float, float]:
        """Mass within ``radius`` of -1 and of +1."""
        return self.mass_near(-1.0, radius), self.mass_near(1.0, radius)

    def write_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("bin_left", "bin_right", "count"))
            for lo, hi, c in zip(self.edges[:-1], self.edges[1:], self.counts):
                w.writerow((repr(float(lo)), repr(float(hi)), int(c)))
        return path


@dataclass
class FieldGrid:
    """Field values on a physical grid: ``u`` and optionally barycenters ``V1``, ``V2``."""

    xs: np.ndarray
    u: np.ndarray
    ys: np.ndarray | None = None
    V1: np.ndarray | None = None
    V2: np.ndarray | None = None
    path_discrepancy: float | None = None

    def write_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            if self.ys is None:
                w.writerow(("x", "u"))
                for x, u in zip(self.xs, self.u):
                    w.writerow((repr(float(x)), repr(float(u))))
            else:
                cols = ["x", "y", "u"] + (["V1", "V2"] if self.V1 is not None else [])
                w.writerow(cols)
                for i, x in enumerate(self.xs):
                    for j, y in enumerate(self.ys):
                        row = [x, y, self.u[i, j]]
                        if self.V1 is not None:
                            row += [self.V1[i, j], self.V2[i, j]]
                        w.writerow([repr(float(v)) for v in row])
        return path


# ---------------------------------------------------------------------------
# derivative evaluation helpers
# ---------------------------------------------------------------------------

def _first_partials(net, points: np.ndarray) -> np.ndarray:
    """Latent gradient at each point: shape (P,) in 1D, (P, 2) in 2D."""
    dim = model_input_dim(net)
    out = []
    for lo in range(0, points.shape[0], CHUNK):
        chunk = points[lo:lo + CHUNK]
        if dim == 2:
            out.append(np.asarray(jet(net, chunk, (XI_1D,), mixed=False).da))
        else:
            j = jet(net, chunk, (XI, TAU), mixed=False)
            out.append(np.stack([np.asarray(j.da), np.asarray(j.db)], axis=1))
    return np.concatenate(out, axis=0)


def _latent_quadrature(mesh: Batch, normalized: bool) -> np.ndarray:
    """Weights over the latent mesh axes: plain ``exp(-|z|^2/2)`` (as in the
    losses) or Gaussian probabilities from trapezoid weights that sum to 1."""
    if not normalized:
        return mesh.latent_weight_grid()
    lat_axes = mesh.axes[mesh.physical_dim:]
    w = np.ones(())
    for a in lat_axes:
        w = np.multiply.outer(w, trapezoid_weights(a) * np.exp(-0.5 * a * a))
    return w / w.sum()


def _latent_mean(values: np.ndarray, w: np.ndarray, normalized: bool, nlat: int) -> np.ndarray:
    axes = tuple(range(values.ndim - nlat, values.ndim))
    if normalized:
        return np.sum(values * w, axis=axes)
    return np.mean(values * w, axis=axes)


# ---------------------------------------------------------------------------
# fields
# ---------------------------------------------------------------------------

def reconstruct_u_1d(net, grid: Batch, normalized: bool = False) -> FieldGrid:
    """``U(x_n) = (1/N) sum_{i<=n} mean_k F_xi(x_i, xi_k) w_k`` on an ascending x grid.

    ``normalized=True`` replaces the plain weighted mean by a Gaussian
    expectation (trapezoid weights summing to one).
    """
    if not grid.is_mesh or len(grid.mesh_shape) != 2:
        raise ValueError("reconstruct_u_1d needs an (x, xi) mesh")
    xs = grid.axes[0]
    if np.any(np.diff(xs) <= 0):
        raise ValueError("x grid must be strictly ascending")
    n, m = grid.mesh_shape
    d = _first_partials(net, grid.points).reshape(n, m)
    v = _latent_mean(d, _latent_quadrature(grid, normalized), normalized, 1)
    return FieldGrid(xs.copy(), np.cumsum(v) / n)


def barycenter_field(net, grid: Batch, normalized: bool = True) -> FieldGrid:
    """Latent means of F_xi and F_tau at each physical node of a 4D mesh."""
    if not grid.is_mesh or len(grid.mesh_shape) != 4:
        raise ValueError("barycenter_field needs an (x, y, xi, tau) mesh")
    shape = grid.mesh_shape
    d = _first_partials(net, grid.points)
    w = _latent_quadrature(grid, normalized)
    v1 = _latent_mean(d[:, 0].reshape(shape), w, normalized, 2)
    v2 = _latent_mean(d[:, 1].reshape(shape), w, normalized, 2)
    return FieldGrid(grid.axes[0].copy(), np.zeros(shape[:2]), grid.axes[1].copy(), v1, v2)


def _cumtrapz(values: np.ndarray, nodes: np.ndarray, axis: int) -> np.ndarray:
    v = np.moveaxis(values, axis, 0)
    d = np.diff(nodes).reshape((-1,) + (1,) * (v.ndim - 1))
    out = np.zeros_like(v)
    out[1:] = np.cumsum(0.5 * d * (v[1:] + v[:-1]), axis=0)
    return np.moveaxis(out, 0, axis)


def integrate_field(xs: np.ndarray, ys: np.ndarray, V1: np.ndarray, V2: np.ndarray,
                    path: str = "x-then-y", straight_nodes: int = 65) -> np.ndarray:
    """u with u(0, 0) = 0 from a gradient field sampled on a grid.

    ``x-then-y``: along the bottom edge, then up each column. ``y-then-x``:
    the mirror image. ``straight``: along the segment from the origin, with
    V interpolated bilinearly.
    """
    xs, ys = np.asarray(xs, float), np.asarray(ys, float)
    if path == "x-then-y":
        bottom = _cumtrapz(V1[:, 0], xs, 0)
        return bottom[:, None] + _cumtrapz(V2, ys, 1)
    if path == "y-then-x":
        left = _cumtrapz(V2[0, :], ys, 0)
        return left[None, :] + _cumtrapz(V1, xs, 0)
    if path == "straight":
        if xs[0] != 0.0 or ys[0] != 0.0:
            raise ValueError("straight path starts at the origin; grid must include it")
        i1 = RegularGridInterpolator((xs, ys), V1)
        i2 = RegularGridInterpolator((xs, ys), V2)
        t = np.linspace(0.0, 1.0, straight_nodes)
        tw = trapezoid_weights(t)
        X, Y = np.meshgrid(xs, ys, indexing="ij")
        px = X[..., None] * t
        py = Y[..., None] * t
        q = np.stack([px.ravel(), py.ravel()], axis=1)
        integrand = (i1(q).reshape(px.shape) * X[..., None] + i2(q).reshape(py.shape) * Y[..., None])
        return np.sum(integrand * tw, axis=-1)
    raise ValueError(f"path must be one of {PATH_MODES}, got {path!r}")


def reconstruct_u_2d(net, grid: Batch, path_mode: str = "x-then-y",
                     normalized: bool = True) -> FieldGrid:
    """Integrate the barycenter field from the origin; also report the
    max |difference| between the two staircase paths."""
    bary = barycenter_field(net, grid, normalized)
    xs, ys = bary.xs, bary.ys
    u = integrate_field(xs, ys, bary.V1, bary.V2, path_mode)
    alt = integrate_field(xs, ys, bary.V1, bary.V2,
                          "y-then-x" if path_mode == "x-then-y" else "x-then-y")
    disc = float(np.max(np.abs(u - alt))) if path_mode != "straight" else float(
        np.max(np.abs(u - integrate_field(xs, ys, bary.V1, bary.V2, "x-then-y"))))
    return FieldGrid(xs, u, ys, bary.V1, bary.V2, disc)


def curl_fd(xs: np.ndarray, ys: np.ndarray, V1: np.ndarray, V2: np.ndarray) -> float:
    """Root-mean-square of dV2/dx - dV1/dy by finite differences on the grid."""
    dv2dx = np.gradient(V2, xs, axis=0)
    dv1dy = np.gradient(V1, ys, axis=1)
    c = dv2dx - dv1dy
    return float(np.sqrt(np.mean(c * c)))


# ---------------------------------------------------------------------------
# pushforward measures
# ---------------------------------------------------------------------------

def pushforward_samples(net, anchor: Sequence[float], latents: np.ndarray) -> np.ndarray:
    """Gradient of F in the latent variables at ``anchor`` for each latent draw."""
    anchor = tuple(float(a) for a in anchor)
    lat = np.asarray(latents, dtype=np.float64)
    lat = lat[:, None] if lat.ndim == 1 else lat
    pts = np.concatenate([np.broadcast_to(anchor, (lat.shape[0], len(anchor))), lat], axis=1)
    return _first_partials(net, pts)


def pushforward_histogram(net, anchor: Sequence[float], component: str = "xi", count: int = 10_000,
                          rng: np.random.Generator | None = None, latents: np.ndarray | None = None,
                          bins: int = 81, value_range: tuple[float, float] = (-2.0, 2.0)) -> EmpiricalMeasure:
    """Histogram of one latent-gradient component under Gaussian latents.

    Values outside ``value_range`` are counted in the edge bins so the counts
    always sum to the sample count.
    """
    if component not in COMPONENTS:
        raise ValueError(f"component must be one of {COMPONENTS}")
    ldim = model_input_dim(net) // 2
    if component == "tau" and ldim == 1:
        raise ValueError("1D problems have no tau component")
    if latents is None:
        if rng is None:
            raise ValueError("pass rng or latents")
        latents = rng.standard_normal((count, ldim))
    vals = pushforward_samples(net, anchor, latents)
    if vals.ndim == 2:
        vals = vals[:, COMPONENTS.index(component)]
    return histogram_of(anchor, component, vals, bins, value_range)


def histogram_of(anchor, component: str, values: np.ndarray, bins: int = 81,
                 value_range: tuple[float, float] = (-2.0, 2.0)) -> EmpiricalMeasure:
    """Bin precomputed samples; out-of-range values go to the edge bins."""
    edges = np.linspace(value_range[0], value_range[1], bins + 1)
    vals = np.asarray(values, dtype=np.float64).ravel()
    counts, _ = np.histogram(np.clip(vals, value_range[0], value_range[1]), bins=edges)
    return EmpiricalMeasure(tuple(anchor), component, vals, edges, counts)


def _quantile_pairs(a_loc, a_w, b_loc, b_w) -> float:
    """Exact W2^2 between two weighted discrete measures on the line."""
    ia, ib = np.argsort(a_loc, kind="stable"), np.argsort(b_loc, kind="stable")
    a_loc, a_w = np.asarray(a_loc)[ia], np.asarray(a_w)[ia]
    b_loc, b_w = np.asarray(b_loc)[ib], np.asarray(b_w)[ib]
    ca = np.cumsum(a_w) / np.sum(a_w)
    cb = np.cumsum(b_w) / np.sum(b_w)
    cuts = np.union1d(ca, cb)
    cuts = cuts[cuts > 0]
    widths = np.diff(np.concatenate([[0.0], cuts]))
    mids = cuts - widths / 2
    qa = a_loc[np.minimum(np.searchsorted(ca, mids, side="left"), a_loc.size - 1)]
    qb = b_loc[np.minimum(np.searchsorted(cb, mids, side="left"), b_loc.size - 1)]
    return float(np.sum(widths * (qa - qb) ** 2))


def w2_empirical_1d(a, b, a_weights=None, b_weights=None) -> float:
    """Wasserstein-2 distance in 1D.

    ``a`` is a sample set (optionally weighted); ``b`` is a sample set or an
    :class:`Atoms` reference. Equal-count unweighted samples use sorted
    pairing; everything else uses the exact quantile-function integral.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    if a.size == 0:
        raise ValueError("empty sample set")
    if isinstance(b, Atoms):
        b_loc, b_w = np.asarray(b.locations), np.asarray(b.weights)
    else:
        b_loc = np.asarray(b, dtype=np.float64).ravel()
        if b_loc.size == 0:
            raise ValueError("empty sample set")
        if a_weights is None and b_weights is None and b_loc.size == a.size:
            d = np.sort(a) - np.sort(b_loc)
            return float(np.sqrt(np.mean(d * d)))
        b_w = np.ones(b_loc.size) if b_weights is None else np.asarray(b_weights, float)
    a_w = np.ones(a.size) if a_weights is None else np.asarray(a_weights, float)
    return math.sqrt(max(_quantile_pairs(a, a_w, b_loc, b_w), 0.0))


def w2_to_normal(samples) -> float:
    """W2 between an equal-weight sample set and N(0, 1), in closed form.

    On each quantile cell (k/n, (k+1)/n) the normal quantile's first two
    moments are integrated exactly.
    """
    s = np.sort(np.asarray(samples, dtype=np.float64).ravel())
    n = s.size
    if n == 0:
        raise ValueError("empty sample set")
    z = ndtri(np.linspace(0.0, 1.0, n + 1))
    pdf = np.where(np.isfinite(z), np.exp(-0.5 * np.where(np.isfinite(z), z, 0.0) ** 2), 0.0) / math.sqrt(2 * math.pi)
    zpdf = np.where(np.isfinite(z), np.where(np.isfinite(z), z, 0.0) * pdf, 0.0)
    p = np.linspace(0.0, 1.0, n + 1)
    m1 = pdf[:-1] - pdf[1:]                         # int Q(u) du over the cell
    m2 = (p[1:] - zpdf[1:]) - (p[:-1] - zpdf[:-1])  # int Q(u)^2 du
    total = np.sum(s * s / n - 2.0 * s * m1 + m2)
    return math.sqrt(max(float(total), 0.0))


# ---------------------------------------------------------------------------
# energies and the W2 diagnostic
# ---------------------------------------------------------------------------

def probe_grid_1d(x_count: int = 51, latent_count: int = 800, latent_range: float = 4.0) -> Batch:
    return mesh_batch(np.linspace(0.0, 1.0, x_count), np.linspace(-latent_range, latent_range, latent_count))


def probe_grid_2d(physical_count: int = 17, latent_count: int = 33, latent_range: float = 4.0) -> Batch:
    xs = np.linspace(0.0, 1.0, physical_count)
    lat = np.linspace(-latent_range, latent_range, latent_count)
    return mesh_batch(xs, xs, lat, lat)


def _density(problem: ProblemSpec, d: np.ndarray) -> np.ndarray:
    if problem.case == "bolza-1d":
        return (d * d - 1.0) ** 2
    a, b = d[..., 0], d[..., 1]
    if problem.case == "four-well":
        return (a * a - 1.0) ** 2 + (b * b - 1.0) ** 2
    return (a * a - 1.0) ** 2 + b * b


def energy_estimate(net, problem: ProblemSpec, probe: Batch, normalized: bool = True) -> float:
    """Bulk energy on a fixed probe grid (no penalties).

    With ``normalized`` (default) latent integrals are Gaussian expectations
    and physical integrals use trapezoid weights; the Bolza energy includes
    the ``u^2`` term with u obtained from the barycenters. Otherwise the
    plain weighted means of the training losses are used.
    """
    if model_input_dim(net) != problem.input_dim:
        raise ValueError("network and problem dimensions differ")
    shape = probe.mesh_shape
    pdim = probe.physical_dim
    d = _first_partials(net, probe.points)
    d = d.reshape(shape) if pdim == 1 else d.reshape(shape + (2,))
    dens = _density(problem, d)
    w = _latent_quadrature(probe, normalized)
    bulk = _latent_mean(dens, w, normalized, pdim)
    if problem.case == "bolza-1d":
        v = _latent_mean(d, w, normalized, 1)
        if normalized:
            xs = probe.axes[0]
            tw = trapezoid_weights(xs)
            u = _cumtrapz(v, xs, 0)
            return float(np.dot(tw, bulk + u * u))
        u = np.cumsum(v) / shape[0]
        return float(np.mean(bulk + u * u))
    if normalized:
        tw = np.multiply.outer(trapezoid_weights(probe.axes[0]), trapezoid_weights(probe.axes[1]))
        return float(np.sum(tw * bulk))
    return float(np.mean(bulk))


def integrated_w2_squared(net, probe: Batch, reference: Atoms = BOLZA_MEASURE) -> float:
    """``int_0^1 W2^2(nu_x, reference) dx`` for a 1D network, with each
    ``nu_x`` represented by the probe's Gaussian quadrature."""
    if probe.physical_dim != 1:
        raise ValueError("integrated W2 is implemented for the 1D problem")
    n, m = probe.mesh_shape
    d = _first_partials(net, probe.points).reshape(n, m)
    w = _latent_quadrature(probe, True)
    per_x = np.array([_quantile_pairs(d[i], w, np.asarray(reference.locations), np.asarray(reference.weights))
                      for i in range(n)])
    return float(np.dot(trapezoid_weights(probe.axes[0]), per_x))


@dataclass
class W2EnergyPoint:
    epoch: int
    w2_sq: float
    energy_gap: float
    bound: float

    @property
    def ratio(self) -> float:
        return self.w2_sq / self.bound if self.bound > 0 else math.inf

    @property
    def holds(self) -> bool:
        return self.w2_sq <= self.bound


def w2_energy_diagnostic(net, epoch: int = 0, probe: Batch | None = None, curvature: float = 8.0,
                         slack: float = 0.5, minimum_energy: float = 0.0) -> W2EnergyPoint:
    """Compare integrated W2^2 to the analytic Bolza measure with
    ``(energy - minimum_energy) / c``, ``c = curvature * (1 - slack)``."""
    probe = probe or probe_grid_1d()
    gap = energy_estimate(net, ProblemSpec("bolza-1d"), probe) - minimum_energy
    c = curvature * (1.0 - slack)
    return W2EnergyPoint(epoch, integrated_w2_squared(net, probe), gap, gap / c)


def ks_statistic_normal(samples) -> float:
    """Kolmogorov-Smirnov distance between the sample CDF and N(0, 1)."""
    from scipy.stats import kstest
    return float(kstest(np.asarray(samples).ravel(), "norm").statistic)


def ks_critical_1pct(n: int) -> float:
    """Asymptotic 1% critical value of the one-sample KS statistic."""
    return 1.6276 / math.sqrt(n)
