"""Loss functions for the four variational problems.

Every loss is written once against array-like operands, so the same code
runs on plain numpy arrays (for evaluation and oracles) and on tape
variables (for parameter gradients). Weighted means use the unnormalized
Gaussian weight ``exp(-|latent|^2/2)``; the missing ``1/sqrt(2 pi)`` factor
is absorbed into the penalty weights.

Boundary and curl penalties need per-node latent means, i.e. a mesh batch.
Energy terms work on any batch. The 2D losses therefore accept a separate
``aux`` mesh for the penalties when the energy batch is scattered.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

from . import autodiff as ad
from .network import PotentialNetwork, forward_jet
from .sampling import Batch

CASES = ("bolza-1d", "quasi-1d", "four-well", "two-well-affine")

# input axes
X, Y = 0, 1
XI_1D = 1
XI, TAU = 2, 3


@dataclass(frozen=True)
class ProblemSpec:
    case: str = "bolza-1d"
    alpha: float = 1e-2

    def __post_init__(self):
        if self.case not in CASES:
            raise ValueError(f"case must be one of {CASES}, got {self.case!r}")
        if not math.isfinite(self.alpha):
            raise ValueError("alpha must be finite")

    @property
    def input_dim(self) -> int:
        return 2 if self.case == "bolza-1d" else 4

    @property
    def boundary_slope(self) -> float:
        """Slope of the affine top/right boundary data (0 unless two-well-affine)."""
        return self.alpha if self.case == "two-well-affine" else 0.0


@dataclass(frozen=True)
class LossWeights:
    lam1: float = 1.0
    lam2: float = 10.0
    lam3: float = 1.0

    def __post_init__(self):
        for name in ("lam1", "lam2", "lam3"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and nonnegative, got {v}")
        if self.lam1 <= 0:
            raise ValueError("lam1 must be positive")

    def scaled(self, c: float) -> "LossWeights":
        return LossWeights(self.lam1 * c, self.lam2 * c, self.lam3 * c)


@dataclass
class LossBreakdown:
    """Per-term loss values; ``total = lam1*energy + lam2*sum(boundary) + lam3*curl``.

    ``parts`` holds sub-terms (e.g. the two energy contributions) and
    ``graph`` the tape variables when the loss was recorded on a tape.
    """

    energy_term: float
    boundary_terms: list[float]
    curl_term: float
    total: float
    parts: dict[str, float] = field(default_factory=dict)
    graph: dict[str, Any] = field(default_factory=dict, repr=False, compare=False)

    @property
    def boundary(self) -> float:
        return float(sum(self.boundary_terms))

    def terms(self) -> dict[str, float]:
        return {"total": self.total, "energy": self.energy_term,
                "boundary": self.boundary, "curl": self.curl_term}


# ---------------------------------------------------------------------------
# derivative providers
# ---------------------------------------------------------------------------

class JetPotential:
    """A closed-form potential written in jet arithmetic, e.g.
    ``JetPotential(lambda x, y, xi, tau: xi * tau * x * y, 4)``.

    Used to drive the losses with known derivatives; carries no parameters.
    """

    def __init__(self, fn: Callable[..., ad.Jet2], input_dim: int):
        self.fn = fn
        self.input_dim = input_dim

    def jet(self, points, dirs, mixed=True):
        pts = np.asarray(points, dtype=np.float64)
        dirs = tuple(dirs)
        if len(dirs) == 1:
            dirs = (dirs[0], dirs[0])
        out = ad.jet_of(self.fn, pts.T, dirs)
        n = pts.shape[0]
        full = lambda v: np.broadcast_to(np.asarray(v, dtype=np.float64), (n,)).copy()
        return ad.Jet2(full(out.value), full(out.da), full(out.db),
                       full(out.dab) if mixed else None, dirs)


class FieldPotential:
    """Potential specified only through its partials.

    ``partials`` maps an axis ``a`` to ``f(points) -> dF/da`` and a sorted pair
    ``(a, b)`` to ``f(points) -> d2F/da db``; absent entries are zero.
    """

    def __init__(self, input_dim: int, partials: dict):
        self.input_dim = input_dim
        self.partials = partials

    def _get(self, key, pts):
        fn = self.partials.get(key)
        if fn is None:
            return np.zeros(pts.shape[0])
        return np.broadcast_to(np.asarray(fn(pts), dtype=np.float64), (pts.shape[0],)).copy()

    def jet(self, points, dirs, mixed=True):
        pts = np.asarray(points, dtype=np.float64)
        dirs = tuple(dirs)
        if len(dirs) == 1:
            dirs = (dirs[0], dirs[0])
        a, b = dirs
        dab = self._get(tuple(sorted((a, b))), pts) if mixed else None
        return ad.Jet2(np.zeros(pts.shape[0]), self._get(a, pts), self._get(b, pts), dab, dirs)


def model_input_dim(model) -> int:
    if isinstance(model, PotentialNetwork):
        return model.config.input_dim
    return model.input_dim


def jet(model, points, dirs, mixed=True, tape: ad.Tape | None = None) -> ad.Jet2:
    """Dispatch to the network jet engine or to a synthetic potential."""
    if isinstance(model, PotentialNetwork):
        return forward_jet(model, points, dirs, mixed=mixed, tape=tape)
    return model.jet(points, dirs, mixed=mixed)


def _check_dim(model, expected: int, case: str):
    got = model_input_dim(model)
    if got != expected:
        raise ValueError(f"{case} needs a network with input_dim={expected}, got {got}")


def _scalar(v) -> float:
    return float(v.value) if isinstance(v, ad.Var) else float(v)


def _finish(energy, boundary: list, curl, weights: LossWeights, parts: dict) -> LossBreakdown:
    bsum = boundary[0] if len(boundary) == 1 else boundary[0] + boundary[1]
    total = weights.lam1 * energy + weights.lam2 * bsum
    if curl is not None:
        total = total + weights.lam3 * curl
    graph = {"total": total, "energy": energy, "curl": curl}
    for i, b in enumerate(boundary):
        graph[f"boundary{i}"] = b
    graph.update({f"part.{k}": v for k, v in parts.items()})
    return LossBreakdown(
        energy_term=_scalar(energy),
        boundary_terms=[_scalar(b) for b in boundary],
        curl_term=0.0 if curl is None else _scalar(curl),
        total=_scalar(total),
        parts={k: _scalar(v) for k, v in parts.items()},
        graph=graph,
    )


# ---------------------------------------------------------------------------
# Case 1
# ---------------------------------------------------------------------------

def loss_bolza_1d(net, grid: Batch, weights: LossWeights = LossWeights(),
                  tape: ad.Tape | None = None) -> LossBreakdown:
    """Bolza loss on an (x, xi) mesh with ascending x.

    energy = mean_i mean_k ((F_xi)^2 - 1)^2 w_k + mean_i U_i^2, where
    ``U_i = (1/N) sum_{j<=i} V_j`` and ``V_j = mean_k F_xi(x_j, xi_k) w_k``;
    boundary = (mean_i V_i)^2 realizes u(1) = 0.
    """
    _check_dim(net, 2, "bolza-1d")
    if not grid.is_mesh:
        raise ValueError("bolza-1d needs a mesh batch over (x, xi)")
    n, m = grid.mesh_shape
    w = grid.latent_weight_grid()
    d = jet(net, grid.points, (XI_1D,), mixed=False, tape=tape).da.reshape(n, m)
    well = (((d * d - 1.0) ** 2) * w).mean(axis=1).mean()
    v = (d * w).mean(axis=1)
    u = v.cumsum(axis=0) / n
    u2 = (u * u).mean()
    vbar = v.mean()
    boundary = vbar * vbar
    return _finish(well + u2, [boundary], None, weights, {"well": well, "u2": u2})


# ---------------------------------------------------------------------------
# 2D cases
# ---------------------------------------------------------------------------

def _energy_density(case: str):
    if case == "four-well":
        return lambda a, b: (a * a - 1.0) ** 2 + (b * b - 1.0) ** 2
    return lambda a, b: (a * a - 1.0) ** 2 + b * b


def mesh_partials(net, mesh: Batch, tape: ad.Tape | None = None) -> dict:
    """F_xi, F_tau, F_x_tau, F_y_xi on a 4D mesh, each shaped (N, M, R, T).

    Two mixed jet passes: (x, tau) and (y, xi).
    """
    if not mesh.is_mesh or len(mesh.mesh_shape) != 4:
        raise ValueError("penalty terms need a mesh batch over (x, y, xi, tau)")
    shape = mesh.mesh_shape
    a = jet(net, mesh.points, (X, TAU), mixed=True, tape=tape)
    b = jet(net, mesh.points, (Y, XI), mixed=True, tape=tape)
    return {
        "xi": b.db.reshape(shape),
        "tau": a.db.reshape(shape),
        "x_tau": a.dab.reshape(shape),
        "y_xi": b.dab.reshape(shape),
    }


def _curl_from(partials: dict, w) -> Any:
    c = (partials["x_tau"] * w).mean(axis=(2, 3)) - (partials["y_xi"] * w).mean(axis=(2, 3))
    return (c * c).mean()


def _boundary_from(partials: dict, mesh: Batch, w, slope: float) -> list:
    xs, ys = mesh.axes[0], mesh.axes[1]
    v1 = (partials["xi"] * w).mean(axis=(2, 3))
    v2 = (partials["tau"] * w).mean(axis=(2, 3))
    r1 = v1.mean(axis=0) - slope * ys  # u(1, y_j) = alpha y_j
    r2 = v2.mean(axis=1) - slope * xs  # u(x_i, 1) = alpha x_i
    return [(r1 * r1).sum(), (r2 * r2).sum()]


def _loss_2d(case: str, net, batch: Batch, weights: LossWeights, slope: float,
             aux: Batch | None, tape: ad.Tape | None) -> LossBreakdown:
    _check_dim(net, 4, case)
    density = _energy_density(case)
    penalty_mesh = batch if aux is None else aux
    if not penalty_mesh.is_mesh:
        raise ValueError(f"{case}: scattered batches need an aux mesh for boundary and curl terms")
    pm = mesh_partials(net, penalty_mesh, tape)
    wm = penalty_mesh.latent_weight_grid()
    if aux is None:
        dens = density(pm["xi"], pm["tau"])
        energy = (dens * wm).mean()
    else:
        j = jet(net, batch.points, (XI, TAU), mixed=False, tape=tape)
        dens = density(j.da, j.db)
        energy = (dens * batch.weights).mean()
    boundary = _boundary_from(pm, penalty_mesh, wm, slope)
    curl = _curl_from(pm, wm)
    return _finish(energy, boundary, curl, weights, {})


def loss_quasi_1d(net, batch: Batch, weights: LossWeights = LossWeights(),
                  aux: Batch | None = None, tape: ad.Tape | None = None) -> LossBreakdown:
    """((F_xi)^2 - 1)^2 + (F_tau)^2 energy, zero top/right data, curl penalty."""
    return _loss_2d("quasi-1d", net, batch, weights, 0.0, aux, tape)


def loss_four_well(net, batch: Batch, weights: LossWeights = LossWeights(),
                   aux: Batch | None = None, tape: ad.Tape | None = None) -> LossBreakdown:
    return _loss_2d("four-well", net, batch, weights, 0.0, aux, tape)


def loss_two_well_affine(net, batch: Batch, weights: LossWeights = LossWeights(),
                         alpha: float = 1e-2, aux: Batch | None = None,
                         tape: ad.Tape | None = None) -> LossBreakdown:
    """Quasi-1D energy with affine data u(1, y) = alpha y and u(x, 1) = alpha x."""
    if not math.isfinite(alpha):
        raise ValueError("alpha must be finite")
    return _loss_2d("two-well-affine", net, batch, weights, alpha, aux, tape)


def curl_penalty(net, batch: Batch, tape: ad.Tape | None = None):
    """mean over (x_i, y_j) of (mean_pq F_x_tau w - mean_pq F_y_xi w)^2."""
    _check_dim(net, 4, "curl_penalty")
    pm = mesh_partials(net, batch, tape)
    out = _curl_from(pm, batch.latent_weight_grid())
    return out if tape is not None else float(out)


def evaluate_loss(problem: ProblemSpec, net, batch: Batch, weights: LossWeights = LossWeights(),
                  aux: Batch | None = None, tape: ad.Tape | None = None) -> LossBreakdown:
    if problem.case == "bolza-1d":
        return loss_bolza_1d(net, batch, weights, tape=tape)
    if problem.case == "quasi-1d":
        return loss_quasi_1d(net, batch, weights, aux=aux, tape=tape)
    if problem.case == "four-well":
        return loss_four_well(net, batch, weights, aux=aux, tape=tape)
    return loss_two_well_affine(net, batch, weights, alpha=problem.alpha, aux=aux, tape=tape)
