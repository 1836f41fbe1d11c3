"""Identity checkers, inequality monitors, and convergence-rate fitting.

The two cross-product identities are algebraically exact for the discrete
operators, so their residuals are pure rounding noise and are checked at
1e-12 after scale normalization. Quadrature-limited identities (the cubic
damping identity, the energy monitor) carry O(h) or O(dt) defects and are
checked by refinement ratios instead of absolute thresholds.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .field import (
    Grid1D,
    VectorField,
    cross,
    cross_values,
    grad_values,
    inner_l2,
    lap_values,
    laplacian,
    norms,
    sq_norm_values,
)
from .dynamics import ModelParams, TrajectoryRecord

__all__ = [
    "IdentityReport",
    "SlopeFit",
    "check_identities",
    "check_cubic_identity",
    "cubic_identity_residuals",
    "fit_slope",
    "energy_drift",
    "path_gap",
    "random_smooth_field",
    "identity_suite",
]

logger = logging.getLogger(__name__)

EXACT_IDENTITY_TOL = 1.0e-12


@dataclass(frozen=True)
class IdentityReport:
    name: str
    residual: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return abs(self.residual) <= self.tolerance


@dataclass(frozen=True)
class SlopeFit:
    """Least-squares line through (log eps, log metric) pairs."""

    points: tuple
    slope: float
    intercept: float
    residual: float


def check_identities(u: VectorField, v: VectorField) -> list[IdentityReport]:
    """Residuals of the exact cross-product identities and the mixed bound.

    The first two residuals are scale-normalized so the 1e-12 tolerance is
    magnitude-independent. The third entry checks the inequality
    |(u x Lap v, Lap u)| <= ||Lap u||^2 + c_d ||Lap v||^2 ||u||_H1^2 with the
    discrete interpolation constant c_d = 2 (1 + 10 h); its residual is the
    violation amount, zero when the bound holds.
    """
    if u.grid != v.grid:
        raise ValueError("fields must share a grid")
    nu = norms(u)
    nv = norms(v)
    lap_v = laplacian(v)

    r1 = abs(inner_l2(cross(u, v), v))
    s1 = 1.0 + nu.linf * nv.l2**2
    r2 = abs(inner_l2(cross(u, lap_v), u))
    s2 = 1.0 + nu.linf**2 * nv.h2_semi

    h = u.grid.spacing
    lhs = abs(inner_l2(cross(u, lap_v), laplacian(u)))
    c_d = 2.0 * (1.0 + 10.0 * h)
    u_h1_sq = nu.l2**2 + nu.h1_semi**2
    rhs = nu.h2_semi**2 + c_d * nv.h2_semi**2 * u_h1_sq
    violation = max(0.0, lhs - rhs)

    return [
        IdentityReport("cross-orthogonality", r1 / s1, EXACT_IDENTITY_TOL),
        IdentityReport("precession-orthogonality", r2 / s2, EXACT_IDENTITY_TOL),
        IdentityReport("precession-bound", violation, 0.0),
    ]


def cubic_identity_residuals(u: VectorField, mu: float = 1.0) -> tuple[float, float]:
    """Residuals of the cubic damping identity, vector form and colinear form.

    Vector form:   ((1+mu|u|^2) u, Lap u) = -||grad u||^2
                                            - mu sum_e h (|u|^2 |du|^2 + 2 (u.du)^2)
    with midpoint edge averages of |u|^2 and u. The midpoint convention makes
    the discrete product rule exact, so the vector-form residual is pure
    rounding noise for arbitrary node values, not merely O(h). The colinear
    form replaces the edge sum by 3 mu (|u|^2, |grad u|^2); the two coincide
    exactly when u is pointwise parallel to its derivative and differ at O(1)
    otherwise.
    """
    grid = u.grid
    h = grid.spacing
    v = u.values
    lap = lap_values(v, h)

    r = sq_norm_values(v)
    lhs = h * float(np.vdot((1.0 + mu * r)[:, None] * v, lap))

    grad = grad_values(v, h)
    grad_sq = np.einsum("ij,ij->i", grad, grad)
    h1_sq = h * float(np.sum(grad_sq))

    # edge averages with zero ghost nodes
    n = v.shape[0]
    r_edge = np.empty(n + 1)
    r_edge[0] = 0.5 * r[0]
    r_edge[1:-1] = 0.5 * (r[1:] + r[:-1])
    r_edge[-1] = 0.5 * r[-1]
    u_edge = np.zeros((n + 1, 3))
    u_edge[0] = 0.5 * v[0]
    u_edge[1:-1] = 0.5 * (v[1:] + v[:-1])
    u_edge[-1] = 0.5 * v[-1]
    dot = np.einsum("ij,ij->i", u_edge, grad)
    cubic_vec = h * float(np.sum(r_edge * grad_sq + 2.0 * dot**2))

    cubic_colinear = 3.0 * h * float(np.sum(r_edge * grad_sq))

    vector_residual = lhs + h1_sq + mu * cubic_vec
    colinear_residual = lhs + h1_sq + mu * cubic_colinear
    return vector_residual, colinear_residual


def check_cubic_identity(
    u: VectorField, mu: float = 1.0, tolerance: float = EXACT_IDENTITY_TOL
) -> IdentityReport:
    """Scale-normalized residual of the exact vector identity.

    The colinear variant is logged at debug level for comparison; it is not
    asserted because the two forms agree only for pointwise-parallel fields.
    """
    vector_residual, colinear_residual = cubic_identity_residuals(u, mu)
    logger.debug(
        "cubic identity residuals: vector %.3e, colinear %.3e",
        vector_residual,
        colinear_residual,
    )
    rep = norms(u)
    scale = 1.0 + rep.h1_semi**2 * (1.0 + mu * rep.linf**2)
    return IdentityReport("cubic-damping-identity", vector_residual / scale, tolerance)


def fit_slope(points) -> SlopeFit:
    """Least-squares slope of log(metric) against log(eps).

    ``points`` is a sequence of (eps, metric) pairs with positive entries;
    at least three are required.
    """
    pts = [(float(e), float(m)) for e, m in points]
    if len(pts) < 3:
        raise ValueError(f"need at least 3 points, got {len(pts)}")
    for e, m in pts:
        if e <= 0.0 or m <= 0.0 or not (math.isfinite(e) and math.isfinite(m)):
            raise ValueError(f"points must be positive and finite, got ({e}, {m})")
    log_pts = tuple((math.log(e), math.log(m)) for e, m in pts)
    xs = np.array([p[0] for p in log_pts])
    ys = np.array([p[1] for p in log_pts])
    slope, intercept = np.polyfit(xs, ys, 1)
    resid = ys - (slope * xs + intercept)
    rms = math.sqrt(float(np.mean(resid**2)))
    return SlopeFit(points=log_pts, slope=float(slope), intercept=float(intercept), residual=rms)


def _cubic_term(v: np.ndarray, h: float) -> float:
    """Edge quadrature of |u|^2 |du|^2 + 2 (u.du)^2 with edge-averaged u."""
    n = v.shape[0]
    r = sq_norm_values(v)
    grad = grad_values(v, h)
    grad_sq = np.einsum("ij,ij->i", grad, grad)
    r_edge = np.empty(n + 1)
    r_edge[0] = 0.5 * r[0]
    r_edge[1:-1] = 0.5 * (r[1:] + r[:-1])
    r_edge[-1] = 0.5 * r[-1]
    u_edge = np.zeros((n + 1, 3))
    u_edge[0] = 0.5 * v[0]
    u_edge[1:-1] = 0.5 * (v[1:] + v[:-1])
    u_edge[-1] = 0.5 * v[-1]
    dot = np.einsum("ij,ij->i", u_edge, grad)
    return h * float(np.sum(r_edge * grad_sq + 2.0 * dot**2))


def energy_drift(traj: TrajectoryRecord, params: ModelParams) -> float:
    """Deviation of the dissipation balance along a deterministic trajectory.

    Monitors  ||grad u(t)||^2 + 2 nu1 int ||Lap u||^2 + 2 nu2 int (||grad u||^2
    + mu * cubic) - ||grad u(0)||^2  with left-endpoint quadrature; the result
    shrinks at first order in dt.
    """
    if traj.kind != "deterministic":
        raise ValueError(f"energy drift is defined for deterministic runs, got {traj.kind}")
    if not traj.dense:
        raise ValueError("energy drift needs snapshots at every step")
    h = traj.grid.spacing
    dt = float(traj.times[1] - traj.times[0])
    reports = traj.reports
    h1_sq0 = reports[0].h1_semi ** 2
    acc = 0.0
    worst = 0.0
    for n in range(len(reports)):
        drift = reports[n].h1_semi ** 2 + acc - h1_sq0
        worst = max(worst, abs(drift))
        if n == len(reports) - 1:
            break
        diss = 2.0 * params.nu1 * reports[n].h2_semi ** 2
        diss += 2.0 * params.nu2 * (
            reports[n].h1_semi ** 2 + params.mu * _cubic_term(traj.snapshots[n], h)
        )
        acc += dt * diss
    return worst


def path_gap(
    snaps_a: np.ndarray,
    snaps_b: np.ndarray,
    spacing: float,
    dt: float,
    nu1: float,
) -> float:
    """Proof metric between two dense trajectories on the same grid:

        sup_n ||grad (a_n - b_n)||^2 + nu1 * sum_{n<N} dt ||Lap (a_n - b_n)||^2
    """
    if snaps_a.shape != snaps_b.shape:
        raise ValueError(f"trajectory shapes differ: {snaps_a.shape} vs {snaps_b.shape}")
    d = snaps_a - snaps_b
    s, n, _ = d.shape
    grad = np.empty((s, n + 1, 3))
    grad[:, 0] = d[:, 0] / spacing
    grad[:, 1:-1] = (d[:, 1:] - d[:, :-1]) / spacing
    grad[:, -1] = -d[:, -1] / spacing
    grad_sq = spacing * np.einsum("sij,sij->s", grad, grad)

    inv_h2 = 1.0 / (spacing * spacing)
    lap = np.empty_like(d)
    lap[:, 1:-1] = (d[:, 2:] - 2.0 * d[:, 1:-1] + d[:, :-2]) * inv_h2
    lap[:, 0] = (d[:, 1] - 2.0 * d[:, 0]) * inv_h2
    lap[:, -1] = (d[:, -2] - 2.0 * d[:, -1]) * inv_h2
    lap_sq = spacing * np.einsum("sij,sij->s", lap, lap)

    return float(np.max(grad_sq)) + nu1 * dt * float(np.sum(lap_sq[:-1]))


def random_smooth_field(
    grid: Grid1D,
    rng: np.random.Generator,
    modes: int = 8,
    decay: float = 2.0,
    scale: float = 1.0,
) -> VectorField:
    """Random low-mode sine combination with k**(-decay) coefficient falloff."""
    k = np.arange(1, modes + 1, dtype=float)
    coeffs = rng.normal(size=(modes, 3)) * (scale * k ** (-decay))[:, None]
    x = grid.nodes
    basis = np.sin(math.pi * np.outer(x, k))
    return VectorField(grid, basis @ coeffs)


def identity_suite(
    grid_sizes=(31, 127, 255),
    samples: int = 1000,
    base_seed: int = 0,
) -> list[IdentityReport]:
    """Worst-case identity residuals over random field sweeps, one row per check."""
    from .field import make_grid, zero_field, gradient, edge_inner, helm_values

    out = []
    for n in grid_sizes:
        grid = make_grid(n)
        h = grid.spacing
        rng = np.random.default_rng(np.random.SeedSequence(base_seed, spawn_key=(n,)))
        w_sbp = w_asym = w_ortho = w_r1 = w_r2 = w_bound = w_interp = w_helm = 0.0
        w_cubic = 0.0
        for _ in range(samples):
            # O(1) amplitudes so the absolute pointwise checks are meaningful;
            # the scale-normalized residuals are magnitude-independent anyway
            a = VectorField(grid, rng.uniform(-1.0, 1.0, size=(n, 3)))
            b = VectorField(grid, rng.uniform(-1.0, 1.0, size=(n, 3)))

            lhs = inner_l2(laplacian(a), b)
            rhs = edge_inner(grid, gradient(a), gradient(b))
            w_sbp = max(w_sbp, abs(lhs + rhs) / (1.0 + abs(rhs)))

            ab = cross_values(a.values, b.values)
            ba = cross_values(b.values, a.values)
            w_asym = max(w_asym, float(np.max(np.abs(ab + ba))))
            w_ortho = max(
                w_ortho,
                float(np.max(np.abs(np.einsum("ij,ij->i", ab, a.values)))),
                float(np.max(np.abs(np.einsum("ij,ij->i", ab, b.values)))),
            )

            reps = check_identities(a, b)
            w_r1 = max(w_r1, abs(reps[0].residual))
            w_r2 = max(w_r2, abs(reps[1].residual))
            w_bound = max(w_bound, reps[2].residual)

            na = norms(a)
            interp_rhs = 2.0 * na.l2 * math.hypot(na.l2, na.h1_semi) * (1.0 + 10.0 * h)
            w_interp = max(w_interp, max(0.0, na.linf**2 - interp_rhs))

            w_cubic = max(w_cubic, abs(check_cubic_identity(a).residual))

            c = 0.1
            sol = helm_values(a.values, h, c)
            resid = sol - c * lap_values(sol, h) - a.values
            w_helm = max(
                w_helm,
                math.sqrt(float(np.vdot(resid, resid)) / float(np.vdot(a.values, a.values))),
            )
        zero_reps = check_identities(zero_field(grid), zero_field(grid))
        w_zero = max(abs(r.residual) for r in zero_reps)
        out.append(IdentityReport(f"zero-field/n={n}", w_zero, 0.0))
        out.extend(
            [
                IdentityReport(f"summation-by-parts/n={n}", w_sbp, EXACT_IDENTITY_TOL),
                IdentityReport(f"cross-antisymmetry/n={n}", w_asym, 0.0),
                IdentityReport(f"pointwise-orthogonality/n={n}", w_ortho, 1.0e-14),
                IdentityReport(f"cross-orthogonality/n={n}", w_r1, EXACT_IDENTITY_TOL),
                IdentityReport(f"precession-orthogonality/n={n}", w_r2, EXACT_IDENTITY_TOL),
                IdentityReport(f"precession-bound/n={n}", w_bound, 0.0),
                IdentityReport(f"interpolation-inequality/n={n}", w_interp, 0.0),
                IdentityReport(f"cubic-damping-identity/n={n}", w_cubic, EXACT_IDENTITY_TOL),
                IdentityReport(f"helmholtz-roundtrip/n={n}", w_helm, 1.0e-10),
            ]
        )
    return out
