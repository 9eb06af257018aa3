"""Reflection maps driving the soft-EDF network fluid model.

Three layers:

1. ``skorokhod_1d`` -- the classical Skorokhod map on the half line,
   ``z = u + y >= 0`` with the minimal nondecreasing regulator
   ``y(t) = max_{s<=t} (-u(s))^+``.
2. ``oblique_reflection`` -- its orthant analogue for reflection matrices
   ``R = I - P^T`` built from a convergent substochastic routing matrix.
   The unique pair (z, y) with ``z = u + R y >= 0``, y nondecreasing and
   componentwise complementarity is computed by Picard iteration
   ``y <- running-max (P^T y - u)^+``, a contraction because the spectral
   radius of P is certified below one.
3. ``solve_soft_fluid`` -- the network fluid solver.  For every deadline
   level x it feeds the netput ``arrivals[0,x] - R mu`` through the orthant
   reflection; the reflected component is the queue profile at level x and
   the regulator splits into departures above x plus idleness (idleness is
   read off the top level, which carries all arrival mass).  Monotonicity
   of the reflection in its input makes the level family consistent, i.e.
   the outputs assemble into measure-valued paths.

All vector paths use the (K, n_t+1) layout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .grids import Grid, MeasurePath, enforce_monotone

__all__ = [
    "PreconditionError",
    "NonConvergenceError",
    "RoutingMatrix",
    "OrthantReflection",
    "CheckResult",
    "skorokhod_1d",
    "oblique_reflection",
    "lipschitz_ratio",
    "check_monotonicity",
    "check_nonanticipation",
    "SoftFluidSolution",
    "solve_soft_fluid",
]

DEFAULT_TOL = 1e-10          # relative sup-norm change that stops the Picard iteration
COMP_REL_TOL = 1e-8          # complementarity defect allowance, relative to input scale
_NEG_GUARD = 1e-9            # relative slack for clamping reflected paths at zero
_MONO_GUARD = 1e-12          # relative slack when snapping monotone outputs


class PreconditionError(ValueError):
    """Input violates a documented precondition of a reflection map."""


class NonConvergenceError(RuntimeError):
    """Fixed-point iteration exhausted its budget; carries the last residual."""

    def __init__(self, message: str, residual: float):
        super().__init__(message)
        self.residual = residual


@dataclass(frozen=True)
class RoutingMatrix:
    """Certified convergent substochastic routing matrix.

    ``R = I - P^T`` is then an M-matrix.  ``spectral_radius_bound`` is a
    certified upper bound on the spectral radius of P obtained from powers
    of P applied to the all-ones vector (``||P^m 1||_inf = ||P^m||_inf``),
    and ``lipschitz_bound`` dominates the sup-norm Lipschitz constants of
    both components of the orthant reflection: if d bounds the componentwise
    output gaps then ``d <= P^T d + ||u1-u2|| 1``, so
    ``d <= (I-P^T)^{-1} 1 ||u1-u2||``.
    """

    P: np.ndarray
    R: np.ndarray
    R_inv: np.ndarray
    spectral_radius_bound: float
    lipschitz_bound: float

    @property
    def K(self) -> int:
        return self.P.shape[0]

    @classmethod
    def certify(cls, P: np.ndarray, max_power: int = 512) -> "RoutingMatrix":
        P = np.asarray(P, dtype=float)
        if P.ndim != 2 or P.shape[0] != P.shape[1]:
            raise PreconditionError(f"routing matrix must be square, got shape {P.shape}")
        if P.min(initial=0.0) < 0.0:
            raise PreconditionError("routing probabilities must be nonnegative")
        row_sums = P.sum(axis=1)
        if row_sums.max(initial=0.0) > 1.0 + 1e-12:
            raise PreconditionError(
                f"substochastic violated: row sums {row_sums} must not exceed 1"
            )
        v = np.ones(P.shape[0])
        rho_bound = math.inf
        for m in range(1, max_power + 1):
            v = P @ v
            s = float(v.max(initial=0.0))
            if s < 1.0 - 1e-9:
                rho_bound = s ** (1.0 / m)
                break
        if not rho_bound < 1.0:
            raise PreconditionError(
                "could not certify spectral radius < 1 within the power budget; "
                "routing matrix is not convergent enough"
            )
        R = np.eye(P.shape[0]) - P.T
        R_inv = np.linalg.inv(R)
        if R_inv.min() < -1e-10:
            raise PreconditionError("(I - P^T) does not have a nonnegative inverse")
        inv_norm = float(np.abs(R_inv).sum(axis=1).max())
        r_norm = float(np.abs(R).sum(axis=1).max())
        return cls(P, R, R_inv, rho_bound, max(inv_norm, 1.0 + r_norm * inv_norm))


@dataclass
class OrthantReflection:
    """Orthant reflection output: content z, regulator y, and diagnostics."""

    z: np.ndarray
    y: np.ndarray
    residual: float     # max over components of sum_k z(t_k) * (y(t_k) - y(t_{k-1}))
    iterations: int


@dataclass(frozen=True)
class CheckResult:
    passed: bool
    worst: float
    note: str = ""


def skorokhod_1d(u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Skorokhod map on the half line for a grid-sampled path with u(0) >= 0.

    Returns (z, y) with ``y(t_k) = max_{l<=k} (-u(t_l))^+`` and ``z = u + y``.
    By construction every increase of y lands exactly on ``z = 0``.
    """
    u = np.asarray(u, dtype=float)
    if u.ndim != 1:
        raise PreconditionError(f"expected a scalar path, got shape {u.shape}")
    if u[0] < 0.0:
        raise PreconditionError(f"u(0) = {u[0]} must be nonnegative")
    y = np.maximum.accumulate(np.maximum(-u, 0.0))
    return u + y, y


def _picard(u: np.ndarray, routing: RoutingMatrix, tol: float,
            max_iter: int | None) -> tuple[np.ndarray, int]:
    """Shared fixed-point loop.  `u` has the component axis second-to-last so
    the same code serves single paths (K, n+1) and level stacks (L, K, n+1)."""
    PT = routing.P.T
    scale = float(np.abs(u).max(initial=0.0))
    if max_iter is None:
        rho = routing.spectral_radius_bound
        max_iter = 50 if rho <= 0.0 else max(50, 10 * math.ceil(math.log(tol) / math.log(rho)))
    y = np.zeros_like(u)
    delta = math.inf
    for it in range(1, max_iter + 1):
        drive = np.einsum("ab,...bt->...at", PT, y) - u
        y_next = np.maximum.accumulate(np.maximum(drive, 0.0), axis=-1)
        delta = float(np.abs(y_next - y).max(initial=0.0))
        y = y_next
        if delta <= tol * scale:
            return y, it
    raise NonConvergenceError(
        f"orthant reflection did not converge in {max_iter} iterations "
        f"(last change {delta:.3e}, scale {scale:.3e})",
        residual=delta,
    )


def _complementarity_defect(z: np.ndarray, y: np.ndarray) -> float:
    dy = np.diff(y, axis=-1, prepend=0.0)
    return float(np.max(np.sum(z * dy, axis=-1), initial=0.0))


def oblique_reflection(u: np.ndarray, routing: RoutingMatrix, tol: float = DEFAULT_TOL,
                       max_iter: int | None = None) -> OrthantReflection:
    """Reflection in the orthant with reflection matrix ``R = I - P^T``.

    `u` is a (K, n+1) grid path with u(., 0) >= 0.  The stopping rule is
    relative to the input scale, which keeps the map positively homogeneous
    under exact (dyadic) scalings of the input.
    """
    u = np.asarray(u, dtype=float)
    if u.ndim != 2 or u.shape[0] != routing.K:
        raise PreconditionError(f"expected shape ({routing.K}, n+1), got {u.shape}")
    if u[:, 0].min() < 0.0:
        raise PreconditionError(f"u(0) = {u[:, 0]} must be componentwise nonnegative")
    y, iterations = _picard(u, routing, tol, max_iter)
    z = u + routing.R @ y
    neg = float(z.min(initial=0.0))
    scale = max(float(np.abs(u).max(initial=0.0)), 1.0)
    if neg < -_NEG_GUARD * scale:
        raise NonConvergenceError(
            f"reflected path dips to {neg:.3e}, beyond the numerical-zero guard",
            residual=-neg,
        )
    np.maximum(z, 0.0, out=z)
    return OrthantReflection(z, y, _complementarity_defect(z, y), iterations)


def lipschitz_ratio(u1: np.ndarray, u2: np.ndarray, routing: RoutingMatrix,
                    tol: float = DEFAULT_TOL) -> dict[str, float]:
    """Observed Lipschitz ratio of the reflection against the derived bound.

    Returns ``{"ratio", "bound"}`` where ratio is
    ``max(||z1-z2||, ||y1-y2||) / ||u1-u2||``.  Identical inputs are
    rejected (the ratio would be 0/0).
    """
    u1, u2 = np.asarray(u1, dtype=float), np.asarray(u2, dtype=float)
    denom = float(np.abs(u1 - u2).max(initial=0.0))
    if denom == 0.0:
        raise PreconditionError("inputs are identical; Lipschitz ratio is undefined")
    r1, r2 = oblique_reflection(u1, routing, tol), oblique_reflection(u2, routing, tol)
    num = max(float(np.abs(r1.z - r2.z).max()), float(np.abs(r1.y - r2.y).max()))
    return {"ratio": num / denom, "bound": routing.lipschitz_bound}


def check_monotonicity(u1: np.ndarray, u2: np.ndarray, routing: RoutingMatrix,
                       tol: float = 1e-8) -> CheckResult:
    """With u2 - u1 nonnegative and nondecreasing, the reflection satisfies
    z2 >= z1 everywhere while y1 - y2 is nondecreasing."""
    u1, u2 = np.asarray(u1, dtype=float), np.asarray(u2, dtype=float)
    d = u2 - u1
    if d.min(initial=0.0) < -1e-12 or (d.shape[-1] > 1 and np.diff(d, axis=-1).min() < -1e-12):
        raise PreconditionError("u2 - u1 must be nonnegative and componentwise nondecreasing")
    r1, r2 = oblique_reflection(u1, routing), oblique_reflection(u2, routing)
    worst_z = float(np.max(r1.z - r2.z, initial=0.0))
    dy = r1.y - r2.y
    worst_y = float(np.max(-np.diff(dy, axis=-1, prepend=0.0), initial=0.0))
    worst = max(worst_z, worst_y)
    return CheckResult(worst <= tol, worst)


def check_nonanticipation(u1: np.ndarray, u2: np.ndarray, routing: RoutingMatrix,
                          agree_upto: int, tol: float = 1e-8) -> CheckResult:
    """Inputs agreeing on time indices [0, agree_upto] produce outputs that
    agree there too (within the iteration tolerance)."""
    u1, u2 = np.asarray(u1, dtype=float), np.asarray(u2, dtype=float)
    if agree_upto < 0:
        return CheckResult(True, 0.0, "empty agreement window")
    if not np.array_equal(u1[:, : agree_upto + 1], u2[:, : agree_upto + 1]):
        raise PreconditionError("inputs differ inside the declared agreement window")
    r1, r2 = oblique_reflection(u1, routing), oblique_reflection(u2, routing)
    sl = np.s_[:, : agree_upto + 1]
    worst = max(float(np.abs(r1.z[sl] - r2.z[sl]).max(initial=0.0)),
                float(np.abs(r1.y[sl] - r2.y[sl]).max(initial=0.0)))
    return CheckResult(worst <= tol, worst)


@dataclass
class SoftFluidSolution:
    """Soft-EDF network fluid solution.

    - ``queue``: queue-content path (mass by deadline level).
    - ``departures``: cumulative departures from each queue by deadline level.
    - ``departures_above[i, k, j]``: departures with deadline above x_j, the
      complement field the solver actually constructs.
    - ``idleness``: cumulative unused capacity per component.

    Departures-above plus idleness reproduce the capacity at the top level:
    ``departures[0, infinity) + idleness = capacity``.
    """

    grid: Grid
    queue: MeasurePath
    departures: MeasurePath
    departures_above: np.ndarray
    idleness: np.ndarray
    diagnostics: dict = field(default_factory=dict)


def solve_soft_fluid(arrivals: MeasurePath, capacity: np.ndarray, routing: RoutingMatrix,
                     tol: float = DEFAULT_TOL, max_iter: int | None = None) -> SoftFluidSolution:
    """Solve the soft-EDF network fluid model.

    `arrivals` must be an increasing measure path holding all mass within
    the deadline horizon (the top grid level then stands for deadline
    infinity, which is how idleness is extracted).  `capacity` is the
    cumulative capacity per component with capacity(0) = 0.

    The returned fields satisfy, at every level x and up to solver
    tolerance: queue = arrivals - R * departures, componentwise
    complementarity between the queue and both departures-above and
    idleness, and departures-total + idleness = capacity.
    """
    grid = arrivals.grid
    capacity = np.asarray(capacity, dtype=float)
    if capacity.shape != (routing.K, grid.n_t + 1):
        raise PreconditionError(
            f"capacity shape {capacity.shape} != ({routing.K}, {grid.n_t + 1})")
    if arrivals.K != routing.K:
        raise PreconditionError(f"arrival components {arrivals.K} != routing dimension {routing.K}")
    if np.abs(capacity[:, 0]).max(initial=0.0) > 0.0:
        raise PreconditionError("cumulative capacity must start at 0")
    if np.diff(capacity, axis=1).min(initial=0.0) < -1e-12:
        raise PreconditionError("cumulative capacity must be nondecreasing")
    in_scale = max(float(np.abs(arrivals.values).max(initial=0.0)), 1.0)
    arrivals.validate(increasing=True, tol=1e-12 * in_scale)

    # Level stack: U[j] = arrivals[0, x_j] - R mu, solved jointly for all j.
    alpha_lvl = np.moveaxis(arrivals.values, 2, 0)            # (n_x+1, K, n_t+1)
    r_mu = routing.R @ capacity
    U = alpha_lvl - r_mu[None, :, :]
    Y, iterations = _picard(U, routing, tol, max_iter)
    W = np.einsum("ab,xbt->xat", routing.P.T, Y)
    Z = U + Y - W

    scale = max(float(np.abs(U).max(initial=0.0)), 1.0)
    neg = float(Z.min(initial=0.0))
    if neg < -_NEG_GUARD * scale:
        raise NonConvergenceError(
            f"queue level dips to {neg:.3e}, beyond the numerical-zero guard", residual=-neg)
    np.maximum(Z, 0.0, out=Z)

    idleness = Y[grid.n_x].copy()
    tail = Y - idleness[None, :, :]                            # departures above x_j
    guard = _MONO_GUARD * scale
    if float(tail.min(initial=0.0)) < -guard:
        raise NonConvergenceError(
            f"departure tail dips to {tail.min():.3e} below zero", residual=-float(tail.min()))
    np.maximum(tail, 0.0, out=tail)

    # Monotone snapping removes float noise; real violations raise.  Time
    # first, then levels: a running max over levels of time-monotone slices
    # stays time-monotone, so the result is exactly monotone both ways.
    Z = enforce_monotone(Z, axis=0, guard=guard, label="queue levels")
    tail = -enforce_monotone(-tail, axis=0, guard=guard, label="departure tail levels")
    beta = capacity[None, :, :] - Y                            # departures [0, x_j]
    if float(beta.min(initial=0.0)) < -guard:
        raise NonConvergenceError(
            f"departures dip to {beta.min():.3e} below zero", residual=-float(beta.min()))
    np.maximum(beta, 0.0, out=beta)
    beta = enforce_monotone(beta, axis=-1, guard=guard, label="departure time paths")
    beta = enforce_monotone(beta, axis=0, guard=guard, label="departure levels")

    queue = MeasurePath(grid, routing.K, np.ascontiguousarray(np.moveaxis(Z, 0, 2)))
    departures = MeasurePath(grid, routing.K, np.ascontiguousarray(np.moveaxis(beta, 0, 2)))
    tail_out = np.ascontiguousarray(np.moveaxis(tail, 0, 2))

    total_mass = float(arrivals.values[:, grid.n_t, grid.n_x].sum())
    dy_tail = np.diff(tail, axis=-1, prepend=0.0)
    dy_idle = np.diff(idleness, axis=-1, prepend=0.0)
    defect_edf = float(np.max(np.sum(Z * dy_tail, axis=-1), initial=0.0))
    defect_idle = float(np.max(np.sum(Z * dy_idle[None], axis=-1), initial=0.0))
    cond1 = float(np.abs(Z - (alpha_lvl - np.einsum("ab,xbt->xat", routing.R, beta))).max())
    cond4 = float(np.abs(beta[grid.n_x] + idleness - capacity).max())
    diagnostics = {
        "iterations": iterations,
        "scale": scale,
        "total_input_mass": total_mass,
        "residual_balance": cond1,
        "residual_capacity_split": cond4,
        "complementarity_departures": defect_edf,
        "complementarity_idleness": defect_idle,
        "complementarity_tolerance": COMP_REL_TOL * max(total_mass, 1.0),
    }
    return SoftFluidSolution(grid, queue, departures, tail_out, idleness, diagnostics)
