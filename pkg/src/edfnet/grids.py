"""Gridded cumulative fields for deadline-indexed mass profiles.

Queue states, arrival streams and departure streams are all families of
finite measures on the deadline axis, evolving over time.  This module
stores such objects through their cumulative fields on a uniform
time x deadline grid: ``values[i, k, j]`` is the mass at component ``i``,
time node ``t_k``, carried by deadlines ``<= x_j``.  Between nodes the
fields are treated as piecewise constant and right continuous; off-grid
query coordinates snap down to the nearest node.

Also provided are the two distances used by the convergence experiments
(a sup norm over cumulative fields and a Levy-Prokhorov distance computed
at grid resolution), a modulus of continuity, and the canonical CSV
interchange format for trajectories.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "Grid",
    "GridError",
    "ShapeError",
    "MeasurePath",
    "LevyDistanceResult",
    "sup_cdf_distance",
    "levy_distance",
    "levy_distance_cdf",
    "modulus_of_continuity",
    "modulus_of_values",
    "enforce_monotone",
    "write_trajectories",
    "read_trajectories",
]

# Relative fuzz used when mapping float coordinates to grid indices.  It
# absorbs representation error of nodes computed as index * step; genuinely
# off-grid points still snap down.
_SNAP = 1e-9


class GridError(ValueError):
    """Invalid grid geometry or configuration."""


class ShapeError(ValueError):
    """Operands live on different grids or have incompatible shapes."""


@dataclass(frozen=True)
class Grid:
    """Uniform rectangular grid over [0, t_max] x [0, x_max].

    Nodes are ``t_k = k * dt`` and ``x_j = j * dx`` with ``dt = t_max/n_t``
    and ``dx = x_max/n_x``; nodes are always recomputed as index * step so
    no accumulation drift occurs.
    """

    t_max: float
    x_max: float
    n_t: int
    n_x: int

    def __post_init__(self) -> None:
        if not (self.t_max > 0.0 and self.x_max > 0.0):
            raise GridError(f"horizons must be positive, got T={self.t_max}, X={self.x_max}")
        if self.n_t < 1 or self.n_x < 1:
            raise GridError(f"step counts must be >= 1, got n_t={self.n_t}, n_x={self.n_x}")

    @property
    def dt(self) -> float:
        return self.t_max / self.n_t

    @property
    def dx(self) -> float:
        return self.x_max / self.n_x

    def t_node(self, k: int) -> float:
        return k * self.dt

    def x_node(self, j: int) -> float:
        return j * self.dx

    def t_nodes(self) -> np.ndarray:
        return np.arange(self.n_t + 1) * self.dt

    def x_nodes(self) -> np.ndarray:
        return np.arange(self.n_x + 1) * self.dx

    def t_index(self, t: float) -> int:
        """Largest k with t_k <= t (snap down), clipped to [0, n_t]."""
        k = int(math.floor(t / self.dt + _SNAP))
        return min(max(k, 0), self.n_t)

    def x_index(self, x: float) -> int:
        """Largest j with x_j <= x (snap down), clipped to [0, n_x]."""
        j = int(math.floor(x / self.dx + _SNAP))
        return min(max(j, 0), self.n_x)

    def x_ceil_index(self, x: float) -> int:
        """Smallest j with x_j >= x, clipped to [0, n_x]."""
        j = int(math.ceil(x / self.dx - _SNAP))
        return min(max(j, 0), self.n_x)

    def refined(self, levels: int = 1) -> "Grid":
        """Grid with both steps halved `levels` times (same horizons)."""
        f = 2**levels
        return Grid(self.t_max, self.x_max, self.n_t * f, self.n_x * f)

    def eps_cells(self, eps: float) -> int:
        """Number of deadline cells in eps; raises unless eps is a positive
        integer multiple of dx."""
        ratio = eps / self.dx
        cells = int(round(ratio))
        if cells < 1 or abs(ratio - cells) > 1e-9 * max(1.0, ratio):
            near = max(1, cells) * self.dx
            raise GridError(
                f"eps={eps} is not a positive integer multiple of dx={self.dx}; "
                f"nearest grid-aligned value is {near}"
            )
        return cells


def enforce_monotone(values: np.ndarray, axis: int, guard: float, label: str) -> np.ndarray:
    """Snap `values` to be nondecreasing along `axis`.

    Violations up to `guard` are treated as floating-point noise and removed
    with a running maximum; anything larger raises.  Solver outputs that are
    monotone in exact arithmetic go through this before being returned.
    """
    mono = np.maximum.accumulate(values, axis=axis)
    worst = float(np.max(mono - values)) if values.size else 0.0
    if worst > guard:
        raise ShapeError(f"{label}: monotonicity violation {worst:.3e} exceeds guard {guard:.3e}")
    return mono


@dataclass
class MeasurePath:
    """Cumulative field of a vector measure-valued path on a `Grid`.

    ``values`` has shape (K, n_t+1, n_x+1) with ``values[i, k, j]`` the mass
    of component ``i`` at time ``t_k`` with deadlines in ``[0, x_j]``.  Fields
    are nonnegative and nondecreasing in the deadline index; paths flagged
    ``increasing`` are nondecreasing in the time index at every level as well.

    Instances are built once (``zeros`` + ``add_mass`` / ``from_values``) and
    treated as read-only afterwards; they are then safe to share across
    worker threads.
    """

    grid: Grid
    K: int
    values: np.ndarray

    @classmethod
    def zeros(cls, grid: Grid, K: int) -> "MeasurePath":
        if K < 1:
            raise GridError(f"component count must be >= 1, got {K}")
        return cls(grid, K, np.zeros((K, grid.n_t + 1, grid.n_x + 1)))

    @classmethod
    def from_values(cls, grid: Grid, values: np.ndarray, *, increasing: bool = False,
                    guard: float = 0.0) -> "MeasurePath":
        values = np.asarray(values, dtype=float)
        if values.ndim != 3 or values.shape[1:] != (grid.n_t + 1, grid.n_x + 1):
            raise ShapeError(f"field shape {values.shape} does not match grid "
                             f"(K, {grid.n_t + 1}, {grid.n_x + 1})")
        path = cls(grid, values.shape[0], values)
        path.validate(increasing=increasing, tol=guard)
        return path

    def copy(self) -> "MeasurePath":
        return MeasurePath(self.grid, self.K, self.values.copy())

    def add_mass(self, i: int, t: float, x: float, mass: float) -> None:
        """Deposit `mass` at component `i`, time `t`, deadline `x` (builder op).

        The cumulative field picks the mass up at every node with
        ``t_k >= t`` and ``x_j >= x``.
        """
        if mass < 0.0:
            raise ValueError(f"mass must be nonnegative, got {mass}")
        g = self.grid
        k0 = int(math.ceil(t / g.dt - _SNAP))
        j0 = int(math.ceil(x / g.dx - _SNAP))
        if k0 > g.n_t or j0 > g.n_x:
            raise GridError(f"deposit at (t={t}, x={x}) lies outside the grid")
        self.values[i, max(k0, 0):, max(j0, 0):] += mass

    def total_mass(self, i: int, k: int | None = None) -> float | np.ndarray:
        """Total mass of component `i`: scalar at time index `k`, else the path."""
        if k is None:
            return self.values[i, :, self.grid.n_x]
        return float(self.values[i, k, self.grid.n_x])

    def interval_mass(self, i: int, k: int, x_lo: float, x_hi: float, *,
                      closed_left: bool = True) -> float:
        """Mass of component `i` at time index `k` with deadline in [x_lo, x_hi].

        Endpoints snap down to grid nodes; a closed left endpoint includes the
        whole grid cell containing `x_lo` (grid-resolution upper approximation
        of "mass at exactly x_lo").  ``closed_left=False`` queries (x_lo, x_hi].
        Returns 0 when x_lo > x_hi.
        """
        if not (0 <= i < self.K):
            raise IndexError(f"component {i} out of range [0, {self.K})")
        if not (0 <= k <= self.grid.n_t):
            raise IndexError(f"time index {k} out of range [0, {self.grid.n_t}]")
        if x_lo > x_hi:
            return 0.0
        j_hi = self.grid.x_index(x_hi)
        j_lo = self.grid.x_index(x_lo)
        if closed_left:
            j_lo -= 1
        hi = float(self.values[i, k, j_hi])
        lo = float(self.values[i, k, j_lo]) if j_lo >= 0 else 0.0
        return hi - lo

    def validate(self, *, increasing: bool = False, tol: float = 0.0) -> None:
        """Full-scan invariant check: nonnegative, nondecreasing in deadline
        (and in time when `increasing`), within slack `tol`."""
        v = self.values
        if v.min(initial=0.0) < -tol:
            raise ShapeError(f"negative mass {v.min():.3e} in cumulative field")
        dxv = np.diff(v, axis=2)
        if dxv.size and dxv.min() < -tol:
            raise ShapeError(f"deadline monotonicity violated by {-dxv.min():.3e}")
        if increasing:
            dtv = np.diff(v, axis=1)
            if dtv.size and dtv.min() < -tol:
                raise ShapeError(f"time monotonicity violated by {-dtv.min():.3e}")


@dataclass(frozen=True)
class LevyDistanceResult:
    """Levy-Prokhorov distance estimate `d` together with the sup-CDF
    distance that dominates it."""

    d: float
    sup_cdf: float

    def __post_init__(self) -> None:
        if self.d > self.sup_cdf + 1e-15:
            raise ValueError(f"Levy distance {self.d} exceeds sup-CDF bound {self.sup_cdf}")


def _check_same_grid(p1: MeasurePath, p2: MeasurePath) -> None:
    if p1.grid != p2.grid:
        raise ShapeError(f"grids differ: {p1.grid} vs {p2.grid}")
    if p1.K != p2.K:
        raise ShapeError(f"component counts differ: {p1.K} vs {p2.K}")


def sup_cdf_distance(p1: MeasurePath, p2: MeasurePath, i: int | None = None,
                     up_to_time: float | None = None) -> float:
    """max over grid nodes (t_k <= up_to_time, all x_j) of |F1 - F2|.

    With ``i=None`` the maximum also runs over components.
    """
    _check_same_grid(p1, p2)
    k_hi = p1.grid.n_t if up_to_time is None else p1.grid.t_index(up_to_time)
    diff = np.abs(p1.values[:, : k_hi + 1, :] - p2.values[:, : k_hi + 1, :])
    if i is not None:
        diff = diff[i]
    return float(diff.max()) if diff.size else 0.0


def _levy_ok(f_ref: np.ndarray, f_other: np.ndarray, h: float, cells: int) -> bool:
    # f_ref(x - h) - h <= f_other(x) <= f_ref(x + h) + h at every node, with
    # the reference CDF evaluated by snapping down and saturating off-grid.
    n = len(f_ref) - 1
    j = np.arange(n + 1)
    lo_idx = np.clip(j - cells, -1, n)
    lo = np.where(lo_idx >= 0, f_ref[np.clip(lo_idx, 0, n)], 0.0)
    hi = f_ref[np.clip(j + cells, 0, n)]
    return bool(np.all(lo - h <= f_other + 1e-15) and np.all(f_other <= hi + h + 1e-15))


def levy_distance_cdf(f1: np.ndarray, f2: np.ndarray, dx: float,
                      resolution: float = 1e-6) -> LevyDistanceResult:
    """Levy-Prokhorov distance between two CDFs sampled on the same deadline grid.

    Computed by bisection over h on multiples of ``max(dx, resolution)``; the
    predicate is evaluated in both orders so the result is exactly symmetric.
    The returned value is capped by the sup-CDF distance, which dominates the
    true distance and makes the cap safe at grid resolution.
    """
    f1 = np.asarray(f1, dtype=float)
    f2 = np.asarray(f2, dtype=float)
    if f1.shape != f2.shape:
        raise ShapeError(f"CDF shapes differ: {f1.shape} vs {f2.shape}")
    sup = float(np.max(np.abs(f1 - f2))) if f1.size else 0.0
    if sup == 0.0:
        return LevyDistanceResult(0.0, 0.0)
    step = max(dx, resolution)

    def ok(h: float) -> bool:
        cells = int(math.ceil(h / dx - _SNAP))
        return _levy_ok(f1, f2, h, cells) and _levy_ok(f2, f1, h, cells)

    lo, hi = 0, int(math.ceil(sup / step)) + 1
    if ok(0.0):
        return LevyDistanceResult(0.0, sup)
    while hi - lo > 1:  # smallest multiple of `step` satisfying the predicate
        mid = (lo + hi) // 2
        if ok(mid * step):
            hi = mid
        else:
            lo = mid
    return LevyDistanceResult(min(hi * step, sup), sup)


def levy_distance(p1: MeasurePath, p2: MeasurePath, i: int, k: int,
                  resolution: float = 1e-6) -> LevyDistanceResult:
    """Levy-Prokhorov distance between single-time slices of two paths."""
    _check_same_grid(p1, p2)
    return levy_distance_cdf(p1.values[i, k], p2.values[i, k], p1.grid.dx, resolution)


def modulus_of_values(values: np.ndarray, dt: float, window: float,
                      up_to_time: float | None = None) -> float:
    """Modulus of continuity of a grid-sampled scalar path:
    max |v(t_k) - v(t_l)| over node pairs with |t_k - t_l| <= window."""
    v = np.asarray(values, dtype=float)
    if up_to_time is not None:
        v = v[: int(math.floor(up_to_time / dt + _SNAP)) + 1]
    shift_max = int(math.floor(window / dt + _SNAP))
    worst = 0.0
    for s in range(1, min(shift_max, len(v) - 1) + 1):
        d = float(np.max(np.abs(v[s:] - v[:-s])))
        worst = max(worst, d)
    return worst


def modulus_of_continuity(path: MeasurePath, i: int, window: float,
                          up_to_time: float | None = None,
                          x: float | None = None) -> float:
    """Modulus of continuity in time of a component's cumulative field.

    Applied to the total-mass marginal by default, or to the level ``[0, x]``
    when `x` is given.  Requires ``window >= dt``.
    """
    g = path.grid
    if window < g.dt - 1e-15:
        raise GridError(f"window {window} is below grid resolution dt={g.dt}")
    j = g.n_x if x is None else g.x_index(x)
    return modulus_of_values(path.values[i, :, j], g.dt, window, up_to_time)


# ---------------------------------------------------------------------------
# CSV interchange
#
# Canonical trajectory format: header `component,i,t,x,value`, one row per
# grid node, 17 significant digits.  Time paths (no deadline coordinate)
# leave the x column empty.
# ---------------------------------------------------------------------------

def write_trajectories(file, grid: Grid, measures: dict[str, MeasurePath] | None = None,
                       time_paths: dict[str, np.ndarray] | None = None) -> None:
    """Write measure paths and time paths to `file` (path or file object)."""
    measures = measures or {}
    time_paths = time_paths or {}
    own = isinstance(file, (str, bytes)) or hasattr(file, "__fspath__")
    fh = open(file, "w", newline="") if own else file
    try:
        w = csv.writer(fh)
        w.writerow(["component", "i", "t", "x", "value"])
        tn, xn = grid.t_nodes(), grid.x_nodes()
        for name, path in measures.items():
            if path.grid != grid:
                raise ShapeError(f"measure {name!r} lives on a different grid")
            for i in range(path.K):
                for k in range(grid.n_t + 1):
                    row_vals = path.values[i, k]
                    for j in range(grid.n_x + 1):
                        w.writerow([name, i, f"{tn[k]:.17g}", f"{xn[j]:.17g}",
                                    f"{row_vals[j]:.17g}"])
        for name, vals in time_paths.items():
            vals = np.asarray(vals, dtype=float)
            if vals.ndim != 2 or vals.shape[1] != grid.n_t + 1:
                raise ShapeError(f"time path {name!r} has shape {vals.shape}, "
                                 f"expected (K, {grid.n_t + 1})")
            for i in range(vals.shape[0]):
                for k in range(grid.n_t + 1):
                    w.writerow([name, i, f"{tn[k]:.17g}", "", f"{vals[i, k]:.17g}"])
    finally:
        if own:
            fh.close()


def _uniform_step(nodes: np.ndarray, label: str) -> float:
    if len(nodes) < 2:
        raise GridError(f"{label} axis needs at least two nodes")
    steps = np.diff(nodes)
    if np.max(np.abs(steps - steps[0])) > 1e-9 * max(steps[0], 1.0):
        raise GridError(f"{label} nodes are not uniformly spaced")
    return float(steps[0])


def read_trajectories(file) -> tuple[Grid, dict[str, np.ndarray], dict[str, np.ndarray]]:
    """Read the canonical CSV format back.

    Returns ``(grid, measures, time_paths)`` with raw arrays; measure arrays
    have shape (K, n_t+1, n_x+1) and time paths (K, n_t+1).
    """
    own = isinstance(file, (str, bytes)) or hasattr(file, "__fspath__")
    fh = open(file, "r", newline="") if own else file
    try:
        rows = list(csv.reader(fh))
    finally:
        if own:
            fh.close()
    if not rows or rows[0] != ["component", "i", "t", "x", "value"]:
        raise GridError("missing or malformed trajectory CSV header")
    records: dict[str, list[tuple[int, float, float | None, float]]] = {}
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != 5:
            raise GridError(f"line {lineno}: expected 5 columns, got {len(row)}")
        name, i_s, t_s, x_s, v_s = row
        try:
            rec = (int(i_s), float(t_s), float(x_s) if x_s != "" else None, float(v_s))
        except ValueError as exc:
            raise GridError(f"line {lineno}: {exc}") from None
        records.setdefault(name, []).append(rec)

    ts = sorted({t for recs in records.values() for (_, t, _, _) in recs})
    xs = sorted({x for recs in records.values() for (_, _, x, _) in recs if x is not None})
    if not xs:
        raise GridError("trajectory CSV contains no measure-path rows")
    t_arr, x_arr = np.asarray(ts), np.asarray(xs)
    dt, dx = _uniform_step(t_arr, "time"), _uniform_step(x_arr, "deadline")
    grid = Grid(float(t_arr[-1]), float(x_arr[-1]), len(ts) - 1, len(xs) - 1)
    t_of = {t: k for k, t in enumerate(ts)}
    x_of = {x: j for j, x in enumerate(xs)}

    measures: dict[str, np.ndarray] = {}
    time_paths: dict[str, np.ndarray] = {}
    for name, recs in records.items():
        K = max(i for (i, _, _, _) in recs) + 1
        if any(x is None for (_, _, x, _) in recs):
            arr = np.full((K, grid.n_t + 1), np.nan)
            for i, t, _, v in recs:
                arr[i, t_of[t]] = v
            time_paths[name] = arr
        else:
            arr = np.full((K, grid.n_t + 1, grid.n_x + 1), np.nan)
            for i, t, x, v in recs:
                arr[i, t_of[t], x_of[x]] = v
            measures[name] = arr
        if np.isnan(arr).any():
            raise GridError(f"field {name!r} is missing grid nodes")
    return grid, measures, time_paths
