"""Evolving metrics on compact model backends and their differential operators.

Backends:

* ``torus-1d`` / ``torus-2d`` -- flat tori with constant edge lengths.  The
  metric flow is static (Ricci curvature vanishes identically).
* ``shrinking-sphere`` -- the round n-sphere with r(t)^2 = r0^2 - 2(n-1)t,
  the closed-form homogeneous solution of the metric flow dg/dt = -2 Ric.
* ``rotsym-surface`` -- S^2 with metric exp(2 phi(theta, t)) * g_round,
  evolved numerically in the conformal gauge d phi/dt = -exp(-2 phi)
  (1 - lap0 phi), where lap0 is the round-sphere Laplacian.

Norm conventions (fixed once, used everywhere): |T| of a symmetric 2-tensor
is the frame Frobenius norm, so the round n-sphere of radius r has
|Rm| = sqrt(2 n (n-1)) / r^2; in dimension 2 this makes |Rm| = |R| and we tie
|grad Rm| := |grad R| by the same convention.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .grids import (
    ColatitudeGrid,
    FrameTensorField,
    GridMismatchError,
    PeriodicGrid1D,
    PeriodicGrid2D,
    ScalarField,
    colat_d1,
    colat_d2,
    colat_flux_laplacian,
    periodic_d1,
    periodic_d2,
)

__all__ = [
    "GeometrySnapshot",
    "FlowTrajectory",
    "CurvatureFields",
    "CurvatureBounds",
    "Region",
    "FlowBlowUpError",
    "make_torus",
    "make_shrinking_sphere",
    "evolve_rotsym_surface",
    "snapshot_at",
    "laplace_beltrami",
    "gradient_sq",
    "gradient_inner",
    "grad_frame",
    "hessian_frame",
    "geodesic_distance",
    "curvature_data",
    "curvature_bounds",
    "integrate",
    "volume",
    "tensor_trace",
    "tensor_frob_sq",
    "tensor_inner",
    "tensor_lambda_max",
    "metric_tensor",
]

BOUND_INFLATION = 1.05  # measured curvature suprema are inflated by this factor


class FlowBlowUpError(RuntimeError):
    """The numerically evolved metric left the resolved regime."""

    def __init__(self, first_bad_time: float):
        super().__init__(f"conformal factor became non-finite at t = {first_bad_time:.6g}")
        self.first_bad_time = first_bad_time


def sphere_surface_area(n: int) -> float:
    """Area of the unit n-sphere."""
    return 2.0 * math.pi ** ((n + 1) / 2.0) / math.gamma((n + 1) / 2.0)


@dataclass(frozen=True, eq=False)
class GeometrySnapshot:
    """One backend metric frozen at a time t, with cached curvature."""

    backend: str
    t: float
    grid: object
    n: int
    lengths: tuple | None = None  # tori
    radius: float | None = None  # shrinking sphere
    phi: np.ndarray | None = None  # rotsym conformal factor on the colatitude grid

    def __post_init__(self):
        if self.backend == "shrinking-sphere" and not self.radius > 0.0:
            raise ValueError(f"sphere radius must stay positive, got {self.radius}")
        if self.backend in ("torus-1d", "torus-2d") and any(
            not (v > 0.0 and np.isfinite(v)) for v in self.lengths
        ):
            raise ValueError(f"torus edge lengths must be positive, got {self.lengths}")
        if self.phi is not None:
            phi = np.asarray(self.phi, dtype=float)
            object.__setattr__(self, "phi", phi)
            if not np.all(np.isfinite(phi)):
                raise ValueError("conformal factor contains non-finite values")

    @property
    def ncomp(self) -> int:
        return 1 if self.backend == "torus-1d" else 3

    @property
    def second_direction_multiplicity(self) -> int:
        """Weight of the h22 frame direction in traces and norms."""
        if self.backend == "torus-1d":
            return 0
        if self.backend == "shrinking-sphere":
            return self.n - 1
        return 1

    def conformal_factor(self) -> np.ndarray:
        """log of the frame scale relative to the static round/flat reference."""
        if self.backend == "shrinking-sphere":
            return np.full(self.grid.shape, math.log(self.radius))
        if self.backend == "rotsym-surface":
            return self.phi
        return np.zeros(self.grid.shape)

    def field(self, values, allow_nan: bool = False) -> ScalarField:
        return ScalarField(self.grid, values, self.t, allow_nan)

    def tensor(self, comps, allow_nan: bool = False) -> FrameTensorField:
        return FrameTensorField(self.grid, comps, self.t, allow_nan)

    def constant_field(self, value: float) -> ScalarField:
        return self.field(np.full(self.grid.shape, float(value)))


def _check_grid(s: GeometrySnapshot, field) -> None:
    if field.grid != s.grid:
        raise GridMismatchError("field does not live on the snapshot's grid")


# ---------------------------------------------------------------------------
# trajectories
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class FlowTrajectory:
    """A time-indexed family of metric snapshots on [0, T].

    Closed-form backends (tori, shrinking sphere) evaluate snapshots exactly
    at any time; the rotsym backend stores (time, phi) samples and
    interpolates phi linearly in t.
    """

    backend: str
    T: float
    n: int
    interpolation: str  # "closed-form" | "piecewise-linear-in-t"
    grid: object
    lengths: tuple | None = None
    r0: float | None = None
    times: np.ndarray | None = None  # stored sample times
    phis: np.ndarray | None = None  # rotsym: (len(times), grid.size)

    def __post_init__(self):
        if not self.T > 0.0:
            raise ValueError(f"final time must be positive, got {self.T}")
        if self.times is not None:
            times = np.asarray(self.times, dtype=float)
            object.__setattr__(self, "times", times)
            if times[0] != 0.0 or not np.isclose(times[-1], self.T):
                raise ValueError("stored times must start at 0 and end at T")
            if np.any(np.diff(times) <= 0.0):
                raise ValueError("stored times must be strictly increasing")

    @property
    def snapshots(self) -> list:
        return [self.snapshot_at(t) for t in self.times]

    def radius_at(self, t: float) -> float:
        rsq = self.r0 ** 2 - 2.0 * (self.n - 1) * t
        if rsq <= 0.0:
            raise ValueError(f"sphere metric degenerate at t = {t}")
        return math.sqrt(rsq)

    def snapshot_at(self, t: float) -> GeometrySnapshot:
        if not (-1e-12 <= t <= self.T * (1.0 + 1e-12)):
            raise ValueError(f"time {t} outside [0, {self.T}]")
        t = min(max(t, 0.0), self.T)
        if self.backend in ("torus-1d", "torus-2d"):
            return GeometrySnapshot(self.backend, t, self.grid, self.n, lengths=self.lengths)
        if self.backend == "shrinking-sphere":
            return GeometrySnapshot(
                self.backend, t, self.grid, self.n, radius=self.radius_at(t)
            )
        # rotsym: linear blend of the neighboring stored conformal factors
        k = int(np.searchsorted(self.times, t, side="right") - 1)
        k = min(max(k, 0), len(self.times) - 2)
        t0, t1 = self.times[k], self.times[k + 1]
        w = (t - t0) / (t1 - t0)
        phi = (1.0 - w) * self.phis[k] + w * self.phis[k + 1]
        return GeometrySnapshot(self.backend, t, self.grid, self.n, phi=phi)


def snapshot_at(traj: FlowTrajectory, t: float) -> GeometrySnapshot:
    """Evaluate the trajectory's metric at time t."""
    return traj.snapshot_at(t)


def make_torus(dim: int, edge_lengths, grid_sizes, T: float = 1.0) -> FlowTrajectory:
    """Static flat torus trajectory; all curvature fields vanish identically."""
    if dim not in (1, 2):
        raise ValueError(f"torus dimension must be 1 or 2, got {dim}")
    edge_lengths = [float(v) for v in np.atleast_1d(edge_lengths)]
    grid_sizes = [int(v) for v in np.atleast_1d(grid_sizes)]
    if len(edge_lengths) != dim or len(grid_sizes) != dim:
        raise ValueError(f"need {dim} edge lengths and grid sizes")
    if any(not (v > 0.0 and np.isfinite(v)) for v in edge_lengths):
        raise ValueError(f"edge lengths must be positive and finite, got {edge_lengths}")
    if any(s <= 0 for s in grid_sizes):
        raise ValueError(f"grid sizes must be positive, got {grid_sizes}")
    if dim == 1:
        grid = PeriodicGrid1D(edge_lengths[0], grid_sizes[0])
        backend = "torus-1d"
    else:
        grid = PeriodicGrid2D(tuple(edge_lengths), tuple(grid_sizes))
        backend = "torus-2d"
    return FlowTrajectory(
        backend=backend,
        T=float(T),
        n=dim,
        interpolation="closed-form",
        grid=grid,
        lengths=tuple(edge_lengths),
        times=np.array([0.0, float(T)]),
    )


def make_shrinking_sphere(n: int, r0: float, T: float, grid_size: int) -> FlowTrajectory:
    """Round shrinking sphere with r(t)^2 = r0^2 - 2(n-1)t."""
    if n < 2:
        raise ValueError(f"sphere dimension must be >= 2, got {n}")
    if not r0 > 0.0:
        raise ValueError(f"initial radius must be positive, got {r0}")
    t_max = r0 ** 2 / (2.0 * (n - 1))
    if not 0.0 < T < t_max:
        raise ValueError(
            f"final time must satisfy 0 < T < r0^2 / (2(n-1)) = {t_max:.6g}, got {T}"
        )
    grid = ColatitudeGrid(int(grid_size))
    return FlowTrajectory(
        backend="shrinking-sphere",
        T=float(T),
        n=int(n),
        interpolation="closed-form",
        grid=grid,
        r0=float(r0),
        times=np.array([0.0, float(T)]),
    )


def _pole_slope(phi: np.ndarray, h: float, end: str) -> float:
    # one-sided slope at the pole from a quadratic through the 3 nearest nodes
    if end == "north":
        theta = (np.arange(3) + 0.5) * h
        vals = phi[:3]
        at = 0.0
    else:
        theta = np.pi - (np.arange(3)[::-1] + 0.5) * h
        vals = phi[-3:]
        at = np.pi
    coeff = np.polyfit(theta - at, vals, 2)
    return float(coeff[1])


def check_pole_regularity(phi: np.ndarray, h: float, tol: float | None = None) -> None:
    """Reject profiles whose one-sided derivative at a pole is not ~0.

    For smooth rotationally symmetric data the quadratic-fit slope is
    O(h^2 * |phi'''|), so the tolerance scales with h^2.
    """
    if tol is None:
        tol = 10.0 * h * h * (1.0 + float(np.ptp(phi)))
    for end in ("north", "south"):
        slope = _pole_slope(phi, h, end)
        if abs(slope) > tol:
            raise ValueError(
                f"pole regularity violated: d(phi)/d(theta) ~ {slope:.3g} at the {end} pole"
            )


def _rotsym_rhs(phi: np.ndarray, h: float) -> np.ndarray:
    # surface Ricci flow in conformal gauge: d phi/dt = -K = -exp(-2 phi)(1 - lap0 phi)
    return -np.exp(-2.0 * phi) * (1.0 - colat_flux_laplacian(phi, h, 1))


def evolve_rotsym_surface(
    initial_phi,
    T: float,
    time_steps: int,
    grid_size: int,
    store_every: int = 1,
) -> FlowTrajectory:
    """Evolve the conformal factor of a rotationally symmetric S^2 metric.

    Classic RK4 with fixed step T / time_steps; every ``store_every``-th state
    is retained for linear-in-t interpolation.  Blow-up (non-finite or wildly
    large phi) raises :class:`FlowBlowUpError` with the first bad time.
    """
    if not T > 0.0:
        raise ValueError(f"final time must be positive, got {T}")
    if time_steps < 1 or time_steps % max(store_every, 1) != 0:
        raise ValueError("time_steps must be a positive multiple of store_every")
    grid = ColatitudeGrid(int(grid_size))
    if isinstance(initial_phi, ScalarField):
        if initial_phi.grid != grid:
            raise GridMismatchError("initial profile does not live on the requested grid")
        phi = initial_phi.values.copy()
    else:
        phi = np.asarray(initial_phi, dtype=float).copy()
        if phi.shape != grid.shape:
            raise GridMismatchError(
                f"initial profile shape {phi.shape} != grid shape {grid.shape}"
            )
    if not np.all(np.isfinite(phi)):
        raise ValueError("initial profile contains non-finite values")
    h = grid.h
    check_pole_regularity(phi, h)

    dt = T / time_steps
    stored = [phi.copy()]
    times = [0.0]
    with np.errstate(over="ignore", invalid="ignore"):  # blow-up is detected, not a bug
        for step in range(time_steps):
            k1 = _rotsym_rhs(phi, h)
            k2 = _rotsym_rhs(phi + 0.5 * dt * k1, h)
            k3 = _rotsym_rhs(phi + 0.5 * dt * k2, h)
            k4 = _rotsym_rhs(phi + dt * k3, h)
            phi = phi + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            t_now = (step + 1) * dt
            if not np.all(np.isfinite(phi)) or np.max(np.abs(phi)) > 50.0:
                raise FlowBlowUpError(t_now)
            if (step + 1) % store_every == 0:
                stored.append(phi.copy())
                times.append(t_now)
    times = np.asarray(times)
    times[-1] = T  # guard rounding on the final sample
    return FlowTrajectory(
        backend="rotsym-surface",
        T=float(T),
        n=2,
        interpolation="piecewise-linear-in-t",
        grid=grid,
        times=times,
        phis=np.asarray(stored),
    )


# ---------------------------------------------------------------------------
# differential operators
# ---------------------------------------------------------------------------

def laplace_beltrami(s: GeometrySnapshot, field: ScalarField) -> ScalarField:
    """Laplace-Beltrami operator of the snapshot metric."""
    _check_grid(s, field)
    u = field.values
    if s.backend == "torus-1d":
        out = periodic_d2(u, s.grid.h)
    elif s.backend == "torus-2d":
        hx, hy = s.grid.hs
        out = periodic_d2(u, hx, axis=0) + periodic_d2(u, hy, axis=1)
    elif s.backend == "shrinking-sphere":
        out = colat_flux_laplacian(u, s.grid.h, s.n - 1) / s.radius ** 2
    else:
        out = np.exp(-2.0 * s.phi) * colat_flux_laplacian(u, s.grid.h, 1)
    return field.with_values(out)


def grad_frame(s: GeometrySnapshot, field: ScalarField) -> list:
    """Orthonormal-frame components of the gradient."""
    _check_grid(s, field)
    u = field.values
    if s.backend == "torus-1d":
        return [periodic_d1(u, s.grid.h)]
    if s.backend == "torus-2d":
        hx, hy = s.grid.hs
        return [periodic_d1(u, hx, axis=0), periodic_d1(u, hy, axis=1)]
    scale = np.exp(-s.conformal_factor())
    return [scale * colat_d1(u, s.grid.h), np.zeros_like(u)]


def gradient_sq(s: GeometrySnapshot, field: ScalarField) -> ScalarField:
    """Pointwise squared gradient norm |grad u|^2."""
    comps = grad_frame(s, field)
    out = sum(c * c for c in comps)
    return field.with_values(out)


def gradient_inner(s: GeometrySnapshot, a: ScalarField, b: ScalarField) -> ScalarField:
    """Pointwise inner product <grad a, grad b>."""
    ca = grad_frame(s, a)
    cb = grad_frame(s, b)
    out = sum(x * y for x, y in zip(ca, cb))
    return a.with_values(out, allow_nan=a.allow_nan or b.allow_nan)


def hessian_frame(s: GeometrySnapshot, field: ScalarField) -> FrameTensorField:
    """Covariant Hessian in the orthonormal frame.

    On tori the Christoffel symbols vanish and the components are plain
    second partials.  For the metric exp(2 phi(theta)) (d theta^2 +
    sin^2 theta d psi^2) acting on u(theta):
    h11 = exp(-2 phi)(u'' - phi' u'), h22 = exp(-2 phi)(cot theta + phi') u',
    h12 = 0; the shrinking sphere is the constant-phi special case, with the
    same h22 formula in each of the n - 1 tangential directions.
    """
    _check_grid(s, field)
    u = field.values
    if s.backend == "torus-1d":
        comps = periodic_d2(u, s.grid.h)[..., None]
    elif s.backend == "torus-2d":
        hx, hy = s.grid.hs
        h11 = periodic_d2(u, hx, axis=0)
        h22 = periodic_d2(u, hy, axis=1)
        h12 = periodic_d1(periodic_d1(u, hx, axis=0), hy, axis=1)
        comps = np.stack([h11, h22, h12], axis=-1)
    else:
        h = s.grid.h
        theta = s.grid.nodes
        phi = s.conformal_factor()
        phi_d = colat_d1(phi, h) if s.backend == "rotsym-surface" else np.zeros_like(u)
        scale = np.exp(-2.0 * phi)
        du = colat_d1(u, h)
        h11 = scale * (colat_d2(u, h) - phi_d * du)
        h22 = scale * (1.0 / np.tan(theta) + phi_d) * du
        comps = np.stack([h11, h22, np.zeros_like(u)], axis=-1)
    return FrameTensorField(s.grid, comps, s.t, allow_nan=field.allow_nan)


def geodesic_distance(s: GeometrySnapshot, x0) -> ScalarField:
    """Distance field from a base point.

    ``x0`` is a node index (int) on the 1-d torus, an (i, j) index pair on
    the 2-d torus, and one of "north" / "south" on the sphere backends
    (distance from a non-pole point is not supported on colatitude grids).
    """
    if s.backend == "torus-1d":
        i0 = int(x0)
        if not 0 <= i0 < s.grid.size:
            raise ValueError(f"node index {x0} out of range")
        dx = np.abs(s.grid.nodes - s.grid.nodes[i0])
        out = np.minimum(dx, s.lengths[0] - dx)
    elif s.backend == "torus-2d":
        i0, j0 = (int(v) for v in x0)
        dx = np.abs(s.grid.nodes(0) - s.grid.nodes(0)[i0])
        dx = np.minimum(dx, s.lengths[0] - dx)
        dy = np.abs(s.grid.nodes(1) - s.grid.nodes(1)[j0])
        dy = np.minimum(dy, s.lengths[1] - dy)
        out = np.sqrt(dx[:, None] ** 2 + dy[None, :] ** 2)
    elif s.backend == "shrinking-sphere":
        theta = _pole_angle(s, x0)
        out = s.radius * theta
    else:
        theta = _pole_angle(s, x0)
        # arclength along a generator: cumulative midpoint rule on exp(phi)
        e = np.exp(s.phi if x0 == "north" else s.phi[::-1])
        h = s.grid.h
        out = h * np.cumsum(e) - 0.5 * h * e
        if x0 == "south":
            out = out[::-1]
    return s.field(out)


def _pole_angle(s: GeometrySnapshot, x0) -> np.ndarray:
    if x0 == "north":
        return s.grid.nodes
    if x0 == "south":
        return np.pi - s.grid.nodes
    raise ValueError(
        "distance on sphere backends is supported from the poles only; "
        f"got x0 = {x0!r}"
    )


# ---------------------------------------------------------------------------
# curvature
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class CurvatureFields:
    """Curvature of one snapshot: scalar, Ricci and derivative norms."""

    R: ScalarField
    ric: FrameTensorField
    norm_rm: ScalarField
    grad_R_norm: ScalarField
    lap_R: ScalarField
    norm_grad_rm: ScalarField
    norm_hess_R: ScalarField


def curvature_data(s: GeometrySnapshot) -> CurvatureFields:
    """All curvature fields of the snapshot (see module norm conventions)."""
    zero = np.zeros(s.grid.shape)
    if s.backend in ("torus-1d", "torus-2d"):
        zt = np.zeros(s.grid.shape + (s.ncomp,))
        return CurvatureFields(
            R=s.field(zero),
            ric=s.tensor(zt),
            norm_rm=s.field(zero),
            grad_R_norm=s.field(zero),
            lap_R=s.field(zero),
            norm_grad_rm=s.field(zero),
            norm_hess_R=s.field(zero),
        )
    if s.backend == "shrinking-sphere":
        n, r = s.n, s.radius
        R = n * (n - 1) / r ** 2
        ric_diag = (n - 1) / r ** 2
        comps = np.stack([np.full_like(zero, ric_diag)] * 2 + [zero], axis=-1)
        return CurvatureFields(
            R=s.field(np.full_like(zero, R)),
            ric=s.tensor(comps),
            norm_rm=s.field(np.full_like(zero, math.sqrt(2.0 * n * (n - 1)) / r ** 2)),
            grad_R_norm=s.field(zero),
            lap_R=s.field(zero),
            norm_grad_rm=s.field(zero),
            norm_hess_R=s.field(zero),
        )
    # rotsym surface: Gauss curvature from the conformal factor
    h = s.grid.h
    K = np.exp(-2.0 * s.phi) * (1.0 - colat_flux_laplacian(s.phi, h, 1))
    R = s.field(2.0 * K)
    ric = s.tensor(np.stack([K, K, zero], axis=-1))
    grad_R = np.exp(-s.phi) * colat_d1(R.values, h)
    hess_R = hessian_frame(s, R)
    return CurvatureFields(
        R=R,
        ric=ric,
        norm_rm=s.field(np.abs(R.values)),
        grad_R_norm=s.field(np.abs(grad_R)),
        lap_R=laplace_beltrami(s, R),
        norm_grad_rm=s.field(np.abs(grad_R)),
        norm_hess_R=s.field(np.sqrt(tensor_frob_sq(s, hess_R).values)),
    )


def scalar_curvature_rate(traj: FlowTrajectory, t: float, dt: float | None = None) -> ScalarField:
    """d/dt of the scalar curvature field: closed form where available,
    centered time differences on the numeric backend."""
    s = traj.snapshot_at(t)
    if traj.backend in ("torus-1d", "torus-2d"):
        return s.field(np.zeros(s.grid.shape))
    if traj.backend == "shrinking-sphere":
        n, r = traj.n, s.radius
        rate = 2.0 * n * (n - 1) ** 2 / r ** 4
        return s.field(np.full(s.grid.shape, rate))
    if dt is None:
        dt = float(np.min(np.diff(traj.times)))
    tm, tp = max(t - dt, 0.0), min(t + dt, traj.T)
    Rm = curvature_data(traj.snapshot_at(tm)).R.values
    Rp = curvature_data(traj.snapshot_at(tp)).R.values
    return s.field((Rp - Rm) / (tp - tm))


@dataclass(frozen=True)
class Region:
    """Spatial restriction used by curvature_bounds: whole manifold or a
    metric ball of radius r around x0 (with time-dependent distance)."""

    kind: str  # "whole" | "cube"
    x0: object = None
    r: float = None

    @staticmethod
    def whole() -> "Region":
        return Region("whole")

    @staticmethod
    def cube(x0, r: float) -> "Region":
        return Region("cube", x0, float(r))

    def mask(self, s: GeometrySnapshot) -> np.ndarray:
        if self.kind == "whole":
            return np.ones(s.grid.shape, dtype=bool)
        return geodesic_distance(s, self.x0).values <= self.r

    def describe(self) -> str:
        if self.kind == "whole":
            return "whole-manifold"
        return f"cube(x0={self.x0}, r={self.r:.6g})"


@dataclass(frozen=True)
class CurvatureBounds:
    """Curvature suprema over a region x time window, inflated so that the
    reported values dominate the measured ones despite discretization
    undershoot.  K2 bounds the (signed) sup of lap R."""

    K0: float
    K1: float
    K2: float
    k0: float
    k1: float
    k2: float
    region: str
    measured: dict


def _dominating(value: float) -> float:
    # inflate away from the measured sup, never below it
    return value + (BOUND_INFLATION - 1.0) * abs(value)


def curvature_bounds(
    traj: FlowTrajectory,
    region: Region,
    times: tuple,
    samples: int = 33,
) -> CurvatureBounds:
    """Componentwise curvature suprema over region x [t_a, t_b]."""
    t_a, t_b = times
    if not (0.0 <= t_a <= t_b <= traj.T):
        raise ValueError(f"time window [{t_a}, {t_b}] outside [0, {traj.T}]")
    sample_times = np.linspace(t_a, t_b, samples) if t_b > t_a else np.array([t_a])
    sup = {"K0": 0.0, "K1": 0.0, "K2": -np.inf, "k0": 0.0, "k1": 0.0, "k2": 0.0}
    seen = False
    for t in sample_times:
        s = traj.snapshot_at(t)
        mask = region.mask(s)
        if not np.any(mask):
            continue
        seen = True
        cd = curvature_data(s)
        ric_max = np.abs(cd.ric.comps[..., :2]).max(axis=-1)
        sup["K0"] = max(sup["K0"], float(ric_max[mask].max()))
        sup["K1"] = max(sup["K1"], float(cd.grad_R_norm.values[mask].max()))
        sup["K2"] = max(sup["K2"], float(cd.lap_R.values[mask].max()))
        sup["k0"] = max(sup["k0"], float(cd.norm_rm.values[mask].max()))
        sup["k1"] = max(sup["k1"], float(cd.norm_grad_rm.values[mask].max()))
        sup["k2"] = max(sup["k2"], float(cd.norm_hess_R.values[mask].max()))
    if not seen:
        raise ValueError("empty region: no grid node lies inside the requested cube")
    return CurvatureBounds(
        K0=_dominating(sup["K0"]),
        K1=_dominating(sup["K1"]),
        K2=_dominating(sup["K2"]),
        k0=_dominating(sup["k0"]),
        k1=_dominating(sup["k1"]),
        k2=_dominating(sup["k2"]),
        region=region.describe(),
        measured=sup,
    )


# ---------------------------------------------------------------------------
# integration and tensor algebra
# ---------------------------------------------------------------------------

def volume_weights(s: GeometrySnapshot) -> np.ndarray:
    """Quadrature weights of the metric volume element at the nodes."""
    if s.backend == "torus-1d":
        return np.full(s.grid.shape, s.grid.h)
    if s.backend == "torus-2d":
        hx, hy = s.grid.hs
        return np.full(s.grid.shape, hx * hy)
    theta = s.grid.nodes
    h = s.grid.h
    if s.backend == "shrinking-sphere":
        n = s.n
        return (
            sphere_surface_area(n - 1)
            * s.radius ** n
            * np.sin(theta) ** (n - 1)
            * h
        )
    return 2.0 * math.pi * np.exp(2.0 * s.phi) * np.sin(theta) * h


def integrate(s: GeometrySnapshot, field: ScalarField) -> float:
    """Integral of the field against the metric volume element."""
    _check_grid(s, field)
    return float(np.sum(volume_weights(s) * field.values))


def volume(s: GeometrySnapshot) -> float:
    return float(np.sum(volume_weights(s)))


def metric_tensor(s: GeometrySnapshot) -> FrameTensorField:
    """The metric itself in the orthonormal frame (identity components)."""
    one = np.ones(s.grid.shape)
    if s.ncomp == 1:
        comps = one[..., None]
    else:
        comps = np.stack([one, one, np.zeros_like(one)], axis=-1)
    return s.tensor(comps)


def tensor_trace(s: GeometrySnapshot, T: FrameTensorField) -> ScalarField:
    m = s.second_direction_multiplicity
    out = T.h11 + (m * T.h22 if m else 0.0)
    return ScalarField(s.grid, out, T.time, allow_nan=T.allow_nan)


def tensor_frob_sq(s: GeometrySnapshot, T: FrameTensorField) -> ScalarField:
    m = s.second_direction_multiplicity
    out = T.h11 ** 2
    if m:
        out = out + m * T.h22 ** 2 + 2.0 * T.h12 ** 2
    return ScalarField(s.grid, out, T.time, allow_nan=T.allow_nan)


def tensor_inner(s: GeometrySnapshot, A: FrameTensorField, B: FrameTensorField) -> ScalarField:
    m = s.second_direction_multiplicity
    out = A.h11 * B.h11
    if m:
        out = out + m * A.h22 * B.h22 + 2.0 * A.h12 * B.h12
    return ScalarField(s.grid, out, A.time, allow_nan=A.allow_nan or B.allow_nan)


def tensor_lambda_max(s: GeometrySnapshot, T: FrameTensorField) -> ScalarField:
    """Largest eigenvalue of the frame tensor (closed form in 2 x 2)."""
    if T.ncomp == 1:
        out = T.h11.copy()
    elif s.backend == "shrinking-sphere" and s.n > 2:
        out = np.maximum(T.h11, T.h22)  # h12 = 0 for rotationally symmetric data
    else:
        mean = 0.5 * (T.h11 + T.h22)
        out = mean + np.sqrt(0.25 * (T.h11 - T.h22) ** 2 + T.h12 ** 2)
    return ScalarField(s.grid, out, T.time, allow_nan=T.allow_nan)
