"""W-entropy along the coupled flow and the monotonicity-formula check.

W(g, v, tau) with v = sqrt(u) is evaluated directly in terms of u (note
4 |grad v|^2 = |grad u|^2 / u), and its measured time derivative is compared
against the production integral 2 tau int |Ric - Hess ln u - g/(2 tau)|^2 u,
whose integrand is a squared frame norm and hence nonnegative by
construction.  Hess ln u is assembled as Hess u / u - (du (x) du) / u^2 to
avoid cancellation where u is small.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .conjugate import SolutionHistory
from .geometry import (
    FlowTrajectory,
    GeometrySnapshot,
    curvature_data,
    grad_frame,
    gradient_sq,
    hessian_frame,
    integrate,
    metric_tensor,
    tensor_frob_sq,
)
from .grids import FrameTensorField, ScalarField

__all__ = [
    "EntropyTrace",
    "w_entropy",
    "entropy_production",
    "production_integrand",
    "hessian_log",
    "monotonicity_check",
]

NORMALIZATION_TOL = 1e-6  # strict-mode gate on |int u dg - 1| at the terminal time


def hessian_log(s: GeometrySnapshot, u: ScalarField) -> FrameTensorField:
    """Hess ln u = Hess u / u - (du (x) du) / u^2 in frame components."""
    hess = hessian_frame(s, u)
    g = grad_frame(s, u)
    usq = u.values ** 2
    comps = hess.comps / u.values[..., None]
    comps = comps.copy()
    comps[..., 0] -= g[0] * g[0] / usq
    if len(g) > 1:
        comps[..., 1] -= g[1] * g[1] / usq
        comps[..., 2] -= g[0] * g[1] / usq
    return FrameTensorField(s.grid, comps, s.t, allow_nan=u.allow_nan)


def w_entropy(
    s: GeometrySnapshot, u: ScalarField, tau: float, strict: bool = False
) -> float:
    """The entropy integral

        int [tau (|grad u|^2/u + R u) - u ln u - (n/2) ln(4 pi tau) u - n u] dg.

    ``strict`` rejects data whose mass differs from 1 beyond tolerance (the
    monotonicity statement assumes unit mass; the integral itself is defined
    for any positive u).
    """
    if not tau > 0.0:
        raise ValueError(f"tau must be positive, got {tau}")
    if np.any(u.values < 0.0):
        raise ValueError("entropy needs nonnegative u")
    mass = integrate(s, u)
    if strict and abs(mass - 1.0) > NORMALIZATION_TOL:
        raise ValueError(
            f"strict mode: int u dg = {mass:.12g} is not 1 within {NORMALIZATION_TOL}"
        )
    n = s.n
    R = curvature_data(s).R.values
    # nodes where the tail of u underflowed to 0 contribute by the continuous
    # extension u log u -> 0, |grad u|^2 / u -> 0
    pos = u.values > 0.0
    safe_u = np.where(pos, u.values, 1.0)
    integrand = (
        tau * (np.where(pos, gradient_sq(s, u).values / safe_u, 0.0) + R * u.values)
        - np.where(pos, u.values * np.log(safe_u), 0.0)
        - 0.5 * n * math.log(4.0 * math.pi * tau) * u.values
        - n * u.values
    )
    return integrate(s, ScalarField(s.grid, integrand, s.t))


def production_integrand(s: GeometrySnapshot, u: ScalarField, tau: float) -> ScalarField:
    """|Ric - Hess ln u - g/(2 tau)|^2 u, pointwise (always >= 0)."""
    if not tau > 0.0:
        raise ValueError(f"tau must be positive, got {tau}")
    ric = curvature_data(s).ric
    hess_ln = hessian_log(s, u)
    gmetric = metric_tensor(s)
    comps = ric.comps - hess_ln.comps - gmetric.comps / (2.0 * tau)
    defect = FrameTensorField(s.grid, comps, s.t, allow_nan=u.allow_nan)
    vals = tensor_frob_sq(s, defect).values * u.values
    return ScalarField(s.grid, vals, s.t, allow_nan=u.allow_nan)


def entropy_production(s: GeometrySnapshot, u: ScalarField, tau: float) -> float:
    """2 tau int |Ric - Hess ln u - g/(2 tau)|^2 u dg."""
    return 2.0 * tau * integrate(s, production_integrand(s, u, tau))


@dataclass(frozen=True, eq=False)
class EntropyTrace:
    """Per-time entropy record over the stored history (t = T excluded:
    tau = 0 is singular there).  dW/dt uses centered differences, so its
    first and last entries are NaN; residual = |dW/dt - production|."""

    times: np.ndarray
    tau: np.ndarray
    W: np.ndarray
    dWdt: np.ndarray
    production: np.ndarray
    residual: np.ndarray
    normalization: np.ndarray
    scale_factor: float  # applied to the history before evaluation (1 = none)
    monotonicity_tol: float

    @property
    def interior(self) -> np.ndarray:
        return np.isfinite(self.dWdt)

    @property
    def violations(self) -> np.ndarray:
        """Sample times where dW/dt < -tolerance."""
        bad = self.interior & (self.dWdt < -self.monotonicity_tol)
        return self.times[bad]

    @property
    def min_dWdt(self) -> float:
        return float(np.min(self.dWdt[self.interior]))

    @property
    def normalization_drift(self) -> float:
        return float(np.max(np.abs(self.normalization - self.normalization[-1])))

    def max_residual(self, t_lo: float = None, t_hi: float = None) -> float:
        sel = self.interior.copy()
        if t_lo is not None:
            sel &= self.times >= t_lo - 1e-12
        if t_hi is not None:
            sel &= self.times <= t_hi + 1e-12
        if not np.any(sel):
            raise ValueError("no interior samples in the requested window")
        return float(np.max(self.residual[sel]))


def monotonicity_check(
    traj: FlowTrajectory,
    hist: SolutionHistory,
    strict: bool = False,
    monotonicity_tol: float = 1e-6,
    tau_offset: float = 0.0,
) -> EntropyTrace:
    """Full entropy trace along the stored history.

    Non-strict mode rescales a non-normalized history once by 1/mass (the
    equation is linear, so the rescaled history is again a solution; the
    shift of W is the documented -log(scale) plus linear scaling).  Strict
    mode rejects instead.  Needs at least 5 stored samples.

    ``tau_offset`` shifts the entropy scale to tau = (T - t) + offset.  The
    derivative formula only uses d tau/dt = -1, so any positive offset is
    admissible; the shrinking-soliton scenario needs the offset that moves
    the tau origin to the metric's singular time, which lies beyond the
    simulated window.
    """
    if tau_offset < 0.0:
        raise ValueError("tau offset must be nonnegative")
    if len(hist.times) < 5:
        raise ValueError("monotonicity check needs at least 5 time samples")
    mass = float(hist.masses[-1])
    scale = 1.0
    if abs(mass - 1.0) > NORMALIZATION_TOL:
        if strict:
            raise ValueError(
                f"strict mode: terminal mass {mass:.12g} is not 1 within {NORMALIZATION_TOL}"
            )
        scale = 1.0 / mass
        hist = hist.rescaled(scale)

    times = hist.times if tau_offset > 0.0 else hist.times[:-1]  # tau > 0 only
    tau = traj.T - times + tau_offset
    W = np.empty(times.size)
    production = np.empty(times.size)
    normalization = np.empty(times.size)
    for i, t in enumerate(times):
        s = traj.snapshot_at(float(t))
        u = hist.field_at(float(t))
        W[i] = w_entropy(s, u, float(tau[i]))
        production[i] = entropy_production(s, u, float(tau[i]))
        normalization[i] = integrate(s, u)

    dWdt = np.full(times.size, np.nan)
    dt = hist.dt
    dWdt[1:-1] = (W[2:] - W[:-2]) / (2.0 * dt)
    residual = np.abs(dWdt - production)
    return EntropyTrace(
        times=times,
        tau=tau,
        W=W,
        dWdt=dWdt,
        production=production,
        residual=residual,
        normalization=normalization,
        scale_factor=scale,
        monotonicity_tol=monotonicity_tol,
    )
