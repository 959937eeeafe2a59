"""Estimate quantities, explicit bounds, and exact-identity residuals.

Every residual operation assembles both sides of an identity that holds
exactly for the continuum solution, each term from its own independent
stencil (time derivatives by centered differences on the stored history,
space derivatives by the geometry module's operators), so the pointwise gap
must converge to zero under refinement.  Log-weighted quantities are
evaluated on the trust mask u >= 1e-12 * A and return NaN elsewhere.

Curvature contractions on the constant-curvature and 2-d conformal backends
use the pointwise closed form R_{kijl} u_{kl} = K (u_ij - (tr u) g_ij) (in
the frame, with K the sectional/Gauss curvature), and the rough Laplacian of
a rotationally symmetric symmetric 2-tensor carries the commutation terms
-2 a^2 (T11 - T22), +2 a^2 (T11 - T22), -4 a^2 T12 with
a = exp(-phi) (phi' + cot theta), derived once from the frame connection and
unit-tested against an independent coordinate computation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dataclass_field

import numpy as np

from .conjugate import SolutionHistory, u_time_derivative
from .geometry import (
    CurvatureBounds,
    FlowTrajectory,
    GeometrySnapshot,
    curvature_data,
    geodesic_distance,
    grad_frame,
    gradient_inner,
    gradient_sq,
    hessian_frame,
    laplace_beltrami,
    scalar_curvature_rate,
    tensor_frob_sq,
    tensor_inner,
    tensor_lambda_max,
    tensor_trace,
)
from .grids import FrameTensorField, ScalarField, colat_d1, periodic_d1

__all__ = [
    "BoundReport",
    "HessianRatios",
    "gradient_quantity",
    "gradient_bound",
    "hessian_quantity_F1",
    "theorem_hessian_ratio",
    "v_tensor",
    "w_tensor",
    "cube_sup",
    "lemma21_deltaF_residual",
    "lemma21_inequality_slack",
    "lemma31_component_residuals",
    "bochner_residual",
    "lemma33_residual",
    "lemma34_residual",
    "tensor_rough_laplacian",
    "smallest_constant",
    "nan_sup",
]

HESSIAN_FORM_LEADING = 18.0  # explicit leading coefficient of the form-bound check


@dataclass(frozen=True)
class BoundReport:
    """Measured supremum of a quantity against an evaluated bound.

    A negative margin is a recorded violation, not an error.  Arg-max ties
    break toward the lowest flat node index for determinism.
    """

    quantity: str
    region: str
    t: float | None
    sup: float
    argmax: tuple  # (flat node index, time)
    bound: float | None = None
    constants: dict = dataclass_field(default_factory=dict)

    @property
    def margin(self) -> float | None:
        if self.bound is None:
            return None
        return self.bound - self.sup


def nan_sup(values: np.ndarray):
    """(sup, flat argmax) ignoring NaN; ties break at the lowest index."""
    flat = np.asarray(values).ravel()
    ok = np.isfinite(flat)
    if not np.any(ok):
        raise ValueError("no trusted nodes: the whole field is masked")
    masked = np.where(ok, flat, -np.inf)
    idx = int(np.argmax(masked))
    return float(masked[idx]), idx


def _masked(s: GeometrySnapshot, values: np.ndarray, mask: np.ndarray) -> ScalarField:
    out = np.where(mask, values, np.nan)
    return ScalarField(s.grid, out, s.t, allow_nan=True)


def _at(traj: FlowTrajectory, hist: SolutionHistory, t: float):
    k = hist.index_of(t)
    t_k = float(hist.times[k])
    s = traj.snapshot_at(t_k)
    u = hist.field_at(t_k)
    return k, t_k, s, u


# ---------------------------------------------------------------------------
# pointwise estimate quantities
# ---------------------------------------------------------------------------

def gradient_quantity(
    traj: FlowTrajectory, hist: SolutionHistory, t: float, alpha: float
) -> ScalarField:
    """|grad u|^2/u^2 + alpha u_t/u - alpha R, the tau-normalized gradient
    quantity (multiply by tau = T - t for the tracked product).  alpha = 1
    is admitted for the sign-structure identity F/tau = -Lap log u; the
    bound formulas themselves require alpha > 1."""
    if alpha < 1.0:
        raise ValueError(f"alpha must be >= 1, got {alpha}")
    k, t_k, s, u = _at(traj, hist, t)
    if t_k >= traj.T:
        raise ValueError("gradient quantity needs t < T")
    ut, _ = u_time_derivative(traj, hist, t_k)
    R = curvature_data(s).R.values
    vals = (
        gradient_sq(s, u).values / u.values ** 2
        + alpha * ut.values / u.values
        - alpha * R
    )
    return _masked(s, vals, hist.trust_mask(t_k))


def gradient_bound(
    bounds: CurvatureBounds,
    alpha: float,
    eps: float,
    tau: float,
    r: float,
    n: int,
    C: float,
    form: str = "prop22",
) -> float:
    """Evaluate an explicit gradient-bound formula with the supplied
    undetermined constant C (the leading terms are fully determined).

    Forms: "prop22" -- (n+eps) alpha^2 / (2 tau) + C(r^-2 + r^-1 + 1); with
    r = inf this is the whole-manifold variant.  "prop24" -- the fully
    expanded bound with leading term n alpha^2 / tau.  Negative reported sup
    of lap R enters through max(K2, 0), which can only enlarge the bound.
    """
    if alpha <= 1.0:
        raise ValueError(f"alpha must exceed 1, got {alpha}")
    if eps <= 0.0 or tau <= 0.0:
        raise ValueError("eps and tau must be positive")
    if form == "prop22":
        locality = 1.0 if math.isinf(r) else (r ** -2 + r ** -1 + 1.0)
        return (n + eps) * alpha ** 2 / (2.0 * tau) + C * locality
    if form == "prop24":
        K0, K1 = bounds.K0, bounds.K1
        K2p = max(bounds.K2, 0.0)
        out = n * alpha ** 2 / tau
        if not math.isinf(r):
            out += (C * alpha ** 2 / r ** 2) * (r * math.sqrt(K0) + alpha ** 2 / (alpha - 1.0))
        out += C * alpha ** 2 * K0
        out += (n * alpha ** 2 / (alpha - 1.0)) * (
            abs(2.0 - alpha) * K0 + 0.5 * (alpha - 1.0) * K1
        )
        out += n * alpha ** 2 * K0
        out += alpha * math.sqrt(n * (alpha - 1.0) * K1)
        out += alpha * math.sqrt(n * alpha * K2p)
        return out
    raise ValueError(f"unknown bound form {form!r}")


def hessian_quantity_F1(
    traj: FlowTrajectory, hist: SolutionHistory, t: float, alpha: float
) -> ScalarField:
    """|Hess u|/u + alpha |grad u|^2/u^2 + 5 alpha u_t/u (Frobenius frame
    norm for the Hessian); tau times this is the tracked product."""
    k, t_k, s, u = _at(traj, hist, t)
    if t_k >= traj.T:
        raise ValueError("hessian quantity needs t < T")
    ut, _ = u_time_derivative(traj, hist, t_k)
    hess_norm = np.sqrt(tensor_frob_sq(s, hessian_frame(s, u)).values)
    vals = (
        hess_norm / u.values
        + alpha * gradient_sq(s, u).values / u.values ** 2
        + 5.0 * alpha * ut.values / u.values
    )
    return _masked(s, vals, hist.trust_mask(t_k))


@dataclass(frozen=True, eq=False)
class HessianRatios:
    """The three pointwise ratios whose boundedness is the claim under test.

    norm_ratio:  tau |Hess u| / (u (1 + log(A/u)))      -- norm form
    form_ratio:  tau lambda_max(Hess u) / (u (1 + log(A/u)))
                 -- form bound, compared against the explicit leading
                    coefficient 18
    local_sq:    |Hess u| / (u (1 + log(A/u))^2)        -- squared-log local
                 form; divide by (C0/tau + C0/r^2) for a configured C0
    """

    norm_ratio: ScalarField
    form_ratio: ScalarField
    local_sq: ScalarField


def theorem_hessian_ratio(
    traj: FlowTrajectory, hist: SolutionHistory, t: float, A: float
):
    """Hessian-to-bound ratios at time t plus the form-bound report."""
    if A < hist.sup_u:
        raise ValueError(f"A = {A} is below the measured sup of u ({hist.sup_u})")
    k, t_k, s, u = _at(traj, hist, t)
    if t_k >= traj.T:
        raise ValueError("hessian ratios need t < T")
    tau = traj.T - t_k
    mask = hist.trust_mask(t_k)
    hess = hessian_frame(s, u)
    hess_norm = np.sqrt(tensor_frob_sq(s, hess).values)
    lam_max = tensor_lambda_max(s, hess).values
    log_weight = 1.0 + np.log(np.where(mask, A / u.values, 1.0))
    denom = u.values * log_weight
    ratios = HessianRatios(
        norm_ratio=_masked(s, tau * hess_norm / denom, mask),
        form_ratio=_masked(s, tau * np.maximum(lam_max, 0.0) / denom, mask),
        local_sq=_masked(s, hess_norm / (denom * log_weight), mask),
    )
    sup, idx = nan_sup(ratios.form_ratio.values)
    report = BoundReport(
        quantity="hessian-form-ratio",
        region="whole-manifold",
        t=t_k,
        sup=sup,
        argmax=(idx, t_k),
        bound=HESSIAN_FORM_LEADING,
        constants={"A": A, "leading": HESSIAN_FORM_LEADING},
    )
    return ratios, report


def _log_ratio_fields(s, u: ScalarField, A: float):
    f = np.log(u.values / A)  # <= 0 when A >= sup u
    one_minus_f = 1.0 - f
    return f, one_minus_f


def v_tensor(
    traj: FlowTrajectory, hist: SolutionHistory, t: float, A: float
) -> FrameTensorField:
    """Hess u / (u (1 - f)) with f = log(u/A); requires A >= sup u."""
    if A < hist.sup_u:
        raise ValueError(f"A = {A} is below the measured sup of u ({hist.sup_u})")
    k, t_k, s, u = _at(traj, hist, t)
    f, omf = _log_ratio_fields(s, u, A)
    hess = hessian_frame(s, u)
    comps = hess.comps / (u.values * omf)[..., None]
    mask = hist.trust_mask(t_k)
    comps = np.where(mask[..., None], comps, np.nan)
    return FrameTensorField(s.grid, comps, t_k, allow_nan=True)


def w_tensor(
    traj: FlowTrajectory, hist: SolutionHistory, t: float, A: float
) -> FrameTensorField:
    """grad u (x) grad u / (u^2 (1 - f)^2); positive semidefinite by
    construction, with trace |grad f|^2 / (1 - f)^2."""
    if A < hist.sup_u:
        raise ValueError(f"A = {A} is below the measured sup of u ({hist.sup_u})")
    k, t_k, s, u = _at(traj, hist, t)
    f, omf = _log_ratio_fields(s, u, A)
    g = grad_frame(s, u)
    scale = (u.values * omf) ** 2
    if len(g) == 1:
        comps = (g[0] * g[0] / scale)[..., None]
    else:
        comps = np.stack(
            [g[0] * g[0] / scale, g[1] * g[1] / scale, g[0] * g[1] / scale], axis=-1
        )
    mask = hist.trust_mask(t_k)
    comps = np.where(mask[..., None], comps, np.nan)
    return FrameTensorField(s.grid, comps, t_k, allow_nan=True)


# ---------------------------------------------------------------------------
# space-time localization
# ---------------------------------------------------------------------------

def cube_sup(
    traj: FlowTrajectory,
    field_over_time,
    times,
    x0,
    r: float,
    t0: float,
    Tprime: float,
    quantity: str = "cube-sup",
) -> BoundReport:
    """Supremum over {(x, t) : d(x, x0, t) <= r, t0 - T' <= t <= t0}.

    ``field_over_time`` maps a sample time to a ScalarField; membership is
    recomputed per time with the time-dependent distance.  Raises if no
    node-time pair lies in the cube.
    """
    lo, hi = t0 - Tprime, t0
    window = [float(t) for t in times if lo - 1e-12 <= t <= hi + 1e-12]
    best = (-np.inf, None, None)
    seen = False
    for t in window:
        s = traj.snapshot_at(t)
        inside = geodesic_distance(s, x0).values <= r
        if not np.any(inside):
            continue
        seen = True
        vals = np.asarray(field_over_time(t).values, dtype=float)
        vals = np.where(inside, vals, np.nan)
        if not np.any(np.isfinite(vals)):
            continue
        sup, idx = nan_sup(vals)
        if sup > best[0]:
            best = (sup, idx, t)
    if not seen or best[1] is None:
        raise ValueError("empty cube: no node-time pair satisfies the constraints")
    return BoundReport(
        quantity=quantity,
        region=f"Q(r={r:.6g}, T'={Tprime:.6g}, x0={x0}, t0={t0:.6g})",
        t=t0,
        sup=best[0],
        argmax=(best[1], best[2]),
    )


# ---------------------------------------------------------------------------
# scalar identity residuals
# ---------------------------------------------------------------------------

def _interior_index(hist: SolutionHistory, t: float) -> int:
    k = hist.index_of(t)
    if not 0 < k < len(hist.times) - 1:
        raise ValueError("identity residuals need a time strictly inside the grid")
    return k


def _ric_quadratic(s, ric, ga, gb) -> np.ndarray:
    # Ric(grad a, grad b) from frame components (gradients have no component
    # in the symmetric extra directions, so no multiplicity enters)
    out = ric.h11 * ga[0] * gb[0]
    if len(ga) > 1:
        out = out + ric.h22 * ga[1] * gb[1] + ric.h12 * (ga[0] * gb[1] + ga[1] * gb[0])
    return out


def _gradient_field(traj, hist, k: int, alpha: float) -> ScalarField:
    """tau (|grad f|^2 + alpha f_t - alpha R) with f = log u at stored index k."""
    t_k = float(hist.times[k])
    s = traj.snapshot_at(t_k)
    u = hist.field_at(t_k)
    tau = traj.T - t_k
    f = s.field(np.log(u.values))
    ut, _ = u_time_derivative(traj, hist, t_k)
    R = curvature_data(s).R.values
    vals = tau * (gradient_sq(s, f).values + alpha * ut.values / u.values - alpha * R)
    return s.field(vals)


def lemma21_deltaF_residual(
    traj: FlowTrajectory, hist: SolutionHistory, t: float, alpha: float
) -> ScalarField:
    """Pointwise gap in the exact expansion of Lap F for the tau-scaled
    gradient quantity F = tau(|grad f|^2 + alpha f_t - alpha R):

        Lap F = 2 tau |Hess f|^2 - 2 <grad f, grad F> - F_t - F/tau
                - 2 alpha tau <Ric, Hess f> + 2 tau (2 - alpha) Ric(grad f, grad f)
                - 2 tau (alpha - 1) <grad R, grad f> - alpha tau Lap R
    """
    if alpha <= 1.0:
        raise ValueError(f"alpha must exceed 1, got {alpha}")
    k = _interior_index(hist, t)
    t_k = float(hist.times[k])
    s = traj.snapshot_at(t_k)
    u = hist.field_at(t_k)
    tau = traj.T - t_k
    dt = hist.dt

    F = _gradient_field(traj, hist, k, alpha)
    F_prev = _gradient_field(traj, hist, k - 1, alpha)
    F_next = _gradient_field(traj, hist, k + 1, alpha)
    F_t = (F_next.values - F_prev.values) / (2.0 * dt)

    f = s.field(np.log(u.values))
    hess_f = hessian_frame(s, f)
    cd = curvature_data(s)
    gf = grad_frame(s, f)

    lhs = laplace_beltrami(s, F).values
    rhs = (
        2.0 * tau * tensor_frob_sq(s, hess_f).values
        - 2.0 * gradient_inner(s, f, F).values
        - F_t
        - F.values / tau
        - 2.0 * alpha * tau * tensor_inner(s, cd.ric, hess_f).values
        + 2.0 * tau * (2.0 - alpha) * _ric_quadratic(s, cd.ric, gf, gf)
        - 2.0 * tau * (alpha - 1.0) * gradient_inner(s, cd.R, f).values
        - alpha * tau * cd.lap_R.values
    )
    mask = hist.trust_mask(t_k) & hist.trust_mask(hist.times[k - 1]) & hist.trust_mask(
        hist.times[k + 1]
    )
    return _masked(s, np.abs(lhs - rhs), mask)


def lemma21_inequality_slack(
    traj: FlowTrajectory,
    hist: SolutionHistory,
    t: float,
    alpha: float,
    eps: float,
    bounds: CurvatureBounds,
) -> ScalarField:
    """LHS - RHS of the one-sided estimate behind the gradient bound; the
    continuum statement is slack >= 0, checked here up to discretization."""
    if eps <= 0.0:
        raise ValueError("eps must be positive")
    k = _interior_index(hist, t)
    t_k = float(hist.times[k])
    s = traj.snapshot_at(t_k)
    u = hist.field_at(t_k)
    tau = traj.T - t_k
    dt = hist.dt
    n = traj.n

    F = _gradient_field(traj, hist, k, alpha)
    F_prev = _gradient_field(traj, hist, k - 1, alpha)
    F_next = _gradient_field(traj, hist, k + 1, alpha)
    F_t = (F_next.values - F_prev.values) / (2.0 * dt)

    f = s.field(np.log(u.values))
    ut, _ = u_time_derivative(traj, hist, t_k)
    f_t = ut.values / u.values
    grad_f_sq = gradient_sq(s, f).values
    R = curvature_data(s).R.values

    lhs = laplace_beltrami(s, F).values + F_t
    rhs = (
        -2.0 * gradient_inner(s, f, F).values
        + (2.0 * tau / (n + eps)) * (f_t + grad_f_sq - R) ** 2
        - (grad_f_sq + alpha * f_t - alpha * R)
        - 2.0 * tau * abs(2.0 - alpha) * bounds.K0 * grad_f_sq
        - 2.0 * tau * (alpha - 1.0) * bounds.K1 * np.sqrt(grad_f_sq)
        - (n * (n + eps) / (2.0 * eps)) * alpha ** 2 * tau * bounds.K0 ** 2
        - alpha * tau * bounds.K2
    )
    mask = hist.trust_mask(t_k) & hist.trust_mask(hist.times[k - 1]) & hist.trust_mask(
        hist.times[k + 1]
    )
    return _masked(s, lhs - rhs, mask)


def lemma31_component_residuals(
    traj: FlowTrajectory, hist: SolutionHistory, t: float
):
    """Residuals of the two exact component identities

        (d/dt + Lap) |grad u|^2 = 2 |Hess u|^2 + 2 <grad u, grad(R u)>
                                  + 4 Ric(grad u, grad u)
        (d/dt + Lap) (u_t / u)  = R_t - (2/u) <Ric, Hess u>
                                  - 2 <grad(u_t/u), grad log u>

    returned as a (first, second) pair of nonnegative fields.
    """
    k = _interior_index(hist, t)
    t_k = float(hist.times[k])
    s = traj.snapshot_at(t_k)
    u = hist.field_at(t_k)
    dt = hist.dt
    cd = curvature_data(s)

    def grad_sq_at(j):
        t_j = float(hist.times[j])
        s_j = traj.snapshot_at(t_j)
        return gradient_sq(s_j, hist.field_at(t_j)).values

    gsq = s.field(grad_sq_at(k))
    dgsq_dt = (grad_sq_at(k + 1) - grad_sq_at(k - 1)) / (2.0 * dt)
    hess_u = hessian_frame(s, u)
    gu = grad_frame(s, u)
    Ru = s.field(cd.R.values * u.values)
    lhs1 = dgsq_dt + laplace_beltrami(s, gsq).values
    rhs1 = (
        2.0 * tensor_frob_sq(s, hess_u).values
        + 2.0 * gradient_inner(s, u, Ru).values
        + 4.0 * _ric_quadratic(s, cd.ric, gu, gu)
    )

    def q_at(j):
        t_j = float(hist.times[j])
        ut_j, _ = u_time_derivative(traj, hist, t_j)
        return ut_j.values / hist.u[j]

    q = s.field(q_at(k))
    dq_dt = (q_at(k + 1) - q_at(k - 1)) / (2.0 * dt)
    log_u = s.field(np.log(u.values))
    lhs2 = dq_dt + laplace_beltrami(s, q).values
    rhs2 = (
        scalar_curvature_rate(traj, t_k, dt).values
        - (2.0 / u.values) * tensor_inner(s, cd.ric, hess_u).values
        - 2.0 * gradient_inner(s, q, log_u).values
    )

    mask = hist.trust_mask(t_k) & hist.trust_mask(hist.times[k - 1]) & hist.trust_mask(
        hist.times[k + 1]
    )
    return _masked(s, np.abs(lhs1 - rhs1), mask), _masked(s, np.abs(lhs2 - rhs2), mask)


def bochner_residual(s: GeometrySnapshot, field: ScalarField) -> ScalarField:
    """|Lap |grad u|^2 - 2 |Hess u|^2 - 2 <grad u, grad Lap u>
    - 2 Ric(grad u, grad u)|, an exact pointwise identity for any smooth
    field on a fixed snapshot."""
    gsq = gradient_sq(s, field)
    hess = hessian_frame(s, field)
    lap_u = laplace_beltrami(s, field)
    gu = grad_frame(s, field)
    ric = curvature_data(s).ric
    lhs = laplace_beltrami(s, gsq).values
    rhs = (
        2.0 * tensor_frob_sq(s, hess).values
        + 2.0 * gradient_inner(s, field, lap_u).values
        + 2.0 * _ric_quadratic(s, ric, gu, gu)
    )
    return ScalarField(s.grid, np.abs(lhs - rhs), s.t, allow_nan=field.allow_nan)


# ---------------------------------------------------------------------------
# tensor calculus on rotationally symmetric backends
# ---------------------------------------------------------------------------

def _latitude_curvature(s: GeometrySnapshot) -> np.ndarray:
    # a(theta) = exp(-phi) (phi' + cot theta), the geodesic curvature of the
    # latitude circles; enters the rough-Laplacian commutation terms
    theta = s.grid.nodes
    phi = s.conformal_factor()
    phi_d = colat_d1(phi, s.grid.h) if s.backend == "rotsym-surface" else np.zeros_like(theta)
    return np.exp(-phi) * (phi_d + 1.0 / np.tan(theta))


def tensor_rough_laplacian(s: GeometrySnapshot, T: FrameTensorField) -> FrameTensorField:
    """Rough Laplacian of a symmetric 2-tensor in frame components.

    Componentwise on flat tori (covariant = partial); on 2-d rotationally
    symmetric backends each component gets the scalar Laplacian plus the
    frame-connection commutation terms.  Sphere backends of dimension >= 3
    are rejected (the acceptance scenarios there reduce to spatially
    constant data, for which every term vanishes identically).

    Pole caveat: the commutation coefficient a^2 grows like 1/theta^2, so
    the O(h^2) error of the discrete component difference T11 - T22 is
    amplified to O(1) at pole-adjacent nodes.  Pointwise convergence holds
    at any fixed colatitude away from the poles (and the trace of the output
    equals the scalar Laplacian of the trace exactly); evaluate tensor
    identities on interior windows on sphere-type backends.
    """
    if s.backend == "shrinking-sphere" and s.n > 2:
        raise ValueError("tensor rough Laplacian supports sphere backends only for n = 2")
    comps = T.comps

    def scalar_lap(vals):
        return laplace_beltrami(s, ScalarField(s.grid, vals, s.t, allow_nan=True)).values

    if s.backend in ("torus-1d", "torus-2d"):
        out = np.stack([scalar_lap(comps[..., i]) for i in range(T.ncomp)], axis=-1)
        return T.with_comps(out, allow_nan=True)
    a_sq = _latitude_curvature(s) ** 2
    diff = comps[..., 0] - comps[..., 1]
    out = np.stack(
        [
            scalar_lap(comps[..., 0]) - 2.0 * a_sq * diff,
            scalar_lap(comps[..., 1]) + 2.0 * a_sq * diff,
            scalar_lap(comps[..., 2]) - 4.0 * a_sq * comps[..., 2],
        ],
        axis=-1,
    )
    return T.with_comps(out, allow_nan=True)


def _tensor_directional(s: GeometrySnapshot, direction, T: FrameTensorField) -> np.ndarray:
    """(nabla_X T) componentwise for X = given frame vector; on the
    rotationally symmetric backends the theta-frame derivative is
    connection-free, so only the theta component of X enters."""
    if s.backend == "torus-1d":
        return direction[0][..., None] * periodic_d1(T.comps, s.grid.h, axis=0)
    if s.backend == "torus-2d":
        hx, hy = s.grid.hs
        return (
            direction[0][..., None] * periodic_d1(T.comps, hx, axis=0)
            + direction[1][..., None] * periodic_d1(T.comps, hy, axis=1)
        )
    scale = np.exp(-s.conformal_factor())
    h = s.grid.h
    d_theta = np.stack([colat_d1(T.comps[..., i], h) for i in range(T.ncomp)], axis=-1)
    return (direction[0] * scale)[..., None] * d_theta


def _conformal_ratio(traj: FlowTrajectory, t_ref: float, t_other: float, shape) -> np.ndarray:
    """exp(2 (phi(t_other) - phi(t_ref))): rescales frame tensor components
    at t_other into the frame at t_ref (the metric evolves conformally on
    every backend here)."""
    if traj.backend in ("torus-1d", "torus-2d"):
        return np.ones(shape)
    if traj.backend == "shrinking-sphere":
        ratio = (traj.radius_at(t_other) / traj.radius_at(t_ref)) ** 2
        return np.full(shape, ratio)
    phi_ref = traj.snapshot_at(t_ref).phi
    phi_other = traj.snapshot_at(t_other).phi
    return np.exp(2.0 * (phi_other - phi_ref))


def _tensor_time_derivative(traj, hist, k: int, tensor_at) -> np.ndarray:
    """Centered d/dt of a tensor field's coordinate components, expressed in
    the time-t frame: [sigma_+ T(t+dt) - sigma_- T(t-dt)] / (2 dt)."""
    t_k = float(hist.times[k])
    dt = hist.dt
    shape = traj.grid.shape
    sig_prev = _conformal_ratio(traj, t_k, float(hist.times[k - 1]), shape)
    sig_next = _conformal_ratio(traj, t_k, float(hist.times[k + 1]), shape)
    T_prev = tensor_at(k - 1)
    T_next = tensor_at(k + 1)
    return (sig_next[..., None] * T_next.comps - sig_prev[..., None] * T_prev.comps) / (
        2.0 * dt
    )


def _sectional_curvature(s: GeometrySnapshot) -> np.ndarray:
    if s.backend in ("torus-1d", "torus-2d"):
        return np.zeros(s.grid.shape)
    if s.backend == "shrinking-sphere":
        return np.full(s.grid.shape, 1.0 / s.radius ** 2)
    return 0.5 * curvature_data(s).R.values


def _curvature_contraction(s, U: FrameTensorField) -> np.ndarray:
    """R_{kijl} U_{kl} in the frame: K (U_ij - (tr U) delta_ij)."""
    K = _sectional_curvature(s)
    tr = tensor_trace(s, U).values
    if U.ncomp == 1:
        return (K * (U.h11 - tr))[..., None]
    return np.stack(
        [K * (U.h11 - tr), K * (U.h22 - tr), K * U.h12], axis=-1
    )


def _ric_symmetrized(s, ric, U: FrameTensorField) -> np.ndarray:
    """(Ric U + U Ric)_ij for diagonal Ric frame components."""
    if U.ncomp == 1:
        return (2.0 * ric.h11 * U.h11)[..., None]
    return np.stack(
        [
            2.0 * ric.h11 * U.h11,
            2.0 * ric.h22 * U.h22,
            (ric.h11 + ric.h22) * U.h12,
        ],
        axis=-1,
    )


def _sym_outer(ga, gb, ncomp: int) -> np.ndarray:
    """(a_i b_j + b_i a_j) from frame gradient components."""
    if ncomp == 1:
        return (2.0 * ga[0] * gb[0])[..., None]
    return np.stack(
        [
            2.0 * ga[0] * gb[0],
            2.0 * ga[1] * gb[1],
            ga[0] * gb[1] + ga[1] * gb[0],
        ],
        axis=-1,
    )


def _matrix_square(M: np.ndarray) -> np.ndarray:
    if M.shape[-1] == 1:
        return M * M
    m11, m22, m12 = M[..., 0], M[..., 1], M[..., 2]
    return np.stack(
        [m11 * m11 + m12 * m12, m22 * m22 + m12 * m12, m12 * (m11 + m22)], axis=-1
    )


def _check_tensor_backend(traj: FlowTrajectory) -> None:
    if traj.backend == "shrinking-sphere" and traj.n > 2:
        raise ValueError(
            "tensor identity residuals support the sphere backend only for n = 2"
        )


def _v_comps(traj, hist, j: int, A: float) -> FrameTensorField:
    t_j = float(hist.times[j])
    s = traj.snapshot_at(t_j)
    u = hist.field_at(t_j)
    f, omf = _log_ratio_fields(s, u, A)
    hess = hessian_frame(s, u)
    return FrameTensorField(
        s.grid, hess.comps / (u.values * omf)[..., None], t_j, allow_nan=True
    )


def _w_comps(traj, hist, j: int, A: float) -> FrameTensorField:
    t_j = float(hist.times[j])
    s = traj.snapshot_at(t_j)
    u = hist.field_at(t_j)
    f, omf = _log_ratio_fields(s, u, A)
    g = grad_frame(s, u)
    scale = (u.values * omf) ** 2
    return FrameTensorField(
        s.grid, _sym_outer(g, g, s.ncomp) / 2.0 / scale[..., None], t_j, allow_nan=True
    )


def _tensor_lhs(traj, hist, k, A, tensor_at) -> np.ndarray:
    """(d/dt + Lap - (2f/(1-f)) grad f . grad) applied to the tensor."""
    t_k = float(hist.times[k])
    s = traj.snapshot_at(t_k)
    u = hist.field_at(t_k)
    f, omf = _log_ratio_fields(s, u, A)
    T = tensor_at(k)
    dT_dt = _tensor_time_derivative(traj, hist, k, tensor_at)
    lap_T = tensor_rough_laplacian(s, T).comps
    f_field = s.field(np.log(u.values / A))
    gf = grad_frame(s, f_field)
    drift = _tensor_directional(s, gf, T)
    return dT_dt + lap_T - (2.0 * f / omf)[..., None] * drift


def lemma33_residual(
    traj: FlowTrajectory, hist: SolutionHistory, t: float, A: float
) -> FrameTensorField:
    """Componentwise gap in the exact evolution identity for
    v = Hess u / (u (1 - f)), f = log(u/A):

        (d/dt + Lap - (2f/(1-f)) grad f . grad) v
          = ((|grad f|^2 + R f)/(1 - f)) v
            + [2 R_{kijl} u_{kl} + Ric_{il} u_{jl} + Ric_{jl} u_{il}
               + 2(grad_i Ric_{jl} + grad_j Ric_{il} - grad_l Ric_{ij}) grad_l u
               - u Hess_{ij} R - grad_i R grad_j u - grad_j R grad_i u
               - R u_{ij}] / (u (1 - f))
    """
    _check_tensor_backend(traj)
    if A < hist.sup_u:
        raise ValueError(f"A = {A} is below the measured sup of u ({hist.sup_u})")
    k = _interior_index(hist, t)
    t_k = float(hist.times[k])
    s = traj.snapshot_at(t_k)
    u = hist.field_at(t_k)
    f, omf = _log_ratio_fields(s, u, A)
    cd = curvature_data(s)

    lhs = _tensor_lhs(traj, hist, k, A, lambda j: _v_comps(traj, hist, j, A))

    f_field = s.field(np.log(u.values / A))
    grad_f_sq = gradient_sq(s, f_field).values
    v_now = _v_comps(traj, hist, k, A)
    hess_u = hessian_frame(s, u)
    gu = grad_frame(s, u)
    gR = grad_frame(s, cd.R)
    hess_R = hessian_frame(s, cd.R)

    bracket = (
        2.0 * _curvature_contraction(s, hess_u)
        + _ric_symmetrized(s, cd.ric, hess_u)
        + _grad_ric_term(s, cd, gu)
        - u.values[..., None] * hess_R.comps
        - _sym_outer(gR, gu, s.ncomp)
        - cd.R.values[..., None] * hess_u.comps
    )
    rhs = ((grad_f_sq + cd.R.values * f) / omf)[..., None] * v_now.comps + bracket / (
        u.values * omf
    )[..., None]

    mask = hist.trust_mask(t_k) & hist.trust_mask(hist.times[k - 1]) & hist.trust_mask(
        hist.times[k + 1]
    )
    out = np.where(mask[..., None], np.abs(lhs - rhs), np.nan)
    return FrameTensorField(s.grid, out, t_k, allow_nan=True)


def _grad_ric_term(s, cd, gu) -> np.ndarray:
    """2 (grad_i Ric_jl + grad_j Ric_il - grad_l Ric_ij) grad_l u.

    Vanishes on the homogeneous backends; on a 2-d conformal surface
    Ric = (R/2) g turns it into grad_i R grad_j u + grad_j R grad_i u
    - <grad R, grad u> delta_ij.
    """
    if s.backend != "rotsym-surface":
        return np.zeros(s.grid.shape + (s.ncomp,))
    gR = grad_frame(s, curvature_data(s).R)
    inner = sum(a * b for a, b in zip(gR, gu))
    sym = _sym_outer(gR, gu, s.ncomp)
    out = sym.copy()
    out[..., 0] -= inner
    out[..., 1] -= inner
    return out


def lemma34_residual(
    traj: FlowTrajectory, hist: SolutionHistory, t: float, A: float
) -> FrameTensorField:
    """Componentwise gap in the exact evolution identity for
    w = grad u (x) grad u / (u^2 (1 - f)^2):

        (d/dt + Lap - (2f/(1-f)) grad f . grad) w
          = 2((|grad f|^2 + R f)/(1 - f)) w
            + [grad(Ru) (x) grad u + grad u (x) grad(Ru)] / (u^2 (1-f)^2)
            + 2 (v + f w)^2 + Ric w + w Ric
    """
    _check_tensor_backend(traj)
    if A < hist.sup_u:
        raise ValueError(f"A = {A} is below the measured sup of u ({hist.sup_u})")
    k = _interior_index(hist, t)
    t_k = float(hist.times[k])
    s = traj.snapshot_at(t_k)
    u = hist.field_at(t_k)
    f, omf = _log_ratio_fields(s, u, A)
    cd = curvature_data(s)

    lhs = _tensor_lhs(traj, hist, k, A, lambda j: _w_comps(traj, hist, j, A))

    f_field = s.field(np.log(u.values / A))
    grad_f_sq = gradient_sq(s, f_field).values
    v_now = _v_comps(traj, hist, k, A)
    w_now = _w_comps(traj, hist, k, A)
    gu = grad_frame(s, u)
    Ru = s.field(cd.R.values * u.values)
    gRu = grad_frame(s, Ru)

    m = v_now.comps + f[..., None] * w_now.comps
    rhs = (
        (2.0 * (grad_f_sq + cd.R.values * f) / omf)[..., None] * w_now.comps
        + _sym_outer(gRu, gu, s.ncomp) / (u.values ** 2 * omf ** 2)[..., None]
        + 2.0 * _matrix_square(m)
        + _ric_symmetrized(s, cd.ric, w_now)
    )

    mask = hist.trust_mask(t_k) & hist.trust_mask(hist.times[k - 1]) & hist.trust_mask(
        hist.times[k + 1]
    )
    out = np.where(mask[..., None], np.abs(lhs - rhs), np.nan)
    return FrameTensorField(s.grid, out, t_k, allow_nan=True)


# ---------------------------------------------------------------------------
# report-only constant fitting
# ---------------------------------------------------------------------------

def smallest_constant(sups, leads, weights) -> float:
    """Smallest C >= 0 with sup <= lead + C * weight at every sample."""
    best = 0.0
    for sup, lead, w in zip(sups, leads, weights):
        if w <= 0.0:
            raise ValueError("constant fitting needs positive weights")
        best = max(best, (sup - lead) / w)
    return max(best, 0.0)
