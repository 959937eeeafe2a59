import numpy as np
import pytest

from conjheat.geometry import (
    FlowBlowUpError,
    Region,
    curvature_bounds,
    curvature_data,
    evolve_rotsym_surface,
    geodesic_distance,
    gradient_sq,
    hessian_frame,
    integrate,
    laplace_beltrami,
    make_shrinking_sphere,
    make_torus,
    tensor_frob_sq,
    tensor_trace,
    volume,
)
from conjheat.grids import GridMismatchError, ScalarField

TWO_PI = 2.0 * np.pi


def fitted_order(hs, errs):
    return np.polyfit(np.log(hs), np.log(errs), 1)[0]


# ---------------------------------------------------------------------------
# constructors
# ---------------------------------------------------------------------------

def test_make_torus_static_flat():
    traj = make_torus(1, [TWO_PI], [256])
    s = traj.snapshot_at(0.3)
    cd = curvature_data(s)
    assert np.all(cd.R.values == 0.0)
    assert np.all(cd.ric.comps == 0.0)
    traj2 = make_torus(2, [TWO_PI, TWO_PI], [128, 128])
    assert np.all(curvature_data(traj2.snapshot_at(0.0)).ric.comps == 0.0)


def test_make_torus_rejects_bad_input():
    with pytest.raises(ValueError):
        make_torus(1, [TWO_PI], [0])
    with pytest.raises(ValueError):
        make_torus(1, [-1.0], [64])
    with pytest.raises(ValueError):
        make_torus(3, [1.0, 1.0, 1.0], [32, 32, 32])


def test_shrinking_sphere_radius_and_curvature():
    traj = make_shrinking_sphere(2, 1.0, 0.25, 256)
    assert traj.radius_at(0.25) ** 2 == pytest.approx(0.5, rel=1e-14)
    s0 = traj.snapshot_at(0.0)
    assert np.all(curvature_data(s0).R.values == pytest.approx(2.0))
    with pytest.raises(ValueError):
        make_shrinking_sphere(2, 1.0, 0.6, 256)  # 0.6 >= r0^2 / 2


def test_shrinking_sphere_ric_components_exact():
    traj = make_shrinking_sphere(3, 1.5, 0.4, 64)
    for t in np.linspace(0.0, 0.4, 7):
        s = traj.snapshot_at(t)
        expected = (traj.n - 1) / s.radius ** 2
        ric = curvature_data(s).ric
        assert np.all(ric.h11 == expected)
        assert np.all(ric.h22 == expected)


def test_rotsym_round_matches_closed_form_sphere():
    # phi == 0 evolves as phi(t) = 0.5 log(1 - 2t) on the unit sphere
    T = 0.1
    traj = evolve_rotsym_surface(np.zeros(64), T, 256, 64, store_every=8)
    for t in (0.0, 0.05, T):
        s = traj.snapshot_at(t)
        assert np.max(np.abs(s.phi - 0.5 * np.log(1.0 - 2.0 * t))) < 1e-10


def test_rotsym_flat_reduction_matches_unit_sphere_curvature():
    sphere = make_shrinking_sphere(2, 1.0, 0.25, 128).snapshot_at(0.0)
    traj = evolve_rotsym_surface(np.zeros(128), 0.01, 16, 128)
    rot = traj.snapshot_at(0.0)
    cd_s, cd_r = curvature_data(sphere), curvature_data(rot)
    interior = slice(1, -1)
    assert np.max(np.abs(cd_r.R.values[interior] - cd_s.R.values[interior])) < 1e-8
    assert np.max(np.abs(cd_r.norm_rm.values[interior] - cd_s.norm_rm.values[interior])) < 1e-8
    assert np.max(np.abs(cd_r.grad_R_norm.values[interior])) < 1e-8


def test_rotsym_rejects_pole_irregular_data():
    theta = (np.arange(64) + 0.5) * (np.pi / 64)
    with pytest.raises(ValueError, match="pole regularity"):
        evolve_rotsym_surface(theta.copy(), 0.01, 16, 64)


def test_rotsym_perturbation_decays_after_area_normalization():
    # quadrupole profile: the linearized flow damps it at rate ~ 4
    n = 64
    theta = (np.arange(n) + 0.5) * (np.pi / n)
    phi0 = 0.05 * (3.0 * np.cos(theta) ** 2 - 1.0)
    T = 0.02
    traj = evolve_rotsym_surface(phi0, T, 2000, n, store_every=100)

    def normalized_amplitude(t):
        s = traj.snapshot_at(t)
        area = volume(s)
        phi_hat = s.phi + 0.5 * np.log(4.0 * np.pi / area)
        return phi_hat.max() - phi_hat.min()

    assert normalized_amplitude(T) < 0.95 * normalized_amplitude(0.0)


def test_rotsym_blowup_is_reported():
    # unstable explicit step: dt far above the diffusion limit
    with pytest.raises(FlowBlowUpError):
        evolve_rotsym_surface(0.3 * np.cos(2 * (np.arange(128) + 0.5) * np.pi / 128), 1.0, 10, 128)


def test_snapshot_at_endpoints_and_interpolation():
    sphere = make_shrinking_sphere(2, 1.0, 0.25, 64)
    assert sphere.snapshot_at(0.0).radius == pytest.approx(1.0)
    torus = make_torus(1, [TWO_PI], [64], T=0.5)
    assert np.all(
        torus.snapshot_at(0.1).grid.nodes == torus.snapshot_at(0.4).grid.nodes
    )
    traj = evolve_rotsym_surface(np.zeros(32), 0.1, 64, 32, store_every=32)
    t_mid = 0.5 * (traj.times[0] + traj.times[1])
    blend = 0.5 * (traj.phis[0] + traj.phis[1])
    assert np.allclose(traj.snapshot_at(t_mid).phi, blend)
    with pytest.raises(ValueError):
        sphere.snapshot_at(0.3)


# ---------------------------------------------------------------------------
# operators
# ---------------------------------------------------------------------------

def test_laplacian_examples():
    torus = make_torus(1, [TWO_PI], [256]).snapshot_at(0.0)
    const = torus.constant_field(3.0)
    assert np.all(laplace_beltrami(torus, const).values == 0.0)

    u = torus.field(np.sin(torus.grid.nodes))
    err = np.max(np.abs(laplace_beltrami(torus, u).values + np.sin(torus.grid.nodes)))
    assert err < 1e-4  # O(h^2)

    sphere = make_shrinking_sphere(2, 1.0, 0.25, 256).snapshot_at(0.0)
    theta = sphere.grid.nodes
    v = sphere.field(np.cos(theta))
    err = np.max(np.abs(laplace_beltrami(sphere, v).values + 2.0 * np.cos(theta)))
    assert err < 1e-3


def test_laplacian_grid_mismatch():
    torus = make_torus(1, [TWO_PI], [256]).snapshot_at(0.0)
    other = make_torus(1, [TWO_PI], [128]).snapshot_at(0.0)
    with pytest.raises(GridMismatchError):
        laplace_beltrami(torus, other.constant_field(1.0))


def test_gradient_sq_examples():
    torus = make_torus(1, [TWO_PI], [512]).snapshot_at(0.0)
    assert np.all(gradient_sq(torus, torus.constant_field(2.0)).values == 0.0)
    x = torus.grid.nodes
    g = gradient_sq(torus, torus.field(np.sin(x)))
    assert np.max(np.abs(g.values - np.cos(x) ** 2)) < 1e-4
    assert np.all(g.values >= 0.0)

    r = 0.5
    traj = make_shrinking_sphere(2, 1.0, 0.375, 256)
    s = traj.snapshot_at(0.375)
    assert s.radius == pytest.approx(r)
    theta = s.grid.nodes
    g = gradient_sq(s, s.field(np.cos(theta)))
    assert np.max(np.abs(g.values - np.sin(theta) ** 2 / r ** 2)) < 1e-3


def test_hessian_examples_and_trace():
    torus = make_torus(1, [TWO_PI], [512]).snapshot_at(0.0)
    assert np.all(hessian_frame(torus, torus.constant_field(1.0)).comps == 0.0)
    x = torus.grid.nodes
    hess = hessian_frame(torus, torus.field(np.sin(x)))
    assert np.max(np.abs(hess.h11 + np.sin(x))) < 1e-4

    sphere = make_shrinking_sphere(2, 1.0, 0.25, 256).snapshot_at(0.0)
    theta = sphere.grid.nodes
    hess = hessian_frame(sphere, sphere.field(np.cos(theta)))
    assert np.max(np.abs(hess.h11 + np.cos(theta))) < 1e-3
    assert np.max(np.abs(hess.h22 + np.cos(theta))) < 1e-3
    trace = tensor_trace(sphere, hess)
    assert np.max(np.abs(trace.values + 2.0 * np.cos(theta))) < 1e-3


@pytest.mark.parametrize(
    "make_case",
    [
        lambda n: (
            make_torus(1, [TWO_PI], [n]).snapshot_at(0.0),
            lambda s: np.exp(np.cos(s.grid.nodes)),
        ),
        lambda n: (
            make_shrinking_sphere(2, 1.0, 0.25, n).snapshot_at(0.1),
            lambda s: np.exp(np.cos(s.grid.nodes)),
        ),
        lambda n: (
            make_torus(2, [TWO_PI, 4.0], [n, n]).snapshot_at(0.0),
            lambda s: np.outer(np.sin(s.grid.nodes(0)), np.cos(2 * np.pi * s.grid.nodes(1) / 4.0)),
        ),
    ],
    ids=["torus-1d", "sphere", "torus-2d"],
)
def test_trace_identity_refinement_order(make_case):
    errs, hs = [], []
    for n in (32, 64, 128):
        s, profile = make_case(n)
        u = s.field(profile(s))
        gap = tensor_trace(s, hessian_frame(s, u)).values - laplace_beltrami(s, u).values
        errs.append(np.max(np.abs(gap)))
        hs.append(1.0 / n)
    if errs[0] < 1e-12:  # identity exact for this backend
        assert errs[-1] < 1e-12
    else:
        assert fitted_order(hs, errs) >= 1.8


def test_geodesic_distance_examples():
    torus = make_torus(1, [TWO_PI], [64]).snapshot_at(0.0)
    d = geodesic_distance(torus, 0)
    antipode = 32  # node at x = pi
    assert d.values[antipode] == pytest.approx(np.pi)

    unit = make_shrinking_sphere(2, 1.0, 0.25, 64).snapshot_at(0.0)
    d = geodesic_distance(unit, "north")
    assert np.allclose(d.values, unit.grid.nodes)

    traj = make_shrinking_sphere(2, 1.0, 0.375, 64)
    half = traj.snapshot_at(0.375)  # radius 0.5
    d = geodesic_distance(half, "north")
    assert d.values[-1] == pytest.approx(0.5 * half.grid.nodes[-1])


def test_geodesic_distance_symmetry_and_triangle_on_torus():
    torus = make_torus(1, [TWO_PI], [64]).snapshot_at(0.0)
    rng = np.random.default_rng(7)
    nodes = rng.integers(0, 64, size=(40, 3))
    fields = {i: geodesic_distance(torus, int(i)).values for i in np.unique(nodes)}
    for a, b, c in nodes:
        assert fields[a][b] == pytest.approx(fields[b][a], abs=1e-12)
        assert fields[a][c] <= fields[a][b] + fields[b][c] + 1e-12


def test_geodesic_distance_rotsym_pole_only():
    traj = evolve_rotsym_surface(np.zeros(32), 0.01, 16, 32)
    s = traj.snapshot_at(0.0)
    d = geodesic_distance(s, "north")
    assert np.max(np.abs(d.values - s.grid.nodes)) < 1e-3  # phi = 0: arclength = theta
    with pytest.raises(ValueError, match="poles only"):
        geodesic_distance(s, 3)


def test_integrate_examples():
    unit = make_shrinking_sphere(2, 1.0, 0.25, 128).snapshot_at(0.0)
    assert integrate(unit, unit.constant_field(1.0)) == pytest.approx(4.0 * np.pi, rel=1e-3)
    torus = make_torus(1, [TWO_PI], [64]).snapshot_at(0.0)
    assert integrate(torus, torus.constant_field(1.0)) == pytest.approx(TWO_PI)
    assert integrate(torus, torus.field(np.sin(torus.grid.nodes))) == pytest.approx(0.0, abs=1e-13)


def test_unit_sphere_rm_norm_convention():
    s = make_shrinking_sphere(2, 1.0, 0.25, 64).snapshot_at(0.0)
    cd = curvature_data(s)
    assert np.all(cd.R.values == pytest.approx(2.0))
    assert np.all(cd.norm_rm.values == pytest.approx(2.0))


def test_curvature_bounds_examples():
    torus = make_torus(1, [TWO_PI], [64], T=0.5)
    cb = curvature_bounds(torus, Region.whole(), (0.0, 0.5))
    assert cb.K0 == cb.K1 == cb.k0 == 0.0

    sphere = make_shrinking_sphere(2, 1.0, 0.25, 64)
    cb = curvature_bounds(sphere, Region.whole(), (0.0, 0.25))
    assert cb.measured["K0"] == pytest.approx(2.0, rel=1e-12)  # sup (n-1)/r^2 at t_b
    assert cb.K0 == pytest.approx(2.1, rel=1e-12)  # inflated, dominates
    assert cb.measured["K1"] == 0.0 and cb.measured["K2"] == 0.0

    with pytest.raises(ValueError, match="empty region"):
        curvature_bounds(sphere, Region.cube("north", 1e-6), (0.0, 0.1))


def test_curvature_evolution_identity_on_rotsym():
    # d R/dt = lap R + 2 |Ric|^2 (= lap R + R^2 on surfaces), joint refinement
    residuals, hs = [], []
    for n, steps, stored in ((32, 512, 16), (64, 2048, 32)):
        theta = (np.arange(n) + 0.5) * (np.pi / n)
        traj = evolve_rotsym_surface(
            0.1 * np.cos(theta), 0.05, steps, n, store_every=steps // stored
        )
        k = stored // 2
        t = traj.times[k]
        dt = traj.times[k + 1] - traj.times[k]
        R_prev = curvature_data(traj.snapshot_at(traj.times[k - 1])).R.values
        R_next = curvature_data(traj.snapshot_at(traj.times[k + 1])).R.values
        s = traj.snapshot_at(t)
        cd = curvature_data(s)
        rate = (R_next - R_prev) / (2.0 * dt)
        rhs = laplace_beltrami(s, cd.R).values + 2.0 * tensor_frob_sq(s, cd.ric).values
        residuals.append(np.max(np.abs(rate - rhs)))
        hs.append(1.0 / n)
    assert fitted_order(hs, residuals) >= 1.0
    assert residuals[-1] < residuals[0]


def test_tensor_frob_sq_multiplicity():
    s3 = make_shrinking_sphere(3, 1.0, 0.1, 32).snapshot_at(0.0)
    cd = curvature_data(s3)
    # |Ric|^2 = n * ((n-1)/r^2)^2 via the (1, n-1) frame multiplicities
    assert np.all(tensor_frob_sq(s3, cd.ric).values == pytest.approx(3.0 * 4.0))
    assert np.all(cd.norm_rm.values == pytest.approx(np.sqrt(12.0)))
