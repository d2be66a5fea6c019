import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ottrack.benamou_brenier import (
    SolverParams,
    _Operators,
    bb_solve,
    continuity_residual,
    divergence,
    extract_velocity,
    geodesic_w_profile,
    grid_measure,
    intermediate_density,
    prox_kinetic,
    SpaceTimeField,
)
from ottrack.discrete_ot import wasserstein
from ottrack.errors import BoundaryMass, GeometryMismatch, InvalidInput, NotConverged, SOutOfRange
from ottrack.gaussian_ot import displacement_interpolate, gaussian_wasserstein
from ottrack.measures import GaussianDensity, GridDensity, moments, rasterize_gaussian

BOX = ([-4.0, -4.0], [4.0, 4.0])
GA = GaussianDensity([-1.0, -0.3], [[0.4, 0.1], [0.1, 0.3]])
GB = GaussianDensity([0.8, 0.5], [[0.25, -0.05], [-0.05, 0.5]])


@pytest.fixture(scope="module")
def translation_1d():
    a = rasterize_gaussian(GaussianDensity([-1.0], [[0.25]]), [-4], [4], [128])
    b = rasterize_gaussian(GaussianDensity([1.0], [[0.25]]), [-4], [4], [128])
    return a, b, bb_solve(a, b, 16)


@pytest.fixture(scope="module")
def translation_2d():
    a = rasterize_gaussian(GaussianDensity([-1.0, 0.0], 0.25 * np.eye(2)), *BOX, [32, 32])
    b = rasterize_gaussian(GaussianDensity([1.0, 0.0], 0.25 * np.eye(2)), *BOX, [32, 32])
    return a, b, bb_solve(a, b, 16)


@pytest.fixture(scope="module")
def gaussian_pair():
    a = rasterize_gaussian(GA, *BOX, [32, 32])
    b = rasterize_gaussian(GB, *BOX, [32, 32])
    return a, b, bb_solve(a, b, 16)


# --- proximal step ---------------------------------------------------------


def _prox_foc(rho, mom, gamma, x, m_out):
    """First-order conditions of min gamma |m|^2/(2x) + |x - rho|^2/2 + |m - mom|^2/2."""
    pos = x > 0
    r_m = [np.where(pos, mo - mi + gamma * mo / np.where(pos, x, 1.0), 0.0) for mo, mi in zip(m_out, mom)]
    msq = sum(mo * mo for mo in m_out)
    r_x = np.where(pos, x - rho - gamma * msq / (2 * np.where(pos, x, 1.0) ** 2), 0.0)
    # at (0, 0) optimality means (rho, mom) / gamma lies in the subdifferential: rho + |mom|^2 / (2 gamma) <= 0
    zero_ok = np.where(pos, True, rho * gamma + 0.5 * sum(mi * mi for mi in mom) <= 1e-12)
    return np.abs(r_x).max(), max(np.abs(r).max() for r in r_m), bool(np.all(zero_ok))


def test_prox_first_order_conditions(rng):
    n = 20000
    rho = rng.normal(scale=2.0, size=n)
    mom = [rng.normal(scale=2.0, size=n), rng.normal(scale=0.1, size=n)]
    for gamma in (1e-3, 0.05, 1.0, 10.0):
        x, m_out = prox_kinetic(rho, mom, gamma)
        rx, rm, zero_ok = _prox_foc(rho, mom, gamma, x, m_out)
        assert rx <= 1e-10 * (1 + np.abs(rho).max()) and rm <= 1e-10 * (1 + np.abs(mom[0]).max())
        assert zero_ok
        assert np.all(x >= 0)


@given(
    st.floats(-10, 10),
    st.floats(-10, 10),
    st.floats(-10, 10),
    st.floats(1e-3, 10),
)
def test_prox_is_a_minimizer(r, m1, m2, gamma):
    x, (a, b) = prox_kinetic(np.array([r]), [np.array([m1]), np.array([m2])], gamma)

    def obj(xx, aa, bb):
        kin = gamma * (aa * aa + bb * bb) / (2 * xx) if xx > 0 else (0.0 if aa == bb == 0 else np.inf)
        return kin + 0.5 * ((xx - r) ** 2 + (aa - m1) ** 2 + (bb - m2) ** 2)

    best = obj(x[0], a[0], b[0])
    for dx, da, db in np.random.default_rng(0).normal(scale=1e-3, size=(50, 3)):
        assert best <= obj(x[0] + dx, a[0] + da, b[0] + db) + 1e-12


# --- discrete operators ----------------------------------------------------


def test_staggered_mass_bookkeeping(rng):
    # with zero wall flux the spatial divergence sums to zero, so slice masses move only through d rho/ds
    shape, T = (6, 5), 4
    mom = [rng.normal(size=(T, 7, 5)), rng.normal(size=(T, 6, 6))]
    mom[0][:, [0, -1], :] = 0.0
    mom[1][:, :, [0, -1]] = 0.0
    rho = rng.uniform(size=(T + 1,) + shape)
    h = np.array([0.5, 0.25])
    div = divergence(rho, mom, 1.0 / T, h)
    spatial = div - np.diff(rho, axis=0) * T
    assert np.abs(spatial.sum(axis=(1, 2))).max() <= 1e-12


def test_continuity_projection_is_exact(rng):
    shape, T = (8, 6), 5
    h = np.array([0.3, 0.4])
    ops = _Operators(shape, h, T)
    src = rng.uniform(0.5, 1.0, shape)
    tgt = rng.uniform(0.5, 1.0, shape)
    tgt *= src.sum() / tgt.sum()
    rho = rng.normal(size=(T + 1,) + shape)
    mom = [rng.normal(size=(T, 9, 6)), rng.normal(size=(T, 8, 7))]
    r, m = ops.project_continuity(rho, mom, src, tgt)
    np.testing.assert_array_equal(r[0], src)
    np.testing.assert_array_equal(r[-1], tgt)
    assert np.abs(divergence(r, m, 1.0 / T, h)).max() <= 1e-10
    np.testing.assert_allclose(r.sum(axis=(1, 2)), src.sum(), rtol=1e-12)
    # projecting twice changes nothing
    r2, m2 = ops.project_continuity(r, m, src, tgt)
    np.testing.assert_allclose(r2, r, atol=1e-12)


# --- solver ----------------------------------------------------------------


def test_zero_transport():
    a = rasterize_gaussian(GA, *BOX, [16, 16])
    sol = bb_solve(a, a, 8)
    assert sol.converged and sol.energy <= 1e-4
    v, _ = extract_velocity(sol, 0.5)
    assert np.abs(v).max() <= 1e-3


def test_translation_energy_1d(translation_1d):
    a, b, sol = translation_1d
    assert sol.converged
    assert sol.energy == pytest.approx(4.0, rel=0.03)
    assert sol.continuity_residual <= 1e-3
    masses = sol.field.rho.sum(axis=1) * a.cell_volume
    assert np.abs(masses - 1.0).max() <= 1e-3
    assert sol.field.rho.min() >= -1e-9 * np.abs(sol.field.rho).max()


def test_endpoint_slices(translation_1d):
    a, b, sol = translation_1d
    np.testing.assert_allclose(intermediate_density(sol, 0.0).values, a.values, atol=1e-6 * a.values.max())
    np.testing.assert_allclose(intermediate_density(sol, 1.0).values, b.values, atol=1e-6 * b.values.max())
    with pytest.raises(SOutOfRange):
        intermediate_density(sol, 1.5)
    with pytest.raises(SOutOfRange):
        extract_velocity(sol, -0.1)


def test_translation_velocity(translation_2d):
    a, _, sol = translation_2d
    for s in (0.0, 0.5, 1.0):
        v, flagged = extract_velocity(sol, s)
        rho = intermediate_density(sol, s).values
        bulk = rho > 0.1 * rho.max()
        assert not np.any(flagged & bulk)
        np.testing.assert_allclose(v[..., 0][bulk].mean(), 2.0, rtol=0.03)
        assert np.abs(v[..., 1][bulk]).max() <= 0.1
    # the terminal slice carries the last interval's momentum: the field does not vanish at s = 1
    v1, _ = extract_velocity(sol, 1.0)
    assert np.abs(v1[..., 0][intermediate_density(sol, 1.0).values > 0.1 * a.values.max()]).min() > 1.0


def test_translation_curl_is_small(translation_2d):
    a, _, sol = translation_2d
    h = a.cell_size
    v, _ = extract_velocity(sol, 0.5)
    rho = intermediate_density(sol, 0.5).values
    bulk = rho > 0.1 * rho.max()
    curl = np.gradient(v[..., 1], h[0], axis=0) - np.gradient(v[..., 0], h[1], axis=1)
    speed = np.linalg.norm(v, axis=-1)
    sigma = 0.5  # density standard deviation: the length scale of the flow
    assert np.sqrt(np.mean(curl[bulk] ** 2)) * sigma <= 0.05 * np.sqrt(np.mean(speed[bulk] ** 2))


def test_gaussian_pair_energy(gaussian_pair):
    a, b, sol = gaussian_pair
    assert sol.converged
    assert sol.energy == pytest.approx(gaussian_wasserstein(GA, GB) ** 2, rel=0.03)
    w_cells = wasserstein(grid_measure(a, 4096, 0.0), grid_measure(b, 4096, 0.0))
    assert sol.energy >= 0.95 * w_cells**2


def test_gaussian_pair_midpoint_moments(gaussian_pair):
    _, _, sol = gaussian_pair
    mean, cov = moments(intermediate_density(sol, 0.5))
    ref = displacement_interpolate(GA, GB, 0.5)
    np.testing.assert_allclose(mean, ref.mean, atol=0.05 * np.abs(ref.mean).max())
    np.testing.assert_allclose(cov, ref.cov, atol=0.05 * np.abs(ref.cov).max())


def test_geodesic_profile_is_linear(gaussian_pair):
    a, b, sol = gaussian_pair
    prof = geodesic_w_profile(sol, a, samples=6)
    w_end = prof[-1][1]
    # the solver floors densities at 1e-10 of the max, hence not exactly zero
    assert prof[0][0] == 0.0 and prof[0][1] <= 1e-6 * w_end
    assert w_end == pytest.approx(wasserstein(grid_measure(a), grid_measure(b)), rel=1e-9)
    for s, w in prof:
        assert abs(w - s * w_end) <= 0.05 * w_end


def test_energy_history_settles(gaussian_pair):
    _, _, sol = gaussian_pair
    tail = [e for it, e, _ in sol.history if it >= sol.iterations - 50]
    assert abs(sol.energy - np.mean(tail)) <= 1e-5 * sol.energy


def test_solver_errors():
    a = rasterize_gaussian(GA, *BOX, [16, 16])
    with pytest.raises(GeometryMismatch):
        bb_solve(a, rasterize_gaussian(GB, *BOX, [16, 8]), 8)
    with pytest.raises(InvalidInput):
        bb_solve(a, a, 1)
    edge = np.zeros((16, 16))
    edge[0, :] = 1.0
    wall = GridDensity(*BOX, edge / (edge.sum() * a.cell_volume))
    with pytest.raises(BoundaryMass):
        bb_solve(wall, wall, 4)
    b = rasterize_gaussian(GB, *BOX, [16, 16])
    with pytest.raises(NotConverged) as info:
        bb_solve(a, b, 8, SolverParams(max_iter=5))
    assert info.value.partial.iterations == 5 and not info.value.partial.converged


def test_residual_helper_on_feasible_field():
    rho = np.ones((3, 4))
    fld = SpaceTimeField(np.array([0.0]), np.array([1.0]), rho, [np.zeros((2, 5))])
    assert continuity_residual(fld) == 0.0
