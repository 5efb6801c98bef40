from math import comb, log

import numpy as np
import pytest

from toricbal.polytope import interior_integral, lattice_points, load_fixture
from toricbal.quantization import (
    GridValidationError,
    HermitianWeights,
    bergman_density,
    bergman_function,
    fs_potential,
    hilb,
    log_bergman_density,
    make_grid,
    moment_and_metric,
    perturbed_cp1_potential,
    potential_grid,
    psi_function,
    random_weights,
    round_potential,
    scalar_curvature,
    section_means,
    uniform_weights,
    weights_from_csv,
    weights_to_csv,
)


def binomial_weights(points):
    """Beta-integral oracle fixed point on the segment: logw = -log C(k, a)."""
    k = points.k
    return HermitianWeights(k, points, np.array([-log(comb(k, a)) for a, in points.points]))


@pytest.fixture(scope="module")
def cp1():
    return load_fixture("cp1")


@pytest.fixture(scope="module")
def cp2():
    return load_fixture("cp2")


@pytest.fixture(scope="module")
def f1():
    return load_fixture("f1")


@pytest.fixture(scope="module")
def square():
    return load_fixture("cp1xcp1")


class TestBergmanDensity:
    def test_binomial_closed_form(self, cp1):
        k = 5
        h = binomial_weights(lattice_points(cp1, k))
        for u in (-1.3, 0.0, 0.7):
            assert np.isclose(
                log_bergman_density(h, [u]), k * np.log1p(np.exp(2 * u)), rtol=1e-14
            )

    def test_trivial_k1(self, cp1):
        h = uniform_weights(lattice_points(cp1, 1))
        assert np.isclose(bergman_density(h, [0.4]), 1 + np.exp(0.8))

    def test_positive(self, f1):
        h = random_weights(lattice_points(f1, 3), seed=5)
        u = np.random.default_rng(0).uniform(-30, 30, size=(50, 2))
        assert np.all(np.isfinite(log_bergman_density(h, u)))

    def test_nan_rejected(self, cp1):
        h = uniform_weights(lattice_points(cp1, 1))
        with pytest.raises(ValueError):
            log_bergman_density(h, [np.nan])


class TestFsPotential:
    def test_binomial_closed_form(self, cp1):
        k = 6
        phi = fs_potential(binomial_weights(lattice_points(cp1, k)))
        u = np.array([[0.3], [-0.9]])
        expected = np.log1p(np.exp(2 * u[:, 0])) - np.log(k + 1) / k
        assert np.allclose(phi.value(u), expected, atol=1e-14)

    def test_scaling_shifts_constant_only(self, cp1):
        k = 4
        pts = lattice_points(cp1, k)
        h = random_weights(pts, seed=1)
        c = 0.7
        h2 = HermitianWeights(k, pts, h.logw + c)
        u = np.array([[0.2], [1.1]])
        phi1, phi2 = fs_potential(h), fs_potential(h2)
        assert np.allclose(phi2.value(u) - phi1.value(u), -c / k)
        assert np.allclose(phi2.hessian(u), phi1.hessian(u))

    def test_uniform_k1(self, cp1):
        phi = fs_potential(uniform_weights(lattice_points(cp1, 1)))
        assert np.isclose(phi.value(np.array([[0.5]]))[0], np.log1p(np.exp(1.0)) - np.log(2))


class TestMomentAndMetric:
    def test_binomial_moments(self, cp1):
        k = 7
        h = binomial_weights(lattice_points(cp1, k))
        u = 0.45
        t = np.exp(2 * u) / (1 + np.exp(2 * u))
        moment, metric = moment_and_metric(h, [u])
        assert np.isclose(moment[0], k * t, atol=1e-13)
        assert np.isclose(metric[0, 0], 2 * k * t * (1 - t), atol=1e-13)

    def test_symmetric_center(self, square):
        # weights invariant under alpha -> -alpha about the center fix moment there
        pts = lattice_points(square, 2)
        h = uniform_weights(pts)
        moment, _ = moment_and_metric(h, [0.0, 0.0])
        assert np.allclose(moment, [1.0, 1.0], atol=1e-14)

    def test_moment_containment_and_pd(self, f1):
        pts = lattice_points(f1, 3)
        rng = np.random.default_rng(11)
        for seed in range(10):
            h = random_weights(pts, seed=seed)
            u = rng.uniform(-6, 6, size=(1000, 2))
            moment, metric = moment_and_metric(h, u)
            for n, c in zip(f1.normals, f1.offsets):
                margins = moment @ np.array(n, dtype=float) + 3 * float(c)
                assert np.all(margins > 0)
            eigs = np.linalg.eigvalsh(metric)
            assert eigs.min() > 0


class TestGrid:
    def test_volume_identity_cp1_k2(self, cp1):
        h = binomial_weights(lattice_points(cp1, 2))
        grid = make_grid(h)
        assert grid.volume_defect < 1e-9
        assert np.isclose(grid.target_volume, 2.0)

    def test_volume_identity_square_k1(self, square):
        grid = make_grid(uniform_weights(lattice_points(square, 1)))
        assert np.isclose(grid.target_volume, 1.0)
        assert grid.volume_defect < 1e-7

    def test_doubling_resolution_stable(self, cp1):
        h = random_weights(lattice_points(cp1, 3), seed=3)
        g1 = make_grid(h)
        g2 = make_grid(h, resolution=2 * g1.resolution, radius=g1.truncation_radius)
        d1, _ = section_means(h, g1)
        d2, _ = section_means(h, g2)
        assert np.max(np.abs(d1 - d2)) < 1e-10

    def test_too_small_radius_rejected(self, cp1):
        h = binomial_weights(lattice_points(cp1, 8))
        with pytest.raises(GridValidationError, match="tail|defect"):
            make_grid(h, radius=4.0, resolution=64)

    def test_pushforward_matches_exact_integrals(self, f1):
        # int f(moment/k) det(2Cov) du = k^m int_P f dx for deg <= 2 polynomials
        k = 3
        h = random_weights(lattice_points(f1, k), seed=9)
        grid = make_grid(h)
        _, _, = section_means(h, grid)  # validates
        from toricbal.quantization import _det2cov, _softmax_stats

        _, _, moment, cov = _softmax_stats(h, grid.nodes)
        dens = _det2cov(cov) * grid.weights
        x = moment / k
        for key, exact in [
            ((0, 0), interior_integral(f1, {(0, 0): 1})),
            ((1, 0), interior_integral(f1, {(1, 0): 1})),
            ((0, 1), interior_integral(f1, {(0, 1): 1})),
            ((1, 1), interior_integral(f1, {(1, 1): 1})),
            ((2, 0), interior_integral(f1, {(2, 0): 1})),
        ]:
            val = float((x[:, 0] ** key[0] * x[:, 1] ** key[1]) @ dens) / k**2
            assert np.isclose(val, float(exact), rtol=1e-7), key


class TestHilb:
    def test_beta_oracle_fixed_point(self, cp1):
        k = 8
        h = binomial_weights(lattice_points(cp1, k))
        d = hilb(h, make_grid(h))
        # the Beta integrals int t^a (1-t)^{k-a} dt = 1/((k+1) C(k,a)) make the
        # binomial form an exact fixed point: hilb(H) = H, no gauge shift
        assert np.max(np.abs(d.logw - h.logw)) < 1e-11

    def test_scaling_equivariance(self, f1):
        k = 2
        pts = lattice_points(f1, k)
        h = random_weights(pts, seed=2)
        c = 0.35
        hc = HermitianWeights(k, pts, h.logw + c)
        grid = make_grid(h)
        grid_c = make_grid(hc)
        assert np.allclose(hilb(hc, grid_c).logw, hilb(h, grid).logw + c, atol=1e-12)

    def test_trace_identity(self, f1):
        k = 3
        h = random_weights(lattice_points(f1, k), seed=4)
        d = hilb(h, make_grid(h))
        total = np.exp(d.logw - h.logw).sum()
        assert np.isclose(total, h.n_sections, rtol=1e-8)

    def test_grid_k_mismatch(self, cp1):
        h2 = binomial_weights(lattice_points(cp1, 2))
        h3 = binomial_weights(lattice_points(cp1, 3))
        with pytest.raises(ValueError, match="k="):
            hilb(h3, make_grid(h2))


class TestBergmanFunction:
    @pytest.mark.parametrize("k", [8, 16, 32])
    def test_round_cp1_constant(self, cp1, k):
        pts = lattice_points(cp1, k)
        phi = round_potential(cp1)
        grid = potential_grid(phi, k, pts)
        rho = bergman_function(phi, k, grid, pts)
        assert np.max(np.abs(rho - (k + 1))) < 1e-8

    def test_round_cp2_constant(self, cp2):
        k = 4
        pts = lattice_points(cp2, k)
        phi = round_potential(cp2)
        grid = potential_grid(phi, k, pts)
        rho = bergman_function(phi, k, grid, pts)
        assert np.max(np.abs(rho - (k + 1) * (k + 2))) < 1e-7

    def test_mean_is_density_of_states(self, cp1):
        # <rho_k> against the normalized volume equals N_k / Vol(P)
        k = 6
        pts = lattice_points(cp1, k)
        phi = perturbed_cp1_potential(0.05)
        grid = potential_grid(phi, k, pts)
        rho = bergman_function(phi, k, grid, pts)
        from toricbal.quantization import _density_of_potential

        dens = _density_of_potential(phi, k, grid.nodes) * grid.weights
        mean = float(rho @ dens) / float(dens.sum())
        assert np.isclose(mean, (k + 1) / 1.0, rtol=1e-9)

    def test_expansion_tail_decay(self, cp1):
        # r_k = max|rho_k - k - S/2| decays like 1/k; the sup is taken over
        # the bulk window (the tails are boundary-divisor territory where the
        # orbit coordinates degenerate)
        phi = perturbed_cp1_potential(0.05)
        r = {}
        for k in (8, 16, 32):
            pts = lattice_points(cp1, k)
            grid = potential_grid(phi, k, pts)
            rho = bergman_function(phi, k, grid, pts)
            mask = np.abs(grid.nodes[:, 0]) <= 5.0
            s_half = np.array(
                [0.5 * scalar_curvature(phi, u) for u in grid.nodes[mask]]
            )
            r[k] = np.max(np.abs(rho[mask] - k - s_half))
        assert r[32] <= 0.6 * r[16]
        assert 0.6 * r[16] <= 0.4 * r[8]

    def test_nyquist_guard(self, cp1):
        from toricbal.quantization import QuadratureGrid, _tensor_grid

        pts = lattice_points(cp1, 32)
        phi = round_potential(cp1)
        nodes, w = _tensor_grid(1, 16.0, 40)
        coarse = QuadratureGrid(nodes, w, 16.0, 40, k=32, target_volume=32.0, rel_tol=1e-9)
        with pytest.raises(GridValidationError, match="coarse"):
            bergman_function(phi, 32, coarse, pts)


class TestScalarCurvature:
    def test_round_cp1(self, cp1):
        phi = round_potential(cp1)
        for u in (-2.0, 0.0, 0.7, 3.5):
            assert abs(scalar_curvature(phi, [u]) - 2.0) < 1e-6

    def test_round_cp2(self, cp2):
        phi = round_potential(cp2)
        for u in ([0.0, 0.0], [0.5, -0.3], [-1.2, 0.8]):
            assert abs(scalar_curvature(phi, u) - 6.0) < 1e-5

    def test_mean_is_sbar_on_f1(self, f1):
        k = 4
        h = random_weights(lattice_points(f1, k), seed=8)
        # smooth the random start with one averaging step to keep derivatives tame
        grid = make_grid(h)
        h = hilb(h, grid).sl_normalized()
        grid = make_grid(h)
        phi = fs_potential(h)
        from toricbal.quantization import _det2cov, _softmax_stats

        # restrict to the bulk where the finite-difference curvature is
        # reliable; the masked-off measure is < 1e-6 of the total
        from toricbal.quantization import scalar_curvature_batch

        _, _, _, cov = _softmax_stats(h, grid.nodes)
        dens = _det2cov(cov) * grid.weights
        mask = dens > 1e-6 * dens.max()
        s_vals = scalar_curvature_batch(phi, grid.nodes[mask])
        mean = float(s_vals @ dens[mask]) / float(dens[mask].sum())
        sbar = float(f1.mean_scalar_curvature())
        assert abs(mean - sbar) < 1e-3 * max(1.0, abs(sbar))


class TestPsi:
    def test_zero_twist_is_constant(self, cp1):
        k = 4
        h = binomial_weights(lattice_points(cp1, k))
        grid = make_grid(h)
        psi = psi_function(h, np.zeros(1), grid)
        u = np.array([[0.0], [1.0], [-2.0]])
        expected = np.log((k + 1) / (k * 1.0))
        assert np.allclose(psi(u), expected, atol=1e-12)

    def test_cp1_closed_form(self, cp1):
        k = 5
        h = binomial_weights(lattice_points(cp1, k))
        grid = make_grid(h)
        v = np.array([0.6])
        psi = psi_function(h, v, grid)
        u = np.linspace(-2, 2, 7)[:, None]
        shape = np.log1p(np.exp(2 * u[:, 0] + v[0])) - np.log1p(np.exp(2 * u[:, 0]))
        diff = psi(u) - shape
        assert np.max(np.abs(diff - diff[0])) < 1e-12

    def test_normalization(self, f1):
        k = 3
        h = random_weights(lattice_points(f1, k), seed=12)
        grid = make_grid(h)
        v = np.array([0.2, -0.3])
        psi = psi_function(h, v, grid)
        from toricbal.quantization import _det2cov, _softmax_stats

        _, _, _, cov = _softmax_stats(h, grid.nodes)
        dens = _det2cov(cov) * grid.weights
        mean = float(np.exp(psi(grid.nodes)) @ dens) / grid.target_volume
        assert np.isclose(mean, h.n_sections / grid.target_volume, rtol=1e-7)


class TestSerialization:
    def test_roundtrip(self, f1):
        pts = lattice_points(f1, 2)
        h = random_weights(pts, seed=21)
        text = weights_to_csv(h)
        assert text.startswith("# k=2 polytope=f1")
        back = weights_from_csv(text, pts)
        assert np.array_equal(back.logw, h.logw)

    def test_deterministic(self, cp1):
        pts = lattice_points(cp1, 3)
        h = random_weights(pts, seed=2)
        assert weights_to_csv(h) == weights_to_csv(h.copy())
