import numpy as np
import pytest
from scipy.special import gammaln

from starflow import ad, targets
from starflow.spherical import sample_uniform_angles, to_cartesian

MU = np.array([0.0, 0.0, 1.0])


def sphere_grid(n=400):
    t1 = (np.arange(n) + 0.5) * np.pi / n
    t2 = (np.arange(n) + 0.5) * 2 * np.pi / n
    th = np.stack(np.meshgrid(t1, t2, indexing="ij"), -1).reshape(-1, 2)
    area = np.sin(th[:, 0]) * (np.pi / n) * (2 * np.pi / n)
    return to_cartesian(th, np.ones(len(th))), area


class TestVonMisesFisher:
    def test_mode_value(self):
        assert targets.vmf_log(MU, MU, 5.0) == pytest.approx(5.0)

    def test_orthogonal_point(self):
        assert targets.vmf_log(np.array([1.0, 0.0, 0.0]), MU, 5.0) == pytest.approx(0.0)

    def test_zero_concentration_is_flat(self):
        x = to_cartesian(sample_uniform_angles(3, 10, np.random.default_rng(0)), np.ones(10))
        np.testing.assert_array_equal(targets.vmf_log(x, MU, 0.0), 0.0)

    def test_rejects_non_unit_mean(self):
        with pytest.raises(ValueError, match="unit"):
            targets.vmf_log(MU, 2 * MU, 5.0)

    @pytest.mark.parametrize("kappa", [0.0, 1.0, 5.0, 50.0])
    def test_normalizer_by_quadrature(self, kappa):
        x, area = sphere_grid()
        z = np.sum(np.exp(targets.vmf_log(x, MU, kappa) - kappa) * area)
        assert np.log(z) + kappa == pytest.approx(targets.vmf_log_normalizer(kappa, 3), abs=1e-4)

    def test_normalizer_closed_form_in_3d(self):
        k = 5.0
        assert targets.vmf_log_normalizer(k, 3) == pytest.approx(np.log(4 * np.pi * np.sinh(k) / k))

    def test_circle_normalizer(self):
        from scipy.special import i0
        assert targets.vmf_log_normalizer(2.0, 2) == pytest.approx(np.log(2 * np.pi * i0(2.0)))

    def test_normalized_target_integrates_to_one(self):
        x, area = sphere_grid()
        t = targets.make_vmf((0.3, -0.5, 0.8), 5.0)
        assert np.sum(np.exp(t.normalized(x)) * area) == pytest.approx(1.0, abs=1e-4)


class TestMixture:
    def test_empty(self):
        with pytest.raises(ValueError, match="empty"):
            targets.mixture_vmf_log(MU, np.zeros((0, 3)), 1.0, np.zeros(0))

    def test_single_component_is_vmf(self):
        x = to_cartesian(sample_uniform_angles(3, 7, np.random.default_rng(1)), np.ones(7))
        np.testing.assert_allclose(targets.mixture_vmf_log(x, MU[None], 3.0, 1.0), targets.vmf_log(x, MU, 3.0))

    def test_antipodal_symmetry(self):
        x = to_cartesian(sample_uniform_angles(3, 7, np.random.default_rng(2)), np.ones(7))
        mus = np.stack([MU, -MU])
        np.testing.assert_allclose(targets.mixture_vmf_log(x, mus, 4.0, [0.5, 0.5]),
                                   targets.mixture_vmf_log(-x, mus, 4.0, [0.5, 0.5]))

    def test_matches_extended_precision(self):
        x = to_cartesian(sample_uniform_angles(3, 50, np.random.default_rng(3)), np.ones(50))
        mus = targets.spiral_means(50)
        w = np.full(50, 0.02)
        ref = targets.mixture_log_extended(x, mus, 50.0, w)
        np.testing.assert_allclose(targets.mixture_vmf_log(x, mus, 50.0, w), ref.astype(float), rtol=1e-12)

    def test_spiral(self):
        mus = targets.spiral_means(50)
        np.testing.assert_allclose(np.linalg.norm(mus, axis=1), 1.0)
        colat = np.arccos(mus[:, 0])
        np.testing.assert_allclose(colat[[0, -1]], [0.1 * np.pi, 0.9 * np.pi])
        assert np.all(np.diff(colat) > 0)

    def test_mixture_normalizer(self):
        x, area = sphere_grid(600)
        t = targets.make_spiral_mixture()
        assert np.sum(np.exp(t.normalized(x)) * area) == pytest.approx(1.0, abs=1e-3)


class TestSinusoidal:
    def test_peak(self):
        x = to_cartesian(np.array([np.pi / 8, np.pi / 8]), 1.0)
        assert targets.sinusoidal_log(x) == pytest.approx(1.0)

    def test_zero_line(self):
        x = to_cartesian(np.array([np.pi / 4, 1.234]), 1.0)
        assert targets.sinusoidal_log(x) == pytest.approx(0.0, abs=1e-12)

    def test_dimension(self):
        with pytest.raises(ValueError, match="d = 3"):
            targets.sinusoidal_log(np.ones(4) / 2)


class TestRegression:
    def test_exact_fit(self):
        X = np.array([[1.0, 2.0], [3.0, -1.0]])
        beta = np.array([0.5, 0.25])
        assert targets.gaussian_regression_log(beta, X, X @ beta, 1.0) == pytest.approx(0.0)

    def test_single_observation(self):
        val = targets.gaussian_regression_log(np.array([1.0, 1.0]), np.array([[1.0, 0.0]]), np.array([2.0]), 1.0)
        assert val == pytest.approx(-0.5)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape"):
            targets.gaussian_regression_log(np.ones(3), np.ones((2, 2)), np.ones(2), 1.0)

    def test_gradient(self):
        rng = np.random.default_rng(4)
        X, y = rng.standard_normal((4, 3)), rng.standard_normal(4)
        t = targets.make_regression(X, y, 2.0)
        b = rng.standard_normal(3)
        np.testing.assert_allclose(t.grad(b), X.T @ (y - X @ b) / 4.0, rtol=1e-12)


class TestSimplexTargets:
    def test_uniform_kernel(self):
        pi = np.array([[0.2, 0.3, 0.5], [0.9, 0.05, 0.05]])
        np.testing.assert_array_equal(targets.dirichlet_multinomial_log(pi, np.zeros(3), 1.0), 0.0)

    def test_kernel_value(self):
        pi = np.array([0.2, 0.3, 0.5])
        val = targets.dirichlet_multinomial_log(pi, [2, 0, 1], 1.0)
        assert val == pytest.approx(2 * np.log(0.2) + np.log(0.5))

    def test_normalizer_surface_measure(self):
        # Dirichlet(1, 1) is uniform on a segment of length sqrt(2)
        t = targets.make_dirichlet_multinomial([0, 0], 1.0)
        assert t.log_normalizer == pytest.approx(0.5 * np.log(2.0))

    def test_normalizer_quadrature(self):
        counts = np.array([3.0, 1.0])
        t = targets.make_dirichlet_multinomial(counts, 1.0)
        n = 100_000
        p1 = (np.arange(n) + 0.5) / n
        pi = np.stack([p1, 1 - p1], -1)
        ds = np.sqrt(2.0) / n
        assert np.sum(np.exp(t.normalized(pi))) * ds == pytest.approx(1.0, rel=1e-6)
        assert t.log_normalizer == pytest.approx(gammaln(4) + gammaln(2) - gammaln(6) + 0.5 * np.log(2))

    def test_portfolio_perfect_replication(self):
        rng = np.random.default_rng(5)
        R = rng.standard_normal((20, 4))
        pi = np.array([0.1, 0.2, 0.3, 0.4])
        assert targets.portfolio_posterior_log(pi, R, R @ pi, 1.0) == pytest.approx(0.0)

    def test_portfolio_dirichlet_prior(self):
        R = np.eye(3)
        pi = np.array([0.2, 0.3, 0.5])
        val = targets.portfolio_posterior_log(pi, R, pi, 1.0, "dirichlet", 2.0)
        assert val == pytest.approx(np.sum(np.log(pi)))

    def test_portfolio_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape"):
            targets.portfolio_posterior_log(np.ones(3) / 3, np.ones((5, 4)), np.ones(5), 1.0)

    def test_portfolio_unknown_prior(self):
        with pytest.raises(ValueError, match="prior"):
            targets.portfolio_posterior_log(np.ones(2) / 2, np.eye(2), np.ones(2), 1.0, "laplace")


class TestPortfolioCsv:
    def test_round_trip(self, tmp_path):
        p = tmp_path / "r.csv"
        p.write_text("a,index,b\n1,2,3\n4,5,6\n")
        R, rho, names = targets.load_portfolio_csv(p)
        np.testing.assert_array_equal(R, [[1, 3], [4, 6]])
        np.testing.assert_array_equal(rho, [2, 5])
        assert names == ["a", "b"]

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            targets.load_portfolio_csv(tmp_path / "nope.csv")

    def test_missing_index_column(self, tmp_path):
        p = tmp_path / "r.csv"
        p.write_text("a,b\n1,2\n")
        with pytest.raises(ValueError, match="index"):
            targets.load_portfolio_csv(p)

    def test_non_numeric(self, tmp_path):
        p = tmp_path / "r.csv"
        p.write_text("a,index\n1,x\n")
        with pytest.raises(ValueError, match="non-numeric"):
            targets.load_portfolio_csv(p)


class TestShift:
    def test_gradient_invariant(self):
        t = targets.make_vmf((0.0, 0.6, 0.8), 3.0)
        x = np.array([[0.0, 1.0, 0.0], [0.6, 0.0, 0.8]])
        np.testing.assert_allclose(t.shifted(7.5).grad(x), t.grad(x))
        np.testing.assert_allclose(t.shifted(7.5)(x), t(x) + 7.5)

    def test_unknown_normalizer(self):
        with pytest.raises(ValueError, match="normalizer"):
            targets.make_sinusoidal().normalized(np.array([0.0, 0.0, 1.0]))

    def test_taped_and_plain_agree(self):
        t = targets.make_spiral_mixture()
        x = to_cartesian(sample_uniform_angles(3, 5, np.random.default_rng(6)), np.ones(5))
        tape = ad.Tape()
        np.testing.assert_allclose(ad.value(t(tape.var(x))), t(x))
