import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from starflow import ad
from starflow.spherical import (
    SingularAngleError,
    angle_log_density_uniform_sphere,
    jacobian_sc_transpose,
    log_abs_det_sc,
    log_sphere_area,
    sample_uniform_angles,
    to_cartesian,
    to_spherical,
)


class TestCoordinates:
    def test_circle(self):
        np.testing.assert_allclose(to_cartesian(np.array([0.0]), 2.0), [2.0, 0.0])

    def test_three_dims(self):
        np.testing.assert_allclose(to_cartesian(np.array([np.pi / 2, 0.0]), 1.0), [0.0, 1.0, 0.0], atol=1e-15)

    def test_inverse_simple(self):
        th, r = to_spherical(np.array([0.0, 1.0]))
        np.testing.assert_allclose(th, [np.pi / 2])
        assert r == pytest.approx(1.0)

    def test_singular_convention(self):
        th, r = to_spherical(np.array([3.0, 0.0, 0.0]))
        np.testing.assert_array_equal(th, [0.0, 0.0])
        assert r == 3.0

    def test_origin_rejected(self):
        with pytest.raises(ValueError, match="x = 0"):
            to_spherical(np.zeros(4))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(2, 30), st.integers(0, 2**31 - 1), st.floats(0.1, 10.0))
    def test_round_trip(self, d, seed, r):
        th = sample_uniform_angles(d, 4, np.random.default_rng(seed))
        th2, r2 = to_spherical(to_cartesian(th, np.full(4, r)))
        np.testing.assert_allclose(th2, th, rtol=1e-10, atol=1e-12)
        np.testing.assert_allclose(r2, r, rtol=1e-12)


class TestLogDet:
    def test_three_dims(self):
        res = log_abs_det_sc(np.array([np.pi / 2, 1.0]), 2.0)
        assert res.log_abs == pytest.approx(np.log(4.0))
        assert res.sign == 1
        assert not res.singular

    def test_circle(self):
        assert log_abs_det_sc(np.array([0.3]), 1.0).log_abs == pytest.approx(0.0)

    def test_singular_flag(self):
        res = log_abs_det_sc(np.array([0.0, 1.0]), 1.0)
        assert res.singular and res.log_abs == -np.inf

    @pytest.mark.parametrize("d", [2, 3, 5, 10, 20, 30])
    def test_matches_lu_determinant(self, d):
        rng = np.random.default_rng(d)
        th = sample_uniform_angles(d, 10, rng)
        r = rng.uniform(0.5, 2.0, 10)
        sign, logdet = np.linalg.slogdet(jacobian_sc_transpose(th, r))
        np.testing.assert_allclose(log_abs_det_sc(th, r).log_abs, logdet, rtol=1e-9)
        np.testing.assert_array_equal(sign, log_abs_det_sc(th, r).sign)


class TestTransposedJacobian:
    def test_circle_at_right_angle(self):
        np.testing.assert_allclose(jacobian_sc_transpose(np.array([np.pi / 2]), 1.0), [[-1, 0], [0, 1]], atol=1e-15)

    def test_upper_triangular_except_last_row(self):
        th = sample_uniform_angles(7, 1, np.random.default_rng(0))[0]
        jt = jacobian_sc_transpose(th, 1.3)
        np.testing.assert_array_equal(np.tril(jt[:-1], -1), 0.0)

    def test_matches_finite_differences(self):
        th = sample_uniform_angles(6, 1, np.random.default_rng(1))[0]
        r, h = 1.7, 1e-6
        jt = jacobian_sc_transpose(th, r)
        for i in range(5):
            e = np.zeros(5)
            e[i] = h
            fd = (to_cartesian(th + e, r) - to_cartesian(th - e, r)) / (2 * h)
            np.testing.assert_allclose(jt[i], fd, atol=1e-8)
        np.testing.assert_allclose(jt[-1], to_cartesian(th, 1.0), atol=1e-14)

    def test_taped_matches_plain(self):
        th = sample_uniform_angles(5, 3, np.random.default_rng(2))
        tape = ad.Tape()
        taped = jacobian_sc_transpose(tape.var(th), np.full(3, 1.5))
        np.testing.assert_allclose(ad.value(taped), jacobian_sc_transpose(th, np.full(3, 1.5)), atol=1e-14)


class TestUniformAngles:
    def test_circle_density(self):
        np.testing.assert_allclose(angle_log_density_uniform_sphere(np.array([[0.1], [4.0]])), -np.log(2 * np.pi))

    def test_sphere_density_quadrature(self):
        n = 200
        t1 = (np.arange(n) + 0.5) * np.pi / n
        t2 = (np.arange(n) + 0.5) * 2 * np.pi / n
        grid = np.stack(np.meshgrid(t1, t2, indexing="ij"), -1).reshape(-1, 2)
        p = np.exp(angle_log_density_uniform_sphere(grid))
        np.testing.assert_allclose(p, np.sin(grid[:, 0]) / (4 * np.pi))
        assert p.sum() * (np.pi / n) * (2 * np.pi / n) == pytest.approx(1.0, abs=1e-4)

    def test_pole_raises_or_flags(self):
        th = np.array([[0.0, 1.0]])
        with pytest.raises(SingularAngleError):
            angle_log_density_uniform_sphere(th)
        _, flag = angle_log_density_uniform_sphere(th, with_flag=True)
        assert flag[0]

    def test_sphere_area(self):
        assert log_sphere_area(3) == pytest.approx(np.log(4 * np.pi))
        assert log_sphere_area(2) == pytest.approx(np.log(2 * np.pi))

    def test_samples_symmetric(self):
        x = to_cartesian(sample_uniform_angles(3, 100_000, np.random.default_rng(3)), np.ones(100_000))
        assert np.all(np.abs(x.mean(0)) < 0.02)

    def test_samples_isotropic(self):
        x = to_cartesian(sample_uniform_angles(4, 100_000, np.random.default_rng(4)), np.ones(100_000))
        np.testing.assert_allclose((x**2).mean(0), 0.25, atol=0.01)

    def test_first_angle_law(self):
        th = sample_uniform_angles(3, 20_000, np.random.default_rng(5))
        edges = np.linspace(0, np.pi, 21)
        counts, _ = np.histogram(th[:, 0], edges)
        # P(theta_1 in [a, b]) = (cos a - cos b) / 2
        expected = 20_000 * (np.cos(edges[:-1]) - np.cos(edges[1:])) / 2
        assert stats.chisquare(counts, expected).pvalue > 0.01

    def test_positive_orthant(self):
        th = sample_uniform_angles(5, 1000, np.random.default_rng(6), positive_orthant=True)
        assert np.all(th > 0) and np.all(th < np.pi / 2)
