import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from splat4d import regularizers as reg

from oracles import finite_difference, max_rel_err


def jsd_two_kl_oracle(m0, mt):
    """Half-sum of KLs against the moment-averaged Gaussian, computed
    from the generic Gaussian KL formula. Independent route to the
    closed form under test."""
    total = 0.0
    for mu1, s1, mu2, s2 in zip(m0.mean, m0.var, mt.mean, mt.var):
        sm = 0.5 * (s1 + s2)
        mum = 0.5 * (mu1 + mu2)

        def kl(mu_a, s_a):
            return 0.5 * (np.log(sm / s_a) + (s_a + (mu_a - mum) ** 2) / sm - 1.0)

        total += 0.5 * kl(mu1, s1) + 0.5 * kl(mu2, s2)
    return total


def random_moments(rng):
    return reg.CloudMoments(mean=rng.normal(0, 0.5, 3),
                            var=rng.uniform(0.01, 0.3, 3))


class TestMoments:
    def test_values(self):
        pos = np.array([[0.0, 0, 0], [2.0, 0, 0]])
        m = reg.cloud_moments(pos)
        assert np.allclose(m.mean, [1.0, 0, 0])
        # biased variance: mean of squared deviations
        assert m.var[0] == pytest.approx(1.0)
        assert np.allclose(m.var[1:], reg.MOMENT_FLOOR)

    def test_floor(self):
        pos = np.tile(np.array([[0.3, -0.2, 0.1]]), (5, 1))
        m = reg.cloud_moments(pos)
        assert np.allclose(m.var, reg.MOMENT_FLOOR)

    def test_needs_two_points(self):
        with pytest.raises(ValueError):
            reg.cloud_moments(np.zeros((1, 3)))

    def test_backward_matches_fd(self, rng):
        pos = rng.normal(0, 0.4, (12, 3))
        d_mean = rng.standard_normal(3)
        d_var = rng.standard_normal(3)
        analytic = reg.moments_backward(pos, d_mean, d_var)

        def loss(x):
            m = reg.cloud_moments(x)
            return float((m.mean * d_mean).sum() + (m.var * d_var).sum())

        fd = finite_difference(loss, pos.copy(), eps=1e-6)
        assert max_rel_err(analytic, fd) <= 1e-6


class TestJsd:
    def test_zero_at_equal_moments(self, rng):
        m = random_moments(rng)
        loss, d_mean, d_var = reg.jsd_reg(m, reg.CloudMoments(m.mean.copy(),
                                                              m.var.copy()))
        assert loss == 0.0
        assert np.all(d_mean == 0.0)
        assert np.all(d_var == 0.0)

    def test_unit_mean_shift_value(self):
        m0 = reg.CloudMoments(np.zeros(3), np.ones(3))
        mt = reg.CloudMoments(np.array([1.0, 0, 0]), np.ones(3))
        loss, _, _ = reg.jsd_reg(m0, mt)
        assert loss == pytest.approx(0.125, abs=1e-12)

    def test_matches_two_kl_oracle(self, rng):
        for _ in range(50):
            m0, mt = random_moments(rng), random_moments(rng)
            loss, _, _ = reg.jsd_reg(m0, mt)
            assert loss == pytest.approx(jsd_two_kl_oracle(m0, mt), rel=1e-10)

    def test_positive_on_mismatch(self, rng):
        for _ in range(200):
            m0, mt = random_moments(rng), random_moments(rng)
            loss, _, _ = reg.jsd_reg(m0, mt)
            assert loss > 0.0

    def test_symmetric(self, rng):
        m0, mt = random_moments(rng), random_moments(rng)
        assert reg.jsd_reg(m0, mt)[0] == pytest.approx(reg.jsd_reg(mt, m0)[0],
                                                       rel=1e-12)

    def test_gradients_match_fd(self, rng):
        m0, mt = random_moments(rng), random_moments(rng)
        _, d_mean, d_var = reg.jsd_reg(m0, mt)
        fd_mean = finite_difference(
            lambda x: reg.jsd_reg(m0, reg.CloudMoments(x, mt.var))[0],
            mt.mean.copy(), eps=1e-6)
        fd_var = finite_difference(
            lambda x: reg.jsd_reg(m0, reg.CloudMoments(mt.mean, x))[0],
            mt.var.copy(), eps=1e-7)
        assert max_rel_err(d_mean, fd_mean) <= 1e-6
        assert max_rel_err(d_var, fd_var) <= 1e-6

    def test_grows_with_mean_separation(self):
        base = reg.CloudMoments(np.zeros(3), 0.1 * np.ones(3))
        losses = [reg.jsd_reg(base, reg.CloudMoments(np.array([d, 0, 0]),
                                                     0.1 * np.ones(3)))[0]
                  for d in (0.1, 0.2, 0.4, 0.8)]
        assert all(a < b for a, b in zip(losses, losses[1:]))


class TestRigidity:
    def test_two_point_example(self):
        disp = np.array([[0.0, 0, 0], [1.0, 0, 0]])
        nn = np.array([[1], [0]])
        loss, grad = reg.rigidity_reg(disp, nn)
        assert loss == pytest.approx(1.0)
        assert np.allclose(grad[0], [-2.0, 0, 0])
        assert np.allclose(grad[1], [2.0, 0, 0])

    def test_zero_for_rigid_motion(self, rng):
        disp = np.tile(rng.normal(0, 1, 3), (20, 1))
        nn = np.stack([np.roll(np.arange(20), s) for s in (1, 2)], axis=1)
        loss, grad = reg.rigidity_reg(disp, nn)
        assert loss == 0.0
        assert np.all(grad == 0.0)

    def test_translation_invariant(self, rng):
        disp = rng.normal(0, 0.3, (15, 3))
        nn = np.stack([np.roll(np.arange(15), s) for s in (1, 3, 7)], axis=1)
        l1, g1 = reg.rigidity_reg(disp, nn)
        l2, g2 = reg.rigidity_reg(disp + np.array([5.0, -3.0, 1.0]), nn)
        assert l2 == pytest.approx(l1, rel=1e-9)
        assert np.allclose(g1, g2, atol=1e-12)

    def test_gradients_match_fd(self, rng):
        disp = rng.normal(0, 0.3, (8, 3))
        nn = np.stack([np.roll(np.arange(8), s) for s in (1, 2, 5)], axis=1)
        _, grad = reg.rigidity_reg(disp, nn)
        fd = finite_difference(lambda x: reg.rigidity_reg(x, nn)[0],
                               disp.copy(), eps=1e-6)
        assert max_rel_err(grad, fd) <= 1e-6


class TestInterpol:
    def test_unit_component_example(self):
        n = 4
        a = np.zeros((n, 3))
        b = np.zeros((n, 3))
        b[0, 0] = 1.0
        loss, grad = reg.interpol_reg(a, b)
        assert loss == pytest.approx(1.0 / (3 * n))
        assert grad[0, 0] == pytest.approx(2.0 / (3 * n))

    def test_zero_at_equality(self, rng):
        a = rng.normal(0, 0.3, (6, 3))
        loss, grad = reg.interpol_reg(a, a.copy())
        assert loss == 0.0
        assert np.all(grad == 0.0)

    def test_gradients_match_fd(self, rng):
        a = rng.normal(0, 0.3, (5, 3))
        b = rng.normal(0, 0.3, (5, 3))
        _, grad = reg.interpol_reg(a, b)
        fd = finite_difference(lambda x: reg.interpol_reg(a, x)[0],
                               b.copy(), eps=1e-6)
        assert max_rel_err(grad, fd) <= 1e-6

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            reg.interpol_reg(np.zeros((3, 3)), np.zeros((4, 3)))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2 ** 31 - 1))
def test_jsd_nonnegative_property(seed):
    r = np.random.default_rng(seed)
    m0 = reg.CloudMoments(r.normal(0, 1, 3), r.uniform(1e-4, 2.0, 3))
    mt = reg.CloudMoments(r.normal(0, 1, 3), r.uniform(1e-4, 2.0, 3))
    loss, _, _ = reg.jsd_reg(m0, mt)
    assert loss >= 0.0
