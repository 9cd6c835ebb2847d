import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from setret.whitening import WhitenTransform, apply_whitening, fit_whitening


class TestFit:
    def test_diagonal_covariance(self, rng):
        x = rng.normal(size=(20000, 2)) * [2.0, 1.0]
        x -= x.mean(axis=0)
        t = fit_whitening(x, epsilon=0.0)
        y = apply_whitening(x, t, renormalize=False)
        np.testing.assert_allclose(np.cov(y, rowvar=False, bias=True), np.eye(2), atol=1e-8)

    def test_white_sample_gives_rotation(self, rng):
        # exactly white: centred columns orthonormalized and scaled by sqrt(n)
        x = rng.normal(size=(4000, 5))
        x = np.linalg.qr(x - x.mean(axis=0))[0] * np.sqrt(4000)
        M = fit_whitening(x, epsilon=0.0).M
        np.testing.assert_allclose(M.T @ M, np.eye(5), atol=1e-6)

    def test_large_epsilon_scales_rotation(self, rng):
        x = rng.normal(size=(500, 4)) * 1e-4
        eps = 1e6
        M = fit_whitening(x, epsilon=eps).M
        np.testing.assert_allclose(M.T @ M * eps, np.eye(4), atol=1e-6)

    @given(st.integers(0, 2**32 - 1), st.integers(2, 8))
    def test_fitting_sample_becomes_white(self, seed, dim):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(400, dim)) @ rng.normal(size=(dim, dim)) + rng.normal(size=dim)
        t = fit_whitening(x, epsilon=1e-12)
        y = apply_whitening(x, t, renormalize=False)
        cov = np.cov(y, rowvar=False, bias=True)
        assert np.linalg.norm(cov - np.eye(dim)) / dim < 1e-6

    def test_default_epsilon(self, rng):
        x = rng.normal(size=(300, 6))
        t = fit_whitening(x)
        cov = np.cov(x - x.mean(axis=0), rowvar=False, bias=True)
        assert t.epsilon == pytest.approx(1e-6 * np.trace(cov) / 6)

    def test_needs_more_samples_than_dims(self, rng):
        with pytest.raises(ValueError, match="samples"):
            fit_whitening(rng.normal(size=(4, 4)))

    def test_bad_stage(self):
        with pytest.raises(ValueError, match="stage"):
            WhitenTransform(np.zeros(2), np.eye(2), 0.0, "during")


class TestApply:
    def test_mean_vector_cannot_be_normalized(self, rng):
        x = rng.normal(size=(50, 3))
        t = fit_whitening(x)
        with pytest.raises(ValueError, match="zero"):
            apply_whitening(t.mean, t)

    def test_identity_transform(self, rng):
        v = rng.normal(size=(3, 4))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        t = WhitenTransform(np.zeros(4), np.eye(4), 0.0)
        np.testing.assert_allclose(apply_whitening(v, t), v, atol=1e-15)
        np.testing.assert_allclose(t(v[0]), v[0], atol=1e-15)

    def test_dimension_checked(self):
        with pytest.raises(ValueError, match="dimension"):
            apply_whitening(np.ones(3), WhitenTransform(np.zeros(4), np.eye(4), 0.0))

    def test_dict_round_trip(self, rng):
        t = fit_whitening(rng.normal(size=(40, 3)), stage="after")
        back = WhitenTransform.from_dict(t.to_dict())
        np.testing.assert_array_equal(back.M, t.M)
        np.testing.assert_array_equal(back.mean, t.mean)
        assert back.stage == "after" and back.epsilon == t.epsilon


def test_whitening_lowers_gram_diff_of_average_pool():
    """Whitened raw descriptors are more mutually orthogonal on at least 9 of 10 seeds."""
    from setret.bench import gram_diff, identity_descriptors
    from setret.experiment import BenchConfig, fit_element_whitening
    from setret.synth import gallery_matrix, gen_gallery

    cfg = BenchConfig(whitening_sample=5000)
    wins = 0
    for seed in range(10):
        train = gen_gallery(300, cfg.dim, [seed, 1], cfg.space)
        test = gen_gallery(200, cfg.dim, [seed, 2], cfg.space, first_id=1000)
        wt = fit_element_whitening(train, cfg, seed)
        centers = gallery_matrix(test)[1]
        raw = gram_diff(identity_descriptors(None, centers, 20, cfg.noise_sigma, np.random.default_rng(seed)))
        white = gram_diff(identity_descriptors(None, centers, 20, cfg.noise_sigma, np.random.default_rng(seed), wt))
        assert white <= raw
        wins += white < raw
    assert wins >= 9
