import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from icer import spd
from icer.errors import NegativeWeight, NotPositiveDefinite
from icer.forward import FrameConstraint, FrameState, ForwardModel, make_model
from icer.information import (FrameInfo, assemble, build_cache, build_frame_info, conditioning_report, default_prior,
                              marginal_gain, marginal_gains)

from conftest import fd_jacobian, planted_frames, random_psd, random_spd


class _SkewModel(ForwardModel):
    """Identity forward map with a deliberately inconsistent vector-Jacobian product."""

    kind = "skew"

    def __init__(self, B):
        super().__init__(2, 2)
        self.B = np.asarray(B, float)

    def eval(self, v, state):
        return self._check_code(v).copy()

    def grad_v(self, v, state, cotangent):
        return self.B @ self._check_obs(cotangent)


def frame_for(model, t=1, mask=None):
    s = FrameState(t, np.array([0.2, -0.1]), model.obs_dim)
    mask = np.ones(model.obs_dim) if mask is None else mask
    return FrameConstraint(s, mask, model.eval(np.zeros(model.code_dim), s))


class TestBuildFrameInfo:
    def test_linear_identity_mask(self, linear_model):
        fr = frame_for(linear_model)
        A = linear_model.jacobian_at_zero(fr.state)
        info = build_frame_info(linear_model, fr)
        np.testing.assert_allclose(info.matrix, A.T @ A, rtol=0, atol=1e-12 * np.abs(A.T @ A).max())
        assert info.build_method == "hvp"

    def test_zero_mask(self, linear_model):
        info = build_frame_info(linear_model, frame_for(linear_model, mask=np.zeros(12)))
        np.testing.assert_array_equal(info.matrix, 0.0)

    def test_sine_warp_matches_explicit_jacobian(self, rng):
        model = make_model("sine_warp", (4, 16), 2)
        fr = frame_for(model, mask=rng.uniform(0, 1, 16))
        hvp = build_frame_info(model, fr, "hvp").matrix
        fd = build_frame_info(model, fr, "explicit_jacobian").matrix
        assert np.linalg.norm(hvp - fd) <= 1e-4 * np.linalg.norm(fd)

    @pytest.mark.parametrize("kind", ["linear", "quadratic_residual", "sine_warp", "decoder_composed"])
    def test_exact_at_zero_residual(self, kind, rng):
        params = {"shading": "tanh"} if kind == "decoder_composed" else {}
        model = make_model(kind, (3, 14), 5, params)
        fr = frame_for(model, 3, rng.uniform(0, 1, 14))
        J = fd_jacobian(lambda x: model.eval(x, fr.state), np.zeros(3))
        G = J.T @ (fr.mask[:, None] ** 2 * J)
        H = build_frame_info(model, fr).matrix
        assert np.linalg.norm(H - G) <= 1e-4 * np.linalg.norm(G)

    def test_analytic_method(self, linear_model, rng):
        fr = frame_for(linear_model, mask=rng.uniform(0, 1, 12))
        A = linear_model.jacobian_at_zero(fr.state)
        np.testing.assert_allclose(build_frame_info(linear_model, fr, "analytic").matrix,
                                   A.T @ (fr.mask[:, None] ** 2 * A), rtol=1e-14)

    def test_identity_augmentation(self, rng):
        model = make_model("linear", (3, 12), 1, {"mask_frac": 0.5, "leak": 0.7})
        fr = frame_for(model, 2, rng.uniform(0, 1, 12))
        A = model.jacobian_at_zero(fr.state)
        lam = 0.35
        expected = A.T @ (fr.mask[:, None] ** 2 * A) + lam * A.T @ (fr.complement[:, None] ** 2 * A)
        got = build_frame_info(model, fr, lambda_id=lam).matrix
        assert np.linalg.norm(got - expected) <= 1e-8 * np.linalg.norm(expected)

    def test_records_asymmetry_and_symmetrizes(self):
        model = _SkewModel([[1.0, 0.1], [0.0, 1.0]])
        info = build_frame_info(model, frame_for(model))
        assert info.build_error_estimate > 0.05
        np.testing.assert_array_equal(info.matrix, info.matrix.T)

    def test_tiny_negative_eigenvalue_clipped(self):
        model = _SkewModel(np.diag([1.0, -1e-10]))
        info = build_frame_info(model, frame_for(model))
        assert info.clipped == pytest.approx(1e-10, rel=1e-3)
        assert np.linalg.eigvalsh(info.matrix)[0] >= 0
        np.testing.assert_allclose(info.matrix, np.diag([1.0, 0.0]), atol=1e-14)

    def test_genuinely_indefinite_raises(self):
        model = _SkewModel(np.diag([1.0, -1.0]))
        with pytest.raises(NotPositiveDefinite):
            build_frame_info(model, frame_for(model))


class TestCache:
    def test_skips_held_out(self, linear_model, rng):
        frames = planted_frames(linear_model, rng.standard_normal(3), 4, rng)
        frames[1].held_out = True
        cache = build_cache(linear_model, frames)
        assert cache.order == [1, 3, 4]
        assert cache.prior.dim == 3
        np.testing.assert_array_equal(cache.prior.entries, 1e-3 * np.eye(3))

    def test_rejects_indefinite_prior(self, linear_model):
        with pytest.raises(NotPositiveDefinite):
            build_cache(linear_model, [], prior=np.diag([1.0, 1.0, 0.0]))


class TestAssemble:
    def _cache(self, rng, n=5, r=3, lam0=1.0):
        model = make_model("linear", (r, 10), int(rng.integers(100)))
        frames = planted_frames(model, rng.standard_normal(r), n, rng)
        return build_cache(model, frames, prior=lam0 * np.eye(r))

    def test_zero_weights_is_prior(self, rng):
        cache = self._cache(rng)
        np.testing.assert_array_equal(assemble(cache, np.zeros(5)).entries, cache.prior.entries)

    def test_single_identity_frame(self):
        model = make_model("linear", (2, 2), 0)
        cache = build_cache(model, [], prior=np.eye(2))
        cache.frames[1] = FrameInfo(1, spd.SpdMatrix(np.eye(2)), "analytic", 0.0)
        np.testing.assert_array_equal(assemble(cache, [1.0]).entries, 2 * np.eye(2))

    def test_matches_direct_summation(self, rng):
        cache = self._cache(rng)
        w = rng.uniform(0, 2, 5)
        direct = cache.prior.entries.copy()
        for wt, H in zip(w, cache.matrices()):
            direct = direct + wt * H
        np.testing.assert_array_equal(assemble(cache, w).entries, direct)

    def test_dict_weights(self, rng):
        cache = self._cache(rng)
        w = {fid: 0.5 for fid in cache.order}
        np.testing.assert_array_equal(assemble(cache, w).entries, assemble(cache, np.full(5, 0.5)).entries)

    def test_negative_weight(self, rng):
        with pytest.raises(NegativeWeight):
            assemble(self._cache(rng), [1, 1, -0.1, 1, 1])

    def test_lambda_min_floor(self, rng):
        cache = self._cache(rng, lam0=0.2)
        S = assemble(cache, rng.uniform(0, 3, 5))
        assert spd.eigen_extremes(S)[0] >= 0.2 * (1 - 1e-12)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31), st.floats(1e-3, 5.0))
    def test_logdet_monotone_in_each_weight(self, seed, delta):
        rng = np.random.default_rng(seed)
        cache = self._cache(rng, n=4)
        w = rng.uniform(0, 2, 4)
        t = int(rng.integers(4))
        w2 = w.copy()
        w2[t] += delta
        assert spd.logdet(assemble(cache, w2)) >= spd.logdet(assemble(cache, w)) - 1e-12


class TestConditioning:
    def test_identity(self):
        rep = conditioning_report(np.eye(3))
        assert rep == pytest.approx({"logdet": 0.0, "trace_inverse": 3.0, "lambda_min": 1.0,
                                     "lambda_max": 1.0, "kappa": 1.0})

    def test_diagonal(self):
        rep = conditioning_report(np.diag([1.0, 4.0]))
        assert rep == pytest.approx({"logdet": np.log(4), "trace_inverse": 1.25, "lambda_min": 1.0,
                                     "lambda_max": 4.0, "kappa": 4.0})

    def test_trace_inverse_oracle(self, rng):
        S = random_spd(rng, 5)
        assert conditioning_report(S)["trace_inverse"] == pytest.approx(np.trace(np.linalg.inv(S)), abs=1e-9)

    def test_not_pd(self):
        with pytest.raises(NotPositiveDefinite):
            conditioning_report(np.diag([1.0, 0.0]))


class TestMarginalGain:
    def test_identity(self):
        assert marginal_gain(np.eye(4), np.eye(4)) == pytest.approx(4.0)

    def test_zero(self):
        assert marginal_gain(np.eye(4), np.zeros((4, 4))) == 0.0

    def test_fd_oracle(self, rng):
        S = random_spd(rng, 4, spread=1.0)
        H = random_psd(rng, 4)
        eps = 1e-6
        fd = (spd.logdet(S + eps * H) - spd.logdet(S - eps * H)) / (2 * eps)
        assert marginal_gain(S, H) == pytest.approx(fd, rel=1e-5)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 8), st.integers(1, 8), st.integers(0, 2**31))
    def test_nonnegative(self, dim, rank, seed):
        rng = np.random.default_rng(seed)
        assert marginal_gain(random_spd(rng, dim, 3.0), random_psd(rng, dim, rank)) >= -1e-10

    def test_vectorized(self, rng):
        model = make_model("linear", (3, 10), 0)
        cache = build_cache(model, planted_frames(model, np.ones(3), 3, rng), prior=np.eye(3))
        S = assemble(cache, [1, 2, 3])
        np.testing.assert_allclose(marginal_gains(S, cache),
                                   [marginal_gain(S, H) for H in cache.matrices()])
