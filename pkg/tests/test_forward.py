import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from icer import forward, spd
from icer.decoder import ResidualDecoder, als_fit, make_paired_assets
from icer.errors import DimensionMismatch, InvalidParams
from icer.forward import MODEL_KINDS, FrameConstraint, FrameState, make_model, model_from_spec

from conftest import fd_jacobian


def state(t=1, theta=(0.3, -0.2), m=12):
    return FrameState(t, np.asarray(theta), m)


class TestFrameTypes:
    def test_mask_range_checked(self):
        with pytest.raises(InvalidParams):
            FrameConstraint(state(), np.full(12, 1.5), np.zeros(12))

    def test_unsupervised_has_no_target(self):
        with pytest.raises(InvalidParams):
            FrameConstraint(state(), np.ones(12), np.zeros(12), np.ones(12), supervised=False)

    def test_complement(self):
        mask = np.linspace(0, 1, 12)
        f = FrameConstraint(state(), mask, np.zeros(12))
        np.testing.assert_array_equal(f.complement, 1 - mask)

    def test_length_checked(self):
        with pytest.raises(DimensionMismatch):
            FrameConstraint(state(), np.ones(11), np.zeros(12))

    def test_theta_must_be_finite(self):
        with pytest.raises(InvalidParams):
            FrameState(1, np.array([np.nan]), 4)


class TestEval:
    def test_linear_zero_code_is_base(self, linear_model):
        s = state()
        np.testing.assert_array_equal(linear_model.eval(np.zeros(3), s), linear_model.base(s))

    def test_linear_unit_code_adds_column(self, linear_model):
        s = state()
        A = linear_model.jacobian_at_zero(s)
        np.testing.assert_allclose(linear_model.eval(np.eye(3)[0], s), linear_model.base(s) + A[:, 0], rtol=1e-15)

    def test_quadratic_matches_formula(self, rng):
        model = make_model("quadratic_residual", (3, 12), 2, {"beta": 0.07})
        s = state()
        v = rng.standard_normal(3)
        A = model.jacobian_at_zero(s)
        u = model.direction(s)
        expected = model.base(s) + A @ v + 0.5 * 0.07 * (v @ v) * u
        np.testing.assert_array_equal(model.eval(v, s), expected)

    def test_wrong_code_length(self, linear_model):
        with pytest.raises(DimensionMismatch):
            linear_model.eval(np.zeros(2), state())

    def test_module_level_eval(self, linear_model):
        s = state()
        np.testing.assert_array_equal(forward.eval(linear_model, np.ones(3), s), linear_model.eval(np.ones(3), s))

    @pytest.mark.parametrize("kind", MODEL_KINDS)
    def test_base_recovery_bitwise(self, kind):
        model = make_model(kind, (3, 12), 1)
        for t in range(1, 6):
            s = state(t, (0.1 * t, -0.05 * t))
            np.testing.assert_array_equal(model.eval(np.zeros(3), s), model.eval(np.zeros(3), s))
            if kind != "decoder_composed":
                np.testing.assert_array_equal(model.eval(np.zeros(3), s), model.base(s))


class TestGradV:
    def test_linear_is_transpose(self, linear_model, rng):
        s = state()
        c = rng.standard_normal(12)
        A = linear_model.jacobian_at_zero(s)
        for v in (np.zeros(3), rng.standard_normal(3)):
            np.testing.assert_allclose(linear_model.grad_v(v, s, c), A.T @ c, rtol=1e-14)

    def test_zero_cotangent(self, rng):
        for kind in MODEL_KINDS:
            model = make_model(kind, (3, 12), 0)
            np.testing.assert_array_equal(model.grad_v(rng.standard_normal(3), state(), np.zeros(12)), 0.0)

    def test_quadratic_matches_fd(self, rng):
        model = make_model("quadratic_residual", (3, 12), 0, {"beta": 0.1})
        s = state()
        v0 = rng.standard_normal(3)
        c = rng.standard_normal(12)
        J = fd_jacobian(lambda x: model.eval(x, s), v0)
        np.testing.assert_allclose(model.grad_v(v0, s, c), J.T @ c, rtol=1e-6)

    @settings(max_examples=30, deadline=None)
    @given(st.sampled_from(MODEL_KINDS), st.integers(0, 2**31))
    def test_gradient_consistency_all_kinds(self, kind, seed):
        rng = np.random.default_rng(seed)
        r = int(rng.integers(1, 5))
        params = {"shading": "tanh"} if kind == "decoder_composed" else {}
        model = make_model(kind, (r, 14), seed % 1000, params)
        s = state(int(rng.integers(1, 9)), rng.uniform(-1, 1, 2), 14)
        v = rng.standard_normal(r)
        v /= max(1.0, np.linalg.norm(v))
        c = rng.standard_normal(14)
        J = fd_jacobian(lambda x: model.eval(x, s), v)
        ref = J.T @ c
        got = model.grad_v(v, s, c)
        assert np.linalg.norm(got - ref) <= 1e-6 * max(np.linalg.norm(ref), 1e-8)

    def test_base_class_fd_fallback(self, rng):
        class Cubic(forward.ForwardModel):
            kind = "cubic"

            def eval(self, v, st_):
                v = self._check_code(v)
                return np.concatenate([v ** 3, v])

        model = Cubic(2, 4)
        s = FrameState(1, np.zeros(1), 4)
        v = np.array([0.5, -1.0])
        c = rng.standard_normal(4)
        np.testing.assert_allclose(model.grad_v(v, s, c), 3 * v ** 2 * c[:2] + c[2:], rtol=1e-8)


class TestHvp:
    def test_linear_full_mask(self, linear_model, rng):
        s = state()
        A = linear_model.jacobian_at_zero(s)
        q = rng.standard_normal(3)
        np.testing.assert_allclose(forward.hvp_phi(linear_model, s, np.ones(12), q), A.T @ A @ q, rtol=1e-10)

    def test_zero_mask(self, rng):
        for kind in MODEL_KINDS:
            model = make_model(kind, (3, 12), 0)
            np.testing.assert_array_equal(forward.hvp_phi(model, state(), np.zeros(12), rng.standard_normal(3)), 0.0)

    @pytest.mark.parametrize("kind", ["quadratic_residual", "sine_warp", "decoder_composed"])
    def test_nonlinear_matches_fd_gram(self, kind, rng):
        params = {"shading": "tanh"} if kind == "decoder_composed" else {"beta": 0.1} if kind == "quadratic_residual" else {}
        model = make_model(kind, (4, 16), 3, params)
        s = state(2, (0.4, 0.1), 16)
        mask = rng.uniform(0, 1, 16)
        H = np.stack([forward.hvp_phi(model, s, mask, e) for e in np.eye(4)], axis=1)
        J = fd_jacobian(lambda x: model.eval(x, s), np.zeros(4))
        G = J.T @ (mask[:, None] ** 2 * J)
        assert np.linalg.norm(H - G) <= 1e-4 * np.linalg.norm(G)
        assert np.max(np.abs(H - H.T)) <= 1e-8

    def test_dimension_checked(self, linear_model):
        with pytest.raises(DimensionMismatch):
            forward.hvp_phi(linear_model, state(), np.ones(12), np.ones(2))


class TestMakeModel:
    def test_linear_determinism(self):
        a = make_model("linear", (3, 12), 9)
        b = make_model("linear", (3, 12), 9)
        for t in range(1, 5):
            np.testing.assert_array_equal(a.jacobian_at_zero(state(t)), b.jacobian_at_zero(state(t)))

    def test_quadratic_beta_zero_is_linear(self, rng):
        lin = make_model("linear", (3, 12), 5)
        quad = make_model("quadratic_residual", (3, 12), 5, {"beta": 0.0})
        for _ in range(5):
            s = state(int(rng.integers(1, 9)), rng.uniform(-1, 1, 2))
            v = rng.standard_normal(3)
            c = rng.standard_normal(12)
            np.testing.assert_array_equal(quad.eval(v, s), lin.eval(v, s))
            np.testing.assert_array_equal(quad.grad_v(v, s, c), lin.grad_v(v, s, c))

    def test_deficiency_knob(self, rng):
        r = 4
        model = make_model("linear", (r, 10), 0, {"blind_frames": [1, 2, 3, 4]})
        S = sum(model.jacobian_at_zero(state(t, rng.uniform(-1, 1, 2), 10)).T
                @ model.jacobian_at_zero(state(t, rng.uniform(-1, 1, 2), 10)) for t in range(1, 5))
        lo, _ = spd.eigen_extremes(S)
        assert lo < 1e-10
        assert np.linalg.matrix_rank(S) == r - 1
        full = S + model.jacobian_at_zero(state(5, (0, 0), 10)).T @ model.jacobian_at_zero(state(5, (0, 0), 10))
        assert spd.eigen_extremes(full)[0] > 1e-6

    def test_unknown_kind(self):
        with pytest.raises(InvalidParams):
            make_model("mlp", (3, 12))

    def test_spec_round_trip(self, rng):
        for kind in MODEL_KINDS:
            model = make_model(kind, (3, 12), 4)
            clone = model_from_spec(model.spec())
            s = state(3)
            v = rng.standard_normal(3)
            np.testing.assert_array_equal(clone.eval(v, s), model.eval(v, s))

    def test_remainder_bound(self, rng):
        beta = 0.1
        model = make_model("quadratic_residual", (3, 12), 0, {"beta": beta})
        for _ in range(20):
            s = state(int(rng.integers(1, 9)), rng.uniform(-1, 1, 2))
            v = rng.standard_normal(3) * rng.uniform(0.1, 3)
            rem = model.eval(v, s) - model.eval(np.zeros(3), s) - model.jacobian_at_zero(s) @ v
            assert np.linalg.norm(rem) <= 0.5 * beta * (v @ v) * 1.0 * (1 + 1e-12)


class TestDecoderComposed:
    def test_wraps_fitted_decoder(self, rng):
        assets, _, _ = make_paired_assets(20, 18, 3, seed=1)
        dec = als_fit(assets, 3).decoder
        model = make_model("decoder_composed", (3, 24), 0, {"decoder": dec})
        s = state(2, (0.2, 0.0), 24)
        np.testing.assert_array_equal(model.basis, dec.basis)
        v = rng.standard_normal(3)
        R = model.render_matrix(s)
        np.testing.assert_allclose(model.eval(v, s), R @ (model.u_base + dec.basis @ v), rtol=1e-14)
        np.testing.assert_array_equal(model.eval(np.zeros(3), s), R @ model.u_base)

    def test_edits_stay_in_region(self, rng):
        model = make_model("decoder_composed", (3, 24), 0)
        for t in range(1, 6):
            s = state(t, rng.uniform(-1, 1, 2), 24)
            d = model.eval(rng.standard_normal(3), s) - model.eval(np.zeros(3), s)
            np.testing.assert_allclose(d * (1 - model.edit_region(s)), 0.0, atol=1e-14)

    def test_render_rows_are_convex(self):
        model = make_model("decoder_composed", (3, 24), 0)
        R = model.render_matrix(state(1, (0.37, 0.0), 24))
        np.testing.assert_allclose(R.sum(axis=1), 1.0)
        assert R.min() >= 0

    def test_identity_decoder(self):
        model = make_model("decoder_composed", (5, 12), 0, {"decoder": ResidualDecoder.identity(5),
                                                             "part_mask": np.ones(5)})
        assert model.code_dim == 5 and model.n_texels == 5

    def test_bad_shading(self):
        with pytest.raises(InvalidParams):
            make_model("decoder_composed", (3, 12), 0, {"shading": "relu"})
