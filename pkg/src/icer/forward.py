"""Differentiable forward maps ``y = f(v, theta)`` and a zoo of synthetic models.

The synthetic models stand in for a decode-and-render pipeline.  Every model
returns the stored base observation exactly at ``v = 0``, so masked residuals
vanish at the linearization point and the Gauss-Newton matrix of the masked
least-squares surrogate is its exact Hessian there.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .errors import DimensionMismatch, InvalidParams

MODEL_KINDS = ("linear", "quadratic_residual", "sine_warp", "decoder_composed")


@dataclass(frozen=True)
class FrameState:
    frame_id: int
    theta: NDArray
    obs_dim: int

    def __post_init__(self):
        theta = np.asarray(self.theta, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(theta)):
            raise InvalidParams(f"frame {self.frame_id}: theta is not finite")
        object.__setattr__(self, "theta", theta)


@dataclass
class FrameConstraint:
    """One candidate (or held-out) frame: state, diagonal mask and targets.

    ``mask`` holds the diagonal of the edit mask; the identity-preservation
    term uses ``1 - mask``.  Held-out frames are test frames and never enter
    any loss or weight gradient.
    """

    state: FrameState
    mask: NDArray
    y_base: NDArray
    y_edit: NDArray | None = None
    supervised: bool = False
    held_out: bool = False

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=np.float64).reshape(-1)
        self.y_base = np.asarray(self.y_base, dtype=np.float64).reshape(-1)
        if self.y_edit is not None:
            self.y_edit = np.asarray(self.y_edit, dtype=np.float64).reshape(-1)
        m = self.state.obs_dim
        if self.mask.shape != (m,) or self.y_base.shape != (m,):
            raise DimensionMismatch(f"frame {self.frame_id}: mask/y_base must have length {m}")
        if self.y_edit is not None and self.y_edit.shape != (m,):
            raise DimensionMismatch(f"frame {self.frame_id}: y_edit must have length {m}")
        if np.any(self.mask < 0) or np.any(self.mask > 1):
            raise InvalidParams(f"frame {self.frame_id}: mask entries must lie in [0, 1]")
        if not self.supervised and self.y_edit is not None:
            raise InvalidParams(f"frame {self.frame_id}: unsupervised frames carry no y_edit")

    @property
    def frame_id(self) -> int:
        return self.state.frame_id

    @property
    def complement(self) -> NDArray:
        return 1.0 - self.mask


class ForwardModel:
    """Abstract forward map with value, vector-Jacobian and HVP access.

    Subclasses implement :meth:`eval` and, when they can, :meth:`jacobian`
    and :meth:`grad_v` analytically.  The fallbacks use central differences.
    """

    kind = "abstract"

    def __init__(self, code_dim: int, obs_dim: int, seed: int = 0, params: dict | None = None):
        if code_dim < 1 or obs_dim < code_dim:
            raise InvalidParams(f"need r >= 1 and m >= r, got r={code_dim}, m={obs_dim}")
        self.code_dim = int(code_dim)
        self.obs_dim = int(obs_dim)
        self.seed = int(seed)
        self.params = dict(params or {})

    # -- contract ---------------------------------------------------------
    def eval(self, v: ArrayLike, state: FrameState) -> NDArray:
        raise NotImplementedError

    def jacobian(self, v: ArrayLike, state: FrameState) -> NDArray:
        v = self._check_code(v)
        h = 1e-5 * max(1.0, float(np.linalg.norm(v)))
        cols = []
        for i in range(self.code_dim):
            e = np.zeros(self.code_dim)
            e[i] = h
            cols.append((self.eval(v + e, state) - self.eval(v - e, state)) / (2 * h))
        return np.stack(cols, axis=1)

    def grad_v(self, v: ArrayLike, state: FrameState, cotangent: ArrayLike) -> NDArray:
        c = self._check_obs(cotangent)
        return self.jacobian(v, state).T @ c

    def spec(self) -> dict[str, Any]:
        """JSON-able description that :func:`make_model` turns back into this model."""
        return {"kind": self.kind, "dims": [self.code_dim, self.obs_dim], "seed": self.seed,
                "params": jsonable(self.params)}

    def edit_region(self, state: FrameState) -> NDArray:
        """Default edit mask for a frame: rows the edit can reach."""
        return np.ones(self.obs_dim)

    # -- helpers ----------------------------------------------------------
    def _check_code(self, v: ArrayLike) -> NDArray:
        v = np.asarray(v, dtype=np.float64).reshape(-1)
        if v.shape != (self.code_dim,):
            raise DimensionMismatch(f"code has length {v.shape[0]}, model expects {self.code_dim}")
        return v

    def _check_obs(self, y: ArrayLike) -> NDArray:
        y = np.asarray(y, dtype=np.float64).reshape(-1)
        if y.shape != (self.obs_dim,):
            raise DimensionMismatch(f"vector has length {y.shape[0]}, model expects {self.obs_dim}")
        return y

    def _check_state(self, state: FrameState) -> None:
        if state.obs_dim != self.obs_dim:
            raise DimensionMismatch(f"frame {state.frame_id} has obs_dim {state.obs_dim}, model {self.obs_dim}")


def eval(model: ForwardModel, v: ArrayLike, state: FrameState) -> NDArray:  # noqa: A001
    return model.eval(v, state)


def grad_v(model: ForwardModel, v: ArrayLike, state: FrameState, cotangent: ArrayLike) -> NDArray:
    return model.grad_v(v, state, cotangent)


def hvp_phi(model: ForwardModel, state: FrameState, mask: ArrayLike, q: ArrayLike,
            at: ArrayLike | None = None) -> NDArray:
    """Hessian-vector product of ``phi(v) = 0.5 * ||M (f(v) - f(at))||^2`` at ``v = at``.

    Computed as a central difference of the analytic gradient of ``phi``
    along ``q``; ``at`` defaults to the zero code.  Because the residual of
    ``phi`` vanishes at ``at``, the result equals ``J^T M^T M J q``.
    """
    q = model._check_code(q)
    mask = model._check_obs(mask)
    at = np.zeros(model.code_dim) if at is None else model._check_code(at)
    qn = float(np.linalg.norm(q))
    if qn == 0.0:
        return np.zeros(model.code_dim)
    w2 = mask * mask
    y0 = model.eval(at, state)

    def grad_phi(v):
        return model.grad_v(v, state, w2 * (model.eval(v, state) - y0))

    h = 1e-4 / max(1.0, qn)
    return (grad_phi(at + h * q) - grad_phi(at - h * q)) / (2 * h)


# ---------------------------------------------------------------------------
# synthetic models
# ---------------------------------------------------------------------------

class _PoseBank:
    """Affine-in-theta family ``X(theta) = X0 + sum_k theta_k X_k``."""

    def __init__(self, rng: np.random.Generator, shape: tuple[int, ...], n_theta: int,
                 scale: float, pose_scale: float):
        self.base = scale * rng.standard_normal(shape)
        self.slopes = pose_scale * scale * rng.standard_normal((n_theta, *shape))

    def __call__(self, theta: NDArray) -> NDArray:
        k = min(len(theta), len(self.slopes))
        return self.base + np.tensordot(theta[:k], self.slopes[:k], axes=1)


class LinearModel(ForwardModel):
    """``f(v, theta) = y_base(theta) + A(theta) v`` with a controllable edit region.

    Parameters (``params``)
    -----------------------
    n_theta : int
        Dimension of the driving state (default 2).
    mask_frac : float
        Fraction of rows in each frame's edit region (default 1.0).
    leak : float
        Scale applied to Jacobian rows outside the edit region (default 0).
    blind_frames, blind_dims, blind_scale :
        Frames in ``blind_frames`` see the last ``blind_dims`` code directions
        scaled by ``blind_scale`` (default 0), which makes pools restricted
        to those frames rank deficient on purpose.
    col_scales : list of float
        Per-direction column scaling applied to every frame.
    """

    kind = "linear"

    def __init__(self, code_dim, obs_dim, seed=0, params=None):
        super().__init__(code_dim, obs_dim, seed, params)
        p = self.params
        self.n_theta = int(p.setdefault("n_theta", 2))
        self.mask_frac = float(p.setdefault("mask_frac", 1.0))
        self.leak = float(p.setdefault("leak", 0.0))
        self.blind_frames = frozenset(int(t) for t in p.setdefault("blind_frames", []))
        self.blind_dims = int(p.setdefault("blind_dims", 1))
        self.blind_scale = float(p.setdefault("blind_scale", 0.0))
        col_scales = p.setdefault("col_scales", None)
        pose_scale = float(p.setdefault("pose_scale", 0.3))
        if not 0.0 < self.mask_frac <= 1.0:
            raise InvalidParams("mask_frac must lie in (0, 1]")
        if self.blind_frames and not 1 <= self.blind_dims < code_dim:
            raise InvalidParams("blind_dims must lie in [1, r)")
        self.col_scales = np.ones(code_dim) if col_scales is None else np.asarray(col_scales, float)
        if self.col_scales.shape != (code_dim,):
            raise InvalidParams("col_scales needs one entry per code direction")
        rng = np.random.default_rng(self.seed)
        self.region_len = max(1, int(round(self.mask_frac * obs_dim)))
        self._jac = _PoseBank(rng, (obs_dim, code_dim), self.n_theta,
                              1.0 / np.sqrt(self.region_len), pose_scale)
        self._base = _PoseBank(rng, (obs_dim,), self.n_theta, 1.0, pose_scale)

    def edit_region(self, state):
        region = np.zeros(self.obs_dim)
        start = (state.frame_id * max(1, self.obs_dim // 7)) % self.obs_dim
        idx = (start + np.arange(self.region_len)) % self.obs_dim
        region[idx] = 1.0
        return region

    def base(self, state: FrameState) -> NDArray:
        self._check_state(state)
        return self._base(state.theta)

    def jacobian_at_zero(self, state: FrameState) -> NDArray:
        self._check_state(state)
        A = self._jac(state.theta)
        region = self.edit_region(state)
        A = A * (region + self.leak * (1.0 - region))[:, None]
        cols = self.col_scales.copy()
        if state.frame_id in self.blind_frames:
            cols[self.code_dim - self.blind_dims:] *= self.blind_scale
        return A * cols[None, :]

    def eval(self, v, state):
        v = self._check_code(v)
        return self.base(state) + self.jacobian_at_zero(state) @ v

    def jacobian(self, v, state):
        self._check_code(v)
        return self.jacobian_at_zero(state)

    def grad_v(self, v, state, cotangent):
        self._check_code(v)
        return self.jacobian_at_zero(state).T @ self._check_obs(cotangent)


class QuadraticResidualModel(LinearModel):
    """Linear model plus a saturating second-order remainder.

    ``f(v, theta) = y_base + A v + 0.5 * beta * (v . v) * u(theta)`` where ``u``
    is a unit vector inside the edit region, so the remainder has norm
    exactly ``beta/2 * ||v||^2``.
    """

    kind = "quadratic_residual"

    def __init__(self, code_dim, obs_dim, seed=0, params=None):
        super().__init__(code_dim, obs_dim, seed, params)
        self.beta = float(self.params.setdefault("beta", 0.05))
        if self.beta < 0:
            raise InvalidParams("beta must be nonnegative")
        rng = np.random.default_rng([self.seed, 1])
        self._dir = _PoseBank(rng, (obs_dim,), self.n_theta, 1.0, 0.3)

    def direction(self, state: FrameState) -> NDArray:
        u = self._dir(state.theta) * self.edit_region(state)
        return u / np.linalg.norm(u)

    def eval(self, v, state):
        v = self._check_code(v)
        lin = self.base(state) + self.jacobian_at_zero(state) @ v
        if self.beta == 0.0:
            return lin
        return lin + (0.5 * self.beta * float(v @ v)) * self.direction(state)

    def jacobian(self, v, state):
        v = self._check_code(v)
        J = self.jacobian_at_zero(state)
        if self.beta == 0.0:
            return J
        return J + self.beta * np.outer(self.direction(state), v)

    def grad_v(self, v, state, cotangent):
        v = self._check_code(v)
        c = self._check_obs(cotangent)
        g = self.jacobian_at_zero(state).T @ c
        if self.beta == 0.0:
            return g
        return g + self.beta * float(self.direction(state) @ c) * v


class SineWarpModel(LinearModel):
    """``f(v, theta) = y_base + (sin(w A v + phase) - sin(phase)) / w``."""

    kind = "sine_warp"

    def __init__(self, code_dim, obs_dim, seed=0, params=None):
        super().__init__(code_dim, obs_dim, seed, params)
        self.freq = float(self.params.setdefault("freq", 1.0))
        if self.freq <= 0:
            raise InvalidParams("freq must be positive")
        rng = np.random.default_rng([self.seed, 2])
        self._phase = _PoseBank(rng, (obs_dim,), self.n_theta, 1.0, 0.3)

    def eval(self, v, state):
        v = self._check_code(v)
        ph = self._phase(state.theta)
        z = self.freq * (self.jacobian_at_zero(state) @ v)
        return self.base(state) + (np.sin(z + ph) - np.sin(ph)) / self.freq

    def jacobian(self, v, state):
        v = self._check_code(v)
        A = self.jacobian_at_zero(state)
        ph = self._phase(state.theta)
        return np.cos(self.freq * (A @ v) + ph)[:, None] * A

    def grad_v(self, v, state, cotangent):
        v = self._check_code(v)
        c = self._check_obs(cotangent)
        A = self.jacobian_at_zero(state)
        ph = self._phase(state.theta)
        return A.T @ (np.cos(self.freq * (A @ v) + ph) * c)


class DecoderComposedModel(ForwardModel):
    """``f(v, theta) = shade(R(theta) (u_base + B v))``.

    ``B`` is a residual decoder basis (``D x r``; ``g(v) = B v`` so ``g(0) = 0``)
    and ``R(theta)`` a pose-dependent texel lookup: observation ``i`` blends
    two neighbouring texels whose position drifts with ``theta``.  Texels in
    ``part_mask`` form the editable part; an observation belongs to the edit
    region when any of its blend weight falls on the part, so every decoded
    edit stays inside the region.
    """

    kind = "decoder_composed"

    def __init__(self, code_dim, obs_dim, seed=0, params=None):
        super().__init__(code_dim, obs_dim, seed, params)
        p = self.params
        rng = np.random.default_rng(self.seed)
        basis = p.get("basis")
        if basis is not None:
            n_tex = len(basis)
        else:
            n_tex = int(p.get("n_texels") or max(code_dim, obs_dim // 2))
        part = p.get("part_mask")
        if part is None:
            part = np.zeros(n_tex)
            part[: max(code_dim, n_tex // 3)] = 1.0
        self.part_mask = np.asarray(part, dtype=np.float64)
        if basis is None:
            basis = _random_part_basis(rng, self.part_mask, code_dim)
        self.basis = np.asarray(basis, dtype=np.float64)
        if self.basis.shape != (n_tex, code_dim) or self.part_mask.shape != (n_tex,):
            raise InvalidParams(f"basis must be {n_tex}x{code_dim} and part_mask length {n_tex}")
        u_base = p.get("u_base")
        self.u_base = rng.standard_normal(n_tex) if u_base is None else np.asarray(u_base, float)
        if self.u_base.shape != (n_tex,):
            raise InvalidParams("u_base must have one entry per texel")
        self.shading = p.setdefault("shading", "linear")
        if self.shading not in ("linear", "tanh"):
            raise InvalidParams("shading must be 'linear' or 'tanh'")
        self.drift = float(p.setdefault("drift", 2.0))
        self.n_texels = n_tex
        p.update(basis=self.basis, part_mask=self.part_mask, u_base=self.u_base, n_texels=n_tex)

    def render_matrix(self, state: FrameState) -> NDArray:
        self._check_state(state)
        D, m = self.n_texels, self.obs_dim
        offset = self.drift * float(state.theta[0]) if len(state.theta) else 0.0
        pos = (np.arange(m) + 0.5) * D / m + offset * D / m
        lo = np.floor(pos).astype(int)
        frac = pos - lo
        R = np.zeros((m, D))
        rows = np.arange(m)
        np.add.at(R, (rows, lo % D), 1.0 - frac)
        np.add.at(R, (rows, (lo + 1) % D), frac)
        return R

    def edit_region(self, state):
        return (self.render_matrix(state) @ self.part_mask > 0).astype(float)

    def _shade(self, z):
        return np.tanh(z) if self.shading == "tanh" else z

    def _shade_deriv(self, z):
        return 1.0 - np.tanh(z) ** 2 if self.shading == "tanh" else np.ones_like(z)

    def eval(self, v, state):
        v = self._check_code(v)
        return self._shade(self.render_matrix(state) @ (self.u_base + self.basis @ v))

    def jacobian(self, v, state):
        v = self._check_code(v)
        R = self.render_matrix(state)
        z = R @ (self.u_base + self.basis @ v)
        return self._shade_deriv(z)[:, None] * (R @ self.basis)

    def grad_v(self, v, state, cotangent):
        v = self._check_code(v)
        c = self._check_obs(cotangent)
        R = self.render_matrix(state)
        z = R @ (self.u_base + self.basis @ v)
        return self.basis.T @ (R.T @ (self._shade_deriv(z) * c))


def _random_part_basis(rng, part_mask, r):
    G = rng.standard_normal((len(part_mask), r)) * part_mask[:, None]
    if np.count_nonzero(part_mask) < r:
        raise InvalidParams("part region has fewer texels than the code dimension")
    Q, _ = np.linalg.qr(G)
    return Q


_KINDS = {
    "linear": LinearModel,
    "quadratic_residual": QuadraticResidualModel,
    "sine_warp": SineWarpModel,
    "decoder_composed": DecoderComposedModel,
}


def make_model(kind: str, dims: tuple[int, int], seed: int = 0, params: dict | None = None) -> ForwardModel:
    """Build a deterministic synthetic forward model.

    ``decoder_composed`` accepts either raw ``params`` (``basis``, ``u_base``,
    ``part_mask``) or ``decoder=ResidualDecoder`` from :mod:`icer.decoder`.
    """
    if kind not in _KINDS:
        raise InvalidParams(f"unknown model kind {kind!r}; choose from {', '.join(MODEL_KINDS)}")
    r, m = (int(d) for d in dims)
    params = dict(params or {})
    dec = params.pop("decoder", None)
    if dec is not None:
        params.setdefault("basis", dec.basis)
        params.setdefault("part_mask", getattr(dec, "part_mask", None))
        if params["part_mask"] is None:
            del params["part_mask"]
    try:
        return _KINDS[kind](r, m, seed, params)
    except (TypeError, KeyError) as exc:
        raise InvalidParams(str(exc)) from exc


def model_from_spec(spec: dict[str, Any]) -> ForwardModel:
    return make_model(spec["kind"], tuple(spec["dims"]), spec.get("seed", 0), spec.get("params"))


def jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, dict):
        return {k: jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple, frozenset, set)):
        return [jsonable(v) for v in (sorted(obj) if isinstance(obj, (set, frozenset)) else obj)]
    return obj
