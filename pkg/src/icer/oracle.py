"""Exact and Monte Carlo checks of the weighted-ridge estimator theory.

The linear scenario is ``b_t = A_t v* + eps_t + r_t(v*)`` with precision
noise ``eps_t ~ N(0, I / w_t)`` and a remainder that saturates
``||r_t(v)|| <= beta/2 ||v||^2``.  All sampling goes through seeded numpy
generators, and trials are processed in vectorized blocks so results do not
depend on any worker count.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.linalg import solve_triangular

from . import spd
from .design import IcerConfig, design_weights
from .errors import NegativeWeight, NotPositiveDefinite
from .forward import FrameState, make_model
from .information import InfoCache, FrameInfo
from .spd import SpdMatrix


@dataclass
class LinearScenario:
    A: list[NDArray]
    prior: SpdMatrix
    budget: float = 1.0
    beta: float = 0.0
    directions: list[NDArray] | None = None

    def __post_init__(self):
        self.A = [np.asarray(a, dtype=np.float64) for a in self.A]
        self.prior = SpdMatrix.coerce(self.prior)
        if self.directions is None:
            rng = np.random.default_rng(len(self.A))
            self.directions = []
            for a in self.A:
                u = rng.standard_normal(a.shape[0])
                self.directions.append(u / np.linalg.norm(u))

    @property
    def r(self) -> int:
        return self.prior.dim

    @property
    def H(self) -> list[NDArray]:
        return [a.T @ a for a in self.A]

    @property
    def L(self) -> float:
        """``max_t ||H_t||_2``."""
        return max((float(np.linalg.eigvalsh(h)[-1]) for h in self.H), default=0.0)

    @property
    def lambda0(self) -> float:
        return spd.eigen_extremes(self.prior)[0]

    def information(self, weights: ArrayLike) -> SpdMatrix:
        w = _weights(self, weights)
        S = self.prior.entries.copy()
        for wt, h in zip(w, self.H):
            S += wt * h
        return SpdMatrix(S)

    def cache(self) -> InfoCache:
        c = InfoCache(prior=self.prior)
        for t, h in enumerate(self.H):
            c.frames[t] = FrameInfo(t, SpdMatrix(h), "analytic", 0.0)
        return c


@dataclass
class RidgeEstimate:
    v_hat: NDArray
    S: SpdMatrix
    rhs: NDArray = field(repr=False)

    @property
    def covariance(self) -> NDArray:
        return spd.inverse(self.S)

    def normal_residual(self) -> float:
        return float(np.max(np.abs(self.S.entries @ self.v_hat - self.rhs)))


def _weights(scn: LinearScenario, weights: ArrayLike) -> NDArray:
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    if w.shape != (len(scn.A),):
        raise ValueError(f"{w.shape[0]} weights for {len(scn.A)} frames")
    if np.any(w < 0):
        raise NegativeWeight("weights must be nonnegative")
    return w


def random_scenario(rng: np.random.Generator, r: int, n_frames: int, m: int | None = None,
                    budget: float = 1.0, beta: float = 0.0, lambda0: float = 1.0,
                    anisotropic_prior: bool = False) -> LinearScenario:
    m = m or 2 * r
    A = [rng.standard_normal((m, r)) / np.sqrt(m) for _ in range(n_frames)]
    if anisotropic_prior:
        prior = np.diag(lambda0 * (1.0 + rng.random(r)))
        prior[0, 0] = lambda0
    else:
        prior = lambda0 * np.eye(r)
    dirs = []
    for _ in range(n_frames):
        u = rng.standard_normal(m)
        dirs.append(u / np.linalg.norm(u))
    return LinearScenario(A, SpdMatrix(prior), budget, beta, dirs)


def sample_prior(scn: LinearScenario, n: int, rng: np.random.Generator) -> NDArray:
    """``n`` draws of ``v* ~ N(0, Lambda0^{-1})`` as rows."""
    L = scn.prior.factor
    z = rng.standard_normal((n, scn.r))
    # Lambda0 = L L^T, so L^{-T} z has covariance Lambda0^{-1}
    return solve_triangular(L, z.T, lower=True, trans="T").T


def sample_observations(scn: LinearScenario, weights: ArrayLike, v_star: ArrayLike,
                        rng_seed: int | np.random.Generator, remainder: bool | None = None) -> dict[int, NDArray]:
    """Draw ``b_t`` for every frame with positive weight.

    ``v_star`` may be a single code or a stack of codes (rows); the returned
    arrays then carry one row per code.  Zero-weight frames are dropped.
    """
    w = _weights(scn, weights)
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    vs = np.asarray(v_star, dtype=np.float64)
    single = vs.ndim == 1
    vs = np.atleast_2d(vs)
    use_rem = scn.beta > 0 if remainder is None else remainder
    out = {}
    for t, (wt, A) in enumerate(zip(w, scn.A)):
        if wt == 0:
            continue
        b = vs @ A.T + rng.standard_normal((len(vs), A.shape[0])) / np.sqrt(wt)
        if use_rem:
            b = b + (0.5 * scn.beta * np.sum(vs * vs, axis=1))[:, None] * scn.directions[t][None, :]
        out[t] = b[0] if single else b
    return out


def weighted_ridge(scn: LinearScenario, weights: ArrayLike, b: dict[int, NDArray]) -> RidgeEstimate:
    """``argmin sum_t w_t ||A_t v - b_t||^2 + v^T Lambda0 v`` via the normal equations.

    ``b_t`` may be stacked (rows = independent problems sharing ``S``).
    """
    w = _weights(scn, weights)
    S = scn.information(w)
    rhs = None
    for t, bt in b.items():
        if w[t] == 0:
            continue
        contrib = w[t] * (np.asarray(bt) @ scn.A[t])
        rhs = contrib if rhs is None else rhs + contrib
    if rhs is None:
        shape = (scn.r,) if not b else np.asarray(next(iter(b.values()))).shape[:-1] + (scn.r,)
        rhs = np.zeros(shape)
    v_hat = spd.solve(S, rhs.T).T
    return RidgeEstimate(v_hat, S, rhs)


def stacked_ridge(scn: LinearScenario, weights: ArrayLike, b: dict[int, NDArray]) -> NDArray:
    """Same estimator from the explicitly stacked ``sqrt(w)``-scaled system (dense lstsq)."""
    w = _weights(scn, weights)
    rows, rhs = [], []
    for t, bt in b.items():
        rows.append(np.sqrt(w[t]) * scn.A[t])
        rhs.append(np.sqrt(w[t]) * np.asarray(bt))
    Lp = np.linalg.cholesky(scn.prior.entries).T
    rows.append(Lp)
    rhs.append(np.zeros(scn.r))
    sol, *_ = np.linalg.lstsq(np.vstack(rows), np.concatenate(rhs), rcond=None)
    return sol


def _errors(scn, w, n_samples, rng, remainder, block=20000):
    """Monte Carlo draws of ``v_hat - v*`` (rows)."""
    out = []
    done = 0
    while done < n_samples:
        k = min(block, n_samples - done)
        vs = sample_prior(scn, k, rng)
        b = sample_observations(scn, w, vs, rng, remainder=remainder)
        est = weighted_ridge(scn, w, b)
        out.append(np.atleast_2d(est.v_hat) - vs)
        done += k
    return np.vstack(out)


def posterior_covariance_check(scn: LinearScenario, weights: ArrayLike, n_samples: int, seed: int) -> dict:
    w = _weights(scn, weights)
    err = _errors(scn, w, n_samples, np.random.default_rng(seed), remainder=False)
    emp = err.T @ err / len(err)
    target = spd.inverse(scn.information(w))
    rel = float(np.linalg.norm(emp - target) / np.linalg.norm(target))
    return {"empirical_cov": emp, "target_cov": target, "rel_frobenius_err": rel,
            "mean_error": err.mean(axis=0)}


def fourth_moment(prior: SpdMatrix) -> float:
    """``E||v||^4`` for ``v ~ N(0, Lambda0^{-1})``."""
    C = spd.inverse(prior)
    return float(np.trace(C) ** 2 + 2.0 * np.trace(C @ C))


def mse_bound(scn: LinearScenario, weights: ArrayLike) -> float:
    w = _weights(scn, weights)
    K = float(np.sum(w))
    tr = float(np.trace(spd.inverse(scn.information(w))))
    lam0 = scn.lambda0
    return 2.0 * tr + scn.beta ** 2 * scn.L * K ** 2 / (2.0 * lam0 ** 2) * fourth_moment(scn.prior)


def mse_bound_check(scn: LinearScenario, weights: ArrayLike, n_samples: int, seed: int) -> dict:
    w = _weights(scn, weights)
    err = _errors(scn, w, n_samples, np.random.default_rng(seed), remainder=scn.beta > 0)
    emp = float(np.mean(np.sum(err * err, axis=1)))
    bound = mse_bound(scn, w)
    slack = 1.0 + 3.0 / np.sqrt(n_samples)
    return {"empirical_mse": emp, "bound_value": bound, "trace_inverse": float(np.trace(spd.inverse(scn.information(w)))),
            "holds": bool(emp <= bound * slack)}


def trace_det_bounds(S: SpdMatrix | ArrayLike, slack: float = 1e-10) -> dict:
    """AM-GM lower bound and condition-number upper bound on ``Tr(S^{-1})``."""
    S = SpdMatrix.coerce(S)
    r = S.dim
    ev = np.linalg.eigvalsh(S.entries)
    if ev[0] <= 0:
        raise NotPositiveDefinite(f"S has eigenvalue {ev[0]:.3e}")
    lmin, lmax = spd.eigen_extremes(S)
    kappa = lmax / lmin
    ld = spd.logdet(S)
    det_root_inv = np.exp(-ld / r)
    lower = r * det_root_inv
    upper = r * kappa ** ((r - 1) / r) * det_root_inv
    lemma = r * np.exp((r - 1) * np.log(lmax) - ld)
    tr = float(np.sum(1.0 / ev))
    tol = slack * max(1.0, tr)
    return {"lower": float(lower), "upper": float(upper), "lemma_upper": float(lemma), "trace_inv": tr,
            "kappa": float(kappa),
            "holds": bool(lower <= tr + tol and tr <= upper + tol and tr <= lemma + tol)}


def kappa_budget_bound(scn: LinearScenario, weights: ArrayLike) -> dict:
    w = _weights(scn, weights)
    lmin, lmax = spd.eigen_extremes(scn.information(w))
    K = float(np.sum(w))
    bound = (spd.eigen_extremes(scn.prior)[1] + K * scn.L) / scn.lambda0
    kappa = lmax / lmin
    return {"kappa_S": kappa, "kappa_bound": bound, "holds": bool(kappa <= bound * (1 + 1e-10) + 1e-10)}


def d_optimal_weights(scn: LinearScenario, steps: int = 2000, tau: float = 1.0) -> NDArray:
    """Maximize ``logdet S(w)`` on the budget simplex with frozen zero losses."""
    cfg = IcerConfig(lambda_cond=1.0, budget=scn.budget, tau=tau, eta_w=1.0)
    state, _ = design_weights(scn.cache(), np.zeros(len(scn.A)), cfg, steps=steps)
    return state.weights


def design_gain_experiment(scn: LinearScenario, lambda_cond: float = 1.0, n_samples: int = 20000,
                           seed: int = 0, steps: int = 2000) -> dict:
    """Monte Carlo ridge MSE under uniform versus log-det-designed weights.

    Both arms reuse the same random stream, so the comparison is paired.
    """
    n = len(scn.A)
    w_uni = np.full(n, scn.budget / n)
    cfg = IcerConfig(lambda_cond=lambda_cond, budget=scn.budget, eta_w=1.0)
    state, _ = design_weights(scn.cache(), np.zeros(n), cfg, steps=steps)
    w_des = state.weights
    out = {"weights_uniform": w_uni, "weights_designed": w_des}
    for name, w in (("uniform", w_uni), ("designed", w_des)):
        err = _errors(scn, w, n_samples, np.random.default_rng(seed), remainder=False)
        S = scn.information(w)
        out[f"mse_{name}"] = float(np.mean(np.sum(err * err, axis=1)))
        out[f"det_{name}"] = spd.logdet(S)
        out[f"trace_inverse_{name}"] = float(np.trace(spd.inverse(S)))
    return out


def deficient_pool(r: int = 4, n_frames: int = 10, budget: float = 4.0, lambda0: float = 0.1,
                   seed: int = 0, m: int | None = None) -> LinearScenario:
    """Pool from the linear model's deficiency knob: only the last frame sees
    the last code direction."""
    m = m or 2 * r
    model = make_model("linear", (r, m), seed, {"blind_frames": list(range(1, n_frames))})
    rng = np.random.default_rng([seed, 3])
    A = [model.jacobian_at_zero(FrameState(t, rng.uniform(-1, 1, model.n_theta), m))
         for t in range(1, n_frames + 1)]
    return LinearScenario(A, SpdMatrix(lambda0 * np.eye(r)), budget, 0.0)
