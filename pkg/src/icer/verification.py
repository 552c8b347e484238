"""Randomized verification suites driven by the ``verify`` subcommand.

Each suite returns a dict ``{"name", "passes", "failures", "passed", ...}``.
Counts default to the sizes used by the acceptance tests; ``n`` overrides
the number of random instances (or Monte Carlo trials for sampling suites).
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import oracle, spd
from .forward import FrameConstraint, FrameState, make_model
from .information import build_frame_info


def random_spd(rng: np.random.Generator, dim: int, spread: float = 3.0) -> np.ndarray:
    Q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    ev = np.exp(rng.uniform(-spread, spread, dim))
    return (Q * ev) @ Q.T


def random_psd(rng: np.random.Generator, dim: int) -> np.ndarray:
    G = rng.standard_normal((max(1, dim - 1), dim))
    return G.T @ G


def _result(name, passes, failures, **extra):
    return {"name": name, "passes": int(passes), "failures": int(failures), "passed": failures == 0, **extra}


def suite_trace_det(n: int | None = None, seed: int = 0) -> dict:
    n = n or 1000
    rng = np.random.default_rng(seed)
    passes = fails = 0
    worst = 0.0
    for _ in range(n):
        d = int(rng.integers(2, 9))
        res = oracle.trace_det_bounds(random_spd(rng, d))
        passes += res["holds"]
        fails += not res["holds"]
    iso_ok = True
    for d in range(2, 9):
        c = float(np.exp(rng.uniform(-2, 2)))
        res = oracle.trace_det_bounds(c * np.eye(d))
        gap = max(abs(res["lower"] - res["trace_inv"]), abs(res["upper"] - res["trace_inv"])) / (d / c)
        worst = max(worst, gap)
        iso_ok &= gap <= 1e-10
    return _result("trace-det", passes, fails + (not iso_ok), isotropic_max_rel_gap=worst)


def suite_kappa(n: int | None = None, seed: int = 0) -> dict:
    n = n or 500
    rng = np.random.default_rng(seed)
    passes = fails = 0
    for _ in range(n):
        r = int(rng.integers(2, 7))
        scn = oracle.random_scenario(rng, r, int(rng.integers(2, 10)), budget=float(rng.uniform(0.5, 10)),
                                     lambda0=float(np.exp(rng.uniform(-3, 1))), anisotropic_prior=True)
        w = rng.dirichlet(np.ones(len(scn.A))) * scn.budget
        ok = oracle.kappa_budget_bound(scn, w)["holds"]
        passes += ok
        fails += not ok
    return _result("kappa-budget", passes, fails)


def suite_logdet_grad(n: int | None = None, seed: int = 0) -> dict:
    n = n or 200
    rng = np.random.default_rng(seed)
    passes = fails = 0
    worst = 0.0
    eps = 1e-6
    for _ in range(n):
        d = int(rng.integers(2, 17))
        S = random_spd(rng, d, spread=1.0)
        H = random_psd(rng, d)
        H /= np.linalg.norm(H, 2)
        fd = (spd.logdet(S + eps * H) - spd.logdet(S - eps * H)) / (2 * eps)
        an = spd.trace_solve_product(S, H)
        rel = abs(an - fd) / max(abs(fd), 1e-300)
        worst = max(worst, rel)
        passes += rel <= 1e-5
        fails += rel > 1e-5
    return _result("logdet-grad", passes, fails, max_rel_err=worst)


def _fd_gram(model, frame, h=1e-6):
    r = model.code_dim
    cols = []
    for i in range(r):
        e = np.zeros(r)
        e[i] = h
        cols.append((model.eval(e, frame.state) - model.eval(-e, frame.state)) / (2 * h))
    J = np.stack(cols, axis=1)
    return J.T @ ((frame.mask ** 2)[:, None] * J)


def suite_hvp(n: int | None = None, seed: int = 0) -> dict:
    n = n or 20
    rng = np.random.default_rng(seed)
    passes = fails = 0
    worst_lin = worst_nl = 0.0
    for i in range(n):
        for kind in ("linear", "quadratic_residual", "sine_warp", "decoder_composed"):
            r = int(rng.integers(1, 6))
            m = int(rng.integers(max(r, 4), 30))
            params = {"shading": "tanh"} if kind == "decoder_composed" else {"mask_frac": 0.6}
            model = make_model(kind, (r, m), seed * 1000 + i, params)
            state = FrameState(i, rng.uniform(-1, 1, 2), m)
            mask = rng.uniform(0, 1, m) * model.edit_region(state)
            frame = FrameConstraint(state, mask, model.eval(np.zeros(r), state))
            H = build_frame_info(model, frame, "hvp").matrix
            if kind == "linear":
                A = model.jacobian_at_zero(state)
                ref = A.T @ ((mask ** 2)[:, None] * A)
                err = np.linalg.norm(H - ref) / max(np.linalg.norm(ref), 1e-300)
                worst_lin = max(worst_lin, err)
                ok = err <= 1e-10
            else:
                ref = _fd_gram(model, frame)
                err = np.linalg.norm(H - ref) / max(np.linalg.norm(ref), 1e-300)
                worst_nl = max(worst_nl, err)
                ok = err <= 1e-4
            passes += ok
            fails += not ok
    return _result("hvp", passes, fails, max_rel_err_linear=worst_lin, max_rel_err_nonlinear=worst_nl)


def suite_posterior_cov(n: int | None = None, seed: int = 0) -> dict:
    n = n or 50000
    rng = np.random.default_rng(seed)
    scn = oracle.random_scenario(rng, 4, 8, budget=4.0, lambda0=1.0)
    res = oracle.posterior_covariance_check(scn, np.full(8, 0.5), n, seed + 1)
    ok = res["rel_frobenius_err"] < 0.05
    return _result("posterior-cov", int(ok), int(not ok), rel_frobenius_err=res["rel_frobenius_err"], trials=n)


def suite_mse_bound(n: int | None = None, seed: int = 0, n_scenarios: int = 50) -> dict:
    n = n or 20000
    rng = np.random.default_rng(seed)
    passes = fails = 0
    worst = 0.0
    betas = (0.0, 0.05, 0.1)
    for k in range(n_scenarios):
        r = int(rng.integers(1, 5))
        n_frames = int(rng.integers(1, 9))
        scn = oracle.random_scenario(rng, r, n_frames, budget=float(rng.uniform(0.5, 8)),
                                     beta=betas[k % 3], lambda0=float(np.exp(rng.uniform(-1, 1))))
        w = rng.dirichlet(np.ones(n_frames)) * scn.budget
        res = oracle.mse_bound_check(scn, w, n, seed + 100 + k)
        worst = max(worst, res["empirical_mse"] / res["bound_value"])
        passes += res["holds"]
        fails += not res["holds"]
    return _result("mse-bound", passes, fails, max_ratio_to_bound=worst, trials=n)


def suite_design_gain(n: int | None = None, seed: int = 0) -> dict:
    n = n or 20000
    scn = oracle.deficient_pool(r=4, n_frames=10, budget=4.0, lambda0=0.1, seed=seed)
    res = oracle.design_gain_experiment(scn, n_samples=n, seed=seed + 1)
    gain = 1.0 - res["mse_designed"] / res["mse_uniform"]
    ok = gain >= 0.10 and res["det_designed"] > res["det_uniform"]
    return _result("design-gain", int(ok), int(not ok), improvement=gain,
                   mse_uniform=res["mse_uniform"], mse_designed=res["mse_designed"],
                   logdet_uniform=res["det_uniform"], logdet_designed=res["det_designed"])


SUITES: dict[str, Callable[..., dict]] = {
    "trace-det": suite_trace_det,
    "kappa": suite_kappa,
    "logdet-grad": suite_logdet_grad,
    "hvp": suite_hvp,
    "posterior-cov": suite_posterior_cov,
    "mse-bound": suite_mse_bound,
    "design-gain": suite_design_gain,
}


def run_suites(names: list[str], n: int | None = None, seed: int = 0) -> dict:
    results = [SUITES[name](n, seed) for name in names]
    return {"suites": results, "passed": all(r["passed"] for r in results)}
