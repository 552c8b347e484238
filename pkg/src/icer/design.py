"""Weight design on the budget simplex and the alternating code/weight driver.

Sign convention: the full objective is *minimized*, so logits move along
``-logit_gradient``.  A frame's weight partial is its fitting cost minus the
conditioning reward, ``l_t - lambda_cond * Tr(S^{-1} H_t)``; frames whose
partial is above the softmax-weighted mean lose weight.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.special import softmax

from . import spd
from .errors import InvalidK, InvalidParams, InvalidTemperature, NoSupervision
from .forward import FrameConstraint, ForwardModel
from .information import InfoCache, assemble, build_cache, default_prior, marginal_gain, marginal_gains
from .inversion import LossConfig, fit_code, frame_losses
from .spd import SpdMatrix


@dataclass(frozen=True)
class WeightState:
    logits: NDArray
    tau: float = 1.0
    budget: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "logits", np.asarray(self.logits, dtype=np.float64).reshape(-1))
        if not self.tau > 0:
            raise InvalidTemperature(f"temperature must be positive, got {self.tau}")
        if not self.budget > 0:
            raise InvalidParams(f"budget K must be positive, got {self.budget}")

    @classmethod
    def uniform(cls, n: int, budget: float, tau: float = 1.0) -> "WeightState":
        return cls(np.zeros(n), tau, budget)

    @property
    def sigma(self) -> NDArray:
        return softmax(self.logits / self.tau)

    @property
    def weights(self) -> NDArray:
        return weights_from_logits(self)


def weights_from_logits(state: WeightState) -> NDArray:
    """``w = K * softmax(a / tau)``; nonnegative and summing to ``K``."""
    if not state.tau > 0:
        raise InvalidTemperature(f"temperature must be positive, got {state.tau}")
    return state.budget * softmax(state.logits / state.tau)


@dataclass
class IcerConfig:
    """Settings for the alternating scheme.

    ``lambda_cond=None`` balances the two weight-gradient terms from the
    initial state: ``0.1 * mean(l_t) / mean(Tr(S^{-1} H_t))`` at uniform
    weights.  ``eta_w=None`` picks ``eta_w_scale * tau * n / (K * mean(l_t))``
    so the first logit moves are of order one.
    """

    loss: LossConfig = field(default_factory=LossConfig)
    lambda_cond: float | None = None
    lambda0: float = 1e-3
    budget: float | None = None
    eta_w: float | None = None
    eta_w_scale: float = 1.0
    inner_v_iters: int = 10
    weight_steps: int = 20
    rounds: int = 30
    tau: float = 1.0
    tau_anneal: float = 1.0
    tau_floor: float = 0.05
    lock_weights: bool = False
    weight_backtracking: bool = True
    n_keyframes: int | None = None
    build_method: str = "hvp"
    final_refit: bool = True

    def __post_init__(self):
        if self.lambda_cond is not None and self.lambda_cond < 0:
            raise InvalidParams("lambda_cond must be nonnegative")
        if self.eta_w is not None and self.eta_w <= 0:
            raise InvalidParams("eta_w must be positive")
        if self.lambda0 <= 0:
            raise InvalidParams("lambda0 must be positive")
        if self.budget is not None and self.budget <= 0:
            raise InvalidParams("budget must be positive")
        if self.tau <= 0 or not 0 < self.tau_anneal <= 1 or self.tau_floor <= 0:
            raise InvalidParams("invalid temperature schedule")
        if min(self.inner_v_iters, self.weight_steps, self.rounds) < 0:
            raise InvalidParams("iteration counts must be nonnegative")


def objective_at_weights(ells: ArrayLike, v: ArrayLike, w: ArrayLike, cache: InfoCache,
                         lambda_cond: float) -> float:
    """Full objective for raw (not necessarily simplex) weights and precomputed losses."""
    v = np.asarray(v, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    fit = float(np.dot(w, ells)) + float(v @ cache.prior.entries @ v)
    if lambda_cond == 0:
        return fit
    return fit - lambda_cond * spd.logdet(assemble(cache, w))


def icer_objective(model: ForwardModel, frames: Sequence[FrameConstraint], v: ArrayLike,
                   state: WeightState, cache: InfoCache, cfg: IcerConfig | float) -> float:
    """``sum_t w_t l_t(v) + v^T Lambda0 v - lambda_cond * logdet S(w)``.

    ``cfg`` may be an :class:`IcerConfig` with a resolved ``lambda_cond`` or
    the value of ``lambda_cond`` itself (the loss then uses defaults).
    """
    lam, loss_cfg = _lambda_and_loss(cfg)
    ells = frame_losses(model, frames, v, loss_cfg)
    return objective_at_weights(ells, v, weights_from_logits(state), cache, lam)


def _lambda_and_loss(cfg) -> tuple[float, LossConfig]:
    if isinstance(cfg, IcerConfig):
        if cfg.lambda_cond is None:
            raise InvalidParams("lambda_cond is unresolved; call resolve_lambda_cond first")
        return float(cfg.lambda_cond), cfg.loss
    return float(cfg), LossConfig()


def weight_partial(ell_t: float, S: SpdMatrix | ArrayLike, H_t: SpdMatrix | ArrayLike, lambda_cond: float) -> float:
    """``dL/dw_t = l_t - lambda_cond * Tr(S^{-1} H_t)``."""
    return float(ell_t) - lambda_cond * marginal_gain(S, H_t)


def weight_partials(ells: ArrayLike, S: SpdMatrix, cache: InfoCache, lambda_cond: float) -> NDArray:
    return np.asarray(ells, dtype=np.float64) - lambda_cond * marginal_gains(S, cache)


def logit_gradient(state: WeightState, partials: ArrayLike) -> NDArray:
    """Chain rule through ``w = K softmax(a/tau)``.

    The result sums to zero: moving along it never changes the budget.
    """
    p = np.asarray(partials, dtype=np.float64)
    s = state.sigma
    return (state.budget / state.tau) * s * (p - float(s @ p))


def design_step(state: WeightState, model: ForwardModel | None, frames: Sequence[FrameConstraint] | None,
                v: ArrayLike, cache: InfoCache, cfg: IcerConfig, ells: ArrayLike | None = None,
                eta_w: float | None = None) -> WeightState:
    """One logit descent step; ``ells`` may be passed to skip re-evaluating losses.

    With ``cfg.weight_backtracking`` the step is halved (up to 30 times) until
    the objective satisfies an Armijo decrease; otherwise the plain step is
    taken.
    """
    lam, loss_cfg = _lambda_and_loss(cfg)
    if ells is None:
        ells = frame_losses(model, frames, v, loss_cfg)
    ells = np.asarray(ells, dtype=np.float64)
    eta = cfg.eta_w if eta_w is None else eta_w
    if eta is None:
        raise InvalidParams("eta_w is unresolved")
    w = weights_from_logits(state)
    S = assemble(cache, w)
    grad = logit_gradient(state, weight_partials(ells, S, cache, lam))
    gg = float(grad @ grad)
    if gg == 0.0:
        return state
    if not cfg.weight_backtracking:
        return replace(state, logits=state.logits - eta * grad)
    f0 = objective_at_weights(ells, v, w, cache, lam)
    for _ in range(31):
        cand = replace(state, logits=state.logits - eta * grad)
        f1 = objective_at_weights(ells, v, weights_from_logits(cand), cache, lam)
        if f1 <= f0 - 1e-4 * eta * gg:
            return cand
        eta *= 0.5
    return state


def topk_keyframes(weights: ArrayLike, k: int, frame_ids: Sequence[int] | None = None) -> list[int]:
    """Ids of the ``k`` largest weights, ties broken by ascending frame id."""
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    ids = list(range(1, len(w) + 1)) if frame_ids is None else [int(i) for i in frame_ids]
    if len(ids) != len(w):
        raise InvalidK("one frame id per weight is required")
    if not 1 <= k <= len(w):
        raise InvalidK(f"k must lie in [1, {len(w)}], got {k}")
    order = sorted(range(len(w)), key=lambda i: (-w[i], ids[i]))
    return [ids[i] for i in order[:k]]


def resolve_lambda_cond(ells: ArrayLike, cache: InfoCache, budget: float) -> float:
    n = len(cache)
    S = assemble(cache, np.full(n, budget / n))
    gain = float(np.mean(marginal_gains(S, cache)))
    ell = float(np.mean(ells))
    if gain <= 0:
        return 0.0
    if ell <= 0:
        return 0.1
    return 0.1 * ell / gain


def resolve_eta_w(ells: ArrayLike, n: int, budget: float, tau: float, scale: float) -> float:
    ell = float(np.mean(ells))
    return scale * tau * n / (budget * ell) if ell > 0 else scale * tau * n / budget


def design_weights(cache: InfoCache, ells: ArrayLike, cfg: IcerConfig, v: ArrayLike | None = None,
                   steps: int | None = None, state: WeightState | None = None) -> tuple[WeightState, list[dict]]:
    """Weight design with frozen per-frame losses (no code updates).

    With ``ells`` all zero this is pure D-optimal design on the simplex.
    Returns the final state and one trace row per step.
    """
    n = len(cache)
    budget = cfg.budget if cfg.budget is not None else float(n)
    v = np.zeros(cache.dim) if v is None else np.asarray(v, dtype=np.float64)
    ells = np.asarray(ells, dtype=np.float64)
    state = WeightState.uniform(n, budget, cfg.tau) if state is None else state
    lam = cfg.lambda_cond if cfg.lambda_cond is not None else resolve_lambda_cond(ells, cache, budget)
    eta = cfg.eta_w if cfg.eta_w is not None else resolve_eta_w(ells, n, budget, cfg.tau, cfg.eta_w_scale)
    cfg = replace(cfg, lambda_cond=lam, eta_w=eta, budget=budget)
    rows = []
    for step in range(cfg.weight_steps if steps is None else steps):
        state = design_step(state, None, None, v, cache, cfg, ells=ells)
        w = state.weights
        rows.append({"step": step + 1, "objective": objective_at_weights(ells, v, w, cache, lam),
                     "logdet": spd.logdet(assemble(cache, w)), "weights": w.tolist()})
    return state, rows


@dataclass
class IcerResult:
    v_final: NDArray
    weights_final: NDArray
    frame_ids: list[int]
    keyframes: list[int]
    lambda_cond: float
    eta_w: float
    budget: float
    traces: list[dict]
    fit_traces: list[list[dict]]
    logdet_uniform: float


def run_icer(model: ForwardModel, frames: Sequence[FrameConstraint], cfg: IcerConfig | None = None,
             seed: int = 0, prior: SpdMatrix | ArrayLike | None = None) -> IcerResult:
    """Alternate code fitting (step 1) and weight design (step 2).

    Held-out frames are dropped before anything is computed.  ``seed`` only
    matters when the caller perturbs the initial logits; the schedule itself
    is deterministic.
    """
    cfg = cfg or IcerConfig()
    cands = [fr for fr in frames if not fr.held_out]
    if not any(fr.supervised for fr in cands):
        raise NoSupervision("run_icer needs at least one supervised candidate frame")
    n = len(cands)
    ids = [fr.frame_id for fr in cands]
    prior = default_prior(model.code_dim, cfg.lambda0) if prior is None else SpdMatrix.coerce(prior)
    loss_cfg = replace(cfg.loss, max_iters=cfg.inner_v_iters)
    cache = build_cache(model, cands, prior, method=cfg.build_method, lambda_id=cfg.loss.lambda_id)
    budget = cfg.budget if cfg.budget is not None else float(n)

    v = np.zeros(model.code_dim)
    ells0 = frame_losses(model, cands, v, loss_cfg)
    sup = [i for i, fr in enumerate(cands) if fr.supervised]
    lam = cfg.lambda_cond if cfg.lambda_cond is not None else resolve_lambda_cond(ells0[sup], cache, budget)
    eta_w = cfg.eta_w if cfg.eta_w is not None else resolve_eta_w(ells0[sup], n, budget, cfg.tau, cfg.eta_w_scale)
    cfg = replace(cfg, lambda_cond=lam, eta_w=eta_w, budget=budget)

    state = WeightState.uniform(n, budget, cfg.tau)
    logdet_uniform = spd.logdet(assemble(cache, state.weights))
    traces, fit_traces = [], []
    for rnd in range(1, cfg.rounds + 1):
        w = state.weights
        fit = fit_code(model, cands, w, prior, loss_cfg, v_init=v, precond=assemble(cache, w))
        v = fit.v
        fit_traces.append(fit.trace_rows)
        if not cfg.lock_weights:
            ells = frame_losses(model, cands, v, loss_cfg)
            for _ in range(cfg.weight_steps):
                state = design_step(state, model, cands, v, cache, cfg, ells=ells)
        w = state.weights
        ells = frame_losses(model, cands, v, loss_cfg)
        traces.append({"round": rnd, "icer_objective": objective_at_weights(ells, v, w, cache, lam),
                       "logdet": spd.logdet(assemble(cache, w)), "tau": state.tau, "weights": w.tolist()})
        if cfg.tau_anneal < 1:
            tau = max(cfg.tau_floor, state.tau * cfg.tau_anneal)
            # keep w unchanged across the temperature switch
            state = WeightState(state.logits * tau / state.tau, tau, budget)

    w = state.weights
    if cfg.final_refit:
        final_cfg = replace(cfg.loss, max_iters=max(cfg.loss.max_iters, cfg.inner_v_iters))
        fit = fit_code(model, cands, w, prior, final_cfg, v_init=v, precond=assemble(cache, w))
        v = fit.v
        fit_traces.append(fit.trace_rows)
    k = cfg.n_keyframes if cfg.n_keyframes is not None else int(min(n, max(1, round(budget))))
    return IcerResult(v, w, ids, topk_keyframes(w, k, ids), lam, eta_w, budget, traces, fit_traces,
                      logdet_uniform)
