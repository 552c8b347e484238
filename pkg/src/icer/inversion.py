"""Edit-code fitting: masked per-frame losses and the preconditioned code update."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

from . import spd
from .errors import DimensionMismatch, InvalidParams, MissingTarget, NonFiniteLoss
from .forward import FrameConstraint, ForwardModel
from .information import assemble, build_cache
from .spd import SpdMatrix

DISTANCES = ("l2_squared", "l1", "mixed")

# Instrumentation: how often a held-out frame reached a loss or gradient.
touches: Counter = Counter()


@dataclass
class LossConfig:
    """Per-frame loss and code-optimizer settings.

    ``distance='mixed'`` uses ``(1 - l1_weight) * l2_squared + l1_weight * l1``;
    the l1 part is a Huber-smoothed absolute value with width ``huber_delta``.
    """

    lambda_id: float = 1.0
    distance: str = "l2_squared"
    l1_weight: float = 0.5
    huber_delta: float = 1e-6
    eta: float = 1.0
    max_iters: int = 100
    tol_grad: float = 1e-9
    backtracking: bool = True
    armijo_c: float = 1e-4
    max_halvings: int = 20

    def __post_init__(self):
        if self.lambda_id < 0:
            raise InvalidParams("lambda_id must be nonnegative")
        if self.eta <= 0:
            raise InvalidParams("eta must be positive")
        if self.distance not in DISTANCES:
            raise InvalidParams(f"distance must be one of {DISTANCES}")
        if not 0 <= self.l1_weight <= 1:
            raise InvalidParams("l1_weight must lie in [0, 1]")


def _huber(x: NDArray, delta: float) -> NDArray:
    ax = np.abs(x)
    return np.where(ax <= delta, 0.5 * x * x / delta, ax - 0.5 * delta)


def _huber_deriv(x: NDArray, delta: float) -> NDArray:
    return np.clip(x / delta, -1.0, 1.0)


def distance(x: NDArray, cfg: LossConfig) -> float:
    """``D`` applied to an already-masked difference vector."""
    if cfg.distance == "l2_squared":
        return float(x @ x)
    l1 = float(np.sum(_huber(x, cfg.huber_delta)))
    if cfg.distance == "l1":
        return l1
    return (1 - cfg.l1_weight) * float(x @ x) + cfg.l1_weight * l1


def distance_grad(x: NDArray, cfg: LossConfig) -> NDArray:
    if cfg.distance == "l2_squared":
        return 2.0 * x
    g1 = _huber_deriv(x, cfg.huber_delta)
    if cfg.distance == "l1":
        return g1
    return (1 - cfg.l1_weight) * 2.0 * x + cfg.l1_weight * g1


def _target(frame: FrameConstraint) -> NDArray:
    if frame.y_edit is None:
        raise MissingTarget(f"frame {frame.frame_id} is supervised but has no edited target")
    return frame.y_edit


def frame_loss(model: ForwardModel, frame: FrameConstraint, v: ArrayLike, cfg: LossConfig) -> float:
    """Masked edit fit plus ``lambda_id``-weighted preservation outside the mask.

    Unsupervised frames contribute exactly zero.
    """
    if frame.held_out:
        touches["held_out"] += 1
    if not frame.supervised:
        return 0.0
    y = model.eval(v, frame.state)
    loss = distance(frame.mask * (y - _target(frame)), cfg)
    if cfg.lambda_id:
        loss += cfg.lambda_id * distance(frame.complement * (y - frame.y_base), cfg)
    return loss


def frame_loss_grad(model: ForwardModel, frame: FrameConstraint, v: ArrayLike, cfg: LossConfig) -> NDArray:
    if frame.held_out:
        touches["held_out"] += 1
    if not frame.supervised:
        return np.zeros(model.code_dim)
    y = model.eval(v, frame.state)
    cot = frame.mask * distance_grad(frame.mask * (y - _target(frame)), cfg)
    if cfg.lambda_id:
        comp = frame.complement
        cot = cot + cfg.lambda_id * comp * distance_grad(comp * (y - frame.y_base), cfg)
    return model.grad_v(v, frame.state, cot)


def _check_weights(frames: Sequence[FrameConstraint], weights: ArrayLike) -> NDArray:
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    if w.shape != (len(frames),):
        raise DimensionMismatch(f"{w.shape[0]} weights for {len(frames)} frames")
    return w


def frame_losses(model, frames, v, cfg) -> NDArray:
    return np.array([frame_loss(model, fr, v, cfg) for fr in frames])


def weighted_objective(model: ForwardModel, frames: Sequence[FrameConstraint], v: ArrayLike,
                       weights: ArrayLike, prior: SpdMatrix | ArrayLike, cfg: LossConfig) -> float:
    """``sum_t w_t l_t(v) + v^T Lambda0 v`` (prior term without a 1/2)."""
    v = np.asarray(v, dtype=np.float64)
    w = _check_weights(frames, weights)
    total = 0.0
    for wt, fr in zip(w, frames):
        if wt:
            total += wt * frame_loss(model, fr, v, cfg)
    return total + float(v @ np.asarray(prior) @ v)


def objective_gradient(model: ForwardModel, frames: Sequence[FrameConstraint], v: ArrayLike,
                       weights: ArrayLike, prior: SpdMatrix | ArrayLike, cfg: LossConfig) -> NDArray:
    v = np.asarray(v, dtype=np.float64)
    w = _check_weights(frames, weights)
    g = 2.0 * (np.asarray(prior) @ v)
    for wt, fr in zip(w, frames):
        if wt:
            g = g + wt * frame_loss_grad(model, fr, v, cfg)
    return g


def preconditioned_step(v: ArrayLike, grad: ArrayLike, S: SpdMatrix | ArrayLike, eta: float) -> NDArray:
    """``v - eta * S^{-1} grad``."""
    return np.asarray(v, dtype=np.float64) - eta * spd.solve(S, np.asarray(grad, dtype=np.float64))


@dataclass
class FitResult:
    v: NDArray
    loss_trace: list[float]
    grad_norms: list[float]
    etas: list[float]
    converged: bool
    iterations: int
    trace_rows: list[dict] = field(default_factory=list)


def fit_code(model: ForwardModel, frames: Sequence[FrameConstraint], weights: ArrayLike,
             prior: SpdMatrix | ArrayLike, cfg: LossConfig, v_init: ArrayLike | None = None,
             precond: SpdMatrix | ArrayLike | None = None) -> FitResult:
    """Minimize the weighted objective over the code with fixed weights.

    ``precond`` is the information matrix ``S(w)``; when omitted it is built
    from HVP Gauss-Newton matrices at ``v = 0`` with the same ``lambda_id``
    augmentation as the loss.  Since the objective carries no 1/2, its
    Gauss-Newton Hessian is ``2 S(w)`` and that is the matrix inverted in
    each step, so a unit step is exact on linear l2 problems.
    """
    prior = SpdMatrix.coerce(prior)
    w = _check_weights(frames, weights)
    if precond is None:
        cache = build_cache(model, frames, prior, lambda_id=cfg.lambda_id)
        precond = assemble(cache, w)
    curvature = SpdMatrix(2.0 * np.asarray(precond))
    v = np.zeros(model.code_dim) if v_init is None else np.array(v_init, dtype=np.float64)

    def objective(x):
        return weighted_objective(model, frames, x, w, prior, cfg)

    f = objective(v)
    if not np.isfinite(f):
        raise NonFiniteLoss(f"objective is {f} at the initial code")
    g = objective_gradient(model, frames, v, w, prior, cfg)
    losses, gnorms, etas = [f], [float(np.linalg.norm(g))], [0.0]
    rows = [{"iteration": 0, "objective": f, "grad_norm": gnorms[0], "eta": 0.0}]
    converged = gnorms[0] <= cfg.tol_grad
    it = 0
    while not converged and it < cfg.max_iters:
        it += 1
        d = spd.solve(curvature, g)
        slope = float(g @ d)
        eta = cfg.eta
        accepted = False
        for _ in range(cfg.max_halvings + 1):
            v_new = preconditioned_step(v, g, curvature, eta)
            f_new = objective(v_new)
            if not cfg.backtracking:
                if not np.isfinite(f_new):
                    raise NonFiniteLoss(f"objective diverged to {f_new} at iteration {it}")
                accepted = True
                break
            if np.isfinite(f_new) and f_new <= f - cfg.armijo_c * eta * slope:
                accepted = True
                break
            eta *= 0.5
        if not accepted:
            # no Armijo decrease left at machine precision
            break
        v, f = v_new, f_new
        g = objective_gradient(model, frames, v, w, prior, cfg)
        gn = float(np.linalg.norm(g))
        losses.append(f)
        gnorms.append(gn)
        etas.append(eta)
        rows.append({"iteration": it, "objective": f, "grad_norm": gn, "eta": eta})
        converged = gn <= cfg.tol_grad
    return FitResult(v, losses, gnorms, etas, converged, it, rows)
