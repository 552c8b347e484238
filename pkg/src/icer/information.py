"""Per-frame information matrices, their cache, and the precision matrix ``S(w)``."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np
from numpy.typing import ArrayLike, NDArray

from . import spd
from .errors import DimensionMismatch, NegativeWeight, NotPositiveDefinite
from .forward import FrameConstraint, ForwardModel, hvp_phi
from .spd import SpdMatrix

BUILD_METHODS = ("analytic", "hvp", "explicit_jacobian")
DEFAULT_LAMBDA0 = 1e-3
PSD_TOL = 1e-8


@dataclass
class FrameInfo:
    frame_id: int
    H: SpdMatrix
    build_method: str
    build_error_estimate: float
    clipped: float = 0.0

    @property
    def matrix(self) -> NDArray:
        return self.H.entries


@dataclass
class InfoCache:
    """Write-once store of ``H_t`` for a candidate pool, plus the prior ``Lambda0``."""

    prior: SpdMatrix
    frames: dict[int, FrameInfo] = field(default_factory=dict)
    lambda_id: float = 0.0
    at: NDArray | None = None

    @property
    def order(self) -> list[int]:
        return list(self.frames)

    @property
    def dim(self) -> int:
        return self.prior.dim

    def matrices(self) -> list[NDArray]:
        return [fi.H.entries for fi in self.frames.values()]

    def __getitem__(self, frame_id: int) -> FrameInfo:
        return self.frames[frame_id]

    def __len__(self) -> int:
        return len(self.frames)


def default_prior(r: int, lambda0: float = DEFAULT_LAMBDA0) -> SpdMatrix:
    return SpdMatrix(lambda0 * np.eye(r))


def _fd_jacobian(model: ForwardModel, state, at: NDArray) -> NDArray:
    h = 1e-5 * max(1.0, float(np.linalg.norm(at)))
    cols = []
    for i in range(model.code_dim):
        e = np.zeros(model.code_dim)
        e[i] = h
        cols.append((model.eval(at + e, state) - model.eval(at - e, state)) / (2 * h))
    return np.stack(cols, axis=1)


def _gram(J: NDArray, weights: NDArray) -> NDArray:
    return J.T @ (weights[:, None] * J)


def build_frame_info(model: ForwardModel, frame: FrameConstraint, method: str = "hvp",
                     lambda_id: float = 0.0, at: ArrayLike | None = None) -> FrameInfo:
    """Gauss-Newton matrix ``H_t = J^T M^T M J`` of one frame.

    With ``lambda_id > 0`` the identity-preservation rows are appended, giving
    ``H_t(mask) + lambda_id * H_t(1 - mask)``.  ``method='hvp'`` applies
    Hessian-vector products of the masked surrogate to the basis vectors;
    ``'analytic'`` uses the model Jacobian and ``'explicit_jacobian'`` a
    finite-difference Jacobian.
    """
    if method not in BUILD_METHODS:
        raise ValueError(f"unknown build method {method!r}")
    if frame.state.obs_dim != model.obs_dim:
        raise DimensionMismatch(f"frame {frame.frame_id} obs_dim {frame.state.obs_dim} != model {model.obs_dim}")
    r = model.code_dim
    at = np.zeros(r) if at is None else np.asarray(at, dtype=np.float64)
    masks = [(1.0, frame.mask)]
    if lambda_id > 0:
        masks.append((lambda_id, frame.complement))

    H = np.zeros((r, r))
    if method == "hvp":
        eye = np.eye(r)
        for scale, mk in masks:
            H += scale * np.stack([hvp_phi(model, frame.state, mk, eye[i], at=at) for i in range(r)], axis=1)
    else:
        J = model.jacobian(at, frame.state) if method == "analytic" else _fd_jacobian(model, frame.state, at)
        for scale, mk in masks:
            H += scale * _gram(J, mk * mk)

    sym = 0.5 * (H + H.T)
    asym = float(np.linalg.norm(H - sym))
    evals, evecs = np.linalg.eigh(sym)
    tol = PSD_TOL * max(1.0, float(evals[-1]))
    clipped = 0.0
    if evals[0] < 0:
        if evals[0] < -tol:
            raise NotPositiveDefinite(
                f"frame {frame.frame_id}: H_t has eigenvalue {evals[0]:.3e}, beyond PSD repair tolerance")
        clipped = float(-evals[0])
        # Only the tiny negative eigenvalues are touched.
        neg = evals < 0
        sym = sym - (evecs[:, neg] * evals[neg]) @ evecs[:, neg].T
        sym = 0.5 * (sym + sym.T)
    return FrameInfo(frame.frame_id, SpdMatrix(sym), method, asym, clipped)


def build_cache(model: ForwardModel, frames: Iterable[FrameConstraint], prior: SpdMatrix | ArrayLike | None = None,
                method: str = "hvp", lambda_id: float = 0.0, at: ArrayLike | None = None) -> InfoCache:
    """Build ``H_t`` for every candidate (non held-out) frame at the linearization point."""
    prior = default_prior(model.code_dim) if prior is None else SpdMatrix.coerce(prior)
    if prior.dim != model.code_dim:
        raise DimensionMismatch(f"prior dim {prior.dim} != code dim {model.code_dim}")
    if spd.eigen_extremes(prior)[0] <= 0:
        raise NotPositiveDefinite("the prior Lambda0 must be positive definite")
    cache = InfoCache(prior=prior, lambda_id=float(lambda_id),
                      at=None if at is None else np.asarray(at, dtype=np.float64))
    for fr in frames:
        if fr.held_out:
            continue
        cache.frames[fr.frame_id] = build_frame_info(model, fr, method, lambda_id, at)
    return cache


def _weight_vector(cache: InfoCache, weights: ArrayLike | Mapping[int, float]) -> NDArray:
    if isinstance(weights, Mapping):
        w = np.array([weights.get(fid, 0.0) for fid in cache.frames], dtype=np.float64)
    else:
        w = np.asarray(weights, dtype=np.float64).reshape(-1)
    if w.shape != (len(cache),):
        raise DimensionMismatch(f"{w.shape[0]} weights for {len(cache)} cached frames")
    if np.any(w < 0):
        raise NegativeWeight(f"weights must be nonnegative, min is {w.min():.3e}")
    return w


def assemble(cache: InfoCache, weights: ArrayLike | Mapping[int, float]) -> SpdMatrix:
    """``S(w) = Lambda0 + sum_t w_t H_t`` (summed in cache order)."""
    w = _weight_vector(cache, weights)
    S = cache.prior.entries.copy()
    for wt, fi in zip(w, cache.frames.values()):
        if wt:
            S += wt * fi.H.entries
    return SpdMatrix(S)


def conditioning_report(S: SpdMatrix | ArrayLike) -> dict[str, float]:
    S = SpdMatrix.coerce(S)
    ev = np.linalg.eigvalsh(S.entries)
    if ev[0] <= 0:
        raise NotPositiveDefinite(f"S has eigenvalue {ev[0]:.3e}")
    return {
        "logdet": spd.logdet(S),
        "trace_inverse": float(np.sum(1.0 / ev)),
        "lambda_min": float(ev[0]),
        "lambda_max": float(ev[-1]),
        "kappa": float(ev[-1] / ev[0]),
    }


def marginal_gain(S: SpdMatrix | ArrayLike, H: SpdMatrix | ArrayLike) -> float:
    """``Tr(S^{-1} H)``: the log-det gain per unit of extra weight on a frame."""
    return spd.trace_solve_product(S, np.asarray(H, dtype=np.float64))


def marginal_gains(S: SpdMatrix | ArrayLike, cache: InfoCache) -> NDArray:
    S = SpdMatrix.coerce(S)
    return np.array([marginal_gain(S, fi.H.entries) for fi in cache.frames.values()])
