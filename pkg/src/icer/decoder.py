"""Linear residual decoder ``g(v) = B v`` learned by alternating least squares.

Each paired asset contributes a residual ``delta_i = u_edit - u_orig``.  The
fit minimizes

    sum_i ||W_i (B v_i - delta_i)||^2 + lambda_v * sum_i ||v_i||^2

with ``W_i = diag(part_mask_i + sqrt(lambda_id) * (1 - part_mask_i))``.
``g(0) = 0`` holds structurally, so no penalty for it is needed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .errors import DimensionMismatch, InvalidParams, RankDeficient


@dataclass
class PairedAsset:
    pair_id: int
    u_orig: NDArray
    u_edit: NDArray
    part_mask: NDArray

    def __post_init__(self):
        self.u_orig = np.asarray(self.u_orig, dtype=np.float64).reshape(-1)
        self.u_edit = np.asarray(self.u_edit, dtype=np.float64).reshape(-1)
        self.part_mask = np.asarray(self.part_mask, dtype=np.float64).reshape(-1)
        if not (self.u_orig.shape == self.u_edit.shape == self.part_mask.shape):
            raise DimensionMismatch(f"pair {self.pair_id}: feature vectors and mask differ in length")
        if not np.all(np.isfinite(self.residual)):
            raise InvalidParams(f"pair {self.pair_id}: residual is not finite")

    @property
    def residual(self) -> NDArray:
        return self.u_edit - self.u_orig


@dataclass
class ResidualDecoder:
    basis: NDArray
    lambda_v: float = 0.0
    part_mask: NDArray | None = None

    def __post_init__(self):
        self.basis = np.asarray(self.basis, dtype=np.float64)
        if self.basis.ndim != 2:
            raise DimensionMismatch("decoder basis must be a D x r matrix")
        if self.part_mask is not None:
            self.part_mask = np.asarray(self.part_mask, dtype=np.float64).reshape(-1)

    @property
    def code_dim(self) -> int:
        return self.basis.shape[1]

    @property
    def feature_dim(self) -> int:
        return self.basis.shape[0]

    @classmethod
    def identity(cls, dim: int) -> "ResidualDecoder":
        """Free-residual decoder: the code *is* the residual."""
        return cls(np.eye(dim))

    def to_dict(self) -> dict:
        return {"basis": self.basis.tolist(), "lambda_v": self.lambda_v,
                "part_mask": None if self.part_mask is None else self.part_mask.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "ResidualDecoder":
        return cls(np.asarray(d["basis"], dtype=np.float64), float(d.get("lambda_v", 0.0)), d.get("part_mask"))


def decode(decoder: ResidualDecoder, v: ArrayLike) -> NDArray:
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if v.shape != (decoder.code_dim,):
        raise DimensionMismatch(f"code length {v.shape[0]} != decoder code dim {decoder.code_dim}")
    return decoder.basis @ v


def _row_weights(mask: NDArray, lambda_id: float) -> NDArray:
    return mask + np.sqrt(lambda_id) * (1.0 - mask)


def encode(decoder: ResidualDecoder, delta: ArrayLike, mask: ArrayLike | None = None,
           lambda_v: float = 0.0, lambda_id: float = 0.0) -> NDArray:
    """Ridge code ``argmin ||W (B v - delta)||^2 + lambda_v ||v||^2``."""
    delta = np.asarray(delta, dtype=np.float64).reshape(-1)
    B = decoder.basis
    if delta.shape != (B.shape[0],):
        raise DimensionMismatch(f"residual length {delta.shape[0]} != decoder feature dim {B.shape[0]}")
    mask = np.ones_like(delta) if mask is None else np.asarray(mask, dtype=np.float64).reshape(-1)
    w = _row_weights(mask, lambda_id)
    G = B.T @ (w[:, None] ** 2 * B)
    rhs = B.T @ (w ** 2 * delta)
    if lambda_v > 0:
        G = G + lambda_v * np.eye(B.shape[1])
    elif np.linalg.matrix_rank(w[:, None] * B) < B.shape[1]:
        raise RankDeficient("masked basis is rank deficient and lambda_v = 0")
    return np.linalg.solve(G, rhs)


@dataclass
class AlsResult:
    decoder: ResidualDecoder
    codes: NDArray
    loss_trace: list[float]

    def reconstruction_error(self, assets: Sequence[PairedAsset], lambda_id: float = 1.0) -> float:
        """Masked (unregularized) squared reconstruction error summed over pairs."""
        deltas = np.stack([a.residual for a in assets])
        W = np.stack([_row_weights(a.part_mask, lambda_id) for a in assets])
        return float(np.sum((W * (self.codes @ self.decoder.basis.T - deltas)) ** 2))


def _loss(B, V, deltas, W, lambda_v):
    return float(np.sum((W * (V @ B.T - deltas)) ** 2) + lambda_v * np.sum(V * V))


def _code_step(B, deltas, W, lambda_v):
    r = B.shape[1]
    W2 = W * W
    G = np.einsum("dj,nd,dk->njk", B, W2, B)
    rhs = np.einsum("dj,nd->nj", B, W2 * deltas)
    if lambda_v > 0:
        G = G + lambda_v * np.eye(r)
    else:
        cond = np.linalg.cond(G)
        if np.any(~np.isfinite(cond)) or np.any(cond > 1e12):
            raise RankDeficient("code update system is singular with lambda_v = 0")
    return np.linalg.solve(G, rhs[..., None])[..., 0]


def _basis_step(V, deltas, W):
    W2 = W * W
    G = np.einsum("nd,nj,nk->djk", W2, V, V)
    rhs = np.einsum("nd,nj->dj", W2 * deltas, V)
    return np.einsum("djk,dk->dj", np.linalg.pinv(G, rcond=1e-13, hermitian=True), rhs)


def _normalize(B, V):
    norms = np.linalg.norm(B, axis=0)
    norms[norms == 0] = 1.0
    return B / norms, V * norms


def als_fit(assets: Sequence[PairedAsset], r: int, lambda_v: float = 0.0, iters: int = 100,
            lambda_id: float = 1.0, tol: float = 1e-15) -> AlsResult:
    """Alternating exact least squares for the basis and per-pair codes.

    The basis starts at the top-``r`` left singular vectors of the weighted
    residual matrix.  With ``lambda_v = 0`` the columns are rescaled to unit
    norm after every basis update (codes scaled inversely, ``B v_i`` intact).
    The ridge penalty is not invariant to that rescaling, so with
    ``lambda_v > 0`` the basis is normalized once at the end and the codes
    refit.  ``loss_trace`` holds the objective after every half step.
    """
    if not assets:
        raise InvalidParams("als_fit needs at least one paired asset")
    if lambda_v < 0 or lambda_id < 0:
        raise InvalidParams("lambda_v and lambda_id must be nonnegative")
    deltas = np.stack([a.residual for a in assets])
    W = np.stack([_row_weights(a.part_mask, lambda_id) for a in assets])
    N, D = deltas.shape
    if not 1 <= r <= min(D, N):
        raise InvalidParams(f"need 1 <= r <= min(D, N) = {min(D, N)}, got {r}")
    if iters < 1:
        raise InvalidParams("iters must be >= 1")

    U, _, _ = np.linalg.svd((W * deltas).T, full_matrices=False)
    B = U[:, :r].copy()
    part = np.max(np.stack([a.part_mask for a in assets]), axis=0)
    floor = 1e-26 * float(np.sum((W * deltas) ** 2))
    trace: list[float] = []
    V = np.zeros((N, r))
    for _ in range(iters):
        V = _code_step(B, deltas, W, lambda_v)
        trace.append(_loss(B, V, deltas, W, lambda_v))
        if trace[-1] <= floor:
            break
        B = _basis_step(V, deltas, W)
        trace.append(_loss(B, V, deltas, W, lambda_v))
        if lambda_v == 0:
            B, V = _normalize(B, V)
        if len(trace) >= 3 and trace[-3] - trace[-1] <= tol * trace[-3]:
            break
    if lambda_v > 0:
        # the penalty is not scale invariant: normalize once, then refit codes
        B, V = _normalize(B, V)
        V = _code_step(B, deltas, W, lambda_v)
    return AlsResult(ResidualDecoder(B, lambda_v, part), V, trace)


def make_paired_assets(n_pairs: int, feature_dim: int, r: int, seed: int = 0, part_frac: float = 0.4,
                       noise: float = 0.0) -> tuple[list[PairedAsset], NDArray, NDArray]:
    """Synthetic pairs whose residuals are planted as ``B* v_i*`` inside a part region.

    Returns ``(assets, true_basis, true_codes)``.
    """
    rng = np.random.default_rng(seed)
    part = np.zeros(feature_dim)
    part[: max(r, int(round(part_frac * feature_dim)))] = 1.0
    G = rng.standard_normal((feature_dim, r)) * part[:, None]
    B_true, _ = np.linalg.qr(G)
    codes = rng.standard_normal((n_pairs, r))
    assets = []
    for i in range(n_pairs):
        u0 = rng.standard_normal(feature_dim)
        delta = B_true @ codes[i]
        if noise:
            delta = delta + noise * rng.standard_normal(feature_dim) * part
        assets.append(PairedAsset(i, u0, u0 + delta, part))
    return assets, B_true, codes
