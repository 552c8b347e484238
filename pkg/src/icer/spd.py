"""Dense small-matrix utilities for symmetric positive (semi-)definite matrices.

Everything here is double precision and sized for edit-code dimensions
(a few dozen at most), so factorizations are recomputed freely and cached
on the immutable :class:`SpdMatrix` wrapper.
"""

from __future__ import annotations

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy import linalg as sla

from .errors import DimensionMismatch, NotPositiveDefinite

JITTER_START = 1e-12
JITTER_MAX = 1e-6


class SpdMatrix:
    """Immutable symmetric matrix with a lazily cached Cholesky factor.

    The input is symmetrized as ``(A + A.T) / 2`` on construction. If the
    plain factorization fails, a diagonal jitter of ``1e-12 * trace / dim``
    is added and escalated by 10x up to ``1e-6 * trace / dim``; the amount
    actually used is exposed as :attr:`jitter`.
    """

    __slots__ = ("_entries", "_factor", "_jitter", "asymmetry")

    def __init__(self, entries: ArrayLike):
        a = np.array(entries, dtype=np.float64)
        if a.ndim == 0:
            a = a.reshape(1, 1)
        if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] < 1:
            raise DimensionMismatch(f"expected a non-empty square matrix, got shape {a.shape}")
        if not np.all(np.isfinite(a)):
            raise NotPositiveDefinite("matrix has non-finite entries")
        self.asymmetry = float(np.max(np.abs(a - a.T)))
        a = 0.5 * (a + a.T)
        a.setflags(write=False)
        self._entries = a
        self._factor: NDArray | None = None
        self._jitter = 0.0

    @classmethod
    def coerce(cls, m: "SpdMatrix | ArrayLike") -> "SpdMatrix":
        return m if isinstance(m, SpdMatrix) else cls(m)

    @property
    def entries(self) -> NDArray:
        return self._entries

    @property
    def dim(self) -> int:
        return self._entries.shape[0]

    @property
    def factor(self) -> NDArray:
        if self._factor is None:
            self._factor, self._jitter = _factorize(self._entries)
            self._factor.setflags(write=False)
        return self._factor

    @property
    def jitter(self) -> float:
        self.factor
        return self._jitter

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self._entries, dtype=dtype)

    def __add__(self, other):
        return SpdMatrix(self._entries + np.asarray(other, dtype=np.float64))

    __radd__ = __add__

    def __mul__(self, c: float):
        return SpdMatrix(float(c) * self._entries)

    __rmul__ = __mul__

    def __repr__(self) -> str:
        return f"SpdMatrix(dim={self.dim})"


def _factorize(a: NDArray) -> tuple[NDArray, float]:
    try:
        return sla.cholesky(a, lower=True, check_finite=False), 0.0
    except sla.LinAlgError:
        pass
    n = a.shape[0]
    scale = float(np.trace(a)) / n
    if not scale > 0:
        scale = 1.0
    eye = np.eye(n)
    level = JITTER_START
    while level <= JITTER_MAX * (1 + 1e-9):
        jitter = level * scale
        try:
            return sla.cholesky(a + jitter * eye, lower=True, check_finite=False), jitter
        except sla.LinAlgError:
            level *= 10.0
    raise NotPositiveDefinite(
        f"Cholesky failed even with jitter {JITTER_MAX:g} * trace/dim; "
        f"min eigenvalue {np.linalg.eigvalsh(a)[0]:.3e}"
    )


def cholesky(m: SpdMatrix | ArrayLike) -> NDArray:
    """Lower-triangular ``L`` with ``L @ L.T == m`` (plus :attr:`SpdMatrix.jitter`)."""
    return SpdMatrix.coerce(m).factor


def logdet(m: SpdMatrix | ArrayLike) -> float:
    L = cholesky(m)
    return 2.0 * float(np.sum(np.log(np.diag(L))))


def solve(m: SpdMatrix | ArrayLike, rhs: ArrayLike) -> NDArray:
    m = SpdMatrix.coerce(m)
    b = np.asarray(rhs, dtype=np.float64)
    if b.shape[0] != m.dim:
        raise DimensionMismatch(f"rhs has leading dim {b.shape[0]}, matrix dim {m.dim}")
    return sla.cho_solve((m.factor, True), b, check_finite=False)


def trace_solve_product(s: SpdMatrix | ArrayLike, h: SpdMatrix | ArrayLike) -> float:
    """``Tr(S^{-1} H)``, the directional derivative of ``logdet`` along ``H``."""
    s = SpdMatrix.coerce(s)
    h = np.asarray(h, dtype=np.float64)
    if h.shape != (s.dim, s.dim):
        raise DimensionMismatch(f"H has shape {h.shape}, S dim {s.dim}")
    return float(np.trace(solve(s, h)))


def inverse(m: SpdMatrix | ArrayLike) -> NDArray:
    m = SpdMatrix.coerce(m)
    inv = solve(m, np.eye(m.dim))
    return 0.5 * (inv + inv.T)


def eigen_extremes(m: SpdMatrix | ArrayLike) -> tuple[float, float]:
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionMismatch(f"expected a square matrix, got shape {a.shape}")
    ev = sla.eigh(0.5 * (a + a.T), eigvals_only=True, check_finite=False)
    return float(ev[0]), float(ev[-1])
