"""Implicit alternating least squares with the Gramian trick."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .factors import RegWeights, check_finite, frequency_weights, gramian, init_factors
from .interactions import SparseBinaryMatrix
from .params import HyperParams

_logger = logging.getLogger(__name__)

# float budget for the per-nonzero outer products materialized at once
_OUTER_BUDGET = 1 << 22
_JITTER = 1e-10


class SolverError(ArithmeticError):
    """A row system could not be factorized even after diagonal jitter."""


def _cholesky_one(a: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        d = a.shape[0]
        bumped = a + (_JITTER * np.trace(a) / d) * np.eye(d)
        try:
            return np.linalg.cholesky(bumped)
        except np.linalg.LinAlgError:
            raise SolverError("row system is not positive definite") from None


def spd_solve(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve a stack of SPD systems ``a[n] x[n] = b[n]`` through Cholesky factors.

    A matrix whose factorization fails is retried once with
    ``1e-10 * trace / d`` added to its diagonal.
    """
    try:
        chol = np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        chol = np.stack([_cholesky_one(x) for x in a]) if a.ndim == 3 else _cholesky_one(a)
    y = np.linalg.solve(chol, b[..., None])
    return np.linalg.solve(np.swapaxes(chol, -1, -2), y)[..., 0]


def observed_scores(indptr: np.ndarray, indices: np.ndarray, this: np.ndarray, other: np.ndarray,
                    chunk: int = 1 << 20) -> np.ndarray:
    """``<this_r, other_c>`` for every stored (r, c), in storage order."""
    rows = np.repeat(np.arange(len(indptr) - 1), np.diff(indptr))
    out = np.empty(indices.size)
    for start in range(0, indices.size, chunk):
        sl = slice(start, start + chunk)
        out[sl] = np.einsum("nd,nd->n", this[rows[sl]], other[indices[sl]])
    return out


def solve_rows(indptr: np.ndarray, indices: np.ndarray, other: np.ndarray, shared: np.ndarray,
               diag: np.ndarray, max_nnz: int | None = None) -> np.ndarray:
    """Closed-form row updates ``x_r = (sum_c o_c o_c^T + shared + diag_r I)^-1 sum_c o_c``.

    ``indptr``/``indices`` give the nonzero columns of each row; ``other`` is the
    fixed factor matrix. Rows are processed in blocks so that the per-nonzero
    outer products stay within a fixed memory budget (``max_nnz`` nonzeros per
    block, derived from ``d`` when not given).
    """
    n_rows = len(indptr) - 1
    d = other.shape[1]
    out = np.zeros((n_rows, d))
    eye = np.eye(d)
    if max_nnz is None:
        max_nnz = max(1, _OUTER_BUDGET // (d * d))
    start = 0
    while start < n_rows:
        stop = int(np.searchsorted(indptr, indptr[start] + max_nnz, side="right")) - 1
        stop = min(max(stop, start + 1), start + max_nnz, n_rows)
        lo, hi = indptr[start], indptr[stop]
        x = other[indices[lo:hi]]
        seg = sp.csr_matrix((np.ones(hi - lo), np.arange(hi - lo), indptr[start:stop + 1] - lo),
                            shape=(stop - start, hi - lo))
        outer = (x[:, :, None] * x[:, None, :]).reshape(hi - lo, d * d)
        a = np.asarray(seg @ outer).reshape(-1, d, d)
        a += shared
        a += diag[start:stop, None, None] * eye
        b = np.asarray(seg @ x)
        out[start:stop] = spd_solve(a, b)
        start = stop
    return out


def ials_loss(m: SparseBinaryMatrix, u: np.ndarray, v: np.ndarray, w: RegWeights, alpha0: float,
              g_u: np.ndarray | None = None, g_v: np.ndarray | None = None) -> float:
    """Weighted implicit-feedback loss.

    Sum of the squared error on observed entries, the ``alpha0``-weighted
    squared norm of all scores ``U V^T`` (evaluated as ``trace(G_U G_V)``) and
    the per-row L2 terms, each halved.
    """
    g_u = gramian(u) if g_u is None else g_u
    g_v = gramian(v) if g_v is None else g_v
    p = observed_scores(m.csr.indptr, m.csr.indices, u, v)
    data = 0.5 * np.sum((1.0 - p) ** 2)
    implicit = 0.5 * alpha0 * np.sum(g_u * g_v)
    reg = 0.5 * (np.dot(w.lambda_u, np.einsum("ij,ij->i", u, u)) + np.dot(w.lambda_v, np.einsum("ij,ij->i", v, v)))
    return float(data + implicit + reg)


def update_users_ials(m: SparseBinaryMatrix, v: np.ndarray, w: RegWeights, alpha0: float,
                      g_v: np.ndarray | None = None) -> np.ndarray:
    g_v = gramian(v) if g_v is None else g_v
    return solve_rows(m.csr.indptr, m.csr.indices, v, alpha0 * g_v, w.lambda_u)


def update_items_ials(m: SparseBinaryMatrix, u: np.ndarray, w: RegWeights, alpha0: float,
                      g_u: np.ndarray | None = None) -> np.ndarray:
    g_u = gramian(u) if g_u is None else g_u
    return solve_rows(m.csc.indptr, m.csc.indices, u, alpha0 * g_u, w.lambda_v)


@dataclass
class IalsModel:
    u: np.ndarray
    v: np.ndarray
    hp: HyperParams
    weights: RegWeights

    def __post_init__(self):
        if self.u.shape[1] != self.hp.d or self.v.shape[1] != self.hp.d:
            raise ValueError(f"factor dims {self.u.shape[1]}/{self.v.shape[1]} != d={self.hp.d}")


def train_ials(m: SparseBinaryMatrix, hp: HyperParams, weights: RegWeights | None = None,
               deterministic: bool = False) -> tuple[IalsModel, np.ndarray]:
    """Alternate exact user and item updates for ``hp.t_train`` epochs.

    Returns the model and a loss trace of length ``t_train + 1`` whose first
    entry is the loss at initialization.
    """
    w = weights if weights is not None else frequency_weights(m, hp.lambda2, hp.eta, hp.alpha0)
    rng = np.random.default_rng(hp.seed)
    u = init_factors(m.n_users, hp.d, hp.sigma, rng)
    v = init_factors(m.n_items, hp.d, hp.sigma, rng)
    trace = [ials_loss(m, u, v, w, hp.alpha0)]
    for epoch in range(1, hp.t_train + 1):
        u = check_finite(update_users_ials(m, v, w, hp.alpha0, gramian(v, deterministic)), "U")
        g_u = gramian(u, deterministic)
        v = check_finite(update_items_ials(m, u, w, hp.alpha0, g_u), "V")
        trace.append(ials_loss(m, u, v, w, hp.alpha0, g_u=g_u, g_v=gramian(v, deterministic)))
        _logger.debug("ials epoch %d loss %.6g", epoch, trace[-1])
    return IalsModel(u, v, hp, w), np.asarray(trace)


def fold_in_ials(v: np.ndarray, m_holdout: SparseBinaryMatrix, hp: HyperParams) -> np.ndarray:
    """Closed-form user factors for unseen users against fixed item factors."""
    w = frequency_weights(m_holdout, hp.lambda2, hp.eta, hp.alpha0)
    return update_users_ials(m_holdout, v, w, hp.alpha0)
