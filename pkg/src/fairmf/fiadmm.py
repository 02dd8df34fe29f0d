"""Fair implicit ADMM (fiADMM).

Minimizes the implicit-feedback loss plus ``lambda_f / 2 * ||V s||^2`` subject
to ``s`` equal to the mean user factor. Each epoch runs four block updates:

1. exact item rows (same cost as the iALS item step, plus a shared rank-one term);
2. a linearized proximal user step: one gradient step on the smooth part,
   followed by an O(|U| d) closed-form proximal map of the consensus penalty;
3. a d x d solve for the auxiliary vector ``s``;
4. dual ascent on the scaled multiplier ``w``.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field, fields

import numpy as np
import scipy.linalg

from .factors import RegWeights, frequency_weights, gramian, init_factors
from .ials import ials_loss, observed_scores, solve_rows
from .interactions import SparseBinaryMatrix
from .params import HyperParams

_logger = logging.getLogger(__name__)


class DivergenceError(FloatingPointError):
    """An iterate became non-finite."""

    def __init__(self, epoch: int, variable: str):
        super().__init__(f"non-finite values in {variable} at epoch {epoch}")
        self.epoch = epoch
        self.variable = variable


@dataclass
class AdmmState:
    v: np.ndarray
    u: np.ndarray
    s: np.ndarray
    w: np.ndarray
    g_v: np.ndarray | None = None
    g_u: np.ndarray | None = None
    epoch: int = 0

    def copy(self) -> "AdmmState":
        cp = lambda x: None if x is None else x.copy()  # noqa: E731
        return AdmmState(self.v.copy(), self.u.copy(), self.s.copy(), self.w.copy(),
                         cp(self.g_v), cp(self.g_u), self.epoch)

    def refresh(self, deterministic: bool = False) -> "AdmmState":
        self.g_v = gramian(self.v, deterministic)
        self.g_u = gramian(self.u, deterministic)
        return self


@dataclass
class EpochTrace:
    """Per-epoch diagnostics; row 0 describes the initial iterate (residuals NaN)."""

    epoch: list[int] = field(default_factory=list)
    lagrangian: list[float] = field(default_factory=list)
    loss: list[float] = field(default_factory=list)
    fairness: list[float] = field(default_factory=list)
    res_v: list[float] = field(default_factory=list)
    res_u: list[float] = field(default_factory=list)
    res_s: list[float] = field(default_factory=list)
    res_w: list[float] = field(default_factory=list)
    constraint: list[float] = field(default_factory=list)
    v_norm2: list[float] = field(default_factory=list)
    u_norm2: list[float] = field(default_factory=list)
    s_norm2: list[float] = field(default_factory=list)

    def append(self, **row) -> None:
        for f in fields(self):
            getattr(self, f.name).append(row[f.name])

    def __len__(self) -> int:
        return len(self.epoch)

    def column(self, name: str) -> np.ndarray:
        return np.asarray(getattr(self, name), dtype=np.float64)

    def to_dict(self) -> dict:
        return {f.name: list(getattr(self, f.name)) for f in fields(self)}

    @classmethod
    def from_dict(cls, doc: dict) -> "EpochTrace":
        return cls(**{f.name: list(doc[f.name]) for f in fields(cls)})

    def to_csv(self) -> str:
        buf = io.StringIO()
        names = [f.name for f in fields(self)]
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(names)
        for k in range(len(self)):
            writer.writerow([repr(getattr(self, n)[k]) for n in names])
        return buf.getvalue()


def mean_user_vector(u: np.ndarray) -> np.ndarray:
    """``t = U^T 1 / |U|``."""
    return u.sum(axis=0) / u.shape[0]


def fairness_regulariser(u: np.ndarray, v: np.ndarray) -> float:
    """Half the squared norm of the mean predicted score of every item."""
    merit = v @ mean_user_vector(u)
    return 0.5 * float(merit @ merit)


def smooth_objective(m: SparseBinaryMatrix, u: np.ndarray, v: np.ndarray, s: np.ndarray, w: RegWeights,
                     hp: HyperParams, g_u=None, g_v=None) -> float:
    """The smooth part ``g(V, U, s)``: iALS loss plus ``lambda_f / 2 ||V s||^2``."""
    vs = v @ s
    return ials_loss(m, u, v, w, hp.alpha0, g_u, g_v) + 0.5 * hp.lambda_f * float(vs @ vs)


def augmented_lagrangian(m: SparseBinaryMatrix, st: AdmmState, w: RegWeights, hp: HyperParams) -> float:
    r = mean_user_vector(st.u) - st.s + st.w
    penalty = 0.5 * hp.rho * (float(r @ r) - float(st.w @ st.w))
    return smooth_objective(m, st.u, st.v, st.s, w, hp, st.g_u, st.g_v) + penalty


def update_v(m: SparseBinaryMatrix, st: AdmmState, w: RegWeights, hp: HyperParams) -> np.ndarray:
    """Exact item rows given ``U``, ``s``; ``st.g_u`` must be the Gramian of ``st.u``."""
    g_u = gramian(st.u) if st.g_u is None else st.g_u
    shared = hp.alpha0 * g_u + hp.lambda_f * np.outer(st.s, st.s)
    return solve_rows(m.csc.indptr, m.csc.indices, st.u, shared, w.lambda_v)


def user_gradient(m: SparseBinaryMatrix, u: np.ndarray, v: np.ndarray, g_v: np.ndarray, lambda_u: np.ndarray,
                  alpha0: float) -> np.ndarray:
    """Row-wise ``(sum_j r_ij v_j v_j^T + alpha0 G_V + lambda_i I) u_i - sum_j r_ij v_j``.

    The observed-item Gramian is never formed: its product with ``u_i`` is
    ``sum_j r_ij <u_i, v_j> v_j``, which costs O(nnz d) overall.
    """
    csr = m.csr
    p = observed_scores(csr.indptr, csr.indices, u, v)
    resid = csr.copy()
    resid.data = p - 1.0
    return np.asarray(resid @ v) + alpha0 * (u @ g_v) + lambda_u[:, None] * u


def item_gradient(m: SparseBinaryMatrix, u: np.ndarray, v: np.ndarray, s: np.ndarray, g_u: np.ndarray,
                  lambda_v: np.ndarray, alpha0: float, lambda_f: float) -> np.ndarray:
    """Gradient of the smooth part with respect to V (also the V-gradient of the Lagrangian)."""
    csc = m.csc
    p = observed_scores(csc.indptr, csc.indices, v, u)
    resid = csc.T.tocsr(copy=True)
    resid.data = p - 1.0
    return np.asarray(resid @ u) + alpha0 * (v @ g_u) + lambda_v[:, None] * v + lambda_f * np.outer(v @ s, s)


def grad_u(m: SparseBinaryMatrix, st: AdmmState, w: RegWeights, hp: HyperParams) -> np.ndarray:
    g_v = gramian(st.v) if st.g_v is None else st.g_v
    return user_gradient(m, st.u, st.v, g_v, w.lambda_u, hp.alpha0)


def prox_coefficient(n_users: int, rho: float, gamma: float) -> float:
    """``rho / (n^2 (rho / n + 1 / gamma))`` written so that ``gamma = 0`` is defined."""
    return rho * gamma / (n_users * (rho * gamma + n_users))


def prox_map(u_tilde: np.ndarray, s: np.ndarray, w: np.ndarray, rho: float, gamma: float) -> np.ndarray:
    """Minimizer of ``rho/2 ||mean(U) - s + w||^2 + 1/(2 gamma) ||U - u_tilde||_F^2``.

    Uses the Sherman-Morrison inverse of ``rho/n^2 11^T + I/gamma``: shift
    every row by ``rho gamma / n (s - w)``, sum the shifted rows, and subtract
    ``c`` times that sum from every row. The shift and the part of the
    correction it induces cancel to ``c n (s - w)``, so they are folded
    together; this avoids losing digits to cancellation when ``rho gamma``
    is large.
    """
    if rho < 0 or gamma < 0:
        raise ValueError("rho and gamma must be non-negative")
    n = u_tilde.shape[0]
    c = prox_coefficient(n, rho, gamma)
    total = u_tilde.sum(axis=0)
    return u_tilde + c * (n * (s - w) - total)


def proximal_user_step(m: SparseBinaryMatrix, u: np.ndarray, v: np.ndarray, g_v: np.ndarray, s: np.ndarray,
                       w_dual: np.ndarray, lambda_u: np.ndarray, alpha0: float, rho: float,
                       gamma: float) -> np.ndarray:
    """One forward (gradient) plus backward (prox) step on the user factors."""
    u_tilde = u - gamma * user_gradient(m, u, v, g_v, lambda_u, alpha0)
    return prox_map(u_tilde, s, w_dual, rho, gamma)


def update_u(m: SparseBinaryMatrix, st: AdmmState, w: RegWeights, hp: HyperParams) -> np.ndarray:
    g_v = gramian(st.v) if st.g_v is None else st.g_v
    return proximal_user_step(m, st.u, st.v, g_v, st.s, st.w, w.lambda_u, hp.alpha0, hp.rho, hp.gamma)


def update_s(st: AdmmState, hp: HyperParams, t: np.ndarray | None = None) -> np.ndarray:
    """``s = rho (lambda_f G_V + rho I)^-1 (t + w)``.

    The ``+ w`` sign is what the first-order condition of the s-subproblem
    gives. With ``rho = 0`` the penalty vanishes and ``s`` is set to the
    limiting value (``0`` when ``lambda_f > 0``).
    """
    t = mean_user_vector(st.u) if t is None else t
    rhs = t + st.w
    if hp.lambda_f == 0.0:
        return rhs.copy()
    if hp.rho == 0.0:
        return np.zeros_like(rhs)
    g_v = gramian(st.v) if st.g_v is None else st.g_v
    a = hp.lambda_f * g_v + hp.rho * np.eye(g_v.shape[0])
    return hp.rho * scipy.linalg.cho_solve(scipy.linalg.cho_factor(a), rhs)


def update_w(st: AdmmState, t: np.ndarray | None = None) -> np.ndarray:
    t = mean_user_vector(st.u) if t is None else t
    return st.w + (t - st.s)


def initial_state(m: SparseBinaryMatrix, hp: HyperParams, v: np.ndarray | None = None, rng=None) -> AdmmState:
    """U (and V unless given) from ``N(0, sigma/sqrt(d))``, ``s`` = mean user, ``w = 0``."""
    rng = np.random.default_rng(hp.seed if rng is None else rng)
    u = init_factors(m.n_users, hp.d, hp.sigma, rng)
    if v is None:
        v = init_factors(m.n_items, hp.d, hp.sigma, rng)
    return AdmmState(v=v, u=u, s=mean_user_vector(u), w=np.zeros(hp.d))


def _check(x: np.ndarray, epoch: int, name: str) -> None:
    if not np.isfinite(x).all():
        raise DivergenceError(epoch, name)


def _trace_row(m, st, w, hp, epoch, dv, du, ds, dw, t) -> dict:
    c = t - st.s
    return dict(
        epoch=epoch,
        lagrangian=augmented_lagrangian(m, st, w, hp),
        loss=ials_loss(m, st.u, st.v, w, hp.alpha0, st.g_u, st.g_v),
        fairness=fairness_regulariser(st.u, st.v),
        res_v=dv, res_u=du, res_s=ds, res_w=dw,
        constraint=float(np.linalg.norm(c)),
        v_norm2=float(np.sum(st.v * st.v)),
        u_norm2=float(np.sum(st.u * st.u)),
        s_norm2=float(st.s @ st.s),
    )


def admm_epoch(m: SparseBinaryMatrix, st: AdmmState, w: RegWeights, hp: HyperParams,
               update_items: bool = True, deterministic: bool = False) -> tuple[AdmmState, dict]:
    """Run one epoch from ``st`` (whose Gramians must be fresh) and return the new state.

    Returns the new state with fresh Gramians and the residual norms of the
    four blocks. ``update_items=False`` freezes V (fold-in).
    """
    epoch = st.epoch + 1
    if update_items:
        v = update_v(m, st, w, hp)
        _check(v, epoch, "V")
        g_v = gramian(v, deterministic)
    else:
        v, g_v = st.v, st.g_v
    u = proximal_user_step(m, st.u, v, g_v, st.s, st.w, w.lambda_u, hp.alpha0, hp.rho, hp.gamma)
    _check(u, epoch, "U")
    t = mean_user_vector(u)
    s = update_s(AdmmState(v, u, st.s, st.w, g_v=g_v), hp, t)
    _check(s, epoch, "s")
    dual_step = t - s
    w_new = st.w + dual_step
    _check(w_new, epoch, "w")
    new = AdmmState(v, u, s, w_new, g_v=g_v, g_u=gramian(u, deterministic), epoch=epoch)
    residuals = dict(
        dv=float(np.linalg.norm(v - st.v)),
        du=float(np.linalg.norm(u - st.u)),
        ds=float(np.linalg.norm(s - st.s)),
        # identical to ||t - s||, the constraint violation
        dw=float(np.linalg.norm(dual_step)),
        t=t,
    )
    return new, residuals


def run_admm(m: SparseBinaryMatrix, st: AdmmState, w: RegWeights, hp: HyperParams, epochs: int,
             update_items: bool = True, deterministic: bool = False, keep_history: bool = False,
             callback=None) -> tuple[AdmmState, EpochTrace, list[AdmmState]]:
    st.refresh(deterministic)
    for name in ("V", "U", "s", "w"):
        _check(getattr(st, name.lower()), st.epoch, name)
    trace = EpochTrace()
    nan = float("nan")
    trace.append(**_trace_row(m, st, w, hp, st.epoch, nan, nan, nan, nan, mean_user_vector(st.u)))
    history = [st.copy()] if keep_history else []
    for _ in range(epochs):
        st, r = admm_epoch(m, st, w, hp, update_items, deterministic)
        row = _trace_row(m, st, w, hp, st.epoch, r["dv"], r["du"], r["ds"], r["dw"], r["t"])
        trace.append(**row)
        if keep_history:
            history.append(st.copy())
        if callback is not None:
            callback(st, row)
        _logger.debug("fiadmm epoch %d L_rho %.10g", st.epoch, row["lagrangian"])
    return st, trace, history


def train_fiadmm(m: SparseBinaryMatrix, hp: HyperParams, weights: RegWeights | None = None,
                 deterministic: bool = False, keep_history: bool = False, callback=None):
    """Train for ``hp.t_train`` epochs.

    Returns ``(state, trace)``, or ``(state, trace, history)`` with
    ``keep_history=True`` where ``history[k]`` is the iterate after epoch k.

    Raises
    ------
    DivergenceError
        When any block becomes non-finite; carries the epoch and block name.
    """
    w = weights if weights is not None else frequency_weights(m, hp.lambda2, hp.eta, hp.alpha0)
    st = initial_state(m, hp)
    st, trace, history = run_admm(m, st, w, hp, hp.t_train, True, deterministic, keep_history, callback)
    if keep_history:
        return st, trace, history
    return st, trace


def fold_in(v: np.ndarray, m_holdout: SparseBinaryMatrix, hp: HyperParams, deterministic: bool = False,
            epochs: int | None = None, return_trace: bool = False):
    """Fit user factors for unseen users with V (and its Gramian) frozen.

    Runs ``hp.t_fold`` epochs of the U, s and w updates from a fresh
    initialization, using weights computed from the fold-in interactions.
    """
    if v.shape[0] != m_holdout.n_items:
        raise ValueError(f"V has {v.shape[0]} rows but the holdout matrix has {m_holdout.n_items} items")
    w = frequency_weights(m_holdout, hp.lambda2, hp.eta, hp.alpha0)
    rng = np.random.default_rng(hp.seed)
    st = initial_state(m_holdout, hp, v=v, rng=rng)
    n_epochs = hp.t_fold if epochs is None else epochs
    st, trace, _ = run_admm(m_holdout, st, w, hp, n_epochs, update_items=False, deterministic=deterministic)
    return (st.u, trace) if return_trace else st.u
