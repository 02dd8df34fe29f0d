"""Numerical checks of the fiADMM convergence guarantee.

The theorem assumes a priori bounds ``||V||_F^2 <= C_V``, ``||U||_F^2 <= C_U``
and ``||s||^2 <= C_s``; here they are replaced by running maxima over an
observed trajectory. Every inequality is tested with an absolute slack of
``SLACK``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .factors import RegWeights, frequency_weights, gramian
from .fiadmm import (
    AdmmState,
    EpochTrace,
    augmented_lagrangian,
    item_gradient,
    mean_user_vector,
    smooth_objective,
    train_fiadmm,
    user_gradient,
)
from .interactions import SparseBinaryMatrix
from .params import HyperParams

SLACK = 1e-8


def rho_bound(lambda_f: float, c_v: float, c_s: float, lambda_v_min: float) -> float:
    return max(24.0 * lambda_f ** 2 * c_v * c_s / lambda_v_min,
               0.5 + math.sqrt(0.25 + 6.0 * lambda_f ** 2 * c_v ** 2))


def gamma_bound(c_v: float, lambda_u_max: float, alpha0: float, n_items: int) -> float:
    return 1.0 / (math.sqrt(n_items) * ((1.0 + alpha0) * c_v + lambda_u_max) + 1.0)


@dataclass
class TheoremConstants:
    c_v: float
    c_u: float
    c_s: float
    lambda_u_max: float
    lambda_v_min: float
    rho_bound: float
    gamma_bound: float

    @classmethod
    def measure(cls, v_norm2, u_norm2, s_norm2, w: RegWeights, hp: HyperParams, n_items: int) -> "TheoremConstants":
        c_v, c_u, c_s = float(np.max(v_norm2)), float(np.max(u_norm2)), float(np.max(s_norm2))
        lu, lv = float(np.max(w.lambda_u)), float(np.min(w.lambda_v))
        return cls(c_v, c_u, c_s, lu, lv, rho_bound(hp.lambda_f, c_v, c_s, lv), gamma_bound(c_v, lu, hp.alpha0, n_items))


def theorem_conditions(trace: EpochTrace, w: RegWeights, hp: HyperParams, n_items: int,
                       history: list[AdmmState] | None = None) -> tuple[TheoremConstants, tuple[bool, bool]]:
    """Measure the bound constants over a run and test the configured rho and gamma.

    The norms come from ``history`` when given, otherwise from the trace.
    """
    if history:
        vn = [float(np.sum(st.v ** 2)) for st in history]
        un = [float(np.sum(st.u ** 2)) for st in history]
        sn = [float(st.s @ st.s) for st in history]
    else:
        if len(trace) == 0:
            raise ValueError("trace is empty")
        vn, un, sn = trace.v_norm2, trace.u_norm2, trace.s_norm2
    c = TheoremConstants.measure(vn, un, sn, w, hp, n_items)
    return c, (hp.rho >= c.rho_bound, hp.gamma <= c.gamma_bound)


@dataclass
class InequalityCheck:
    """``lhs <= rhs`` up to ``SLACK``; ``margin = rhs - lhs``."""

    name: str
    lhs: float
    rhs: float
    epoch: int = -1

    @property
    def margin(self) -> float:
        return self.rhs - self.lhs

    @property
    def ok(self) -> bool:
        return self.lhs <= self.rhs + SLACK

    def to_dict(self) -> dict:
        return {"name": self.name, "epoch": self.epoch, "lhs": self.lhs, "rhs": self.rhs,
                "margin": self.margin, "ok": self.ok}


def _lag(m, v, u, s, w_dual, w, hp) -> float:
    return augmented_lagrangian(m, AdmmState(v=v, u=u, s=s, w=w_dual), w, hp)


def check_descent_lemmas(m: SparseBinaryMatrix, state_k: AdmmState, state_k1: AdmmState, w: RegWeights,
                         hp: HyperParams, consts: TheoremConstants) -> list[InequalityCheck]:
    """Both sides of the per-block descent bounds for one epoch ``k -> k+1``.

    * V+U block: ``dL <= (sqrt|U|((1+a0)C_V + lu_max) - 1/gamma)/2 |dU|^2 - lv_min/2 |dV|^2``
    * s block: ``dL <= -rho/2 |ds|^2``
    * w block: ``dL <= 3 lf^2 C_V^2/rho |ds|^2 + 6 lf^2 C_V C_s/rho |dV|^2``; only
      from the second epoch on, because it uses ``w^k = grad_s g(V^k, U^k, s^k) / rho``,
      which ``w^0 = 0`` does not satisfy
    * lower bound at k+1: ``(rho - lf C_V)/2 |t - s|^2 <= L_rho``, when ``rho >= lf C_V``
    """
    k0, k1 = state_k, state_k1
    n_users = k0.u.shape[0]
    epoch = k1.epoch
    du2 = float(np.sum((k1.u - k0.u) ** 2))
    dv2 = float(np.sum((k1.v - k0.v) ** 2))
    ds2 = float(np.sum((k1.s - k0.s) ** 2))

    l0 = _lag(m, k0.v, k0.u, k0.s, k0.w, w, hp)
    l1 = _lag(m, k1.v, k1.u, k0.s, k0.w, w, hp)
    l2 = _lag(m, k1.v, k1.u, k1.s, k0.w, w, hp)
    l3 = _lag(m, k1.v, k1.u, k1.s, k1.w, w, hp)
    c = consts
    lf = hp.lambda_f

    smooth_u = math.sqrt(n_users) * ((1.0 + hp.alpha0) * c.c_v + c.lambda_u_max)
    checks = [
        InequalityCheck("vu_descent", l1 - l0, 0.5 * (smooth_u - 1.0 / hp.gamma) * du2 - 0.5 * c.lambda_v_min * dv2, epoch),
        InequalityCheck("s_descent", l2 - l1, -0.5 * hp.rho * ds2, epoch),
    ]
    if k0.epoch >= 1 and hp.rho > 0:
        rhs = (3.0 * lf ** 2 * c.c_v ** 2 * ds2 + 6.0 * lf ** 2 * c.c_v * c.c_s * dv2) / hp.rho
        checks.append(InequalityCheck("w_ascent", l3 - l2, rhs, epoch))
    if hp.rho >= lf * c.c_v:
        gap = mean_user_vector(k1.u) - k1.s
        checks.append(InequalityCheck("lagrangian_lower_bound", 0.5 * (hp.rho - lf * c.c_v) * float(gap @ gap), l3, epoch))
    return checks


def _s_gradient(v: np.ndarray, s: np.ndarray, lambda_f: float) -> np.ndarray:
    return lambda_f * (v.T @ (v @ s))


def check_smoothness(samples: int = 1000, n_users: int = 8, n_items: int = 6, d: int = 3, seed: int = 0,
                     alpha0: float = 0.1, lambda_f: float = 1.0, density: float = 0.4,
                     scale: float = 1.0) -> list[InequalityCheck]:
    """Random-draw check of the four Lipschitz-type bounds on the smooth part's gradients.

    Each draw samples a binary matrix, per-row weights in ``[0.1, 2]`` and
    factor pairs with ``N(0, scale^2)`` entries, then evaluates

    1. ``|grad_V g(V) - grad_V g(V')| <= sqrt|V| ((1+a0)|U|^2 + |s|^2 + lv_max) |V - V'|``
    2. ``|grad_U g(U) - grad_U g(U')| <= sqrt|U| ((1+a0)|V|^2 + lu_max) |U - U'|``
    3. ``|grad_s g(s) - grad_s g(s')| <= lf |V|^2 |s - s'|``
    4. ``|grad_s g(V) - grad_s g(V')| <= lf (|V| + |V'|) |s| |V - V'|``
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    rng = np.random.default_rng(seed)
    out = []
    fro = np.linalg.norm
    for n in range(samples):
        m = SparseBinaryMatrix.from_dense(rng.random((n_users, n_items)) < density)
        lu = rng.uniform(0.1, 2.0, n_users)
        lv = rng.uniform(0.1, 2.0, n_items)
        v, v2 = rng.normal(0, scale, (2, n_items, d))
        u, u2 = rng.normal(0, scale, (2, n_users, d))
        s, s2 = rng.normal(0, scale, (2, d))
        g_u = gramian(u)

        gv = item_gradient(m, u, v, s, g_u, lv, alpha0, lambda_f)
        gv2 = item_gradient(m, u, v2, s, g_u, lv, alpha0, lambda_f)
        rhs1 = math.sqrt(n_items) * ((1 + alpha0) * fro(u) ** 2 + s @ s + lv.max()) * fro(v - v2)
        out.append(InequalityCheck("grad_v_lipschitz", fro(gv - gv2), rhs1, n))

        g_v = gramian(v)
        gu = user_gradient(m, u, v, g_v, lu, alpha0)
        gu2 = user_gradient(m, u2, v, g_v, lu, alpha0)
        rhs2 = math.sqrt(n_users) * ((1 + alpha0) * fro(v) ** 2 + lu.max()) * fro(u - u2)
        out.append(InequalityCheck("grad_u_lipschitz", fro(gu - gu2), rhs2, n))

        lhs3 = fro(_s_gradient(v, s, lambda_f) - _s_gradient(v, s2, lambda_f))
        out.append(InequalityCheck("grad_s_lipschitz_s", lhs3, lambda_f * fro(v) ** 2 * fro(s - s2), n))

        lhs4 = fro(_s_gradient(v, s, lambda_f) - _s_gradient(v2, s, lambda_f))
        rhs4 = lambda_f * (fro(v) + fro(v2)) * fro(s) * fro(v - v2)
        out.append(InequalityCheck("grad_s_lipschitz_v", lhs4, rhs4, n))
    return out


@dataclass
class FiniteDiffReport:
    max_rel_error: float
    per_block: dict[str, float] = field(default_factory=dict)
    n_coords: int = 0


def _rel_err(fd: float, an: float) -> float:
    return abs(fd - an) / max(abs(fd), abs(an), 1.0)


def finite_diff_check(m: SparseBinaryMatrix, state: AdmmState, w: RegWeights, hp: HyperParams,
                      eps: float = 1e-5, n_coords: int = 120, seed: int = 0) -> FiniteDiffReport:
    """Central differences against the analytic gradients at random coordinates.

    Checks ``grad_U g`` and the Lagrangian's V-, U- and s-gradients. The error
    is ``|fd - an| / max(|fd|, |an|, 1)``.
    """
    if not 0 < eps <= 1e-2:
        raise ValueError("eps must be in (0, 1e-2]")
    rng = np.random.default_rng(seed)
    n_users = state.u.shape[0]
    g_v, g_u = gramian(state.v), gramian(state.u)
    t = mean_user_vector(state.u)
    an = {
        "g/U": user_gradient(m, state.u, state.v, g_v, w.lambda_u, hp.alpha0),
        "L/V": item_gradient(m, state.u, state.v, state.s, g_u, w.lambda_v, hp.alpha0, hp.lambda_f),
        "L/s": hp.lambda_f * (g_v @ state.s) - hp.rho * (t - state.s + state.w),
    }
    an["L/U"] = an["g/U"] + (hp.rho / n_users) * (t - state.s + state.w)

    def g_of(u):
        return smooth_objective(m, u, state.v, state.s, w, hp)

    def lag(**kw):
        parts = dict(v=state.v, u=state.u, s=state.s, w=state.w)
        parts.update(kw)
        return augmented_lagrangian(m, AdmmState(**parts), w, hp)

    blocks = {
        "g/U": (state.u, lambda x: g_of(x)),
        "L/U": (state.u, lambda x: lag(u=x)),
        "L/V": (state.v, lambda x: lag(v=x)),
        "L/s": (state.s, lambda x: lag(s=x)),
    }
    per_block = {}
    per = max(1, math.ceil(n_coords / len(blocks)))
    total = 0
    for name, (base, f) in blocks.items():
        worst = 0.0
        for _ in range(per):
            idx = tuple(int(rng.integers(n)) for n in base.shape)
            plus, minus = base.copy(), base.copy()
            plus[idx] += eps
            minus[idx] -= eps
            fd = (f(plus) - f(minus)) / (2 * eps)
            worst = max(worst, _rel_err(fd, float(an[name][idx])))
            total += 1
        per_block[name] = worst
    return FiniteDiffReport(max(per_block.values()), per_block, total)


@dataclass
class DiagnosticsReport:
    constants: TheoremConstants
    conditions: tuple[bool, bool]
    monotone_violations: list[int]
    lemma_checks: list[InequalityCheck]
    dual_identity_max: float
    final_residuals: dict[str, float]
    residual_tol: float = 1e-6

    @property
    def lemma_violations(self) -> list[InequalityCheck]:
        return [c for c in self.lemma_checks if not c.ok]

    @property
    def converged(self) -> bool:
        return all(r < self.residual_tol for r in self.final_residuals.values())

    @property
    def violations(self) -> int:
        return len(self.monotone_violations) + len(self.lemma_violations)

    def to_dict(self) -> dict:
        return {
            "constants": asdict(self.constants),
            "conditions": {"rho_ok": self.conditions[0], "gamma_ok": self.conditions[1]},
            "monotone_violations": self.monotone_violations,
            "lemma_checks": [c.to_dict() for c in self.lemma_checks],
            "lemma_violations": len(self.lemma_violations),
            "dual_identity_max": self.dual_identity_max,
            "final_residuals": self.final_residuals,
            "residual_tol": self.residual_tol,
            "converged": self.converged,
            "violations": self.violations,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def monotone_violations(trace: EpochTrace, start: int = 0) -> list[int]:
    """Epochs ``k > start`` where ``L_rho`` rose by more than ``SLACK`` over epoch ``k - 1``.

    The default covers the whole trace. The per-block bounds only guarantee
    descent once the dual identity holds (from epoch 1), so ``start=1`` gives
    the strictly provable version.
    """
    lag = trace.column("lagrangian")
    ep = trace.epoch
    return [int(ep[i]) for i in range(1, len(lag)) if ep[i - 1] >= start and lag[i] > lag[i - 1] + SLACK]


def check_trajectory(m: SparseBinaryMatrix, trace: EpochTrace, w: RegWeights, hp: HyperParams,
                     history: list[AdmmState] | None = None) -> DiagnosticsReport:
    """All trace-level checks, plus per-epoch lemma checks when ``history`` is given."""
    consts, cond = theorem_conditions(trace, w, hp, m.n_items, history)
    lemmas: list[InequalityCheck] = []
    if history:
        for a, b in zip(history[:-1], history[1:]):
            lemmas.extend(check_descent_lemmas(m, a, b, w, hp, consts))
    res_w = trace.column("res_w")[1:]
    cons = trace.column("constraint")[1:]
    dual = float(np.max(np.abs(res_w - cons))) if res_w.size else 0.0
    final = {k: float(trace.column(k)[-1]) for k in ("res_v", "res_u", "res_s", "res_w")} if len(trace) > 1 else {}
    return DiagnosticsReport(consts, cond, monotone_violations(trace), lemmas, dual, final)


def theorem_regime(m: SparseBinaryMatrix, base: HyperParams, pilot_epochs: int = 100,
                   rho_factor: float = 1.5, gamma_factor: float = 0.9) -> HyperParams:
    """Pick ``rho`` and ``gamma`` inside the theorem's bounds from a pilot run.

    The pilot runs ``pilot_epochs`` with ``base`` settings; its measured
    constants are inflated by the two factors. The rerun must be checked
    against its own constants, since the bounds depend on the trajectory.
    """
    w = frequency_weights(m, base.lambda2, base.eta, base.alpha0)
    _, trace = train_fiadmm(m, base.replace(t_train=pilot_epochs), w)
    c, _ = theorem_conditions(trace, w, base, m.n_items)
    return base.replace(rho=rho_factor * c.rho_bound, gamma=gamma_factor * c.gamma_bound)


def reference_hyperparams(lambda_f: float = 1.0, epochs: int = 500) -> HyperParams:
    """Pilot settings for :func:`synthetic.reference_instance` (small d, heavy flat ridge)."""
    return HyperParams(d=4, lambda2=5.0, eta=0.0, alpha0=0.1, lambda_f=lambda_f, rho=1.0, gamma=0.01,
                       t_train=epochs, seed=0)
