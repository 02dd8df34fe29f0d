import numpy as np
import pytest
from conftest import dense_loss
from hypothesis import given
from hypothesis import strategies as st

from fairmf.factors import frequency_weights, gramian
from fairmf.fiadmm import (
    AdmmState,
    DivergenceError,
    EpochTrace,
    augmented_lagrangian,
    fairness_regulariser,
    fold_in,
    grad_u,
    initial_state,
    item_gradient,
    mean_user_vector,
    prox_map,
    proximal_user_step,
    smooth_objective,
    train_fiadmm,
    update_s,
    update_u,
    update_v,
    update_w,
)
from fairmf.ials import fold_in_ials, ials_loss, update_items_ials, update_users_ials
from fairmf.params import HyperParams
from fairmf.synthetic import random_binary


def _state(m, d, seed, lambda_f=0.0):
    rng = np.random.default_rng(seed)
    u, v = rng.normal(size=(m.n_users, d)), rng.normal(size=(m.n_items, d))
    return AdmmState(v=v, u=u, s=rng.normal(size=d), w=rng.normal(size=d)).refresh()


def dense_prox(u_tilde, s, w, rho, gamma):
    n = u_tilde.shape[0]
    a = (rho / n ** 2) * np.ones((n, n)) + np.eye(n) / gamma
    b = u_tilde / gamma + (rho / n) * np.outer(np.ones(n), s - w)
    return np.linalg.solve(a, b)


def exact_dense_prox(u_tilde, s, w, rho, gamma):
    """Same dense system solved in exact rational arithmetic (for ill-conditioned rho)."""
    from fractions import Fraction as F
    n, d = u_tilde.shape
    rho, gamma = F(rho), F(gamma)
    a = [[rho / n ** 2 + (1 / gamma if i == j else 0) for j in range(n)] for i in range(n)]
    b = [[F(u_tilde[i, k]) / gamma + rho / n * (F(s[k]) - F(w[k])) for k in range(d)] for i in range(n)]
    for col in range(n):
        for row in range(col + 1, n):
            f = a[row][col] / a[col][col]
            a[row] = [x - f * y for x, y in zip(a[row], a[col])]
            b[row] = [x - f * y for x, y in zip(b[row], b[col])]
    x = [[F(0)] * d for _ in range(n)]
    for row in reversed(range(n)):
        for k in range(d):
            acc = b[row][k] - sum(a[row][j] * x[j][k] for j in range(row + 1, n))
            x[row][k] = acc / a[row][row]
    return np.array([[float(v) for v in r] for r in x])


def dense_user_grad(r, u, v, lam_u, alpha0):
    p = u @ v.T
    return -(r * (r - p)) @ v + alpha0 * p @ v + lam_u[:, None] * u


class TestRegulariser:
    def test_zero_users(self):
        assert fairness_regulariser(np.zeros((3, 2)), np.ones((4, 2))) == 0.0

    def test_opposite_users(self):
        u = np.array([[1.0, -2.0], [-1.0, 2.0]])
        assert fairness_regulariser(u, np.ones((3, 2))) == 0.0

    def test_double_loop(self):
        rng = np.random.default_rng(0)
        u, v = rng.normal(size=(5, 2)), rng.normal(size=(4, 2))
        ref = 0.5 * sum(np.mean([u[i] @ v[j] for i in range(5)]) ** 2 for j in range(4))
        assert fairness_regulariser(u, v) == pytest.approx(ref, rel=1e-12)


class TestLagrangian:
    def test_feasible_reduces_to_loss(self, small):
        m, w = small
        st = _state(m, 3, 1)
        st.s, st.w = mean_user_vector(st.u), np.zeros(3)
        hp = HyperParams(d=3, alpha0=0.1, rho=2.0)
        assert augmented_lagrangian(m, st, w, hp) == ials_loss(m, st.u, st.v, w, 0.1, st.g_u, st.g_v)

    def test_zero_s_w(self, small):
        m, w = small
        st = _state(m, 3, 2)
        st.s, st.w = np.zeros(3), np.zeros(3)
        hp = HyperParams(d=3, alpha0=0.1, rho=2.0, lambda_f=0.7)
        t = mean_user_vector(st.u)
        ref = ials_loss(m, st.u, st.v, w, 0.1) + 0.5 * 2.0 * t @ t
        assert augmented_lagrangian(m, st, w, hp) == pytest.approx(ref, rel=1e-13)

    @given(st.integers(0, 10 ** 6))
    def test_dense(self, seed):
        m = random_binary(7, 6, 0.4, seed)
        w = frequency_weights(m, 0.4, 1.0, 0.1)
        stt = _state(m, 3, seed)
        hp = HyperParams(d=3, alpha0=0.1, rho=1.3, lambda_f=0.8)
        r = m.toarray()
        t = stt.u.mean(axis=0)
        ref = (dense_loss(r, stt.u, stt.v, w.lambda_u, w.lambda_v, 0.1)
               + 0.4 * np.sum((stt.v @ stt.s) ** 2)
               + 0.65 * np.sum((t - stt.s + stt.w) ** 2) - 0.65 * np.sum(stt.w ** 2))
        assert augmented_lagrangian(m, stt, w, hp) == pytest.approx(ref, rel=1e-10)


class TestUpdateV:
    def test_reduces_to_ials(self, small):
        m, w = small
        stt = _state(m, 3, 3)
        hp = HyperParams(d=3, alpha0=0.1, lambda_f=0.0)
        np.testing.assert_array_equal(update_v(m, stt, w, hp), update_items_ials(m, stt.u, w, 0.1, stt.g_u))

    def test_empty_item(self):
        from fairmf.interactions import SparseBinaryMatrix
        m = SparseBinaryMatrix.from_pairs([0, 1], [0, 0], 2, 3)
        w = frequency_weights(m, 1.0, 1.0, 0.1)
        stt = _state(m, 2, 0)
        assert not update_v(m, stt, w, HyperParams(d=2, lambda_f=1.0))[1:].any()

    def test_dense(self):
        m = random_binary(7, 5, 0.4, 4)
        w = frequency_weights(m, 0.4, 1.0, 0.1)
        stt = _state(m, 3, 4)
        hp = HyperParams(d=3, alpha0=0.1, lambda_f=2.0)
        r = m.toarray()
        ref = np.zeros((5, 3))
        for j in range(5):
            a = 0.1 * stt.u.T @ stt.u + 2.0 * np.outer(stt.s, stt.s) + w.lambda_v[j] * np.eye(3)
            a += sum(np.outer(stt.u[i], stt.u[i]) for i in range(7) if r[i, j])
            b = sum((stt.u[i] for i in range(7) if r[i, j]), np.zeros(3))
            ref[j] = np.linalg.solve(a, b)
        np.testing.assert_allclose(update_v(m, stt, w, hp), ref, rtol=1e-9, atol=1e-12)

    def test_block_optimality(self, small):
        m, w = small
        stt = _state(m, 3, 5)
        hp = HyperParams(d=3, alpha0=0.1, lambda_f=1.5)
        v = update_v(m, stt, w, hp)
        g = item_gradient(m, stt.u, v, stt.s, stt.g_u, w.lambda_v, 0.1, 1.5)
        assert np.linalg.norm(g) <= 1e-8 * np.linalg.norm(v)


class TestGradU:
    def test_at_ials_optimum(self, small):
        m, w = small
        stt = _state(m, 3, 6)
        stt.u = update_users_ials(m, stt.v, w, 0.1, stt.g_v)
        assert np.max(np.abs(grad_u(m, stt, w, HyperParams(d=3, alpha0=0.1)))) <= 1e-9

    def test_zero_users(self, small):
        m, w = small
        stt = _state(m, 3, 7)
        stt.u = np.zeros_like(stt.u)
        g = grad_u(m, stt, w, HyperParams(d=3, alpha0=0.1))
        np.testing.assert_allclose(g, -(m.toarray() @ stt.v), atol=1e-15)

    @given(st.integers(0, 10 ** 6))
    def test_dense(self, seed):
        m = random_binary(9, 7, 0.3, seed)
        w = frequency_weights(m, 0.4, 1.0, 0.2)
        stt = _state(m, 3, seed)
        ref = dense_user_grad(m.toarray(), stt.u, stt.v, w.lambda_u, 0.2)
        np.testing.assert_allclose(grad_u(m, stt, w, HyperParams(d=3, alpha0=0.2)), ref, rtol=1e-10, atol=1e-12)

    def test_item_gradient_dense(self, small):
        m, w = small
        stt = _state(m, 3, 8)
        r = m.toarray()
        p = stt.u @ stt.v.T
        ref = (-(r * (r - p)).T @ stt.u + 0.1 * p.T @ stt.u + w.lambda_v[:, None] * stt.v
               + 0.9 * np.outer(stt.v @ stt.s, stt.s))
        got = item_gradient(m, stt.u, stt.v, stt.s, stt.g_u, w.lambda_v, 0.1, 0.9)
        np.testing.assert_allclose(got, ref, rtol=1e-10, atol=1e-12)


class TestProx:
    def test_rho_zero(self):
        u = np.random.default_rng(0).normal(size=(5, 3))
        np.testing.assert_array_equal(prox_map(u, np.ones(3), np.zeros(3), 0.0, 0.1), u)

    @given(st.integers(0, 10 ** 6))
    def test_dense_six(self, seed):
        rng = np.random.default_rng(seed)
        u, s, w = rng.normal(size=(6, 3)), rng.normal(size=3), rng.normal(size=3)
        rho, gamma = rng.uniform(0.1, 10), rng.uniform(0.01, 1)
        ref = dense_prox(u, s, w, rho, gamma)
        got = prox_map(u, s, w, rho, gamma)
        assert np.max(np.abs(got - ref)) <= 1e-10 * max(1.0, np.max(np.abs(ref)))

    def test_large_rho_limit(self):
        rng = np.random.default_rng(1)
        u, s, w = rng.normal(size=(6, 3)), rng.normal(size=3), rng.normal(size=3)
        out = prox_map(u, s, w, 1e12, 0.5)
        assert np.linalg.norm(out.mean(axis=0) - (s - w)) <= 1e-5
        np.testing.assert_allclose(out, exact_dense_prox(u, s, w, 1e12, 0.5), rtol=1e-10, atol=1e-12)

    def test_argmin(self):
        rng = np.random.default_rng(2)
        u, s, w = rng.normal(size=(6, 3)), rng.normal(size=3), rng.normal(size=3)
        rho, gamma = 2.0, 0.3

        def obj(x):
            r = x.mean(axis=0) - s + w
            return 0.5 * rho * r @ r + np.sum((x - u) ** 2) / (2 * gamma)

        best = obj(prox_map(u, s, w, rho, gamma))
        for _ in range(50):
            assert best <= obj(prox_map(u, s, w, rho, gamma) + 1e-3 * rng.normal(size=u.shape))

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            prox_map(np.zeros((2, 2)), np.zeros(2), np.zeros(2), -1.0, 0.1)


class TestUpdateU:
    def test_gamma_rho_zero(self, small):
        m, w = small
        stt = _state(m, 3, 9)
        out = proximal_user_step(m, stt.u, stt.v, stt.g_v, stt.s, stt.w, w.lambda_u, 0.1, 0.0, 0.0)
        np.testing.assert_array_equal(out, stt.u)

    def test_dense_composition(self, small):
        m, w = small
        stt = _state(m, 3, 10)
        hp = HyperParams(d=3, alpha0=0.1, rho=1.7, gamma=0.03)
        u_tilde = stt.u - 0.03 * dense_user_grad(m.toarray(), stt.u, stt.v, w.lambda_u, 0.1)
        ref = dense_prox(u_tilde, stt.s, stt.w, 1.7, 0.03)
        np.testing.assert_allclose(update_u(m, stt, w, hp), ref, rtol=1e-10, atol=1e-12)

    def test_surrogate_decrease(self, small):
        m, w = small
        stt = _state(m, 3, 11)
        hp = HyperParams(d=3, alpha0=0.1, rho=1.7, gamma=0.03)
        g = grad_u(m, stt, w, hp)

        def surrogate(x):
            r = x.mean(axis=0) - stt.s + stt.w
            return np.sum(g * (x - stt.u)) + np.sum((x - stt.u) ** 2) / (2 * hp.gamma) + 0.5 * hp.rho * r @ r

        assert surrogate(update_u(m, stt, w, hp)) <= surrogate(stt.u)


class TestUpdateS:
    def test_lambda_f_zero(self, small):
        m, _ = small
        stt = _state(m, 3, 12)
        np.testing.assert_array_equal(update_s(stt, HyperParams(d=3, lambda_f=0.0)), mean_user_vector(stt.u) + stt.w)

    def test_small_lambda_f(self, small):
        m, _ = small
        stt = _state(m, 3, 13)
        stt.w = np.zeros(3)
        s = update_s(stt, HyperParams(d=3, lambda_f=1e-12, rho=1.0))
        np.testing.assert_allclose(s, mean_user_vector(stt.u), atol=1e-9)

    def test_stationarity(self):
        m = random_binary(10, 8, 0.4, 14)
        stt = _state(m, 4, 14)
        hp = HyperParams(d=4, lambda_f=0.9, rho=1.4)
        s = update_s(stt, hp)
        t = mean_user_vector(stt.u)
        assert np.linalg.norm(0.9 * stt.g_v @ s - 1.4 * (t - s + stt.w)) <= 1e-10

    def test_sign_via_lagrangian(self, small):
        # the s-update minimizes the Lagrangian in s
        m, w = small
        stt = _state(m, 3, 15)
        hp = HyperParams(d=3, lambda_f=0.5, rho=2.0)
        stt.s = update_s(stt, hp)
        base = augmented_lagrangian(m, stt, w, hp)
        rng = np.random.default_rng(0)
        for _ in range(20):
            other = stt.copy()
            other.s = stt.s + 1e-3 * rng.normal(size=3)
            assert augmented_lagrangian(m, other, w, hp) >= base


class TestUpdateW:
    def test_feasible(self, small):
        m, _ = small
        stt = _state(m, 3, 16)
        stt.s = mean_user_vector(stt.u)
        np.testing.assert_array_equal(update_w(stt), stt.w)

    def test_unit(self):
        u = np.array([[1.0, 0.0], [1.0, 0.0]])
        stt = AdmmState(v=np.zeros((1, 2)), u=u, s=np.zeros(2), w=np.zeros(2))
        np.testing.assert_array_equal(update_w(stt), [1.0, 0.0])


class TestTrain:
    def test_trace_shape_and_dual_identity(self):
        m = random_binary(20, 12, 0.3, 0)
        hp = HyperParams(d=4, lambda2=0.5, alpha0=0.1, lambda_f=0.5, t_train=15, gamma=0.01)
        stt, trace = train_fiadmm(m, hp)
        assert len(trace) == 16 and np.isnan(trace.res_v[0])
        assert np.array_equal(trace.column("res_w")[1:], trace.column("constraint")[1:])
        assert stt.epoch == 15
        np.testing.assert_allclose(stt.g_u, gramian(stt.u), rtol=1e-12)

    def test_deterministic(self):
        m = random_binary(20, 12, 0.3, 1)
        hp = HyperParams(d=4, lambda_f=0.5, t_train=10, gamma=0.01)
        a = train_fiadmm(m, hp, deterministic=True)[1]
        b = train_fiadmm(m, hp, deterministic=True)[1]
        for name in a.to_dict():
            assert np.array_equal(a.column(name), b.column(name), equal_nan=True)

    def test_deterministic_matches_default(self):
        m = random_binary(30, 12, 0.3, 2)
        hp = HyperParams(d=4, lambda_f=0.5, t_train=10, gamma=0.01)
        a = train_fiadmm(m, hp, deterministic=True)[0]
        b = train_fiadmm(m, hp)[0]
        np.testing.assert_allclose(a.u, b.u, rtol=1e-9, atol=1e-12)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_named(self):
        m = random_binary(20, 12, 0.5, 3)
        hp = HyperParams(d=4, lambda2=1e-3, lambda_f=1.0, t_train=200, gamma=1e3, sigma=10.0)
        with pytest.raises(DivergenceError) as err:
            train_fiadmm(m, hp)
        assert err.value.variable in {"V", "U", "s", "w"} and err.value.epoch >= 1

    def test_trace_roundtrip(self):
        m = random_binary(10, 6, 0.3, 4)
        _, trace = train_fiadmm(m, HyperParams(d=2, t_train=3))
        assert EpochTrace.from_dict(trace.to_dict()).to_dict() == trace.to_dict()
        assert trace.to_csv().splitlines()[0].startswith("epoch,lagrangian")

    def test_history(self):
        m = random_binary(10, 6, 0.3, 5)
        _, trace, hist = train_fiadmm(m, HyperParams(d=2, t_train=3), keep_history=True)
        assert [h.epoch for h in hist] == [0, 1, 2, 3]
        assert np.array_equal(hist[0].s, mean_user_vector(hist[0].u)) and not hist[0].w.any()


class TestFoldIn:
    def test_default_epochs(self):
        assert HyperParams().t_fold == 50

    def test_degenerate_user(self):
        from fairmf.interactions import SparseBinaryMatrix
        m = SparseBinaryMatrix.from_pairs([0, 0], [1, 2], 2, 4)
        v = np.random.default_rng(0).normal(size=(4, 3))
        u = fold_in(v, m, HyperParams(d=3, lambda_f=0.5, t_fold=20))
        assert u.shape == (2, 3) and np.isfinite(u).all()

    def test_v_frozen(self):
        m = random_binary(8, 6, 0.4, 6)
        v = np.random.default_rng(1).normal(size=(6, 3))
        v0 = v.copy()
        fold_in(v, m, HyperParams(d=3, t_fold=5))
        assert np.array_equal(v, v0)

    def test_item_mismatch(self):
        with pytest.raises(ValueError):
            fold_in(np.zeros((5, 2)), random_binary(3, 6, 0.5, 0), HyperParams(d=2))

    def test_ials_limit(self):
        m = random_binary(12, 8, 0.4, 7)
        v = np.random.default_rng(2).normal(scale=0.5, size=(8, 3))
        hp = HyperParams(d=3, lambda2=0.5, alpha0=0.1, lambda_f=0.0, rho=0.0, gamma=0.05)
        w = frequency_weights(m, hp.lambda2, hp.eta, hp.alpha0)
        u_admm = fold_in(v, m, hp, epochs=400)
        u_ials = fold_in_ials(v, m, hp)
        a, b = ials_loss(m, u_admm, v, w, 0.1), ials_loss(m, u_ials, v, w, 0.1)
        assert abs(a - b) <= 0.01 * b


def test_smooth_objective_terms(small):
    m, w = small
    stt = _state(m, 3, 20)
    hp = HyperParams(d=3, alpha0=0.1, lambda_f=0.4)
    ref = ials_loss(m, stt.u, stt.v, w, 0.1) + 0.2 * np.sum((stt.v @ stt.s) ** 2)
    assert smooth_objective(m, stt.u, stt.v, stt.s, w, hp) == pytest.approx(ref, rel=1e-13)


def test_initial_state_shapes(small):
    m, _ = small
    stt = initial_state(m, HyperParams(d=5))
    assert stt.u.shape == (10, 5) and stt.v.shape == (8, 5) and not stt.w.any()
