import numpy as np
import pytest
import scipy.linalg as sla

from conftest import FIXED_TUBE
from oracles import value_iteration_lqr
from tubeil import linear_rtmpc as lr, qp, sim
from tubeil.errors import Infeasible, NoConvergence
from tubeil.linear_env import input_polytope, state_limits, weights
from tubeil.sets import AxisBox, Polytope
from tubeil.tasks import gen_reference, linear_task


@pytest.fixture(scope="module")
def model(params):
    return lr.build_linear_model(params, 0.17, 0.17, dt=0.1)


def test_zero_state_zero_input_stays_zero(model):
    assert np.allclose(model.step(np.zeros(8), np.zeros(3)), 0.0)


def test_tilt_lag_converges_to_command(model):
    x = np.zeros(8)
    for _ in range(200):
        x = model.step(x, np.array([0.0, 0.2, -0.1]))
    assert x[6] == pytest.approx(0.2, abs=1e-9) and x[7] == pytest.approx(-0.1, abs=1e-9)


def test_discretization_matches_taylor_series(model):
    # 40-term series of exp(A dt) and of the integral term
    Ac, Bc, dt = model.Ac, model.Bc, model.dt
    A, Bi, term = np.eye(8), np.eye(8) * dt, np.eye(8)
    for k in range(1, 40):
        term = term @ Ac * dt / k
        A = A + term
        Bi = Bi + term * dt / (k + 1)
    assert np.allclose(model.A, A, atol=1e-12)
    assert np.allclose(model.B, Bi @ Bc, atol=1e-12)


def test_time_constants_must_be_positive(params):
    with pytest.raises(ValueError):
        lr.build_linear_model(params, 0.0, 0.1)


def test_identified_time_constants_fit_step_response(params):
    taus = lr.identify_attitude_time_constants(params)
    assert all(0.05 < t < 0.4 for t in taus)
    # the fitted lag reproduces the simulated response closely
    s = sim.Simulator(params, sim.hover_state(), np.zeros(3))
    ys, ts = [], []
    for _ in range(200):
        x = lr.reduced_state(s.state[0])
        s.step(sim.Command(lr.compensated_thrust(0.0, x[6], x[7], params), tilt=[0.1, 0.0]))
        ts.append(s.t)
        ys.append(lr.reduced_state(s.state[0])[6])
    fit = 0.1 * (1 - np.exp(-np.array(ts) / taus[0]))
    assert np.sqrt(np.mean((fit - np.array(ys)) ** 2)) < 0.01


def test_lqr_golden_ratio():
    one = np.eye(1)
    K, P = lr.solve_lqr(one, one, one, one)
    K_ref, P_ref = value_iteration_lqr(one, one, one, one)
    assert P[0, 0] == pytest.approx((1 + np.sqrt(5)) / 2, abs=1e-10)
    assert P[0, 0] == pytest.approx(P_ref[0, 0], abs=1e-10)
    assert abs(K[0, 0]) == pytest.approx(0.6180339887, abs=1e-9)
    assert 1 + K[0, 0] == pytest.approx(1 + K_ref[0, 0])


def test_lqr_without_actuation_solves_lyapunov():
    A = np.array([[0.5, 0.1], [0.0, 0.3]])
    K, P = lr.solve_lqr(A, np.zeros((2, 1)), np.eye(2), np.eye(1))
    assert np.allclose(K, 0.0)
    assert np.allclose(P, sla.solve_discrete_lyapunov(A.T, np.eye(2)), atol=1e-10)


def test_lqr_unstabilizable():
    with pytest.raises(NoConvergence), np.errstate(over="ignore", invalid="ignore"):
        lr.solve_lqr(2 * np.eye(1), np.zeros((1, 1)), np.eye(1), np.eye(1), max_iter=2000)


def test_lqr_hover_model_is_stable(model, cfg):
    Q, R = weights(cfg)
    K, P = lr.solve_lqr(model.A, model.B, Q, R)
    assert np.max(np.abs(np.linalg.eigvals(model.A + model.B @ K))) < 1
    assert lr.riccati_residual(model.A, model.B, Q, R, P) <= 1e-8


def _config(model, cfg, params, Z, N=30, w=1.0):
    Q, R = weights(cfg)
    lim = state_limits(cfg)
    return lr.make_config(model, Q, R, Z, Polytope.from_box(AxisBox(-lim, lim)), input_polytope(cfg, params),
                          N=N, initial_error_weight=w)


def test_zero_state_zero_reference(model, cfg, params):
    c = _config(model, cfg, params, FIXED_TUBE)
    sol = lr.solve_rtmpc(np.zeros(8), np.zeros((31, 6)), c)
    assert np.allclose(sol.u_bar0, 0.0, atol=1e-9)
    assert np.allclose(sol.x_plan, 0.0, atol=1e-9)


def _dense_unconstrained_oracle(c: lr.RtmpcConfig, x_t, ref):
    """Minimize the tube-MPC cost without constraints by least squares on
    residuals built from a direct simulation of the nominal model."""
    N, nx, nu = c.N, lr.NX, lr.NU
    r = np.hstack([ref, np.zeros((N + 1, 2))])
    Lq, Lr, Lp = (np.linalg.cholesky(M).T for M in (c.Q, c.R, c.P))

    def residual(z):
        xb, us = z[:nx], z[nx:].reshape(N, nu)
        out, x = [np.sqrt(c.initial_error_weight) * Lp @ (x_t - xb)], xb
        for k in range(N):
            out += [Lq @ (x - r[k]), Lr @ us[k]]
            x = c.model.A @ x + c.model.B @ us[k]
        out.append(Lp @ (x - r[N]))
        return np.concatenate(out)

    n = nx + N * nu
    r0 = residual(np.zeros(n))
    J = np.column_stack([residual(e) - r0 for e in np.eye(n)])
    z = np.linalg.lstsq(J, -r0, rcond=None)[0]
    return z[:nx], z[nx:nx + nu]


@pytest.mark.parametrize("w", [1.0, 0.5])
def test_displaced_state_matches_least_squares(model, cfg, params, w):
    c = _config(model, cfg, params, AxisBox.symmetric(np.full(8, 0.5)), N=10, w=w)
    x_t = np.array([0.02, -0.01, 0.03, 0.01, 0.0, -0.02, 0.005, 0.0])
    ref = np.zeros((11, 6))
    ref[:, 0] = 0.05
    sol = lr.solve_rtmpc(x_t, ref, c)
    xb, u0 = _dense_unconstrained_oracle(c, x_t, ref)
    assert np.allclose(sol.x_bar0, xb, atol=1e-7)
    assert np.allclose(sol.u_bar0, u0, atol=1e-7)


def test_far_state_is_infeasible(model, cfg, params):
    c = _config(model, cfg, params, FIXED_TUBE)
    x = np.zeros(8)
    x[0] = 20.0
    with pytest.raises(Infeasible):
        lr.solve_rtmpc(x, np.zeros((31, 6)), c)


def test_ancillary_action():
    K = np.arange(24.0).reshape(3, 8)
    xb, ub = np.ones(8), np.array([1.0, 2.0, 3.0])
    assert np.allclose(lr.ancillary_action(xb, xb, ub, K), ub)
    assert np.allclose(lr.ancillary_action(xb + 3, xb, ub, np.zeros((3, 8))), ub)
    d = np.zeros(8)
    d[5] = 0.2
    assert np.allclose(lr.ancillary_action(xb + d, xb, ub, K) - ub, 0.2 * K[:, 5])


def _nominal_mpc(c: lr.RtmpcConfig, x_t, ref):
    """Plain MPC on the untightened sets, transcribed independently with the
    states as explicit decision variables."""
    N, nx, nu = c.N, lr.NX, lr.NU
    n = (N + 1) * nx + N * nu
    r = np.hstack([ref, np.zeros((N + 1, 2))]).ravel()
    H = sla.block_diag(*([c.Q] * N + [c.P] + [c.R] * N))
    q = np.r_[-(sla.block_diag(*([c.Q] * N + [c.P])) @ r), np.zeros(N * nu)]
    Aeq = np.zeros(((N + 1) * nx, n))
    Aeq[:nx, :nx] = np.eye(nx)
    for k in range(N):
        rows = slice((k + 1) * nx, (k + 2) * nx)
        Aeq[rows, (k + 1) * nx:(k + 2) * nx] = np.eye(nx)
        Aeq[rows, k * nx:(k + 1) * nx] = -c.model.A
        Aeq[rows, (N + 1) * nx + k * nu:(N + 1) * nx + (k + 1) * nu] = -c.model.B
    beq = np.r_[x_t, np.zeros(N * nx)]
    Ax = np.hstack([np.kron(np.eye(N + 1), c.X.H), np.zeros(((N + 1) * len(c.X.h), N * nu))])
    Au = np.hstack([np.zeros((N * len(c.U.h), (N + 1) * nx)), np.kron(np.eye(N), c.U.H)])
    A = np.vstack([Aeq, Ax, Au])
    lo = np.r_[beq, np.full(len(A) - len(beq), -np.inf)]
    hi = np.r_[beq, np.tile(c.X.h, N + 1), np.tile(c.U.h, N)]
    s = qp.solve(qp.QpProblem(H, q, A, lo, hi), qp.QpSettings(tol=1e-10))
    return s.x[(N + 1) * nx:(N + 1) * nx + nu]


def test_zero_tube_recovers_nominal_mpc(model, cfg, params):
    c = _config(model, cfg, params, AxisBox.zero(8), N=15)
    rng = np.random.default_rng(0)
    ref = gen_reference(linear_task(cfg), 0.1).window(10, 16)
    for _ in range(20):
        x = np.r_[ref[0] + rng.uniform(-0.5, 0.5, 6), rng.uniform(-0.2, 0.2, 2)]
        sol = lr.solve_rtmpc(x, ref, c, settings=qp.QpSettings(tol=1e-10))
        u_rt = lr.ancillary_action(x, sol.x_bar0, sol.u_bar0, c.K)
        assert np.allclose(u_rt, _nominal_mpc(c, x, ref), atol=1e-8)


def test_warm_start_cuts_iterations(fixed_tube_setup, cfg):
    setup = fixed_tube_setup
    ref = gen_reference(linear_task(cfg), setup.dt)
    expert = setup.expert()
    x = np.r_[ref.samples[0], 0.0, 0.0]
    warm, cold = [], []
    for k in range(40):
        window = ref.window(k, setup.N + 1)
        cold.append(lr.solve_rtmpc(x, window, setup.rtmpc, settings=setup.qp_settings()).qp.iterations)
        u, sol = expert.act(x, window)
        warm.append(sol.qp.iterations)
        x = setup.model.step(x, u)
    assert np.median(warm[1:]) == 0
    assert np.mean(warm[1:]) < np.mean(cold[1:]) / 3


def test_reference_window_shape_checked(fixed_tube_setup):
    from tubeil.errors import DimensionMismatch
    with pytest.raises(DimensionMismatch):
        lr.solve_rtmpc(np.zeros(8), np.zeros((5, 6)), fixed_tube_setup.rtmpc)
