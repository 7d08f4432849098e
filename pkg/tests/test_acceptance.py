"""End-to-end acceptance checks.  Each test prints one PASS/FAIL line and
the lines are repeated in the terminal summary.  The learning-curve suite
is run once per session and shared by several criteria."""
import json
import shutil
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from oracles import LinearToy, active_set_oracle, central_jacobian, random_qp, value_iteration_lqr
from tubeil import linear_rtmpc as lr, qp, sim
from tubeil.flip_env import run_flip_episodes
from tubeil.linear_env import run_episodes, weights
from tubeil.nonlinear import ocp
from tubeil.nonlinear.sensitivity import apply_error, sensitivity_gain
from tubeil.policy import MlpPolicy, mse_loss_and_grad
from tubeil.suite import (Workspace, flip_timing_callables, linear_timing_callables, load_curves, parse_manifest,
                          run_suite, timing_report)
from tubeil.tasks import DomainSpec

pytestmark = pytest.mark.slow

SEEDS = [0, 1, 2]


def report(capsys, n, ok, detail):
    line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    with capsys.disabled():
        print("\n" + line)
    assert ok, line


def mean_curve(records, method, domain, fine_tuned=False):
    """demo count -> (mean success, mean expert gap) over seeds."""
    out = {}
    for n in sorted({r["demo_idx"] for r in records if r["method"] == method}):
        rs = [r for r in records if r["method"] == method and r["domain"] == domain
              and r["demo_idx"] == n and r["fine_tuned"] == fine_tuned]
        if rs:
            gaps = [r["expert_gap"] for r in rs if r["expert_gap"] is not None]
            out[n] = (float(np.mean([r["success_rate"] for r in rs])),
                      float(np.mean(gaps)) if len(gaps) == len(rs) else float("nan"), len(rs))
    return out


def first_full(curve):
    hits = [n for n, (s, _, k) in curve.items() if s == 100.0 and k == len(SEEDS)]
    return min(hits) if hits else None


@pytest.fixture(scope="module")
def ws(cfg, tmp_path_factory):
    return Workspace(tmp_path_factory.mktemp("acceptance"), cfg)


LINEAR_CELLS = [
    {"task": "linear", "methods": ["DAgger+SA-sparse"], "seeds": SEEDS, "demos": 30,
     "eval_at": [1, 2, 20, 25, 30], "eval_domains": ["T1"]},
    {"task": "linear", "methods": ["BC+SA-sparse"], "seeds": SEEDS, "demos": 2, "eval_domains": ["T1"]},
    {"task": "linear", "methods": ["BC"], "seeds": SEEDS, "demos": 10, "eval_at": [10], "eval_domains": ["T1"]},
    {"task": "linear", "methods": ["DAgger+DR"], "seeds": SEEDS, "demos": 30, "eval_domains": ["T1"]},
]
FLIP_CELLS = [
    {"task": "flip", "methods": ["DAgger+SA-25"], "seeds": SEEDS, "demos": 1, "fine_tune": 1,
     "eval_domains": ["S", "T_flip"]},
    {"task": "flip", "methods": ["DAgger+DR"], "seeds": SEEDS, "demos": 50, "batch": 10, "eval_at": [50],
     "eval_domains": ["T_flip"]},
]


def _suite(ws, name, cells):
    t0 = time.perf_counter()
    rep = run_suite(parse_manifest({"name": name, "cells": cells}), ws.out)
    assert not rep["failed"], rep["failed"]
    return time.perf_counter() - t0


@pytest.fixture(scope="module")
def linear_suite(ws):
    ws.pipeline("linear")                 # the tube is part of criterion 4's budget
    elapsed = _suite(ws, "linear", LINEAR_CELLS)
    return [r for r in load_curves(ws.out) if r["task"] == "linear"], elapsed


@pytest.fixture(scope="module")
def flip_suite(ws):
    t0 = time.perf_counter()
    ws.pipeline("flip")
    setup_time = time.perf_counter() - t0
    elapsed = _suite(ws, "flip", FLIP_CELLS)
    return [r for r in load_curves(ws.out) if r["task"] == "flip"], elapsed + setup_time


# -- 1 -------------------------------------------------------------------------

def test_criterion_01_qp_matches_oracle(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    err, kkt = 0.0, 0.0
    for _ in range(50):
        prob = random_qp(rng)
        x_ref, y_ref, _ = active_set_oracle(prob)
        s = qp.solve(prob, qp.QpSettings(tol=1e-10))
        assert s.status == qp.Status.SOLVED
        err = max(err, np.abs(s.x - x_ref).max(), np.abs(s.y - y_ref).max())
        kkt = max(kkt, *prob.kkt_residuals(s.x, s.y))
    dt = time.perf_counter() - t0
    report(capsys, 1, err <= 1e-6 and kkt <= 1e-8 and dt < 10,
           f"50 QPs: max |x,y - oracle| {err:.1e}, max KKT {kkt:.1e}, {dt:.1f} s")


# -- 2 -------------------------------------------------------------------------

def test_criterion_02_riccati(capsys, params, cfg):
    t0 = time.perf_counter()
    one = np.eye(1)
    _, P = lr.solve_lqr(one, one, one, one)
    _, P_vi = value_iteration_lqr(one, one, one, one)
    golden = abs(P[0, 0] - P_vi[0, 0])
    model = lr.build_linear_model(params, *lr.identify_attitude_time_constants(params), dt=cfg["linear"]["dt"])
    K, _ = lr.solve_lqr(model.A, model.B, *weights(cfg))
    rho = np.max(np.abs(np.linalg.eigvals(model.A + model.B @ K)))
    dt = time.perf_counter() - t0
    report(capsys, 2, golden <= 1e-10 and abs(P[0, 0] - 1.6180339887) < 1e-9 and rho < 1 and dt < 1,
           f"P = {P[0, 0]:.10f} (|P - VI| {golden:.1e}), spectral radius {rho:.4f}, {dt:.2f} s")


# -- 3 -------------------------------------------------------------------------

def _flip_sensitivity_error(ws):
    """Worst relative error of the gain against central differences of full
    SQP re-solves at interior (no active bound) points along the plan."""
    setup = ws.pipeline("flip").setup
    anc = setup.expert()
    s = ocp.SqpSettings(tol=1e-10, max_iter=100)
    worst, used = 0.0, 0
    rng = np.random.default_rng(0)
    for k in (10, 30, 60, 90, 110):
        xr, ur = anc.reference(k)
        x_t = apply_error(rng.uniform(-0.02, 0.02, 9), setup.plan.state_at(k))
        sol = ocp.solve_sqp(anc.tr, x_t, xr, ur, s)
        if np.any(np.abs(sol.mu) > 0) or sol.status != "converged":
            continue
        gain = sensitivity_gain(anc.tr, sol)
        fd = central_jacobian(lambda e: ocp.solve_sqp(anc.tr, apply_error(e, x_t), xr, ur, s, warm=sol).u0,
                              np.zeros(9), 1e-5)
        worst = max(worst, np.abs(gain.K_mrp - fd).max() / np.abs(fd).max())
        used += 1
    return worst, used


def test_criterion_03_gradients_and_sensitivities(capsys, ws):
    t0 = time.perf_counter()
    rng = np.random.default_rng(5)
    pol = MlpPolicy.init([14, 64, 32, 4], rng)
    X, U = rng.normal(size=(32, 14)), rng.normal(size=(32, 4))
    pol.fit_normalization(X, U)
    _, grads = mse_loss_and_grad(pol, X, U)
    g_rel = 0.0
    for p, g in zip(pol.params(), grads):
        flat, orig = p.reshape(-1), p.reshape(-1).copy()

        def f(v):
            flat[:] = v
            return np.array([mse_loss_and_grad(pol, X, U)[0]])

        fd = central_jacobian(f, orig, 1e-6)[0]
        flat[:] = orig
        g_rel = max(g_rel, np.abs(fd - g.reshape(-1)).max() / max(np.abs(fd).max(), 1e-12))
    s_rel, used = _flip_sensitivity_error(ws)
    # LQ instance: double integrator with the LQR terminal weight
    A, B = np.array([[1, 0.1], [0, 1]]), np.array([[0.005], [0.1]])
    K, P = lr.solve_lqr(A, B, np.diag([1.0, 0.1]), np.eye(1))
    tr = ocp.transcribe(LinearToy(A, B), np.diag([1.0, 0.1]), np.eye(1), P, 20, levenberg_marquardt=0.0)
    sol = ocp.solve_sqp(tr, np.array([0.3, -0.1]), np.zeros((21, 2)), np.zeros((20, 1)))
    lq = np.abs(sensitivity_gain(tr, sol).K - K).max()
    dt = time.perf_counter() - t0
    report(capsys, 3, g_rel <= 1e-5 and s_rel <= 1e-3 and used >= 3 and lq <= 1e-8 and dt < 120,
           f"MLP grad rel {g_rel:.1e}; gain vs FD re-solves rel {s_rel:.1e} at {used} points; "
           f"LQ gain vs LQR {lq:.1e}; {dt:.0f} s (excluding the shared plan/tube setup)")


# -- 4 -------------------------------------------------------------------------

def test_criterion_04_tube_containment(capsys, ws, cfg, params):
    t0 = time.perf_counter()
    lin = ws.pipeline("linear")
    dom = DomainSpec("design", sim.DisturbanceSet.from_mg(0.0, 0.3, params))
    res = run_episodes(lin.setup, lin.task, dom, range(1000, 1200), track_tube=True)
    lin_frac = np.mean([r.tube_ok for r in res])
    flip = ws.pipeline("flip")
    fres = run_flip_episodes(flip.setup, flip.domain("T_flip"), range(1000, 1200), track_tube=True)
    flip_frac = np.mean([r.tube_ok for r in fres])
    dt = time.perf_counter() - t0
    report(capsys, 4, lin_frac >= 0.99 and flip_frac >= 0.99 and dt < 600,
           f"linear {100 * lin_frac:.1f}% of 200 inside Z (worst ratio {max(r.tube_ratio for r in res):.2f}), "
           f"flip {100 * flip_frac:.1f}% inside T_state (worst {max(r.tube_ratio for r in fres):.2f}), "
           f"{dt:.0f} s")


# -- 5, 6 ----------------------------------------------------------------------

def test_criterion_05_figure_eight_trend(capsys, linear_suite):
    recs, elapsed = linear_suite
    sa = first_full(mean_curve(recs, "DAgger+SA-sparse", "T1"))
    bcsa = first_full(mean_curve(recs, "BC+SA-sparse", "T1"))
    bc10 = mean_curve(recs, "BC", "T1")[10][0]
    dr_curve = mean_curve(recs, "DAgger+DR", "T1")
    dr = first_full(dr_curve)
    n_sa = max(sa or 99, bcsa or 99)
    dr_ok = dr is None or dr >= 3 * n_sa
    ok = sa is not None and sa <= 2 and bcsa is not None and bcsa <= 2 and bc10 < 50 and dr_ok and elapsed < 3600
    report(capsys, 5, ok, f"first 100%: DAgger+SA-sparse {sa}, BC+SA-sparse {bcsa}, DAgger+DR "
           f"{dr if dr else '>30'}; BC at 10 demos {bc10:.0f}%; suite {elapsed / 60:.1f} min")


def test_criterion_06_expert_gap(capsys, linear_suite):
    recs, _ = linear_suite
    c = mean_curve(recs, "DAgger+SA-sparse", "T1")
    gaps = {n: c[n][1] for n in (20, 25, 30)}
    ok = all(np.isfinite(g) and g <= 10.0 for g in gaps.values())
    report(capsys, 6, ok, "DAgger+SA-sparse expert gap in T1: "
           + ", ".join(f"{n} demos {g:.1f}%" for n, g in gaps.items()))


# -- 7, 8 ----------------------------------------------------------------------

def test_criterion_07_flip_trend(capsys, ws, flip_suite):
    recs, elapsed = flip_suite
    ft_s = mean_curve(recs, "DAgger+SA-25", "S", fine_tuned=True)[2][0]
    ft_t = mean_curve(recs, "DAgger+SA-25", "T_flip", fine_tuned=True)[2][0]
    dr = mean_curve(recs, "DAgger+DR", "T_flip")[50][0]
    pipe = ws.pipeline("flip")
    demo = pipe.collect(None, 1.0, pipe.domain("S"), seed=77, for_augmentation=True)
    rng = np.random.default_rng(0)
    per_sparse = len(pipe.augment(demo, "sparse", 0, rng)[0]) / demo.steps
    per_25 = len(pipe.augment(demo, "uniform", 25, rng)[0]) / demo.steps
    ok = ft_s == 100 and ft_t == 100 and dr < 100 and per_sparse == 18 and per_25 == 25 and elapsed < 7200
    report(capsys, 7, ok, f"DAgger+SA-25 after 1+1 demos: S {ft_s:.0f}%, T_flip {ft_t:.0f}%; DAgger+DR at 50: "
           f"{dr:.0f}%; SA samples/step sparse {per_sparse:g}, SA-25 {per_25:g}; {elapsed / 60:.1f} min")


def test_criterion_08_fine_tuning_lowers_gap(capsys, flip_suite):
    recs, _ = flip_suite
    before = mean_curve(recs, "DAgger+SA-25", "S")[1]
    after = mean_curve(recs, "DAgger+SA-25", "S", fine_tuned=True)[2]
    ok = np.isfinite(before[1]) and np.isfinite(after[1]) and after[1] < before[1]
    report(capsys, 8, ok, f"expert gap in S: 1 demo {before[1]:.0f}% (success {before[0]:.0f}%), "
           f"2 demos {after[1]:.0f}% (success {after[0]:.0f}%)")


# -- 9 -------------------------------------------------------------------------

def test_criterion_09_latency(capsys, ws, linear_suite, flip_suite):
    t0 = time.perf_counter()
    pol_dir = ws.out / "policies"
    lin = timing_report(*linear_timing_callables(ws.pipeline("linear").setup,
                                                 MlpPolicy.load(pol_dir / "linear__DAgger+SA-sparse__seed0.mlp")),
                        n=300)
    flp = timing_report(*flip_timing_callables(ws.pipeline("flip").setup,
                                               MlpPolicy.load(pol_dir / "flip__DAgger+SA-25__seed0.mlp")), n=300)
    dt = time.perf_counter() - t0
    report(capsys, 9, lin["speedup"] >= 10 and flp["speedup"] >= 10 and dt < 60,
           f"speedup linear {lin['speedup']:.1f}x ({1e3 * lin['expert']['mean']:.2f} ms vs "
           f"{1e3 * lin['policy']['mean']:.3f} ms), flip {flp['speedup']:.1f}x "
           f"({1e3 * flp['expert']['mean']:.2f} ms vs {1e3 * flp['policy']['mean']:.3f} ms), {dt:.0f} s")


# -- 10 ------------------------------------------------------------------------

def test_criterion_10_rerun_reproduces(capsys, ws, cfg, linear_suite, flip_suite, tmp_path):
    for name in ("linear_tube.json", "flip_plan.json", "flip_state_tube.json", "flip_action_tube.json"):
        shutil.copy(ws.out / name, tmp_path / name)
    cells = [dict(LINEAR_CELLS[1], seeds=[1]), dict(FLIP_CELLS[0], seeds=[2])]
    rep = run_suite(parse_manifest({"name": "rerun", "cells": cells}), tmp_path)
    assert not rep["failed"], rep["failed"]
    mismatches, compared = [], 0
    for key in ("linear__BC+SA-sparse__seed1", "flip__DAgger+SA-25__seed2"):
        a = json.loads((ws.out / "cells" / f"{key}.json").read_text())["curve"]
        b = json.loads((tmp_path / "cells" / f"{key}.json").read_text())["curve"]
        for ra, rb in zip(a, b, strict=True):
            compared += 1
            if (ra["success_rate"], ra["stage_cost"]) != (rb["success_rate"], rb["stage_cost"]):
                mismatches.append((key, ra["demo_idx"], ra["domain"]))
    report(capsys, 10, not mismatches and compared > 0,
           f"{compared} curve points re-run, {len(mismatches)} differ in success rate or stage cost")
