"""End-to-end acceptance checks; each prints one PASS/FAIL line in the summary."""

import os
import subprocess
import sys
import time
import warnings

import numpy as np
import pytest

from multirate import config, sets, sim
from multirate.cbf import LyapunovFn, assemble_clf_cbf_qp, error_barrier
from multirate.dynamics import (DiscreteModel, PlantModel, rk4_step, small_angle_linearization,
                                zoh_discretize)
from multirate.mpc import build_tube_mpc
from multirate.qp import QProblem, solve_qp
from multirate.sets import HPolytope

from conftest import record
from oracles import (active_set_oracle, fd_jacobians, lp_support, random_polygon, random_qp,
                     sample_inside, series_expm, zoh_oracle)


def max_eqe(run):
    return float(1.0 - np.min(run["log"].h_e))


def test_01_property_suite(constrained_run):
    rep = constrained_run["report"]
    th = float(np.max(np.abs(constrained_run["log"].x[:, 2])))
    eqe = max_eqe(constrained_run)
    ok = rep.passed and th <= 0.78 + 1e-6 and eqe <= 1 + 1e-6
    record(1, "constrained_10hz monitors", ok,
           f"passed={rep.passed}, max|theta|={th:.4f} (<= 0.78), max e'Qe e={eqe:.4f} (<= 1)")
    assert ok, list(rep.lines())


def test_02_goal_convergence(unconstrained_run):
    log, cfg = unconstrained_run["log"], unconstrained_run["cfg"]
    goal, start = cfg.x_goal[0], cfg.x_start[0]
    err = np.abs(log.x[:, 0] - goal)
    overshoot = float(np.max((log.x[:, 0] - goal) * np.sign(goal - start)))
    ok = err.min() <= 0.05 and err[-1] <= 0.05 and overshoot <= 0.02 * abs(goal - start)
    record(2, "unconstrained_2hz goal convergence", ok,
           f"final |p - p_goal|={err[-1]:.4f} m (<= 0.05), overshoot={max(overshoot, 0):.4f} m "
           f"(<= {0.02 * abs(goal - start):.3f})")
    assert ok


def test_03_baseline_contrast(constrained_run, baseline_run):
    th = float(np.max(np.abs(baseline_run["log"].x[:, 2])))
    b_eqe, m_eqe = max_eqe(baseline_run), max_eqe(constrained_run)
    violates = th > 0.78
    worse = b_eqe > 1.0 and b_eqe > m_eqe
    if not violates:
        warnings.warn(f"10 Hz baseline keeps |theta| <= 0.78 (max {th:.4f}); "
                      "only the tracking contrast is observed")
    record(3, "10 Hz baseline contrast", worse,
           f"baseline max e'Qe e={b_eqe:.3f} vs multirate {m_eqe:.3f}; "
           f"baseline max|theta|={th:.4f} ({'violates' if violates else 'no violation, warning'})")
    assert worse


def test_04_qp_oracle():
    rng = np.random.default_rng(2024)
    worst_gap, worst_res, elapsed = 0.0, 0.0, 0.0
    for _ in range(100):
        P, q, G, g, E, e = random_qp(rng)
        assert q.size <= 8 and g.size + e.size <= 12
        prob = QProblem(P=P, q=q, G=G, g=g, E=E, e=e)
        t0 = time.perf_counter()
        sol = solve_qp(prob)
        elapsed += time.perf_counter() - t0
        _, val = active_set_oracle(P, q, G, g, E, e)
        worst_gap = max(worst_gap, abs(sol.objective - val))
        r = sol.residuals
        worst_res = max(worst_res, r.primal, r.dual, r.complementarity)
    ok = worst_gap <= 1e-6 and worst_res <= 1e-8 and elapsed < 5.0
    record(4, "QP oracle equivalence", ok,
           f"max |f - f*|={worst_gap:.2e}, max KKT residual={worst_res:.2e}, "
           f"solver time={elapsed:.3f} s (< 5)")
    assert ok


def test_05_set_oracles():
    rng = np.random.default_rng(5)
    n_samples = 10_000
    violations, ident_err = 0, 0.0
    dirs = rng.normal(size=(32, 2))
    for _ in range(50):
        P = random_polygon(rng)
        Q = sets.affine_image(random_polygon(rng), 0.15 * np.eye(2))
        S = sets.minkowski_sum(P, Q)
        D = sets.pontryagin_diff(P, Q)
        p, qq = sample_inside(rng, P, n_samples), sample_inside(rng, Q, n_samples)
        violations += int(np.sum(np.any((p + qq) @ S.H.T > S.h + 1e-9, axis=1)))
        if not D.is_empty():
            d = sample_inside(rng, D, n_samples)
            violations += int(np.sum(np.any((d + qq) @ P.H.T > P.h + 1e-9, axis=1)))
        # support of a sum is the sum of supports; (P + Q) - Q gives back P
        back = sets.pontryagin_diff(S, Q)
        for u in dirs:
            ident_err = max(ident_err, abs(sets.support(S, u) - sets.support(P, u) - sets.support(Q, u)),
                            abs(sets.support(back, u) - sets.support(P, u)))
    ok = violations == 0 and ident_err <= 1e-8
    record(5, "set arithmetic oracles", ok,
           f"{violations} membership violations in 50 x 2 x 1e4 samples, identity error={ident_err:.1e}")
    assert ok


def test_06_discretization_and_derivatives():
    plant = PlantModel()
    pm = small_angle_linearization(plant)
    zoh_err = 0.0
    for T in (1e-3, 0.1, 0.5):
        dm = zoh_discretize(pm, T)
        Ao, Bo = zoh_oracle(pm.A, pm.B, T)
        zoh_err = max(zoh_err, np.max(np.abs(dm.Abar - Ao)), np.max(np.abs(dm.Bbar - Bo)))

    grad_err = 0.0
    A, B = fd_jacobians(plant.params)
    grad_err = max(grad_err, np.max(np.abs(pm.A - A)), np.max(np.abs(pm.B - B)))
    Qe = np.diag([25.0, 100.0, 400.0, 10000.0])
    he, lyap = error_barrier(Qe), LyapunovFn(Qe)
    rng = np.random.default_rng(6)
    h = 1e-6
    for _ in range(20):
        z = rng.normal(size=4) * 0.05
        for fn, gr in ((he.value, he.gradient), (lyap.value, lyap.gradient)):
            fd = np.array([(fn(z + h * e) - fn(z - h * e)) / (2 * h) for e in np.eye(4)])
            grad_err = max(grad_err, np.max(np.abs(gr(z) - fd)) / max(1.0, np.max(np.abs(fd))))
        # the barrier row is the derivative of h_e along the coupled flow
        x, xb, v, u = z * 4, z * 3, rng.normal(), rng.normal()
        prob = assemble_clf_cbf_qp(x, xb, v, plant, pm, lyap, None, he)
        edot = plant.vector_field(x, u + v) - (pm.A @ xb + pm.B[:, 0] * v)
        fd = (he.value(x - xb + h * edot) - he.value(x - xb - h * edot)) / (2 * h)
        row = -(prob.G[1] @ np.array([u, 0.0]) - prob.g[1]) - he.alpha(he.value(x - xb))
        grad_err = max(grad_err, abs(row - fd) / max(1.0, abs(fd)))

    x0 = np.array([0.0, 0.1, 0.05, -0.02])
    field = lambda x, w: pm.A @ x + pm.B[:, 0] * w
    exact = series_expm(pm.A * 0.4) @ x0

    def err(step):
        x = x0.copy()
        for _ in range(int(round(0.4 / step))):
            x = rk4_step(field, x, 0.0, step)
        return np.max(np.abs(x - exact))

    ratio = err(0.02) / err(0.01)
    ok = zoh_err <= 1e-9 and grad_err <= 1e-5 and 12 <= ratio <= 20
    record(6, "discretization and derivatives", ok,
           f"zoh error={zoh_err:.1e} (<= 1e-9), gradient error={grad_err:.1e} (<= 1e-5), "
           f"RK4 halving ratio={ratio:.2f} (in [12, 20])")
    assert ok


def test_07_tube_and_rpi(segway):
    # dyadic scalar loop a + b k = 0.5 with D = [-1, 1]: E_k = [-(2 - 2^(1-k)), 2 - 2^(1-k)]
    dm = DiscreteModel(Abar=np.array([[0.75]]), Bbar=np.array([[1.0]]), period_T=1.0)
    tube = sets.tube_schedule(dm, [[-0.25]], HPolytope.symmetric_box([1.0]), N=8)
    hand, w = [], 0.0
    for _ in range(9):
        hand.append(w)
        w = 0.5 * w + 1.0
    got = [E.box_bounds[1][0] for E in tube.stages]
    got_lo = [-E.box_bounds[0][0] for E in tube.stages]
    exact = got == hand and got_lo == hand

    _, pm, cfg = segway
    dmz = zoh_discretize(pm, cfg.T_high)
    Acl = dmz.Abar + dmz.Bbar @ pm.K
    dist = sets.ellipsoid_outer_polytope(sets.Ellipsoid(np.array(cfg.Qe)))
    R = sets.rpi_outer(Acl, dist, eps=cfg.rpi_eps, free_dims=(0,))
    margin = max(lp_support(R, Acl.T @ f) + lp_support(dist, f) - r for f, r in zip(R.H, R.h))
    ok = exact and margin <= 1e-8
    record(7, "tube recursion and RPI invariance", ok,
           f"scalar tube exact={exact}, Segway RPI invariance margin={margin:.1e} (<= 1e-8, LP oracle)")
    assert ok


def test_08_reset_map(constrained_run, unconstrained_run, baseline_run):
    bad = []
    for name, run in (("constrained", constrained_run), ("unconstrained", unconstrained_run),
                      ("baseline", baseline_run)):
        log = run["log"]
        solved = np.array(log.mpc_status) == sim.SOLVED
        if not np.all(log.e[solved] == 0.0):
            bad.append(f"{name}: nonzero error after reset")
        changes = set((np.nonzero(np.diff(log.v))[0] + 1).tolist())
        if not changes <= set(np.nonzero(solved)[0].tolist()):
            bad.append(f"{name}: v changed between planner updates")
    ok = not bad
    record(8, "reset map", ok, "e = 0 at every planner update, v held in between (3 runs)"
           if ok else "; ".join(bad))
    assert ok


def test_09_performance(constrained_run):
    wall = constrained_run["wall"]
    t = constrained_run["log"].timing
    worst = max(t["mpc"])
    ok = wall < 60.0 and worst <= 0.05 and len(t["qp"]) == 10_000 and len(t["mpc"]) == 100
    record(9, "performance envelope", ok,
           f"10 s run in {wall:.1f} s (< 60), MPC solve max {1e3 * worst:.2f} ms / mean "
           f"{1e3 * np.mean(t['mpc']):.2f} ms (<= 50), {len(t['qp'])} QP solves")
    assert ok


@pytest.mark.parametrize("name", config.BUNDLED)
def test_10_determinism(name, tmp_path):
    csvs = []
    for sub in ("a", "b"):
        res = subprocess.run([sys.executable, "-m", "multirate.cli", "run", name, "--seedless",
                              "--out", str(tmp_path / sub)], capture_output=True, text=True,
                             timeout=600)
        assert res.returncode == 0, res.stderr
        with open(os.path.join(tmp_path, sub, name, "trace.csv"), "rb") as fh:
            csvs.append(fh.read())
    ok = csvs[0] == csvs[1]
    record(10, f"determinism ({name})", ok,
           f"two CLI runs byte-identical={ok} ({len(csvs[0])} bytes)")
    assert ok
