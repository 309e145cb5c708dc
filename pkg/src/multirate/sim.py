"""Deterministic multi-rate closed-loop executor with runtime property monitors.

At every planner instant ``t_k`` the plant state is reset, the planner state is
re-anchored to it (so the tracking error is exactly zero) and a new command
``v`` is computed. Between instants the low-level policy is evaluated every
``dt_low`` and plant and planner are integrated jointly with RK4.
"""

import csv
import math
import time
from dataclasses import dataclass

import numpy as np

from .dynamics import NonFiniteError, PolicyError, coupled_step, n_steps
from .qp import warmup

CSV_HEADER = ("t", "px", "vx", "theta", "omega", "px_bar", "vx_bar", "theta_bar",
              "omega_bar", "u", "v", "h_e", "h_x", "V", "mpc_status", "qp_status")

SOLVED = "optimal"
HOLD = "hold"
OFF = "off"


@dataclass(frozen=True)
class Schedule:
    """Low-level period, planner period and run length in seconds."""

    dt_low: float = 1e-3
    T_high: float = 0.5
    duration: float = 10.0

    def __post_init__(self):
        if not (self.dt_low > 0 and self.T_high > 0 and self.duration > 0):
            raise ValueError("periods and duration must be positive")
        n_steps(self.T_high, self.dt_low)
        n_steps(self.duration, self.T_high)

    @property
    def steps_per_period(self):
        return n_steps(self.T_high, self.dt_low)

    @property
    def n_periods(self):
        return n_steps(self.duration, self.T_high)


class TraceLog:
    """Row-wise record of a run. ``e`` is derived as ``x - xbar``."""

    def __init__(self, n=4):
        self.n = n
        self._rows = []
        self._status = []
        self.timing = {"mpc": [], "qp": []}

    def append(self, t, x, xbar, u, v, h_e, h_x, V, mpc_status, qp_status):
        self._rows.append(np.concatenate([[t], x, xbar, [u, v, h_e, h_x, V]]))
        self._status.append((mpc_status, qp_status))

    def __len__(self):
        return len(self._rows)

    def _col(self, a, b=None):
        M = np.array(self._rows) if self._rows else np.zeros((0, 2 * self.n + 6))
        return M[:, a] if b is None else M[:, a:b]

    @property
    def t(self):
        return self._col(0)

    @property
    def x(self):
        return self._col(1, 1 + self.n)

    @property
    def xbar(self):
        return self._col(1 + self.n, 1 + 2 * self.n)

    @property
    def e(self):
        return self.x - self.xbar

    @property
    def u(self):
        return self._col(1 + 2 * self.n)

    @property
    def v(self):
        return self._col(2 + 2 * self.n)

    @property
    def h_e(self):
        return self._col(3 + 2 * self.n)

    @property
    def h_x(self):
        return self._col(4 + 2 * self.n)

    @property
    def V(self):
        return self._col(5 + 2 * self.n)

    @property
    def mpc_status(self):
        return [s[0] for s in self._status]

    @property
    def qp_status(self):
        return [s[1] for s in self._status]

    def rows(self):
        """Yield ``(t, x, xbar, u, v, h_e, h_x, V, mpc_status, qp_status)``."""
        n = self.n
        for r, (ms, qs) in zip(self._rows, self._status):
            yield (r[0], r[1:1 + n], r[1 + n:1 + 2 * n], r[1 + 2 * n], r[2 + 2 * n],
                   r[3 + 2 * n], r[4 + 2 * n], r[5 + 2 * n], ms, qs)

    def to_csv(self, path):
        if self.n != 4:
            raise ValueError("CSV export is defined for the 4-state model")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_HEADER)
            for r, st in zip(self._rows, self._status):
                w.writerow([format(float(a), ".17g") for a in r] + list(st))

    @classmethod
    def from_csv(cls, path):
        log = cls(4)
        with open(path, newline="") as fh:
            rd = csv.reader(fh)
            header = tuple(next(rd))
            if header != CSV_HEADER:
                raise ValueError(f"unexpected trace header in {path}")
            for row in rd:
                vals = np.array([float(a) for a in row[:14]])
                log._rows.append(vals)
                log._status.append((row[14], row[15]))
        return log


def _first(cur, t):
    return t if cur is None else cur


@dataclass
class MonitorReport:
    """Property monitors with the time of the first violation (``None`` if none)."""

    state_constraint_ok: bool = True
    input_ok: bool = True
    tracking_ok: bool = True
    reset_ok: bool = True
    recursive_feasibility_ok: bool = True
    first_state_violation: float = None
    first_input_violation: float = None
    first_tracking_violation: float = None
    first_reset_violation: float = None
    first_feasibility_violation: float = None
    halted: bool = False
    halt_reason: str = ""

    @property
    def passed(self):
        return (self.state_constraint_ok and self.input_ok and self.tracking_ok
                and self.reset_ok and self.recursive_feasibility_ok and not self.halted)

    def as_dict(self):
        out = {k: getattr(self, k) for k in self.__dataclass_fields__}
        out["passed"] = self.passed
        return out

    def lines(self):
        yield f"PASS: {self.passed}"
        for name, first in (("state_constraint_ok", self.first_state_violation),
                            ("input_ok", self.first_input_violation),
                            ("tracking_ok", self.first_tracking_violation),
                            ("reset_ok", self.first_reset_violation),
                            ("recursive_feasibility_ok", self.first_feasibility_violation)):
            ok = getattr(self, name)
            yield f"{name}: {ok}" + ("" if ok else f" (first at t={first:.6g})")
        if self.halted:
            yield f"halted: {self.halt_reason}"


@dataclass
class MonitorSets:
    """Sets the monitors check against. ``None`` means unconstrained."""

    Xd: object = None
    V: object = None
    U: object = None
    tol: float = 1e-6


class Monitor:
    """Online property checker; feed it rows in time order."""

    def __init__(self, sets_, report=None):
        self.sets = sets_
        self.report = report if report is not None else MonitorReport()
        self._v_prev = None
        self._seen_feasible = False

    def observe(self, t, x, xbar, u, v, h_e, h_x, mpc_status):
        s, r, tol = self.sets, self.report, self.sets.tol
        transition = mpc_status == SOLVED
        if h_x < -tol or (s.Xd is not None and not s.Xd.contains(x, tol=tol)):
            r.state_constraint_ok = False
            r.first_state_violation = _first(r.first_state_violation, t)
        bad_u = s.U is not None and not s.U.contains(np.atleast_1d(u), tol=tol)
        bad_v = transition and s.V is not None and not s.V.contains(np.atleast_1d(v), tol=tol)
        if bad_u or bad_v:
            r.input_ok = False
            r.first_input_violation = _first(r.first_input_violation, t)
        if h_e < -tol:
            r.tracking_ok = False
            r.first_tracking_violation = _first(r.first_tracking_violation, t)
        reset_bad = transition and np.any(np.asarray(x) != np.asarray(xbar))
        held_bad = not transition and self._v_prev is not None and v != self._v_prev
        if reset_bad or held_bad:
            r.reset_ok = False
            r.first_reset_violation = _first(r.first_reset_violation, t)
        self._v_prev = v

    def planner_result(self, t, ok):
        r = self.report
        if ok:
            self._seen_feasible = True
        elif self._seen_feasible:
            r.recursive_feasibility_ok = False
            r.first_feasibility_violation = _first(r.first_feasibility_violation, t)


def check_properties(log, Xd=None, V=None, U=None, tol=1e-6):
    """Recompute the monitor report from a trace alone."""
    mon = Monitor(MonitorSets(Xd, V, U, tol))
    for t, x, xbar, u, v, h_e, h_x, _, ms, _ in log.rows():
        mon.observe(t, x, xbar, u, v, h_e, h_x, ms)
        if ms == SOLVED:
            mon.planner_result(t, True)
        elif ms not in (HOLD, OFF):
            mon.planner_result(t, False)
    return mon.report


def _scalar(a):
    return float(np.asarray(a, dtype=float).reshape(-1)[0])


def run_closed_loop(plant, pm, planner, low_level, schedule, x0, monitor_sets=None,
                    h_e=None, clock=time.perf_counter):
    """Run the multi-rate loop and return ``(TraceLog, MonitorReport)``.

    ``planner(x)`` returns the held command ``v``; ``low_level(x, xbar, v)`` the
    correction ``u`` or ``None`` to run the planner alone (``u = 0``).
    ``h_e(e)`` is used for logging when there is no low-level controller.
    Infeasibility halts the run and is recorded in the report.
    """
    x = np.asarray(x0, dtype=float).copy()
    if not np.all(np.isfinite(x)):
        raise NonFiniteError("x0 must be finite")
    mset = monitor_sets if monitor_sets is not None else MonitorSets()
    mon = Monitor(mset)
    log = TraceLog(x.size)
    dt = schedule.dt_low
    m = schedule.steps_per_period
    step = 0
    xbar = x.copy()
    v = 0.0
    u = 0.0
    vals = (np.nan, np.inf, np.nan)
    qs = OFF
    warmup()
    try:
        for k in range(schedule.n_periods):
            x = plant.reset(x)
            xbar = x.copy()
            t0 = clock()
            try:
                v = _scalar(planner(x))
            except PolicyError:
                mon.planner_result(step * dt, False)
                raise
            log.timing["mpc"].append(clock() - t0)
            mon.planner_result(step * dt, True)
            for i in range(m):
                t = step * dt
                if low_level is not None:
                    t0 = clock()
                    u = _scalar(low_level(x, xbar, v))
                    log.timing["qp"].append(clock() - t0)
                    vals = low_level.last_values
                    qs = low_level.last.status.value
                else:
                    e = x - xbar
                    vals = (h_e(e) if h_e is not None else np.nan, np.inf, np.nan)
                ms = SOLVED if i == 0 else HOLD
                log.append(t, x, xbar, u, v, *vals, ms, qs)
                mon.observe(t, x, xbar, u, v, vals[0], vals[1], ms)
                x, xbar = coupled_step(plant, pm, x, xbar, u + v, v, dt)
                step += 1
        t = step * dt
        e = x - xbar
        if low_level is not None:
            vals = low_level.values(x, xbar)
        elif h_e is not None:
            vals = (h_e(e), np.inf, np.nan)
        log.append(t, x, xbar, u, v, *vals, HOLD, HOLD if low_level is not None else OFF)
        mon.observe(t, x, xbar, u, v, vals[0], vals[1], HOLD)
    except (RuntimeError, NonFiniteError, ValueError) as ex:
        mon.report.halted = True
        mon.report.halt_reason = f"{type(ex).__name__} at t={step * dt:.6g}: {ex}"
    return log, mon.report


def summarize(log, x_goal):
    """Goal error, extremes and timing statistics of a trace."""
    x = log.x
    e = log.e
    out = {
        "rows": len(log),
        "final_t": float(log.t[-1]) if len(log) else math.nan,
        "goal_error": float(np.linalg.norm(x[-1] - x_goal)) if len(log) else math.nan,
        "position_error": float(abs(x[-1, 0] - x_goal[0])) if len(log) else math.nan,
        "max_abs_theta": float(np.max(np.abs(x[:, 2]))) if len(log) else math.nan,
        "min_h_e": float(np.min(log.h_e)) if len(log) else math.nan,
        "max_abs_e": np.max(np.abs(e), axis=0).tolist() if len(log) else [],
    }
    for key in ("mpc", "qp"):
        ts = np.array(log.timing[key])
        out[f"{key}_solves"] = int(ts.size)
        out[f"{key}_mean_s"] = float(ts.mean()) if ts.size else 0.0
        out[f"{key}_max_s"] = float(ts.max()) if ts.size else 0.0
    return out
