"""CLF-CBF quadratic program for the high-rate tracking layer.

The low-level input ``u`` is added on top of the held planner command ``v``.
With ``e = x - xbar`` and the planner flowing as ``xbar_dot = A xbar + B v``,

    e_dot = f(x) + g(x) (v + u) - A xbar - B v = a(x, xbar, v) + g(x) u

so every constraint of the QP is affine in ``u``. The decision vector is
``(u, gamma)`` and the cost is ``|u|^2 + c1 gamma^2``; only the Lyapunov row is
relaxed by ``gamma``, the barrier rows are hard.
"""

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .dynamics import PolicyError
from .qp import QProblem, QPSolver, QPStatus


class InfeasibleQP(PolicyError):
    """The CLF-CBF QP has no solution at the current state."""

    def __init__(self, message, status=None, x=None, xbar=None):
        super().__init__(message)
        self.status = status
        self.x = x
        self.xbar = xbar


STATE = "state"
ERROR = "error"


@dataclass(frozen=True)
class BarrierFn:
    """Barrier ``h`` with gradient and linear class-K gain ``alpha(h) = gain * h``.

    ``kind`` is ``"state"`` (argument is ``x``) or ``"error"`` (argument is ``e``).
    """

    kind: str
    value: Callable
    gradient: Callable
    gain: float = 10.0

    def __post_init__(self):
        if self.kind not in (STATE, ERROR):
            raise ValueError(f"unknown barrier kind {self.kind!r}")
        if not self.gain > 0:
            raise ValueError("class-K gain must be positive")

    def alpha(self, h):
        return self.gain * h


@dataclass(frozen=True)
class LyapunovFn:
    """``V(e) = e' Qv e`` with decay rate ``c2`` and relaxation weight ``c1``."""

    Qv: np.ndarray
    c1: float = 100.0
    c2: float = 1.0

    def __post_init__(self):
        Qv = np.atleast_2d(np.asarray(self.Qv, dtype=float))
        if not np.allclose(Qv, Qv.T, atol=1e-12 * max(1.0, np.abs(Qv).max())):
            raise ValueError("Qv must be symmetric")
        if np.min(np.linalg.eigvalsh(Qv)) <= 0:
            raise ValueError("Qv must be positive definite")
        if not (self.c1 > 0 and self.c2 > 0):
            raise ValueError("c1 and c2 must be positive")
        object.__setattr__(self, "Qv", Qv)

    def value(self, e):
        return float(e @ self.Qv @ e)

    def gradient(self, e):
        return 2.0 * self.Qv @ e


def h_e_value(e, Qe):
    """``1 - e'Qe e``: non-negative exactly on the tracking ellipsoid."""
    e = np.asarray(e, dtype=float)
    return float(1.0 - e @ Qe @ e)


def error_barrier(Qe, gain=10.0):
    Qe = np.asarray(Qe, dtype=float)
    return BarrierFn(
        kind=ERROR,
        value=lambda e: h_e_value(e, Qe),
        gradient=lambda e: -2.0 * Qe @ e,
        gain=gain,
    )


def _terms(plant, x):
    f = plant.drift(x)
    g = plant.actuation(x)
    return f, g


def assemble_clf_cbf_qp(x, xbar, v, plant, pm, lyap, hx, he, U=None):
    """Build the QP in ``(u, gamma)``. ``hx=None`` disables the state barrier."""
    x = np.asarray(x, dtype=float)
    xbar = np.asarray(xbar, dtype=float)
    v = np.atleast_1d(np.asarray(v, dtype=float))
    d = pm.d
    f, g = _terms(plant, x)
    xdot_free = f + g @ v
    a = xdot_free - pm.A @ xbar - pm.B @ v
    e = x - xbar

    rows, rhs = [], []
    # Lyapunov decrease, relaxed: dV(a + g u) <= -c2 V + gamma
    dV = lyap.gradient(e)
    rows.append(np.concatenate([dV @ g, [-1.0]]))
    rhs.append(-lyap.c2 * lyap.value(e) - dV @ a)
    # state safety: dhx (f + g(v+u)) >= -alpha1(hx)
    if hx is not None:
        dh = hx.gradient(x)
        rows.append(np.concatenate([-(dh @ g), [0.0]]))
        rhs.append(hx.alpha(hx.value(x)) + dh @ xdot_free)
    # error tracking: dhe (a + g u) >= -alpha2(he)
    dh = he.gradient(e)
    rows.append(np.concatenate([-(dh @ g), [0.0]]))
    rhs.append(he.alpha(he.value(e)) + dh @ a)
    if U is not None and U.m:
        rows.extend(np.hstack([U.H, np.zeros((U.m, 1))]))
        rhs.extend(U.h)

    P = np.diag(np.concatenate([np.full(d, 2.0), [2.0 * lyap.c1]]))
    return QProblem(P=P, q=np.zeros(d + 1), G=np.array(rows), g=np.array(rhs))


class ClfCbfController:
    """Low-level policy ``u = pi_u(x, xbar, v)`` with a persistent solver workspace.

    After each call ``last`` holds the QP solution and ``last_values`` the
    ``(h_e, h_x, V)`` triple at the evaluated state.
    """

    def __init__(self, plant, pm, lyap, he, hx=None, U=None, solver=None):
        self.plant = plant
        self.pm = pm
        self.lyap = lyap
        self.he = he
        self.hx = hx
        self.U = U
        self.solver = solver if solver is not None else QPSolver()
        self.last = None
        self.last_values = (np.nan, np.nan, np.nan)

    def values(self, x, xbar):
        e = np.asarray(x) - np.asarray(xbar)
        hx = self.hx.value(x) if self.hx is not None else np.inf
        return self.he.value(e), hx, self.lyap.value(e)

    def __call__(self, x, xbar, v):
        prob = assemble_clf_cbf_qp(x, xbar, v, self.plant, self.pm, self.lyap,
                                   self.hx, self.he, self.U)
        sol = self.solver.solve(prob)
        self.last = sol
        self.last_values = self.values(x, xbar)
        if sol.status is not QPStatus.OPTIMAL:
            raise InfeasibleQP(
                f"CLF-CBF QP {sol.status.value} at x={np.round(x, 6).tolist()}, "
                f"xbar={np.round(xbar, 6).tolist()}",
                status=sol.status, x=np.array(x), xbar=np.array(xbar))
        u = sol.z[:self.pm.d]
        return float(u[0]) if self.pm.d == 1 else u.copy()


def low_level_policy(x, xbar, v, plant, pm, lyap, he, hx=None, U=None, solver=None):
    """One-shot evaluation of the low-level policy (fresh workspace unless given)."""
    return ClfCbfController(plant, pm, lyap, he, hx, U, solver)(x, xbar, v)
