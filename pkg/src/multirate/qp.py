"""Dense convex QP solver.

Solves::

    minimize    1/2 z'Pz + q'z
    subject to  G z <= g,  E z = e

with an over-relaxed ADMM iteration (OSQP-style splitting on Ruiz-scaled
data) followed by an active-set polish that certifies the KKT residuals.
"""

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import _kernels as K


class QPStatus(str, Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    UNBOUNDED = "unbounded"
    MAX_ITER = "max_iter"


_STATUS = {
    K.OPTIMAL: QPStatus.OPTIMAL,
    K.INFEASIBLE: QPStatus.INFEASIBLE,
    K.UNBOUNDED: QPStatus.UNBOUNDED,
    K.MAX_ITER: QPStatus.MAX_ITER,
}


def _as2d(a, ncol):
    a = np.asarray(a, dtype=float)
    if a.size == 0:
        return np.zeros((0, ncol))
    return np.atleast_2d(a)


@dataclass(frozen=True)
class QProblem:
    P: np.ndarray
    q: np.ndarray
    G: np.ndarray = None
    g: np.ndarray = None
    E: np.ndarray = None
    e: np.ndarray = None

    def __post_init__(self):
        P = np.atleast_2d(np.asarray(self.P, dtype=float))
        q = np.asarray(self.q, dtype=float).ravel()
        n = q.size
        if P.shape != (n, n):
            raise ValueError(f"P has shape {P.shape}, expected {(n, n)}")
        if not np.allclose(P, P.T, rtol=0.0, atol=1e-10 * max(1.0, np.abs(P).max())):
            raise ValueError("P must be symmetric")
        G = _as2d(self.G if self.G is not None else [], n)
        g = np.asarray(self.g if self.g is not None else [], dtype=float).ravel()
        E = _as2d(self.E if self.E is not None else [], n)
        e = np.asarray(self.e if self.e is not None else [], dtype=float).ravel()
        if G.shape[1] != n or G.shape[0] != g.size:
            raise ValueError(f"G {G.shape} / g {g.shape} inconsistent with {n} variables")
        if E.shape[1] != n or E.shape[0] != e.size:
            raise ValueError(f"E {E.shape} / e {e.shape} inconsistent with {n} variables")
        for name, val in (("P", P), ("q", q), ("G", G), ("g", g), ("E", E), ("e", e)):
            object.__setattr__(self, name, val)

    @property
    def n_var(self):
        return self.q.size

    @property
    def n_ineq(self):
        return self.g.size

    @property
    def n_eq(self):
        return self.e.size

    def objective(self, z):
        return 0.5 * z @ self.P @ z + self.q @ z


@dataclass(frozen=True)
class Residuals:
    primal: float
    dual: float
    complementarity: float


@dataclass(frozen=True)
class QSolution:
    z: np.ndarray
    lam: np.ndarray
    nu: np.ndarray
    status: QPStatus
    residuals: Residuals
    iterations: int
    objective: float
    certificate: np.ndarray = field(default=None, repr=False)

    @property
    def ok(self):
        return self.status is QPStatus.OPTIMAL


def kkt_residuals(prob, z, lam, nu):
    """Primal, stationarity and complementarity residuals (infinity norms)."""
    slack = prob.G @ z - prob.g
    primal = max(
        float(np.max(slack, initial=0.0)),
        float(np.max(np.abs(prob.E @ z - prob.e), initial=0.0)),
    )
    stat = prob.P @ z + prob.q + prob.G.T @ lam + prob.E.T @ nu
    dual = float(np.max(np.abs(stat), initial=0.0))
    if lam.size:
        dual = max(dual, float(np.max(-lam, initial=0.0)))
    comp = float(np.max(np.abs(lam * slack), initial=0.0))
    return Residuals(primal, dual, comp)


def _ruiz(P, q, A, iters):
    n = P.shape[0]
    m = A.shape[0]
    D = np.ones(n)
    Ev = np.ones(m)
    c = 1.0
    Ps, qs, As = P.copy(), q.copy(), A.copy()

    def _safe(v):
        v = np.where(v < 1e-4, 1.0, v)
        return np.minimum(v, 1e4)

    for _ in range(iters):
        col = np.max(np.abs(Ps), axis=0)
        if m:
            col = np.maximum(col, np.max(np.abs(As), axis=0))
        dD = 1.0 / np.sqrt(_safe(col))
        dE = 1.0 / np.sqrt(_safe(np.max(np.abs(As), axis=1))) if m else np.ones(0)
        Ps = dD[:, None] * Ps * dD[None, :]
        As = dE[:, None] * As * dD[None, :]
        qs = dD * qs
        D *= dD
        Ev *= dE
        scale = max(np.mean(np.max(np.abs(Ps), axis=0)), np.max(np.abs(qs), initial=0.0))
        gamma = 1.0 / float(_safe(np.array([scale]))[0])
        Ps *= gamma
        qs *= gamma
        c *= gamma
    return D, Ev, c, Ps, qs, As


class QPSolver:
    """Reusable solver workspace.

    Keeps scaling, step sizes and the factorized ADMM system between calls and
    warm-starts from the previous solution. Re-factorization is skipped when
    only ``q``, ``g`` and ``e`` change. Not thread-safe: one instance per thread.
    """

    def __init__(self, tol=(1e-8, 1e-8, 1e-8), max_iter=20000, rho=0.1, sigma=1e-6,
                 alpha=1.6, check_every=25, scaling_iters=10, eps_abs=1e-5, eps_rel=1e-5,
                 eps_inf=1e-6, delta=1e-7, polish_gate=1e3, warm_start=True):
        self.tol = tuple(float(t) for t in tol)
        self.max_iter = int(max_iter)
        self.rho0 = rho
        self.sigma = sigma
        self.alpha = alpha
        self.check_every = check_every
        self.scaling_iters = scaling_iters
        self.eps_abs = eps_abs
        self.eps_rel = eps_rel
        self.eps_inf = eps_inf
        self.delta = delta
        self.polish_gate = polish_gate
        self.warm_start = warm_start
        self._key = None
        self._ws = None
        self._iterates = None

    def reset(self):
        self._key = None
        self._ws = None
        self._iterates = None

    def _setup(self, prob, A, l, u):
        key = (prob.P, prob.G, prob.E)
        same = (
            self._key is not None
            and all(a.shape == b.shape and np.array_equal(a, b) for a, b in zip(self._key, key))
        )
        if same:
            D, Ev, c, Ps, As, rho, Minv = self._ws
            qs = c * D * prob.q
        else:
            D, Ev, c, Ps, qs, As = _ruiz(prob.P, prob.q, A, self.scaling_iters)
            rho = np.full(A.shape[0], self.rho0)
            rho[l == u] *= 1e3
            rho[np.isinf(l) & np.isinf(u)] = K.RHO_MIN
            Minv = K.factor(Ps, As, rho, self.sigma)
        self._key = tuple(a.copy() for a in key)
        return D, Ev, c, Ps, qs, As, rho, Minv

    def solve(self, prob):
        n = prob.n_var
        A = np.vstack([prob.G, prob.E])
        l = np.concatenate([np.full(prob.n_ineq, -np.inf), prob.e])
        u = np.concatenate([prob.g, prob.e])
        if A.shape[0] == 0:
            A = np.zeros((1, n))
            l = np.array([-np.inf])
            u = np.array([np.inf])
        D, Ev, c, Ps, qs, As, rho, Minv = self._setup(prob, A, l, u)
        ls = Ev * l
        us = Ev * u

        it = self._iterates
        if self.warm_start and it is not None and it[0].size == n and it[1].size == A.shape[0]:
            x0, z0, y0 = it[0] / D, Ev * it[1], c * it[2] / Ev
        else:
            x0, z0, y0 = np.zeros(n), np.zeros(A.shape[0]), np.zeros(A.shape[0])

        tp, td, tc = self.tol
        code, iters, x, z, y, xo, yo, cert, rho, Minv = K.admm(
            prob.P, prob.q, A, l, u, D, Ev, c, Ps, qs, As, ls, us,
            x0, z0, y0, rho.copy(), Minv, self.sigma, self.alpha,
            self.eps_abs, self.eps_rel, self.eps_inf, tp, td, tc,
            self.max_iter, self.check_every, self.delta, self.polish_gate)
        status = _STATUS[int(code)]
        self._ws = (D, Ev, c, Ps, As, rho, Minv)
        if status is QPStatus.OPTIMAL:
            self._iterates = (xo.copy(), A @ xo, yo.copy())
        else:
            self._iterates = None

        mi = prob.n_ineq
        lam = yo[:mi].copy()
        nu = yo[mi:mi + prob.n_eq].copy()
        if status is QPStatus.OPTIMAL:
            lam = np.maximum(lam, 0.0)
        res = kkt_residuals(prob, xo, lam, nu)
        return QSolution(
            z=xo.copy(), lam=lam, nu=nu, status=status, residuals=res,
            iterations=int(iters), objective=float(prob.objective(xo)),
            certificate=cert.copy() if cert.size else None,
        )


def solve_qp(prob, tol=(1e-8, 1e-8, 1e-8), max_iter=20000):
    """Solve ``prob`` with a fresh workspace (deterministic, no warm start)."""
    return QPSolver(tol=tol, max_iter=max_iter, warm_start=False).solve(prob)


def warmup():
    """Solve a tiny QP once so compiled kernels are loaded before timing starts."""
    solve_qp(QProblem(P=np.eye(2), q=np.ones(2), G=np.eye(2), g=np.ones(2),
                      E=np.ones((1, 2)), e=np.ones(1)))
