"""Robust tube MPC over the pre-stabilized discrete planning model.

Nominal prediction ``x_{k+1} = Acl x_k + Bcl v_k`` with ``Acl = T(Abar + Bbar K)``
and ``Bcl = T Bbar``; the command sent to the plant is ``K x + v``. Constraints
are tightened stage by stage with the exact support function of the error tube
``E_k``, so the true state and command stay feasible for every error in the
tube.
"""

from dataclasses import dataclass, field

import numpy as np

from . import sets
from .dynamics import PolicyError
from .qp import QProblem, QPSolver, QPStatus


class MpcError(RuntimeError):
    pass


class OverTightened(MpcError):
    """A tightened constraint set is empty."""

    def __init__(self, stage, which):
        super().__init__(f"{which} constraint empty after tightening at stage {stage}")
        self.stage = stage
        self.which = which


class TerminalNotInXd(MpcError):
    pass


NotContractive = sets.NotContractiveError


class InfeasibleMpc(PolicyError):
    """The tube MPC has no solution; ``diagnostics`` lists the conflicting rows."""

    def __init__(self, message, status=None, diagnostics=()):
        super().__init__(message)
        self.status = status
        self.diagnostics = list(diagnostics)


def tighten(P, tube, k, M=None):
    """``P - M E_k`` using the exact tube support (``M`` defaults to identity)."""
    if P.m == 0:
        return P
    s = np.array([tube.support(k, row if M is None else M.T @ row) for row in P.H])
    return sets.HPolytope(P.H, P.h - s, n=P.n)


@dataclass
class TubeMpc:
    dm: object
    K: np.ndarray
    reset_T: np.ndarray
    N: int
    Q: np.ndarray
    R: np.ndarray
    Qf: np.ndarray
    x_goal: np.ndarray
    tubes: sets.TubeSchedule
    Xd_Sx: sets.HPolytope
    V: sets.HPolytope
    XF: sets.HPolytope
    tightened_state: list
    tightened_input: list
    tightened_terminal: sets.HPolytope
    Acl: np.ndarray = field(repr=False, default=None)
    Bcl: np.ndarray = field(repr=False, default=None)

    @property
    def n(self):
        return self.Acl.shape[0]

    @property
    def d(self):
        return self.Bcl.shape[1]

    @property
    def n_var(self):
        return (self.N + 1) * (self.n + self.d)


@dataclass(frozen=True)
class MpcSolution:
    v_seq: np.ndarray
    x_seq: np.ndarray
    cost: float
    status: QPStatus
    iterations: int = 0


def build_tube_mpc(dm, K, dist, N, Q, R, Qf, x_goal, Xd, V, reset_T=None,
                   free_dims=(), rpi_eps=1e-2, terminal=None, tube_depth=None, tightening=None):
    """Assemble the tube MPC: tube, tightened sets and terminal set.

    ``terminal`` overrides the terminal set; by default it is the goal plus an
    outer approximation of the minimal RPI set of ``Acl`` under ``dist``.
    ``free_dims`` lists integrator coordinates the RPI set leaves unbounded.
    ``tube_depth`` caps the tube: stages past it reuse the last cross section
    (only sound when the tube has saturated; used for long-horizon baselines).
    ``tightening`` is an optional ``(state_sets, input_sets, terminal_set)``
    triple with ``N + 1`` stage entries that replaces the tube tightening.
    """
    n = dm.Abar.shape[0]
    T = np.eye(n) if reset_T is None else np.asarray(reset_T, dtype=float)
    K = np.atleast_2d(np.asarray(K, dtype=float))
    Acl = T @ (dm.Abar + dm.Bbar @ K)
    Bcl = T @ dm.Bbar
    rho = float(np.max(np.abs(np.linalg.eigvals(Acl))))
    if not free_dims and rho >= 1.0:
        raise NotContractive(f"closed-loop spectral radius {rho:.6g} >= 1")
    if N < 1:
        raise ValueError("horizon must be >= 1")
    x_goal = np.asarray(x_goal, dtype=float)

    depth = N if tube_depth is None else int(min(tube_depth, N))
    if depth < 1:
        raise ValueError("tube_depth must be >= 1")
    tube = sets.tube_from_closed_loop(Acl, dist, depth)
    if terminal is None:
        R_set = sets.rpi_outer(Acl, dist, eps=rpi_eps, free_dims=free_dims)
        terminal = sets.affine_image(R_set, np.eye(n), x_goal)
    for row, off in zip(Xd.H, Xd.h):
        try:
            s = sets.support(terminal, row)
        except sets.UnboundedError:
            s = np.inf
        if s > off + 1e-9:
            raise TerminalNotInXd(f"terminal set leaves X_d along {np.round(row, 6).tolist()} "
                                  f"({s:.6g} > {off:.6g})")

    if tightening is None:
        tight_x = [tighten(Xd, tube, min(k, depth)) for k in range(N + 1)]
        tight_v = [tighten(V, tube, min(k, depth), K) for k in range(N + 1)]
        tight_f = tighten(terminal, tube, depth)
    else:
        tight_x, tight_v, tight_f = list(tightening[0]), list(tightening[1]), tightening[2]
        if len(tight_x) != N + 1 or len(tight_v) != N + 1:
            raise ValueError(f"tightening needs {N + 1} stages")
    for k in range(N + 1):
        if tight_x[k].is_empty():
            raise OverTightened(k, "state")
        if tight_v[k].is_empty():
            raise OverTightened(k, "input")
    if tight_f.is_empty():
        raise OverTightened(N, "terminal")

    return TubeMpc(
        dm=dm, K=K, reset_T=T, N=int(N),
        Q=np.asarray(Q, float), R=np.atleast_2d(np.asarray(R, float)), Qf=np.asarray(Qf, float),
        x_goal=x_goal, tubes=tube, Xd_Sx=Xd, V=V, XF=terminal,
        tightened_state=tight_x, tightened_input=tight_v, tightened_terminal=tight_f,
        Acl=Acl, Bcl=Bcl,
    )


def _layout(mpc):
    """Index helpers: v_k occupies ``vs(k)``, x_k occupies ``xs(k)``."""
    n, d, N = mpc.n, mpc.d, mpc.N
    off = (N + 1) * d

    def vs(k):
        return slice(k * d, (k + 1) * d)

    def xs(k):
        return slice(off + k * n, off + (k + 1) * n)

    return vs, xs


def _structure(mpc):
    """Everything in the QP that does not depend on ``x_now`` (cached on ``mpc``)."""
    cached = getattr(mpc, "_qp_cache", None)
    if cached is not None:
        return cached
    n, d, N = mpc.n, mpc.d, mpc.N
    nv = mpc.n_var
    vs, xs = _layout(mpc)

    P = np.zeros((nv, nv))
    q = np.zeros(nv)
    for k in range(N + 1):
        P[vs(k), vs(k)] = 2.0 * mpc.R
        W = mpc.Q + (mpc.Qf if k == N else 0.0)
        P[xs(k), xs(k)] = 2.0 * W
        q[xs(k)] = -2.0 * W @ mpc.x_goal

    E = np.zeros((n * (N + 1), nv))
    E[0:n, xs(0)] = np.eye(n)
    for k in range(N):
        r = slice(n * (k + 1), n * (k + 2))
        E[r, xs(k + 1)] = np.eye(n)
        E[r, xs(k)] = -mpc.Acl
        E[r, vs(k)] = -mpc.Bcl

    G_rows, g_vals, tags = [], [], []
    for k in range(N + 1):
        Xk = mpc.tightened_state[k]
        for i, (row, off) in enumerate(zip(Xk.H, Xk.h)):
            gr = np.zeros(nv)
            gr[xs(k)] = row
            G_rows.append(gr)
            g_vals.append(off)
            tags.append((k, "state", i))
        Vk = mpc.tightened_input[k]
        for i, (row, off) in enumerate(zip(Vk.H, Vk.h)):
            gr = np.zeros(nv)
            gr[vs(k)] = row
            gr[xs(k)] = row @ mpc.K
            G_rows.append(gr)
            g_vals.append(off)
            tags.append((k, "input", i))
    XF = mpc.tightened_terminal
    for i, (row, off) in enumerate(zip(XF.H, XF.h)):
        gr = np.zeros(nv)
        gr[xs(N)] = row
        G_rows.append(gr)
        g_vals.append(off)
        tags.append((N, "terminal", i))
    G = np.array(G_rows) if G_rows else np.zeros((0, nv))
    g = np.array(g_vals)
    const = float(sum((mpc.x_goal @ (mpc.Q + (mpc.Qf if k == N else 0.0)) @ mpc.x_goal)
                      for k in range(N + 1)))
    cached = (P, q, G, g, E, tags, const)
    mpc._qp_cache = cached
    return cached


def assemble_mpc_qp(mpc, x_now):
    """Sparse-form QP in ``(v_0..v_N, x_0..x_N)``.

    The objective omits the constant ``sum x_g' W x_g``; ``MpcSolution.cost``
    adds it back.
    """
    P, q, G, g, E, _, _ = _structure(mpc)
    e = np.zeros(E.shape[0])
    e[:mpc.n] = np.asarray(x_now, dtype=float)
    return QProblem(P=P, q=q, G=G, g=g, E=E, e=e)


def _condensed(mpc):
    """Condensed form: states eliminated through ``X = Phi x_now + Gam V``.

    Returns ``(H, Fx, f0, Gc, Gx_phi, g, keep, tags)`` with cost gradient
    ``Fx x_now + f0`` and rows ``Gc V <= g - Gx_phi x_now``. Rows that do not
    involve ``V`` at all (stage-0 state rows) are left out of the QP and listed
    by ``~keep``; they are checked directly against ``x_now``.
    """
    cached = getattr(mpc, "_cond_cache", None)
    if cached is not None:
        return cached
    n, d, N = mpc.n, mpc.d, mpc.N
    P, _, G, g, _, tags, _ = _structure(mpc)
    nvv = (N + 1) * d
    Phi = np.zeros(((N + 1) * n, n))
    Gam = np.zeros(((N + 1) * n, nvv))
    Phi[:n] = np.eye(n)
    for k in range(N):
        r0, r1 = slice(k * n, (k + 1) * n), slice((k + 1) * n, (k + 2) * n)
        Phi[r1] = mpc.Acl @ Phi[r0]
        Gam[r1] = mpc.Acl @ Gam[r0]
        Gam[r1, k * d:(k + 1) * d] += mpc.Bcl
    W = P[nvv:, nvv:]
    H = P[:nvv, :nvv] + Gam.T @ W @ Gam
    Fx = Gam.T @ W @ Phi
    Xg = np.tile(mpc.x_goal, N + 1)
    f0 = -Gam.T @ W @ Xg
    Gv, Gx = G[:, :nvv], G[:, nvv:]
    Gc = Gv + Gx @ Gam
    Gx_phi = Gx @ Phi
    keep = np.any(np.abs(Gc) > 0.0, axis=1)
    cached = (H, Fx, f0, Gc, Gx_phi, g, keep, tags)
    mpc._cond_cache = cached
    return cached


def assemble_condensed_qp(mpc, x_now):
    """QP in ``(v_0..v_N)`` alone, equivalent to ``assemble_mpc_qp`` for ``x_now``.

    Returns the problem and the rows left out of it (indices into the full
    constraint list) that ``x_now`` violates.
    """
    H, Fx, f0, Gc, Gx_phi, g, keep, _ = _condensed(mpc)
    x_now = np.asarray(x_now, dtype=float)
    rhs = g - Gx_phi @ x_now
    dropped = np.nonzero(~keep & (rhs < 0.0))[0]
    return QProblem(P=H, q=Fx @ x_now + f0, G=Gc[keep], g=rhs[keep]), dropped


def _diagnose(mpc, sol, dropped=()):
    tags = _condensed(mpc)[7]
    rows = np.nonzero(_condensed(mpc)[6])[0]
    out = [(tags[i][0], tags[i][1], 0.0) for i in dropped]
    if out:
        return out
    if sol.certificate is not None and rows.size:
        cert = np.abs(sol.certificate[:rows.size])
        if cert.max() > 0:
            for i in np.nonzero(cert > 1e-6 * cert.max())[0]:
                out.append((tags[rows[i]][0], tags[rows[i]][1], float(cert[i])))
    return out


class TubeMpcController:
    """``pi_v(x) = v*_0 + K x`` with a warm-started solver workspace.

    Solves the condensed QP (inputs only); the nominal states are recovered
    by the prediction recursion.
    """

    def __init__(self, mpc, solver=None):
        self.mpc = mpc
        self.solver = solver if solver is not None else QPSolver()
        self.last = None

    def solve(self, x_now):
        mpc = self.mpc
        x_now = np.asarray(x_now, dtype=float)
        prob, dropped = assemble_condensed_qp(mpc, x_now)
        if dropped.size:
            sol = None
            status = QPStatus.INFEASIBLE
        else:
            sol = self.solver.solve(prob)
            status = sol.status
        if status is not QPStatus.OPTIMAL:
            diag = _diagnose(mpc, sol, dropped)
            where = ", ".join(f"stage {k} {kind}" for k, kind, _ in diag[:6]) or "unknown rows"
            raise InfeasibleMpc(f"tube MPC {status.value} at x={np.round(x_now, 6).tolist()} "
                                f"(binding: {where})", status=status, diagnostics=diag)
        v_seq = sol.z.reshape(mpc.N + 1, mpc.d)
        x_seq = np.empty((mpc.N + 1, mpc.n))
        x_seq[0] = x_now
        for k in range(mpc.N):
            x_seq[k + 1] = mpc.Acl @ x_seq[k] + mpc.Bcl @ v_seq[k]
        dx = x_seq - mpc.x_goal
        cost = float(np.einsum("ki,ij,kj->", dx, mpc.Q, dx) + np.einsum("ki,ij,kj->", v_seq, mpc.R, v_seq)
                     + dx[-1] @ mpc.Qf @ dx[-1])
        self.last = MpcSolution(v_seq=v_seq, x_seq=x_seq, cost=cost, status=status,
                                iterations=sol.iterations)
        return self.last

    def __call__(self, x_now):
        x_now = np.asarray(x_now, dtype=float)
        s = self.solve(x_now)
        v = s.v_seq[0] + self.mpc.K @ x_now
        if not self.mpc.V.contains(v, tol=1e-6):
            raise MpcError(f"planner command {v} outside V")
        return float(v[0]) if v.size == 1 else v


def mpc_policy(mpc, x_now, solver=None):
    return TubeMpcController(mpc, solver)(x_now)
