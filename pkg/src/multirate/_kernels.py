"""Hot inner loops.

Every function here is written in the numpy subset numba understands, so the
same source runs compiled (default) or interpreted when numba is disabled via
``MULTIRATE_DISABLE_NUMBA``.
"""

import numpy as np

from ._jit import njit

# ADMM exit codes
OPTIMAL = 0
INFEASIBLE = 1
UNBOUNDED = 2
MAX_ITER = 3

RHO_MIN = 1e-6
RHO_MAX = 1e6


@njit
def inf_norm(v):
    if v.size == 0:
        return 0.0
    return np.max(np.abs(v))


@njit
def factor(Ps, As, rho, sigma):
    n = Ps.shape[0]
    M = Ps + sigma * np.eye(n) + As.T @ (rho[:, None] * As)
    return np.ascontiguousarray(np.linalg.inv(M))


@njit
def complementarity(Ax, l, u, y):
    worst = 0.0
    for i in range(y.size):
        if y[i] > 0.0:
            r = y[i] * abs(u[i] - Ax[i]) if np.isfinite(u[i]) else np.inf
        elif y[i] < 0.0:
            r = -y[i] * abs(Ax[i] - l[i]) if np.isfinite(l[i]) else np.inf
        else:
            r = 0.0
        if r > worst:
            worst = r
    return worst


@njit
def bound_violation(Ax, l, u):
    worst = 0.0
    for i in range(Ax.size):
        r = max(Ax[i] - u[i], l[i] - Ax[i])
        if r > worst:
            worst = r
    return worst


@njit
def _prox_kkt(P, q, A, l, u, act, xa, y0, delta):
    """Proximal KKT solve for the rows flagged in ``act`` (anchored at ``xa``)."""
    n = P.shape[0]
    m = A.shape[0]
    idx = np.nonzero(act)[0]
    k = idx.size
    b = np.empty(k)
    Aact = np.empty((k, n))
    ya = np.empty(k)
    for j in range(k):
        i = idx[j]
        b[j] = l[i] if act[i] == -1 else u[i]
        Aact[j, :] = A[i, :]
        ya[j] = y0[i]
    K = np.zeros((n + k, n + k))
    K[:n, :n] = P + delta * np.eye(n)
    K[:n, n:] = Aact.T
    K[n:, :n] = Aact
    K[n:, n:] = -delta * np.eye(k)
    # one factorization serves all proximal passes and refinement steps
    Kinv = np.linalg.inv(K)
    x = xa.copy()
    for _ in range(4):
        rhs = np.empty(n + k)
        rhs[:n] = -q + delta * x
        rhs[n:] = b - delta * ya
        sol = Kinv @ rhs
        for _r in range(2):
            sol += Kinv @ (rhs - K @ sol)
        x = sol[:n]
        ya = sol[n:]
    y = np.zeros(m)
    for j in range(k):
        y[idx[j]] = ya[j]
    return x, y


@njit
def polish(P, q, A, l, u, x0, z0, y0, delta, tol_p, tol_d, tol_c):
    """Guess the active set from an ADMM iterate and solve the reduced KKT system.

    The guess is trimmed to a linearly independent working set and then refined
    by primal active-set steps: each step solves a proximal KKT system
    (regularization ``delta``, well defined on degenerate sets), is cut short at
    the first blocking row, and wrong-signed multipliers are dropped.
    Returns ``(ok, x, y)`` on the unscaled problem.
    """
    n = P.shape[0]
    m = A.shape[0]
    guess = np.zeros(m, np.int64)
    for i in range(m):
        if l[i] == u[i]:
            guess[i] = 2
        elif z0[i] - l[i] < -y0[i]:
            guess[i] = -1
        elif u[i] - z0[i] < y0[i]:
            guess[i] = 1
    # keep a linearly independent subset: equalities first, then by |y|
    weight = np.abs(y0) + np.where(guess == 2, np.inf, 0.0)
    order = np.argsort(-weight)
    act = np.zeros(m, np.int64)
    basis = np.zeros((n, n))
    rank = 0
    for i in order:
        if guess[i] == 0 or rank == n:
            continue
        r = A[i, :].copy()
        for j in range(rank):
            r -= (basis[j] @ r) * basis[j]
        nr = np.sqrt(r @ r)
        if nr > 1e-9 * np.sqrt(np.sum(A[i, :] * A[i, :])):
            basis[rank] = r / nr
            rank += 1
            act[i] = guess[i]
    x, y = _prox_kkt(P, q, A, l, u, act, x0, y0, delta)
    for _rep in range(3 * m + 20):
        yprev = y
        xn, yn = _prox_kkt(P, q, A, l, u, act, x, y, delta)
        p = xn - x
        # ratio test: stop at the first inactive row the step would cross
        Ax = A @ x
        Ap = A @ p
        t = 1.0
        blk = -1
        side = 0
        for i in range(m):
            if act[i] != 0:
                continue
            if Ap[i] > 1e-14 and np.isfinite(u[i]):
                ti = max((u[i] - Ax[i]) / Ap[i], 0.0)
                if ti < t:
                    t, blk, side = ti, i, 1
            elif Ap[i] < -1e-14 and np.isfinite(l[i]):
                ti = max((l[i] - Ax[i]) / Ap[i], 0.0)
                if ti < t:
                    t, blk, side = ti, i, -1
        x = x + t * p
        y = yn
        if blk >= 0:
            act[blk] = side
            continue
        worst = tol_d
        drop = -1
        for i in range(m):
            if act[i] == 1 and -y[i] > worst:
                worst = -y[i]
                drop = i
            elif act[i] == -1 and y[i] > worst:
                worst = y[i]
                drop = i
        if drop >= 0:
            act[drop] = 0
            y[drop] = 0.0
            continue
        # the proximal terms leave errors of exactly delta*|dx| and delta*|dy|
        if delta * inf_norm(p) > 0.5 * tol_d or delta * inf_norm(yn - yprev) > 0.1 * tol_p:
            continue
        Ax = A @ x
        if complementarity(Ax, l, u, y) > 0.5 * tol_c and _rep < 3 * m + 10:
            continue
        worst = tol_p
        add = -1
        side = 0
        for i in range(m):
            if act[i] != 0:
                continue
            if Ax[i] - u[i] > worst:
                worst, add, side = Ax[i] - u[i], i, 1
            elif l[i] - Ax[i] > worst:
                worst, add, side = l[i] - Ax[i], i, -1
        if add < 0:
            break
        act[add] = side

    for i in range(m):
        if act[i] == 1 and y[i] < 0.0:
            y[i] = 0.0
        elif act[i] == -1 and y[i] > 0.0:
            y[i] = 0.0
    Ax = A @ x
    if bound_violation(Ax, l, u) > tol_p:
        return False, x, y
    if inf_norm(P @ x + q + A.T @ y) > tol_d:
        return False, x, y
    if complementarity(Ax, l, u, y) > tol_c:
        return False, x, y
    return True, x, y


@njit
def _primal_infeasible(A, l, u, dy, eps):
    ndy = inf_norm(dy)
    if ndy < 1e-30:
        return False
    if inf_norm(A.T @ dy) > eps * ndy:
        return False
    s = 0.0
    for i in range(dy.size):
        if dy[i] > 0.0:
            if not np.isfinite(u[i]):
                if dy[i] > eps * ndy:
                    return False
            else:
                s += u[i] * dy[i]
        elif dy[i] < 0.0:
            if not np.isfinite(l[i]):
                if -dy[i] > eps * ndy:
                    return False
            else:
                s += l[i] * dy[i]
    return s < -eps * ndy


@njit
def _dual_infeasible(P, q, A, l, u, dx, eps):
    ndx = inf_norm(dx)
    if ndx < 1e-30:
        return False
    if inf_norm(P @ dx) > eps * ndx:
        return False
    if q @ dx > -eps * ndx:
        return False
    Adx = A @ dx
    for i in range(Adx.size):
        if np.isfinite(u[i]) and Adx[i] > eps * ndx:
            return False
        if np.isfinite(l[i]) and Adx[i] < -eps * ndx:
            return False
    return True


@njit
def admm(P, q, A, l, u, Dv, Ev, c, Ps, qs, As, ls, us, x, z, y, rho, Minv,
         sigma, alpha, eps_abs, eps_rel, eps_inf, tol_p, tol_d, tol_c,
         max_iter, check_every, delta, polish_gate):
    """Over-relaxed ADMM on the scaled problem ``ls <= As x <= us``.

    ``x, z, y`` are scaled warm-start iterates. Returns
    ``(status, iters, x, z, y, xo, yo, cert, rho, Minv)`` where ``xo, yo`` are
    the unscaled primal/dual solution and ``cert`` the infeasibility direction.
    """
    n = Ps.shape[0]
    m = As.shape[0]
    cert = np.zeros(0)
    xprev = x.copy()
    zprev = z.copy()
    yprev = y.copy()
    it = 0
    while it < max_iter:
        xprev = x
        zprev = z
        yprev = y
        rhs = sigma * x - qs + As.T @ (rho * z - y)
        xt = Minv @ rhs
        zt = As @ xt
        x = alpha * xt + (1.0 - alpha) * xprev
        zrel = alpha * zt + (1.0 - alpha) * zprev
        z = np.minimum(np.maximum(zrel + y / rho, ls), us)
        y = y + rho * (zrel - z)
        it += 1

        if it % check_every != 0 and it != max_iter:
            continue

        xo = Dv * x
        zo = z / Ev
        yo = Ev * y / c
        Ax = A @ xo
        Px = P @ xo
        Aty = A.T @ yo
        rp = inf_norm(Ax - zo)
        rd = inf_norm(Px + q + Aty)
        sp = max(inf_norm(Ax), inf_norm(zo))
        sd = max(inf_norm(Px), max(inf_norm(Aty), inf_norm(q)))

        if rp <= tol_p and rd <= tol_d and bound_violation(Ax, l, u) <= tol_p \
                and complementarity(Ax, l, u, yo) <= tol_c:
            # converged; a polished active-set point is exact where it applies
            ok, xp, yp = polish(P, q, A, l, u, xo, zo, yo, delta, tol_p, tol_d, tol_c)
            if ok:
                return OPTIMAL, it, x, z, y, xp, yp, cert, rho, Minv
            return OPTIMAL, it, x, z, y, xo, yo, cert, rho, Minv

        # polish is self-certifying, so try it well before ADMM itself converges
        if rp <= polish_gate * (eps_abs + eps_rel * sp) and rd <= polish_gate * (eps_abs + eps_rel * sd):
            ok, xp, yp = polish(P, q, A, l, u, xo, zo, yo, delta, tol_p, tol_d, tol_c)
            if ok:
                return OPTIMAL, it, x, z, y, xp, yp, cert, rho, Minv

        dy = Ev * (y - yprev) / c
        if _primal_infeasible(A, l, u, dy, eps_inf):
            return INFEASIBLE, it, x, z, y, xo, yo, dy, rho, Minv
        dx = Dv * (x - xprev)
        if _dual_infeasible(P, q, A, l, u, dx, eps_inf):
            return UNBOUNDED, it, x, z, y, xo, yo, dx, rho, Minv

        # rho adaptation from the scaled residual ratio
        Axs = As @ x
        rps = inf_norm(Axs - z) / max(max(inf_norm(Axs), inf_norm(z)), 1e-30)
        rds = inf_norm(Ps @ x + qs + As.T @ y) / max(
            max(inf_norm(Ps @ x), max(inf_norm(As.T @ y), inf_norm(qs))), 1e-30)
        if rps > 0.0 and rds > 0.0:
            ratio = np.sqrt(rps / rds)
            if ratio > 5.0 or ratio < 0.2:
                for i in range(m):
                    rho[i] = min(max(rho[i] * ratio, RHO_MIN), RHO_MAX)
                Minv = factor(Ps, As, rho, sigma)

    xo = Dv * x
    zo = z / Ev
    yo = Ev * y / c
    ok, xp, yp = polish(P, q, A, l, u, xo, zo, yo, delta, tol_p, tol_d, tol_c)
    if ok:
        return OPTIMAL, it, x, z, y, xp, yp, cert, rho, Minv
    return MAX_ITER, it, x, z, y, xo, yo, cert, rho, Minv


# -- Segway plant -----------------------------------------------------------
# prm = (m0, L, J0, R, km, bt, g)

@njit
def segway_terms(x, prm):
    m0 = prm[0]
    L = prm[1]
    J0 = prm[2]
    R = prm[3]
    km = prm[4]
    bt = prm[5]
    grav = prm[6]
    v = x[1]
    th = x[2]
    w = x[3]
    c = np.cos(th)
    s = np.sin(th)
    mLc = m0 * L * c
    det = m0 * J0 - mLc * mLc
    tau0 = -bt * (v / R - w)
    a_p = tau0 / R + m0 * L * s * w * w
    a_t = m0 * grav * L * s - tau0
    f = np.empty(4)
    f[0] = v
    f[1] = (J0 * a_p - mLc * a_t) / det
    f[2] = w
    f[3] = (m0 * a_t - mLc * a_p) / det
    g = np.empty(4)
    g[0] = 0.0
    g[1] = -km * (J0 / R + mLc) / det
    g[2] = 0.0
    g[3] = km * m0 * (1.0 + L * c / R) / det
    return f, g


@njit
def segway_field(x, w, prm):
    f, g = segway_terms(x, prm)
    return f + g * w


@njit
def coupled_rk4(x, xbar, w, v, h, prm, A, b):
    """One RK4 step of the plant (input ``w``) and the linear planner (input ``v``)."""
    k1 = segway_field(x, w, prm)
    k2 = segway_field(x + 0.5 * h * k1, w, prm)
    k3 = segway_field(x + 0.5 * h * k2, w, prm)
    k4 = segway_field(x + h * k3, w, prm)
    xn = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    bv = b * v
    j1 = A @ xbar + bv
    j2 = A @ (xbar + 0.5 * h * j1) + bv
    j3 = A @ (xbar + 0.5 * h * j2) + bv
    j4 = A @ (xbar + h * j3) + bv
    xbn = xbar + (h / 6.0) * (j1 + 2.0 * j2 + 2.0 * j3 + j4)
    return xn, xbn


@njit
def linear_rk4(xbar, v, h, A, b):
    bv = b * v
    j1 = A @ xbar + bv
    j2 = A @ (xbar + 0.5 * h * j1) + bv
    j3 = A @ (xbar + 0.5 * h * j2) + bv
    j4 = A @ (xbar + h * j3) + bv
    return xbar + (h / 6.0) * (j1 + 2.0 * j2 + 2.0 * j3 + j4)
