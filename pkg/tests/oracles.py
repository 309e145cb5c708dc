"""Independent reference computations used by the tests."""

import itertools
import math

import numpy as np
from scipy.optimize import linprog

from multirate.dynamics import segway_vector_field
from multirate.sets import HPolytope


def vertices_2d(P):
    """Vertex enumeration by intersecting facet pairs."""
    out = []
    for i, j in itertools.combinations(range(P.m), 2):
        M = P.H[[i, j]]
        if abs(np.linalg.det(M)) < 1e-12:
            continue
        x = np.linalg.solve(M, P.h[[i, j]])
        if np.all(P.H @ x <= P.h + 1e-9):
            out.append(x)
    return np.array(out)


def random_polygon(rng, k=None, center=None):
    """Bounded polygon with ``k`` facets; the origin (or ``center``) is inside."""
    k = k or int(rng.integers(3, 9))
    ang = np.sort((np.arange(k) + rng.uniform(-0.3, 0.3, k)) * 2 * np.pi / k)
    H = np.column_stack([np.cos(ang), np.sin(ang)])
    h = rng.uniform(0.3, 2.0, k)
    if center is not None:
        h = h + H @ center
    return HPolytope(H, h)


def sample_inside(rng, P, n):
    V = vertices_2d(P)
    w = rng.dirichlet(np.ones(len(V)), size=n)
    return w @ V


def lp_support(P, d):
    res = linprog(-np.asarray(d, float), A_ub=P.H, b_ub=P.h, bounds=[(None, None)] * P.n,
                  method="highs")
    return -res.fun


def random_qp(rng, n=None, m=None, n_eq=None):
    """Feasible strictly convex QP as ``(P, q, G, g, E, e)``."""
    n = n or int(rng.integers(2, 9))
    m_total = m or int(rng.integers(1, 13))
    n_eq = min(n - 1, int(rng.integers(0, 3))) if n_eq is None else n_eq
    n_eq = min(n_eq, m_total - 1) if m_total > 1 else 0
    m = m_total - n_eq
    M = rng.normal(size=(n, n))
    P = M @ M.T + 0.1 * np.eye(n)
    q = rng.normal(size=n) * 3
    z0 = rng.normal(size=n)
    G = rng.normal(size=(m, n))
    g = G @ z0 + rng.uniform(0.0, 1.0, m)
    E = rng.normal(size=(n_eq, n))
    e = E @ z0
    return P, q, G, g, E, e


def active_set_oracle(P, q, G, g, E, e, tol=1e-9):
    """Enumerate active sets, solve each KKT system, keep the KKT point.

    Returns ``(z, value)`` for the optimum of a strictly convex QP.
    """
    n = q.size
    m = g.size
    p = e.size
    best = None
    for k in range(0, min(m, n - p) + 1):
        for act in itertools.combinations(range(m), k):
            A = np.vstack([E, G[list(act)]]) if (p or k) else np.zeros((0, n))
            b = np.concatenate([e, g[list(act)]])
            K = np.block([[P, A.T], [A, np.zeros((A.shape[0], A.shape[0]))]])
            try:
                sol = np.linalg.solve(K, np.concatenate([-q, b]))
            except np.linalg.LinAlgError:
                continue
            z = sol[:n]
            lam = sol[n + p:]
            if np.any(G @ z - g > tol * (1 + np.abs(g))) or np.any(lam < -tol):
                continue
            val = 0.5 * z @ P @ z + q @ z
            if best is None or val < best[1]:
                best = (z, val)
    return best


def series_expm(M, terms=40):
    """Truncated Taylor series with scaling and squaring (test oracle)."""
    norm = np.max(np.sum(np.abs(M), axis=0))
    s = max(0, int(math.ceil(math.log2(norm))) + 1) if norm > 0 else 0
    X = M / 2.0 ** s
    out = np.eye(M.shape[0])
    term = np.eye(M.shape[0])
    for k in range(1, terms):
        term = term @ X / k
        out = out + term
    for _ in range(s):
        out = out @ out
    return out


def zoh_oracle(A, B, T):
    n, d = B.shape
    M = np.zeros((n + d, n + d))
    M[:n, :n] = A
    M[:n, n:] = B
    E = series_expm(M * T)
    return E[:n, :n], E[:n, n:]


def fd_jacobians(params, h=1e-5):
    f = lambda x, w: segway_vector_field(x, w, params)
    A = np.zeros((4, 4))
    for j in range(4):
        e = np.zeros(4)
        e[j] = h
        A[:, j] = (f(e, 0.0) - f(-e, 0.0)) / (2 * h)
    B = ((f(np.zeros(4), h) - f(np.zeros(4), -h)) / (2 * h))[:, None]
    return A, B
