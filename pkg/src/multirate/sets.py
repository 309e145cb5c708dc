"""Ellipsoids and H-polytopes with support-function arithmetic.

Outer approximations are always taken on a finite set of template directions
(by default the +/- axis directions plus whatever facets the operands carry), so
Minkowski sums never need vertex enumeration.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog


class SetError(ValueError):
    pass


class EmptySetError(SetError):
    pass


class UnboundedError(SetError):
    pass


class DegenerateDirectionsError(SetError):
    pass


class NotContractiveError(SetError):
    pass


class NoConvergenceError(SetError):
    pass


LP_OPTIONS = {"primal_feasibility_tolerance": 1e-10, "dual_feasibility_tolerance": 1e-10}


def _lp(c, H, h):
    """``min c'x  s.t.  Hx <= h`` over free x; returns ``(status, x)``."""
    res = linprog(c, A_ub=H, b_ub=h, bounds=(None, None), method="highs", options=LP_OPTIONS)
    if res.status == 4:
        # numerical trouble at the tight tolerances; the default ones usually recover
        res = linprog(c, A_ub=H, b_ub=h, bounds=(None, None), method="highs")
    if res.status == 0:
        return "optimal", res.x
    if res.status == 2:
        return "infeasible", None
    if res.status == 3:
        return "unbounded", None
    raise SetError(f"LP failed: {res.message}")


def axis_directions(n):
    """The 2n directions +e_i, -e_i."""
    eye = np.eye(n)
    return np.vstack([eye, -eye])


def _normalize(H, h):
    H = np.atleast_2d(np.asarray(H, dtype=float))
    h = np.asarray(h, dtype=float).ravel()
    if H.shape[0] != h.size:
        raise ValueError(f"H has {H.shape[0]} rows but h has {h.size} entries")
    norms = np.linalg.norm(H, axis=1)
    zero = norms < 1e-14
    if np.any(zero & (h < 0)):
        raise EmptySetError("trivially infeasible row 0'x <= h with h < 0")
    keep = ~zero
    return H[keep] / norms[keep, None], h[keep] / norms[keep]


def _dedupe(H, h, decimals=12):
    best = {}
    for row, off in zip(H, h):
        key = tuple(np.round(row, decimals) + 0.0)
        if key not in best or off < best[key][1]:
            best[key] = (row, off)
    if not best:
        return np.zeros((0, H.shape[1])), np.zeros(0)
    rows, offs = zip(*best.values())
    return np.array(rows), np.array(offs)


@dataclass(frozen=True)
class Ellipsoid:
    """Origin-centred ellipsoid ``{x : x'Qx <= 1}``."""

    Q: np.ndarray

    def __post_init__(self):
        Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        if Q.shape[0] != Q.shape[1]:
            raise ValueError("Q must be square")
        if not np.allclose(Q, Q.T, rtol=0.0, atol=1e-12 * max(1.0, np.abs(Q).max())):
            raise ValueError("Q must be symmetric")
        if np.min(np.linalg.eigvalsh(Q)) <= 0:
            raise ValueError("Q must be positive definite")
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "_Qinv", np.linalg.inv(Q))

    @property
    def n(self):
        return self.Q.shape[0]

    def contains(self, x, tol=0.0):
        x = np.asarray(x, dtype=float)
        return bool(x @ self.Q @ x <= 1.0 + tol)

    def support(self, d):
        d = np.asarray(d, dtype=float)
        return float(np.sqrt(d @ self._Qinv @ d))


class HPolytope:
    """``{x : H x <= h}`` with unit-norm rows. Zero rows means all of R^n."""

    def __init__(self, H, h, n=None):
        H = np.asarray(H, dtype=float)
        if H.size == 0:
            if n is None:
                raise ValueError("dimension needed for a polytope without rows")
            H = np.zeros((0, n))
            h = np.zeros(0)
        self.H, self.h = _normalize(H, h)
        if self.H.shape[0] == 0:
            self.H = np.zeros((0, H.shape[1] if H.ndim == 2 else n))
        self.H.setflags(write=False)
        self.h.setflags(write=False)
        self._box = self._detect_box()

    # -- constructors -------------------------------------------------------
    @classmethod
    def box(cls, lo, hi):
        lo = np.asarray(lo, dtype=float)
        hi = np.asarray(hi, dtype=float)
        n = lo.size
        H = axis_directions(n)
        h = np.concatenate([hi, -lo])
        finite = np.isfinite(h)
        return cls(H[finite], h[finite], n=n)

    @classmethod
    def symmetric_box(cls, half_widths):
        r = np.asarray(half_widths, dtype=float)
        return cls.box(-r, r)

    @classmethod
    def origin(cls, n):
        """The singleton {0}, stored as the degenerate box [-0, 0]^n."""
        return cls(axis_directions(n), np.zeros(2 * n), n=n)

    @classmethod
    def universe(cls, n):
        return cls(np.zeros((0, n)), np.zeros(0), n=n)

    # -- queries ------------------------------------------------------------
    @property
    def n(self):
        return self.H.shape[1]

    @property
    def m(self):
        return self.H.shape[0]

    def _detect_box(self):
        n = self.n
        lo = np.full(n, -np.inf)
        hi = np.full(n, np.inf)
        for row, off in zip(self.H, self.h):
            j = int(np.argmax(np.abs(row)))
            if abs(abs(row[j]) - 1.0) > 1e-14 or np.count_nonzero(row) != 1:
                return None
            if row[j] > 0:
                hi[j] = min(hi[j], off)
            else:
                lo[j] = max(lo[j], -off)
        return lo, hi

    @property
    def box_bounds(self):
        """``(lo, hi)`` when every facet is axis aligned, else ``None``."""
        return self._box

    def contains(self, x, tol=1e-9):
        x = np.asarray(x, dtype=float)
        if self.m == 0:
            return True
        return bool(np.all(self.H @ x <= self.h + tol))

    def support(self, d):
        return support(self, d)

    def is_empty(self):
        if self._box is not None:
            lo, hi = self._box
            return bool(np.any(lo > hi))
        if self.m == 0:
            return False
        return _lp(np.zeros(self.n), self.H, self.h)[0] == "infeasible"

    def intersect(self, other):
        return HPolytope(np.vstack([self.H, other.H]), np.concatenate([self.h, other.h]), n=self.n)

    def __repr__(self):
        if self._box is not None:
            lo, hi = self._box
            return f"HPolytope(box lo={np.round(lo, 6).tolist()}, hi={np.round(hi, 6).tolist()})"
        return f"HPolytope(n={self.n}, m={self.m})"


def support(P, d):
    """``max { d'x : x in P }``."""
    d = np.asarray(d, dtype=float).ravel()
    if d.size != P.n:
        raise ValueError(f"direction has dimension {d.size}, polytope {P.n}")
    if not np.any(d):
        if P.is_empty():
            raise EmptySetError("support of an empty set")
        return 0.0
    box = P.box_bounds
    if box is not None:
        lo, hi = box
        if np.any(lo > hi):
            raise EmptySetError("support of an empty box")
        val = 0.0
        for dj, l, u in zip(d, lo, hi):
            if dj > 0:
                val += dj * u
            elif dj < 0:
                val += dj * l
        if not np.isfinite(val):
            raise UnboundedError(f"polytope unbounded in direction {d}")
        return float(val)
    # coordinates no facet touches are free: unbounded if d uses them, else drop
    used = np.any(P.H != 0.0, axis=0)
    if np.any(d[~used] != 0.0):
        if P.is_empty():
            raise EmptySetError("support of an empty polytope")
        raise UnboundedError(f"polytope unbounded in direction {d}")
    H, du = P.H[:, used], d[used]
    status, x = _lp(-du, H, P.h)
    if status == "optimal":
        return float(du @ x)
    if status == "infeasible":
        raise EmptySetError("support of an empty polytope")
    raise UnboundedError(f"polytope unbounded in direction {d}")


def _support_or_inf(P, d):
    try:
        return support(P, d)
    except UnboundedError:
        return np.inf


def minkowski_sum(P, Q):
    """Outer description of ``P + Q`` on the union of both facet directions."""
    if P.n != Q.n:
        raise ValueError("dimension mismatch")
    bp, bq = P.box_bounds, Q.box_bounds
    if bp is not None and bq is not None:
        if np.any(bp[0] > bp[1]) or np.any(bq[0] > bq[1]):
            raise EmptySetError("Minkowski sum with an empty set")
        return HPolytope.box(bp[0] + bq[0], bp[1] + bq[1])
    rows, offs = [], []
    for row, off in zip(P.H, P.h):
        rows.append(row)
        offs.append(off + _support_or_inf(Q, row))
    for row, off in zip(Q.H, Q.h):
        rows.append(row)
        offs.append(off + _support_or_inf(P, row))
    if not rows:
        return HPolytope.universe(P.n)
    H, h = np.array(rows), np.array(offs)
    keep = np.isfinite(h)
    H, h = _dedupe(H[keep], h[keep])
    return HPolytope(H, h, n=P.n)


def pontryagin_diff(P, Q):
    """``{x : x + Q subset of P}``; exact. May be empty, check ``is_empty()``."""
    if P.n != Q.n:
        raise ValueError("dimension mismatch")
    if P.m == 0:
        return HPolytope.universe(P.n)
    s = np.array([support(Q, row) for row in P.H])
    return HPolytope(P.H, P.h - s, n=P.n)


def affine_image(P, M, p=None, template=None):
    """``{M x + p : x in P}``.

    Exact for invertible square ``M``; otherwise the template outer
    approximation on +/- axes plus ``template`` rows.
    """
    M = np.atleast_2d(np.asarray(M, dtype=float))
    k = M.shape[0]
    p = np.zeros(k) if p is None else np.asarray(p, dtype=float).ravel()
    if M.shape == (P.n, P.n) and np.linalg.cond(M) < 1e12:
        if P.m == 0:
            return HPolytope.universe(P.n)
        HMi = np.linalg.solve(M.T, P.H.T).T
        return HPolytope(HMi, P.h + HMi @ p, n=P.n)
    dirs = axis_directions(k)
    if template is not None:
        dirs = np.vstack([dirs, np.atleast_2d(template)])
    dirs = dirs / np.linalg.norm(dirs, axis=1)[:, None]
    offs = np.array([_support_or_inf(P, M.T @ d) + d @ p for d in dirs])
    keep = np.isfinite(offs)
    H, h = _dedupe(dirs[keep], offs[keep])
    return HPolytope(H, h, n=k)


def project(P, dims, template=None):
    """Template outer approximation of the projection of ``P`` onto ``dims``."""
    dims = list(dims)
    S = np.zeros((len(dims), P.n))
    S[np.arange(len(dims)), dims] = 1.0
    box = P.box_bounds
    if box is not None and template is None:
        return HPolytope.box(box[0][dims], box[1][dims])
    return affine_image(P, S, template=template)


def ellipsoid_outer_polytope(E, dirs=None):
    """``{x : d'x <= sqrt(d' Q^-1 d)}`` over ``dirs``; always contains ``E``."""
    dirs = axis_directions(E.n) if dirs is None else np.atleast_2d(np.asarray(dirs, dtype=float))
    if dirs.shape[1] != E.n:
        raise ValueError("direction dimension mismatch")
    dirs = dirs / np.linalg.norm(dirs, axis=1)[:, None]
    probe = HPolytope(dirs, np.ones(len(dirs)), n=E.n)
    if probe.box_bounds is None:
        try:
            for d in axis_directions(E.n):
                support(probe, d)
        except UnboundedError as exc:
            raise DegenerateDirectionsError("directions do not positively span R^n") from exc
    elif not np.all(np.isfinite(np.concatenate(probe.box_bounds))):
        raise DegenerateDirectionsError("directions do not positively span R^n")
    h = np.array([E.support(d) for d in dirs])
    return HPolytope(dirs, h, n=E.n)


# -- error tubes --------------------------------------------------------------

@dataclass
class TubeSchedule:
    """Cross sections ``E_0 .. E_N`` of ``E_{k+1} = Acl E_k + D``, ``E_0 = {0}``.

    ``support(k, d)`` is exact (sum of disturbance supports along powers of
    ``Acl``); ``stages`` hold the template outer approximations.
    """

    stages: list
    disturbance: HPolytope
    closed_loop_A: np.ndarray
    _powers: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        if not self._powers:
            n = self.closed_loop_A.shape[0]
            pw = [np.eye(n)]
            for _ in range(len(self.stages) - 1):
                pw.append(self.closed_loop_A @ pw[-1])
            self._powers = pw

    @property
    def horizon(self):
        return len(self.stages) - 1

    def support(self, k, d):
        d = np.asarray(d, dtype=float)
        return float(sum(support(self.disturbance, Pj.T @ d) for Pj in self._powers[:k]))


def tube_schedule(dm, K, dist, reset_T=None, N=10, template=None):
    if N < 1:
        raise ValueError("horizon must be >= 1")
    n = dm.Abar.shape[0]
    T = np.eye(n) if reset_T is None else np.asarray(reset_T, dtype=float)
    K = np.atleast_2d(np.asarray(K, dtype=float))
    Acl = T @ (dm.Abar + dm.Bbar @ K)
    return tube_from_closed_loop(Acl, dist, N, template)


def tube_from_closed_loop(Acl, dist, N, template=None):
    n = Acl.shape[0]
    dirs = axis_directions(n)
    if dist.m:
        dirs = np.vstack([dirs, dist.H])
    if template is not None:
        dirs = np.vstack([dirs, np.atleast_2d(template)])
    dirs = dirs / np.linalg.norm(dirs, axis=1)[:, None]
    dirs, _ = _dedupe(dirs, np.zeros(len(dirs)))
    tube = TubeSchedule([HPolytope.origin(n)] * (N + 1), dist, np.asarray(Acl, dtype=float))
    stages = [HPolytope.origin(n)]
    for k in range(1, N + 1):
        offs = np.array([tube.support(k, d) for d in dirs])
        stages.append(HPolytope(dirs, offs, n=n))
    tube.stages = stages
    return tube


# -- robust positive invariant sets ------------------------------------------

def _spectral_radius(A):
    return float(np.max(np.abs(np.linalg.eigvals(A)))) if A.size else 0.0


def _rpi_template(A, n, depth, extra):
    dirs = [axis_directions(n)]
    for sign in (1.0, -1.0):
        v = sign * np.eye(n)
        for _ in range(depth):
            v = v @ A  # rows become (A')^j e_i
            dirs.append(v.copy())
    if extra is not None and len(extra):
        dirs.append(np.atleast_2d(extra))
    D = np.vstack(dirs)
    norms = np.linalg.norm(D, axis=1)
    D = D[norms > 1e-12] / norms[norms > 1e-12, None]
    D, _ = _dedupe(D, np.zeros(len(D)), decimals=9)
    return D


def invariance_margin(R, Acl, dist):
    """``max_f  support(Acl R + D, f) - support(R, f)`` over the facets of ``R``."""
    worst = -np.inf
    for f, r in zip(R.H, R.h):
        val = support(R, Acl.T @ f) + support(dist, f) - r
        worst = max(worst, val)
    return float(worst)


def rpi_outer(Acl, dist, eps=1e-2, free_dims=(), template=None, max_iter=200, tol=1e-8):
    """Outer approximation of the minimal robust positive invariant set.

    Truncated-sum construction: find ``s`` with ``Acl^s D`` inside ``alpha D``
    and ``alpha <= eps/(1+eps)``, then ``R = F_s / (1 - alpha)`` with
    ``F_s = D + Acl D + ... + Acl^{s-1} D``, taken on a template closed (up to
    depth) under ``Acl'``. ``free_dims`` are pure integrator coordinates that
    do not feed back into the others; ``R`` is left unbounded along them.
    The returned set is verified to satisfy ``Acl R + D subset of R``.
    """
    Acl = np.atleast_2d(np.asarray(Acl, dtype=float))
    n = Acl.shape[0]
    free = sorted(set(int(i) for i in free_dims))
    rest = [i for i in range(n) if i not in free]
    if free:
        if np.any(np.abs(Acl[np.ix_(rest, free)]) > 1e-12):
            raise NotContractiveError("free coordinates feed back into the others")
    A = Acl[np.ix_(rest, rest)]
    nr = len(rest)
    if _spectral_radius(A) >= 1.0:
        raise NotContractiveError(f"spectral radius {_spectral_radius(A):.6g} >= 1")

    D = project(dist, rest) if free else dist
    if not np.any([support(D, f) for f in axis_directions(nr)]):
        R = HPolytope.origin(n) if not free else _lift(HPolytope.origin(nr), rest, n)
        return R

    if D.m == 0 or np.any(D.h <= 0):
        raise SetError("disturbance set must contain the origin in its interior")
    target = eps / (1.0 + eps)
    Ap = np.eye(nr)
    powers = []
    alpha = None
    for s in range(1, max_iter + 1):
        powers.append(Ap)
        Ap = A @ Ap
        alpha = max(support(D, Ap.T @ f) / g for f, g in zip(D.H, D.h))
        if alpha <= target:
            break
    else:
        raise NoConvergenceError(f"no contraction alpha <= {target:g} within {max_iter} steps")

    extra = None
    if template is not None:
        extra = np.atleast_2d(np.asarray(template, dtype=float))
        extra = extra[:, rest] if extra.shape[1] == n else extra

    def fs(f):
        return sum(support(D, Pj.T @ f) for Pj in powers)

    last = None
    for depth in (8, 16, 32):
        dirs = _rpi_template(A, nr, depth, extra)
        base = np.array([fs(f) for f in dirs]) / (1.0 - alpha)
        for inflate in (1.0, 1.0 + eps, 1.0 + 5 * eps):
            Rr = HPolytope(dirs, base * inflate, n=nr)
            R = _lift(Rr, rest, n) if free else Rr
            last = invariance_margin(R, Acl, dist)
            if last <= tol:
                return R
    raise NoConvergenceError(f"template RPI candidate failed verification (margin {last:.3g})")


def _lift(P, dims, n):
    H = np.zeros((P.m, n))
    H[:, dims] = P.H
    return HPolytope(H, P.h, n=n)
