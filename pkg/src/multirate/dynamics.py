"""Segway plant, linear planning model and time discretization.

State ordering is ``(p_x, v_x, theta, omega)``: wheel position, forward
velocity, body tilt (positive leaning towards +p_x) and tilt rate. The input is
the motor voltage. The plant is the voltage-driven wheeled inverted pendulum

    M(theta) [p_dd, theta_dd]' = [tau/R + m0 L sin(theta) omega^2,
                                  m0 g L sin(theta) - tau]'
    M(theta) = [[m0, m0 L cos(theta)], [m0 L cos(theta), J0]]
    tau      = -km * w - bt * (v_x / R - omega)

so a positive voltage drives the chassis backwards. ``tau`` is the motor
torque acting on the wheels (the body feels ``-tau``); ``bt`` lumps back-EMF
and viscous friction on the wheel/body relative rate.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm

from . import _kernels

STATE_NAMES = ("px", "vx", "theta", "omega")
THETA_MAX_BOX = math.pi / 2


class NonFiniteError(FloatingPointError):
    """Raised when a state or input contains NaN or inf."""


class PolicyError(RuntimeError):
    """A control policy could not produce an input (e.g. infeasible QP)."""


@dataclass(frozen=True)
class SegwayParams:
    """Physical parameters in SI units (kg, m, kg m^2, N m / V, N m s, m/s^2)."""

    m0: float = 49.0
    L: float = 0.1
    J0: float = 4.6
    R: float = 0.12
    km: float = 31.0
    bt: float = 26.2
    g: float = 9.81

    def __post_init__(self):
        for name in ("m0", "L", "J0", "R", "km", "g"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.bt < 0:
            raise ValueError("bt must be non-negative")
        if self.J0 <= self.m0 * self.L ** 2:
            raise ValueError("J0 must exceed m0*L^2 (positive-definite mass matrix)")

    def as_array(self):
        return np.array([self.m0, self.L, self.J0, self.R, self.km, self.bt, self.g])


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NonFiniteError("non-finite state or input")


@dataclass(frozen=True)
class PlantModel:
    """Control-affine plant ``x_dot = f(x) + g(x) (u + v)`` with affine reset ``T x + p``."""

    params: SegwayParams = field(default_factory=SegwayParams)
    reset_T: np.ndarray = None
    reset_p: np.ndarray = None
    state_dim: int = 4
    input_dim: int = 1

    def __post_init__(self):
        T = np.eye(self.state_dim) if self.reset_T is None else np.asarray(self.reset_T, float)
        p = np.zeros(self.state_dim) if self.reset_p is None else np.asarray(self.reset_p, float)
        if T.shape != (self.state_dim, self.state_dim) or p.shape != (self.state_dim,):
            raise ValueError("reset map has wrong dimensions")
        object.__setattr__(self, "reset_T", T)
        object.__setattr__(self, "reset_p", p)
        object.__setattr__(self, "_prm", self.params.as_array())

    def drift(self, x):
        f, _ = _kernels.segway_terms(np.asarray(x, dtype=float), self._prm)
        return f

    def actuation(self, x):
        _, g = _kernels.segway_terms(np.asarray(x, dtype=float), self._prm)
        return g.reshape(self.state_dim, self.input_dim)

    def terms(self, x):
        """``(f(x), g(x))`` with ``g`` flattened (single input)."""
        return _kernels.segway_terms(np.asarray(x, dtype=float), self._prm)

    def vector_field(self, x, w):
        return segway_vector_field(x, w, self.params)

    def reset(self, x):
        return self.reset_T @ x + self.reset_p


def segway_vector_field(x, w, params=SegwayParams()):
    """``f(x) + g(x) w`` for the Segway; ``w`` is the total voltage ``u + v``."""
    x = np.asarray(x, dtype=float)
    w = float(np.asarray(w, dtype=float).reshape(-1)[0])
    _check_finite(x, w)
    if abs(x[2]) >= THETA_MAX_BOX:
        raise ValueError(f"theta={x[2]:.3f} outside the operating box |theta| < pi/2")
    return _kernels.segway_field(x, w, params.as_array())


@dataclass(frozen=True)
class PlanningModel:
    """Linear planning model ``xbar_dot = A xbar + B v``."""

    A: np.ndarray
    B: np.ndarray
    K: np.ndarray = None

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        B = np.asarray(self.B, dtype=float)
        if B.ndim == 1:
            B = B[:, None]
        n = A.shape[0]
        if A.shape != (n, n) or B.shape[0] != n:
            raise ValueError("A must be n x n and B n x d")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        if self.K is not None:
            K = np.atleast_2d(np.asarray(self.K, dtype=float))
            if K.shape != (B.shape[1], n):
                raise ValueError(f"K must be {B.shape[1]} x {n}")
            object.__setattr__(self, "K", K)
            eig = np.linalg.eigvals(A + B @ K)
            if np.max(eig.real) > 1e-9:
                raise ValueError(f"A + BK is unstable (max Re eig = {np.max(eig.real):.4g})")

    @property
    def n(self):
        return self.A.shape[0]

    @property
    def d(self):
        return self.B.shape[1]


@dataclass(frozen=True)
class DiscreteModel:
    Abar: np.ndarray
    Bbar: np.ndarray
    period_T: float


def small_angle_linearization(plant, K=None):
    """Closed-form Jacobians of the Segway field at the upright equilibrium."""
    m0, L, J0, R, km, bt, g = plant.params.as_array()
    mL = m0 * L
    det = m0 * J0 - mL ** 2
    A = np.zeros((4, 4))
    A[0, 1] = 1.0
    A[2, 3] = 1.0
    # a_p = -bt (v/R - w)/R,  a_t = m0 g L theta + bt (v/R - w)
    A[1, 1] = (-J0 * bt / R ** 2 - mL * bt / R) / det
    A[1, 2] = -mL * m0 * g * L / det
    A[1, 3] = bt * (J0 / R + mL) / det
    A[3, 1] = (m0 * bt / R + mL * bt / R ** 2) / det
    A[3, 2] = m0 * m0 * g * L / det
    A[3, 3] = -(m0 * bt + mL * bt / R) / det
    B = np.zeros((4, 1))
    B[1, 0] = -km * (J0 / R + mL) / det
    B[3, 0] = km * m0 * (1.0 + L / R) / det
    return PlanningModel(A, B, K)


def zoh_discretize(pm, T):
    """Exact zero-order-hold transition matrices via the augmented exponential."""
    if not T > 0:
        raise ValueError("T must be positive")
    n, d = pm.n, pm.d
    M = np.zeros((n + d, n + d))
    M[:n, :n] = pm.A
    M[:n, n:] = pm.B
    E = expm(M * T)
    return DiscreteModel(E[:n, :n].copy(), E[:n, n:].copy(), float(T))


def rk4_step(field, x, w, h):
    """Classical Runge-Kutta step with ``w`` held over ``[t, t+h]``."""
    if not h > 0:
        raise ValueError("h must be positive")
    x = np.asarray(x, dtype=float)
    k1 = np.asarray(field(x, w))
    k2 = np.asarray(field(x + 0.5 * h * k1, w))
    k3 = np.asarray(field(x + 0.5 * h * k2, w))
    k4 = np.asarray(field(x + h * k3, w))
    out = x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    _check_finite(out)
    return out


def n_steps(T, dt):
    """Number of ``dt`` steps in ``T``; raises unless ``T`` is an integer multiple."""
    k = int(round(T / dt))
    if k < 1 or abs(k * dt - T) > 1e-9 * max(1.0, T):
        raise ValueError(f"{T} is not an integer multiple of {dt}")
    return k


def simulate_interval(plant, x0, u_policy, v, xbar0, pm, dt, T):
    """Integrate plant and planner jointly over one planner period.

    ``u_policy(x, xbar, v)`` is evaluated every ``dt`` and held in between;
    ``v`` is held for the whole interval. Returns ``[(t, x, xbar, u), ...]``
    with ``T/dt + 1`` rows; the last row carries the last held ``u``.
    """
    k = n_steps(T, dt)
    x = np.asarray(x0, dtype=float).copy()
    xbar = np.asarray(xbar0, dtype=float).copy()
    v = float(np.asarray(v).reshape(-1)[0])
    _check_finite(x, xbar, v)
    rows = []
    u = 0.0
    for i in range(k):
        u = float(np.asarray(u_policy(x, xbar, v)).reshape(-1)[0])
        _check_finite(u)
        rows.append((i * dt, x.copy(), xbar.copy(), u))
        x, xbar = coupled_step(plant, pm, x, xbar, u + v, v, dt)
    rows.append((k * dt, x.copy(), xbar.copy(), u))
    return rows


def coupled_step(plant, pm, x, xbar, w, v, h):
    """One RK4 step of plant (total input ``w``) and planner (input ``v``)."""
    if abs(x[2]) >= THETA_MAX_BOX:
        raise ValueError(f"theta={x[2]:.3f} outside the operating box |theta| < pi/2")
    xn, xbn = _kernels.coupled_rk4(x, xbar, float(w), float(v), h, plant._prm, pm.A, pm.B[:, 0])
    _check_finite(xn, xbn)
    return xn, xbn
