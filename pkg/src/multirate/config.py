"""Scenario configuration: TOML parsing, validation and controller assembly."""

import math
import sys
from dataclasses import asdict, dataclass, field, replace
from importlib import resources

import numpy as np
import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import sets
from .cbf import ClfCbfController, LyapunovFn, error_barrier, h_e_value
from .dynamics import PlantModel, SegwayParams, small_angle_linearization, zoh_discretize
from .mpc import TubeMpcController, build_tube_mpc
from .sim import MonitorSets, Schedule

BUNDLED = ("unconstrained_2hz", "constrained_10hz")


class ConfigError(ValueError):
    """Validation failure; ``path`` names the offending field."""

    def __init__(self, path, message):
        super().__init__(f"{path}: {message}")
        self.path = path


@dataclass(frozen=True)
class ScenarioConfig:
    name: str
    duration: float
    x_start: tuple
    x_goal: tuple
    plant: SegwayParams
    planner_hz: float
    low_level_hz: float
    N: int
    Q: tuple
    R: tuple
    Qf: tuple
    K: tuple
    v_max: float
    Qe: tuple
    theta_max: float = None
    rpi_eps: float = 0.1
    c1: float = 100.0
    c2: float = 1.0
    alpha_e: float = 10.0
    baselines: tuple = (10.0, 20.0, 100.0)

    @property
    def T_high(self):
        return 1.0 / self.planner_hz

    @property
    def dt_low(self):
        return 1.0 / self.low_level_hz

    def schedule(self):
        return Schedule(dt_low=self.dt_low, T_high=self.T_high, duration=self.duration)


def _matrix(data, path, shape):
    try:
        M = np.array(data, dtype=float)
    except (TypeError, ValueError):
        raise ConfigError(path, "not a numeric matrix") from None
    if M.shape != shape:
        raise ConfigError(path, f"expected shape {shape}, got {M.shape}")
    if not np.all(np.isfinite(M)):
        raise ConfigError(path, "non-finite entry")
    return M


def _psd(M, path, strict=False):
    if not np.allclose(M, M.T, atol=1e-12):
        raise ConfigError(path, "must be symmetric")
    lo = np.min(np.linalg.eigvalsh(M))
    if (lo <= 0) if strict else (lo < -1e-12):
        raise ConfigError(path, "must be positive definite" if strict else "must be PSD")


def _tuple(M):
    M = np.asarray(M, dtype=float)
    return tuple(tuple(float(a) for a in r) for r in M) if M.ndim == 2 else tuple(float(a) for a in M)


def _get(d, key, path, default=None, required=True):
    if key in d:
        return d[key]
    if required and default is None:
        raise ConfigError(f"{path}.{key}" if path else key, "missing")
    return default


def _positive(val, path):
    try:
        val = float(val)
    except (TypeError, ValueError):
        raise ConfigError(path, "not a number") from None
    if not val > 0:
        raise ConfigError(path, "must be positive")
    return val


def from_dict(d):
    """Validate a parsed TOML document into a ``ScenarioConfig``."""
    plant_d = _get(d, "plant", "", {}, required=False)
    try:
        params = SegwayParams(**{k: float(v) for k, v in plant_d.items()})
    except TypeError as ex:
        raise ConfigError("plant", str(ex)) from None
    except ValueError as ex:
        raise ConfigError("plant", str(ex)) from None
    rates = _get(d, "rates", "")
    cost = _get(d, "cost", "")
    sets_d = _get(d, "sets", "")
    mpc_d = d.get("mpc", {})
    cbf_d = d.get("cbf", {})

    planner_hz = _positive(_get(rates, "planner_hz", "rates"), "rates.planner_hz")
    low_hz = _positive(rates.get("low_level_hz", 1000.0), "rates.low_level_hz")
    duration = _positive(_get(d, "duration", ""), "duration")
    ratio = low_hz / planner_hz
    if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
        raise ConfigError("rates", "low-level rate must be an integer multiple of the planner rate")
    if abs(duration * planner_hz - round(duration * planner_hz)) > 1e-9:
        raise ConfigError("duration", "must be an integer number of planner periods")

    Q = _matrix(_get(cost, "Q", "cost"), "cost.Q", (4, 4))
    _psd(Q, "cost.Q")
    R = _matrix(_get(cost, "R", "cost"), "cost.R", (1, 1))
    _psd(R, "cost.R", strict=True)
    Qf = _matrix(_get(cost, "Qf", "cost"), "cost.Qf", (4, 4))
    _psd(Qf, "cost.Qf")
    K = _matrix(_get(cost, "K", "cost"), "cost.K", (1, 4))
    N = _get(cost, "N", "cost")
    if not isinstance(N, int) or N < 1:
        raise ConfigError("cost.N", "must be a positive integer")
    Qe = _matrix(_get(sets_d, "Qe", "sets"), "sets.Qe", (4, 4))
    _psd(Qe, "sets.Qe", strict=True)
    v_max = _positive(_get(sets_d, "v_max", "sets"), "sets.v_max")
    theta_max = sets_d.get("theta_max")
    if theta_max is not None:
        theta_max = _positive(theta_max, "sets.theta_max")
    x_start = _matrix(d.get("x_start", [0.0] * 4), "x_start", (4,))
    x_goal = _matrix(d.get("x_goal", [2.0, 0.0, 0.0, 0.0]), "x_goal", (4,))
    baselines = tuple(_positive(r, "baselines") for r in d.get("baselines", [10.0, 20.0, 100.0]))

    return ScenarioConfig(
        name=str(d.get("name", "scenario")), duration=duration,
        x_start=_tuple(x_start), x_goal=_tuple(x_goal), plant=params,
        planner_hz=planner_hz, low_level_hz=low_hz, N=N,
        Q=_tuple(Q), R=_tuple(R), Qf=_tuple(Qf), K=_tuple(K), v_max=v_max, Qe=_tuple(Qe),
        theta_max=theta_max,
        rpi_eps=_positive(mpc_d.get("rpi_eps", 0.1), "mpc.rpi_eps"),
        c1=_positive(cbf_d.get("c1", 100.0), "cbf.c1"),
        c2=_positive(cbf_d.get("c2", 1.0), "cbf.c2"),
        alpha_e=_positive(cbf_d.get("alpha_e", 10.0), "cbf.alpha_e"),
        baselines=baselines,
    )


def to_dict(cfg):
    """Canonical TOML-ready form of a configuration."""
    lists = lambda t: [list(r) if isinstance(r, tuple) else r for r in t]
    sets_d = {"v_max": cfg.v_max, "Qe": lists(cfg.Qe)}
    if cfg.theta_max is not None:
        sets_d["theta_max"] = cfg.theta_max
    return {
        "name": cfg.name,
        "duration": cfg.duration,
        "x_start": list(cfg.x_start),
        "x_goal": list(cfg.x_goal),
        "baselines": list(cfg.baselines),
        "plant": asdict(cfg.plant),
        "rates": {"planner_hz": cfg.planner_hz, "low_level_hz": cfg.low_level_hz},
        "cost": {"N": cfg.N, "Q": lists(cfg.Q), "R": lists(cfg.R), "Qf": lists(cfg.Qf),
                 "K": lists(cfg.K)},
        "sets": sets_d,
        "mpc": {"rpi_eps": cfg.rpi_eps},
        "cbf": {"c1": cfg.c1, "c2": cfg.c2, "alpha_e": cfg.alpha_e},
    }


def dumps(cfg):
    return tomli_w.dumps(to_dict(cfg))


def loads(text):
    try:
        d = tomllib.loads(text)
    except tomllib.TOMLDecodeError as ex:
        raise ConfigError("<file>", f"TOML syntax error: {ex}") from None
    return from_dict(d)


def load(path):
    """Load a config file, or a bundled scenario by name."""
    if str(path) in BUNDLED:
        text = resources.files("multirate").joinpath(f"scenarios/{path}.toml").read_text()
    else:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                text = fh.read()
        except OSError as ex:
            raise ConfigError("<file>", str(ex)) from None
    return loads(text)


def with_overrides(cfg, **kw):
    kw = {k: v for k, v in kw.items() if v is not None}
    return replace(cfg, **kw) if kw else cfg


@dataclass
class Scenario:
    """Everything needed to run one configuration."""

    cfg: ScenarioConfig
    plant: PlantModel
    pm: object
    mpc: object
    planner: TubeMpcController
    low_level: ClfCbfController
    monitor_sets: MonitorSets
    Qe: np.ndarray = field(repr=False, default=None)

    def h_e(self, e):
        return h_e_value(e, self.Qe)


def state_constraint(cfg):
    if cfg.theta_max is None:
        return sets.HPolytope.universe(4)
    return sets.HPolytope([[0, 0, 1, 0], [0, 0, -1, 0]], [cfg.theta_max, cfg.theta_max])


def build(cfg, low_level=True, terminal=None, tube_depth=None, tightening=None):
    """Plant, planning model, tube MPC and controllers for ``cfg``.

    ``low_level=False`` leaves out the CLF-CBF layer; ``terminal``,
    ``tube_depth`` and ``tightening`` are passed to the MPC builder.
    """
    plant = PlantModel(cfg.plant)
    K = np.array(cfg.K)
    pm = small_angle_linearization(plant, K=K)
    Qe = np.array(cfg.Qe)
    dist = sets.ellipsoid_outer_polytope(sets.Ellipsoid(Qe))
    dm = zoh_discretize(pm, cfg.T_high)
    Xd = state_constraint(cfg)
    V = sets.HPolytope.symmetric_box([cfg.v_max])
    mpc = build_tube_mpc(dm, K, dist, cfg.N, np.array(cfg.Q), np.array(cfg.R), np.array(cfg.Qf),
                         np.array(cfg.x_goal), Xd, V, free_dims=(0,), rpi_eps=cfg.rpi_eps,
                         terminal=terminal, tube_depth=tube_depth, tightening=tightening)
    planner = TubeMpcController(mpc)
    low = None
    if low_level:
        low = ClfCbfController(plant, pm, LyapunovFn(Qe, cfg.c1, cfg.c2),
                               error_barrier(Qe, cfg.alpha_e))
    return Scenario(cfg=cfg, plant=plant, pm=pm, mpc=mpc, planner=planner, low_level=low,
                    monitor_sets=MonitorSets(Xd=Xd, V=V), Qe=Qe)


def build_baseline(cfg, rate_hz, window=5.0):
    """Planner-only controller at ``rate_hz`` with a horizon covering ``window`` s.

    The baseline reuses the scenario's tightened sets and terminal set: stage
    ``k`` (time ``k / rate_hz``) gets the scenario stage at or just after that
    time, so every baseline faces the same constraints as the multirate run.
    """
    N = baseline_horizon(rate_hz, window)
    ratio = cfg.low_level_hz / rate_hz
    if abs(ratio - round(ratio)) > 1e-9:
        raise ConfigError("baseline.rate", f"{rate_hz} Hz must divide {cfg.low_level_hz} Hz")
    ref = build(cfg, low_level=False).mpc
    stage = [min(int(math.ceil(k * cfg.planner_hz / rate_hz - 1e-9)), cfg.N) for k in range(N + 1)]
    tightening = ([ref.tightened_state[j] for j in stage], [ref.tightened_input[j] for j in stage],
                  ref.tightened_terminal)
    bcfg = replace(cfg, name=f"{cfg.name}_baseline_{rate_hz:g}hz", planner_hz=float(rate_hz), N=N)
    return build(bcfg, low_level=False, terminal=ref.XF, tube_depth=1, tightening=tightening)


def baseline_horizon(rate_hz, window=5.0):
    """Horizon covering ``window`` seconds at ``rate_hz``."""
    N = rate_hz * window
    if abs(N - round(N)) > 1e-9:
        raise ConfigError("baseline.rate", f"{rate_hz} Hz does not divide the {window} s window")
    return int(round(N))
