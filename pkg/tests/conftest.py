import time

import numpy as np
import pytest

from multirate import config, sim

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(line[1])


def record(number, title, ok, detail):
    """Log one acceptance line for the terminal summary."""
    ACCEPTANCE_LINES.append((number, f"[{'PASS' if ok else 'FAIL'}] {number:>2}. {title}: {detail}"))


def _run(sc, cfg):
    t0 = time.perf_counter()
    log, rep = sim.run_closed_loop(sc.plant, sc.pm, sc.planner, sc.low_level, sc.cfg.schedule(),
                                   np.array(cfg.x_start), sc.monitor_sets, h_e=sc.h_e)
    return dict(log=log, report=rep, wall=time.perf_counter() - t0, scenario=sc, cfg=sc.cfg)


@pytest.fixture(scope="session")
def constrained_run():
    cfg = config.load("constrained_10hz")
    return _run(config.build(cfg), cfg)


@pytest.fixture(scope="session")
def unconstrained_run():
    cfg = config.load("unconstrained_2hz")
    return _run(config.build(cfg), cfg)


@pytest.fixture(scope="session")
def baseline_run():
    cfg = config.load("constrained_10hz")
    return _run(config.build_baseline(cfg, 10.0), cfg)


@pytest.fixture(scope="session")
def segway():
    from multirate.dynamics import PlantModel, small_angle_linearization
    cfg = config.load("constrained_10hz")
    plant = PlantModel(cfg.plant)
    pm = small_angle_linearization(plant, K=np.array(cfg.K))
    return plant, pm, cfg
