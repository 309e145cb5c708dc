"""The numpy fallback and the compiled kernels agree."""

import json
import os
import subprocess
import sys

import numpy as np
import pytest

SCRIPT = r"""
import json
import numpy as np
from multirate import config, sim
from multirate._jit import backend_name
from multirate.dynamics import PlantModel, coupled_step
from multirate.qp import QProblem, solve_qp

cfg = config.with_overrides(config.load("constrained_10hz"), duration=0.3)
plant = PlantModel(cfg.plant)
sc = config.build(cfg)
x = np.array([0.1, 0.2, -0.1, 0.3])
f, g = plant.terms(x)
xs, xb = coupled_step(plant, sc.pm, x, x * 0.9, 1.5, 0.5, 1e-3)
rng = np.random.default_rng(0)
M = rng.normal(size=(5, 5))
sol = solve_qp(QProblem(P=M @ M.T + np.eye(5), q=rng.normal(size=5), G=rng.normal(size=(8, 5)),
                        g=rng.uniform(0.1, 1.0, 8)))
us = []
for _ in range(50):
    x = rng.normal(size=4) * np.array([1.0, 0.3, 0.2, 0.3])
    e = rng.normal(size=4) * np.array([0.2, 0.1, 0.05, 0.01]) / 3
    us.append(sc.low_level(x, x - e, rng.normal() * 5))
log, rep = sim.run_closed_loop(sc.plant, sc.pm, sc.planner, sc.low_level, cfg.schedule(),
                               np.array(cfg.x_start), sc.monitor_sets)
print(json.dumps(dict(backend=backend_name(), f=f.tolist(), g=g.tolist(), step=xs.tolist(),
                      qp=sol.z.tolist(), u=us, final=log.x[-1].tolist(), passed=rep.passed)))
"""


def run_backend(disable):
    env = dict(os.environ, MULTIRATE_DISABLE_NUMBA="1" if disable else "0")
    res = subprocess.run([sys.executable, "-c", SCRIPT], env=env, capture_output=True,
                         text=True, timeout=600)
    assert res.returncode == 0, res.stderr
    return json.loads(res.stdout.strip().splitlines()[-1])


@pytest.fixture(scope="module")
def outputs():
    pytest.importorskip("numba")
    return run_backend(False), run_backend(True)


def test_backend_names(outputs):
    fast, slow = outputs
    assert fast["backend"] == "numba" and slow["backend"] == "numpy"


def test_kernels_agree(outputs):
    fast, slow = outputs
    for key in ("f", "g", "step"):
        np.testing.assert_allclose(fast[key], slow[key], rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(fast["qp"], slow["qp"], atol=1e-9)
    np.testing.assert_allclose(fast["u"], slow["u"], atol=1e-9)


def test_closed_loop_agrees(outputs):
    fast, slow = outputs
    assert fast["passed"] and slow["passed"]
    # right after a reset the min-norm input is a ratio of two O(|e|) terms, so
    # rounding in a near-zero error moves u; the trajectories still agree closely
    np.testing.assert_allclose(fast["final"], slow["final"], atol=1e-6)
