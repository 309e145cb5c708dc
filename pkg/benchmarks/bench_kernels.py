"""Compare the numba kernels with the plain-numpy fallback.

Each backend runs in its own interpreter because the choice is made at import
time from ``MULTIRATE_DISABLE_NUMBA``. Usage:

    python benchmarks/bench_kernels.py [--repeat 5]
"""

import argparse
import json
import os
import subprocess
import sys
import time

WORKER = r"""
import json, sys, time
import numpy as np
from multirate import _kernels, config, qp
from multirate._jit import backend_name
from multirate.mpc import TubeMpcController, assemble_mpc_qp

repeat = int(sys.argv[1])
sc = config.build(config.load("constrained_10hz"))
pm, plant = sc.pm, sc.plant
x = np.array([0.1, 0.2, 0.05, -0.1])
xbar = x - 1e-3

def best(fn, n):
    fn()  # compile / load outside the timed region
    out = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        for _ in range(n):
            fn()
        out.append((time.perf_counter() - t0) / n)
    return min(out)

b = pm.B[:, 0].copy()
res = {"backend": backend_name()}
res["rk4 step"] = best(lambda: _kernels.coupled_rk4(x, xbar, 0.3, 0.2, 1e-3, plant._prm, pm.A, b), 2000)
res["segway terms"] = best(lambda: _kernels.segway_terms(x, plant._prm), 5000)
low = sc.low_level
res["CLF-CBF QP"] = best(lambda: low(x, xbar, 0.2), 300)
solver = qp.QPSolver(warm_start=False)
mprob = assemble_mpc_qp(sc.mpc, np.zeros(4))
res["MPC QP (cold)"] = best(lambda: solver.solve(mprob), 5)
x0 = np.zeros(4)
res["planner N=10"] = best(lambda: TubeMpcController(sc.mpc).solve(x0), 20)
base = config.build_baseline(sc.cfg, 20.0)
res["planner N=100"] = best(lambda: TubeMpcController(base.mpc).solve(x0), 5)
print(json.dumps(res))
"""


def run(disable, repeat):
    env = dict(os.environ, MULTIRATE_DISABLE_NUMBA="1" if disable else "0")
    out = subprocess.run([sys.executable, "-c", WORKER, str(repeat)], env=env,
                         capture_output=True, text=True, check=True)
    return json.loads(out.stdout.strip().splitlines()[-1])


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    t0 = time.perf_counter()
    fast = run(False, args.repeat)
    slow = run(True, args.repeat)
    print(f"{'kernel':<16} {'numba':>12} {'numpy':>12} {'speedup':>8}")
    for key in fast:
        if key == "backend":
            continue
        print(f"{key:<16} {1e6 * fast[key]:>10.1f}us {1e6 * slow[key]:>10.1f}us "
              f"{slow[key] / fast[key]:>7.1f}x")
    print(f"backends: {fast['backend']} vs {slow['backend']} ({time.perf_counter() - t0:.1f} s total)")


if __name__ == "__main__":
    main()
