"""Compare the numba kernels with the pure-numpy fallback.

Each mode runs in its own interpreter because the switch is read at import
time (``OCPOLICY_DISABLE_NUMBA=1``). Prints one line per workload and mode,
then the speedup.

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
from ocpolicy import _jit, ddp, envs, kernels
from ocpolicy.ocp import Ocp, SamplingBox, sample_params

repeat = int(sys.argv[1])
spec = envs.pendulum(dt=0.05, u_bound=3.0)
ocp = Ocp(spec, envs.weights_from_diag(spec, 1.0, 0.01, 0.1), 100)
samples = sample_params(SamplingBox([0.2, 0.2], [0.6, 0.6], [0.0, 1.0]), 8, 0)
rng = np.random.default_rng(0)
U = rng.uniform(-3, 3, (100, 1))
x0 = np.array([0.3, 0.1])
args = spec.kernel_args

def rollout():
    for _ in range(200):
        kernels.rollout(*args, x0, U, spec.u_min, spec.u_max, True)

X, Uc, _ = kernels.rollout(*args, x0, U, spec.u_min, spec.u_max, True)

def linearize():
    for _ in range(200):
        kernels.linearize(*args, X, Uc)

def solve():
    ddp.solve_batch(ocp, samples, settings=ddp.DdpSettings(max_iters=30))

out = {"numba": _jit.USE_NUMBA}
for name, fn in (("rollout x200", rollout), ("linearize x200", linearize),
                 ("ddp 8 solves", solve)):
    fn()                                   # compile / warm caches
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    out[name] = best
print(json.dumps(out))
"""


def run(disable, repeat):
    env = dict(os.environ)
    if disable:
        env["OCPOLICY_DISABLE_NUMBA"] = "1"
    else:
        env.pop("OCPOLICY_DISABLE_NUMBA", None)
    res = subprocess.run([sys.executable, "-c", WORKER, str(repeat)], env=env,
                         capture_output=True, text=True, check=True)
    return json.loads(res.stdout.strip().splitlines()[-1])


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    args = p.parse_args()
    t0 = time.perf_counter()
    fast = run(False, args.repeat)
    slow = run(True, args.repeat)
    if not fast.pop("numba"):
        print("warning: numba unavailable, both runs use numpy")
    slow.pop("numba")
    print(f"{'workload':<16} {'numba s':>10} {'numpy s':>10} {'speedup':>9}")
    for name in fast:
        print(f"{name:<16} {fast[name]:10.4f} {slow[name]:10.4f} {slow[name] / fast[name]:8.1f}x")
    print(f"(total {time.perf_counter() - t0:.1f} s)")


if __name__ == "__main__":
    main()
