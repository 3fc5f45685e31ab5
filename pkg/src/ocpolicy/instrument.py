"""Process-wide operation counters.

``sim_calls`` counts every dynamics step evaluated anywhere (rollouts,
line-search candidates, evaluation). ``input_jacobian`` counts policy
input-Jacobian evaluations (one per batched call). ``sobolev_sweeps``
counts second-order sweeps, one per (point, direction) row.
"""
import threading
from contextlib import contextmanager

_lock = threading.Lock()
_counts = {"sim_calls": 0, "input_jacobian": 0, "sobolev_sweeps": 0}


def bump(name, n=1):
    with _lock:
        _counts[name] += n


def read(name):
    with _lock:
        return _counts[name]


def snapshot():
    with _lock:
        return dict(_counts)


@contextmanager
def delta(name):
    """Yield a dict whose ``"n"`` entry holds the increment on exit."""
    out = {"n": 0}
    start = read(name)
    try:
        yield out
    finally:
        out["n"] = read(name) - start


def reset():
    with _lock:
        for k in _counts:
            _counts[k] = 0
