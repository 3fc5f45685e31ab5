"""CSV persistence for per-iteration metrics.

``metrics.csv`` starts with the documented columns (run_id, variant, k,
sim_calls, train_cost, test_cost, consensus_u, consensus_x, oc_time_s,
learn_time_s, ddp_iters_mean) followed by extra diagnostics. Wall-clock
quantities go to ``timings.csv`` so that ``metrics.csv`` is byte-identical
across repeated runs; the two timing columns of ``metrics.csv`` stay empty
unless inline timings are requested.
"""
import csv
import math
import time

from .config import VARIANTS

COLUMNS = ("run_id", "variant", "k", "sim_calls", "train_cost", "test_cost", "consensus_u",
           "consensus_x", "oc_time_s", "learn_time_s", "ddp_iters_mean")
EXTRA = ("train_policy_cost", "warm_cost", "failures", "oc_jacobian_calls")
HEADER = COLUMNS + EXTRA
TIMING_HEADER = ("run_id", "variant", "k", "oc_time_s", "learn_time_s", "wall_clock")
TIMED = ("oc_time_s", "learn_time_s")


def fmt(value):
    """repr-exact floats; NaN as empty."""
    if isinstance(value, float):
        if math.isnan(value):
            return ""
        return repr(value)
    return str(value)


def parse(value):
    if value == "":
        return math.nan
    try:
        return int(value)
    except ValueError:
        try:
            return float(value)
        except ValueError:
            return value


def record_row(rec, run_id, variant, inline_timings=False):
    row = {"run_id": run_id, "variant": variant}
    for name in HEADER[2:]:
        v = getattr(rec, name)
        if name in TIMED and not inline_timings:
            v = math.nan
        row[name] = fmt(float(v) if isinstance(v, float) else v)
    return row


class MetricsWriter:
    """Appends one row per outer iteration to metrics.csv and timings.csv."""

    def __init__(self, metrics_path, timings_path, run_id, variant, inline_timings=False):
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}")
        self.run_id = run_id
        self.variant = variant
        self.inline = inline_timings
        self._m = open(metrics_path, "w", newline="")
        self._t = open(timings_path, "w", newline="")
        self._mw = csv.DictWriter(self._m, HEADER, lineterminator="\n")
        self._tw = csv.DictWriter(self._t, TIMING_HEADER, lineterminator="\n")
        self._mw.writeheader()
        self._tw.writeheader()
        self._last_calls = -1

    def write(self, rec):
        if rec.sim_calls < self._last_calls:
            raise ValueError("sim_calls must be nondecreasing within a run")
        self._last_calls = rec.sim_calls
        self._mw.writerow(record_row(rec, self.run_id, self.variant, self.inline))
        self._tw.writerow({"run_id": self.run_id, "variant": self.variant, "k": rec.k,
                           "oc_time_s": fmt(rec.oc_time_s), "learn_time_s": fmt(rec.learn_time_s),
                           "wall_clock": time.strftime("%Y-%m-%dT%H:%M:%S%z")})
        self._m.flush()
        self._t.flush()

    def close(self):
        self._m.close()
        self._t.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read(path):
    """Rows as dicts with numeric fields parsed; validates the header and variant enum."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != HEADER:
            raise ValueError(f"unexpected metrics header in {path}: {reader.fieldnames}")
        rows = []
        for raw in reader:
            if raw["variant"] not in VARIANTS:
                raise ValueError(f"unknown variant {raw['variant']!r} in {path}")
            row = {k: parse(v) for k, v in raw.items()}
            row["run_id"] = raw["run_id"]
            row["variant"] = raw["variant"]
            rows.append(row)
    return rows


def merge(paths, out_path):
    """Concatenate metrics files (same header) into one."""
    with open(out_path, "w", newline="") as out:
        out.write(",".join(HEADER) + "\n")
        for p in paths:
            with open(p, newline="") as fh:
                lines = fh.read().splitlines()
            if not lines or tuple(lines[0].split(",")) != HEADER:
                raise ValueError(f"unexpected metrics header in {p}")
            for line in lines[1:]:
                out.write(line + "\n")
