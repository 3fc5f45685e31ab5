"""Command-line entry point: ``ocpolicy {train,eval,warmstart,ablation}``.

Exit codes: 0 success, 2 invalid configuration or checkpoint, 3 training
aborted. The default output root is taken from ``OCPOLICY_OUT`` (else
``./runs``); each run writes into ``<root>/<variant>-<run_id>`` unless
``--out`` is given.
"""
import argparse
import csv
import itertools
import json
import logging
import os
import platform
import subprocess
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .. import __version__, _jit, algos, instrument, policy
from ..ddp import solve_batch
from ..learn import TrainingAborted
from ..ocp import ConfigError, rollout_policies, sample_params
from . import config as C
from . import metrics

OUT_ENV = "OCPOLICY_OUT"
EXIT_CONFIG = 2
EXIT_ABORT = 3

log = logging.getLogger("ocpolicy")


def default_root():
    return Path(os.environ.get(OUT_ENV, "runs"))


def run_dir(cfg, run_id, variant):
    if cfg.run.out:
        return Path(cfg.run.out)
    return default_root() / f"{variant}-{run_id}".replace("+", "p").replace("-C", "_noC")


def _git_rev():
    try:
        out = subprocess.run(["git", "rev-parse", "HEAD"], capture_output=True, text=True,
                             cwd=Path(__file__).resolve().parent, timeout=5)
        return out.stdout.strip() or None
    except (OSError, subprocess.SubprocessError):
        return None


def write_manifest(path, cfg, run_id, variant, extra=None):
    import numba
    manifest = {
        "run_id": run_id,
        "variant": variant,
        "task": cfg.task,
        "seed": cfg.seed,
        "seeds": C.seeds(cfg),
        "package_version": __version__,
        "git_commit": _git_rev(),
        "python": platform.python_version(),
        "numpy": np.__version__,
        "numba": numba.__version__,
        "numba_enabled": _jit.USE_NUMBA,
        "argv": sys.argv,
        "written_at": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    manifest.update(extra or {})
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_config(args):
    cfg = C.load(args.config) if args.config else C.ExperimentConfig()
    return C.apply_overrides(
        cfg, seed=args.seed, out=args.out, algo=getattr(args, "algo", None),
        sobolev=getattr(args, "sobolev", None),
        no_constraints=getattr(args, "no_constraints", False),
        multiple_shooting=getattr(args, "multiple_shooting", False),
        workers=args.workers, assignments=args.set or ())


def train_run(cfg, quiet=False):
    """Run one training job; returns (output dir, records). Raises TrainingAborted."""
    C.validate(cfg)
    run_id = C.config_hash(cfg)
    variant = C.variant_name(cfg)
    out = run_dir(cfg, run_id, variant)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.toml").write_text(C.dumps(cfg))
    write_manifest(out / "manifest.json", cfg, run_id, variant)

    ocp = C.build_ocp(cfg)
    box = C.sampling_box(cfg, ocp.spec)
    sd = C.seeds(cfg)
    train = sample_params(box, cfg.sampling.n_train, sd["train"])
    test = sample_params(box, cfg.sampling.n_test, sd["test"])
    net = C.build_policy(cfg, ocp.spec)
    outer = C.outer_config(cfg)

    def resample(k):
        return sample_params(box, cfg.sampling.n_train, [sd["train"], k])

    with metrics.MetricsWriter(out / "metrics.csv", out / "timings.csv", run_id, variant,
                               cfg.run.inline_timings) as writer:
        def on_record(rec):
            writer.write(rec)
            if not quiet:
                print(f"[{variant}] k={rec.k:3d} sim_calls={rec.sim_calls:9d} "
                      f"train={rec.train_cost:.6g} test={rec.test_cost:.6g} "
                      f"res_u={rec.consensus_u:.3g} res_x={rec.consensus_x:.3g} "
                      f"ddp_iters={rec.ddp_iters_mean:.3g}", flush=True)
        try:
            net, state, records = algos.run(ocp, train, net, outer, test, resample, on_record)
        finally:
            net.save(out / "checkpoint.npz")
    return out, records


def cmd_train(args):
    cfg = _load_config(args)
    try:
        out, records = train_run(cfg)
    except TrainingAborted as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT
    print(f"wrote {out}")
    return 0


def _load_checkpoint(path, spec):
    try:
        net = policy.load(path)
    except (policy.CheckpointError, FileNotFoundError) as exc:
        raise ConfigError(f"cannot load checkpoint: {exc}") from exc
    if net.n_x != spec.n_x or net.n_u != spec.n_u:
        raise ConfigError(f"checkpoint is for n_x={net.n_x}, n_u={net.n_u}; "
                          f"system has n_x={spec.n_x}, n_u={spec.n_u}")
    if not (np.allclose(net.u_min, spec.u_min) and np.allclose(net.u_max, spec.u_max)):
        raise ConfigError("checkpoint control bounds differ from the configured system")
    return net


def _checkpoint_path(args, cfg):
    if args.checkpoint:
        return Path(args.checkpoint)
    return run_dir(cfg, C.config_hash(cfg), C.variant_name(cfg)) / "checkpoint.npz"


def evaluate(cfg, net, samples, out):
    """Policy cost, DDP reference and gap per sample; writes eval.csv and trace.csv."""
    ocp = C.build_ocp(cfg)
    eps = cfg.eval.epsilon
    rollouts = rollout_policies(ocp, samples, net)
    settings = C.solver_settings(cfg, max_iters=cfg.eval.ref_max_iters)
    cold = solve_batch(ocp, samples, None, None, settings, cfg.run.workers)
    warm = solve_batch(ocp, samples, [r.u for r in rollouts], None, settings, cfg.run.workers)
    rows = []
    best_trajs = []
    for i, (ro, (tc, _), (tw, _)) in enumerate(zip(rollouts, cold, warm)):
        cands = [t for t in (tc, tw) if t is not None]
        best = min(cands, key=lambda t: t.cost) if cands else None
        ref = best.cost if best is not None else np.inf
        best_trajs.append(best)
        rows.append({"sample": i, "policy_cost": ro.cost, "ddp_cost": ref,
                     "gap": (ro.cost - ref) / max(ref, eps)})
    with open(out / "eval.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, ["sample", "policy_cost", "ddp_cost", "gap"], lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: metrics.fmt(v) for k, v in r.items()})
    j = cfg.eval.trace_sample
    if 0 <= j < len(samples):
        write_trace(out / "trace.csv", ocp, samples[j], rollouts[j], best_trajs[j])
    costs = np.array([r["policy_cost"] for r in rows])
    refs = np.array([r["ddp_cost"] for r in rows])
    gaps = np.array([r["gap"] for r in rows])
    summary = {"n": len(rows), "mean_policy_cost": float(np.mean(costs)),
               "median_policy_cost": float(np.median(costs)),
               "mean_ddp_cost": float(np.mean(refs)), "mean_gap": float(np.mean(gaps)),
               "median_gap": float(np.median(gaps)),
               "gap_of_means": float((np.mean(costs) - np.mean(refs)) / max(np.mean(refs), eps))}
    (out / "eval_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return rows, summary


def write_trace(path, ocp, beta, rollout, ref):
    """Per-step states, controls and stage costs of the policy rollout and the DDP reference."""
    from ..envs import cost_values
    spec = ocp.spec
    header = ["source", "t"] + [f"x{i}" for i in range(spec.n_x)] + \
        [f"u{i}" for i in range(spec.n_u)] + ["cost"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for name, tr in (("policy", rollout), ("ddp", ref)):
            if tr is None:
                continue
            stage = cost_values(spec, ocp.weights, beta.goal, tr.x, tr.u)
            for t in range(ocp.T + 1):
                u = tr.u[t] if t < ocp.T else np.full(spec.n_u, np.nan)
                w.writerow([name, t] + [metrics.fmt(float(v)) for v in tr.x[t]] +
                           [metrics.fmt(float(v)) for v in u] + [metrics.fmt(float(stage[t]))])


def cmd_eval(args):
    cfg = _load_config(args)
    ocp = C.build_ocp(cfg)
    net = _load_checkpoint(_checkpoint_path(args, cfg), ocp.spec)
    box = C.sampling_box(cfg, ocp.spec)
    sd = C.seeds(cfg)
    if args.on_train:
        samples = sample_params(box, cfg.sampling.n_train, sd["train"])
    else:
        samples = sample_params(box, cfg.eval.n_test, sd["eval"])
    out = Path(args.eval_out) if args.eval_out else _checkpoint_path(args, cfg).parent / "eval"
    out.mkdir(parents=True, exist_ok=True)
    _, summary = evaluate(cfg, net, samples, out)
    print(f"mean J={summary['mean_policy_cost']:.6g} median J={summary['median_policy_cost']:.6g} "
          f"mean gap={summary['mean_gap']:.4g}")
    print(f"wrote {out}")
    return 0


def cmd_warmstart(args):
    cfg = _load_config(args)
    ocp = C.build_ocp(cfg)
    net = _load_checkpoint(_checkpoint_path(args, cfg), ocp.spec)
    box = C.sampling_box(cfg, ocp.spec)
    samples = sample_params(box, cfg.warmstart.n_test, C.seeds(cfg)["eval"])
    ws = cfg.warmstart
    settings = C.solver_settings(cfg, max_iters=ws.max_iters, grad_tol=ws.grad_tol)
    rows = algos.warmstart_benchmark(ocp, net, samples, settings, cfg.run.workers)
    out = Path(args.eval_out) if args.eval_out else _checkpoint_path(args, cfg).parent / "warmstart"
    out.mkdir(parents=True, exist_ok=True)
    cols = ["sample", "iters_cold", "iters_warm", "converged_cold", "converged_warm",
            "cost_cold", "cost_warm"]
    with open(out / "warmstart.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([metrics.fmt(getattr(r, c)) for c in cols])
    summary = warmstart_summary(rows, ws.threshold)
    (out / "warmstart_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"cold median={summary['cold']['median']} max={summary['cold']['max']} | "
          f"warm median={summary['warm']['median']} max={summary['warm']['max']} | "
          f"cold>{ws.threshold}: {summary['cold_over_threshold']:.3f}")
    print(f"wrote {out}")
    return 0


def warmstart_summary(rows, threshold):
    def q(v):
        v = np.asarray(v, dtype=float)
        return {"min": float(v.min()), "p25": float(np.quantile(v, 0.25)),
                "median": float(np.median(v)), "p75": float(np.quantile(v, 0.75)),
                "p90": float(np.quantile(v, 0.9)), "max": float(v.max()), "mean": float(v.mean())}
    cold = [r.iters_cold for r in rows]
    warm = [r.iters_warm for r in rows]
    return {"n": len(rows), "threshold": threshold, "cold": q(cold), "warm": q(warm),
            "cold_over_threshold": float(np.mean(np.asarray(cold) > threshold)),
            "warm_over_threshold": float(np.mean(np.asarray(warm) > threshold))}


def ablation_matrix(cfg):
    """Variant configs of the cross-product; multiple shooting only exists for plal."""
    a = cfg.ablation
    out = []
    for alg, sob, ms, cons in itertools.product(a.algorithms, a.sobolev, a.multiple_shooting,
                                                a.constraints):
        if alg not in ("pddp", "plal"):
            raise ConfigError(f"ablation algorithms must be pddp or plal, got {alg!r}")
        if alg == "pddp" and ms:
            continue
        v = C.apply_overrides(cfg, algo="plal_ms" if ms else alg, sobolev=sob,
                              no_constraints=not cons)
        v.run.out = None
        out.append(v)
    return out


def _ablation_job(args):
    cfg, root = args
    os.environ[OUT_ENV] = str(root)
    name = C.variant_name(cfg)
    instrument.reset()
    try:
        out, _ = train_run(cfg, quiet=True)
        return name, str(out), "ok", ""
    except TrainingAborted as exc:
        out = run_dir(cfg, C.config_hash(cfg), name)
        return name, str(out), "aborted", str(exc)
    except Exception as exc:  # noqa: BLE001 - a failing variant must not stop the matrix
        return name, "", "error", f"{type(exc).__name__}: {exc}"


def cmd_ablation(args):
    cfg = _load_config(args)
    root = Path(cfg.run.out) if cfg.run.out else default_root() / f"ablation-{C.config_hash(cfg)}"
    root.mkdir(parents=True, exist_ok=True)
    (root / "config.toml").write_text(C.dumps(cfg))
    variants = ablation_matrix(cfg)
    jobs = [(v, root) for v in variants]
    if cfg.ablation.parallel > 1:
        with ProcessPoolExecutor(max_workers=cfg.ablation.parallel) as pool:
            results = list(pool.map(_ablation_job, jobs))
    else:
        results = []
        for job in jobs:
            res = _ablation_job(job)
            print(f"[{res[0]}] {res[2]} {res[3]}", flush=True)
            results.append(res)
    with open(root / "ablation_status.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", "dir", "status", "message"])
        w.writerows(results)
    paths = [Path(d) / "metrics.csv" for _, d, _, _ in results if d and (Path(d) / "metrics.csv").exists()]
    metrics.merge(paths, root / "metrics.csv")
    write_manifest(root / "manifest.json", cfg, C.config_hash(cfg), "ablation",
                   {"variants": [r[0] for r in results]})
    failed = [r for r in results if r[2] != "ok"]
    print(f"wrote {root} ({len(results) - len(failed)}/{len(results)} variants ok)")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="ocpolicy", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="TOML experiment file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output directory (default: $%s/<variant>-<run id>)" % OUT_ENV)
        sp.add_argument("--workers", type=int, help="threads for per-sample trajectory solves")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config entry, e.g. algo.mu=1.0 (repeatable)")
        sp.add_argument("-v", "--verbose", action="store_true")

    def variant_flags(sp):
        sp.add_argument("--algo", choices=["pddp", "plal", "plal-ms"])
        sp.add_argument("--sobolev", choices=["off", "full", "stochastic"])
        sp.add_argument("--no-constraints", action="store_true",
                        help="trajectory solver ignores the control box")
        sp.add_argument("--multiple-shooting", action="store_true",
                        help="same as --algo plal-ms")

    t = sub.add_parser("train", help="run one training job")
    common(t)
    variant_flags(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint against per-instance DDP")
    common(e)
    variant_flags(e)
    e.add_argument("--checkpoint")
    e.add_argument("--on-train", action="store_true", help="evaluate on the training samples")
    e.add_argument("--eval-out", help="directory for eval.csv / trace.csv")
    e.set_defaults(func=cmd_eval)

    w = sub.add_parser("warmstart", help="DDP iterations from cold vs policy warm starts")
    common(w)
    variant_flags(w)
    w.add_argument("--checkpoint")
    w.add_argument("--eval-out", help="directory for warmstart.csv")
    w.set_defaults(func=cmd_warmstart)

    a = sub.add_parser("ablation", help="run the variant matrix with shared seeds")
    common(a)
    a.set_defaults(func=cmd_ablation)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
