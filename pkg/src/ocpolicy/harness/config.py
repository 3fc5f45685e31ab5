"""Experiment configuration: TOML file -> nested dataclasses.

Unknown keys are rejected at every level. CLI flags are applied on top of
the file, and the fully resolved tree is written back next to the results.
"""
import copy
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields

import numpy as np
import tomli
import tomli_w

from .. import ddp, envs, learn
from ..algos import OuterLoopConfig
from ..ocp import ConfigError, Ocp, SamplingBox
from ..policy import PolicyNet

TASKS = ("lqr", "pendulum", "double_pendulum")


@dataclass
class SystemConfig:
    dt: float = None                 # task default when unset
    u_bound: list = None             # symmetric bound per control, task default when unset
    m: float = 1.0
    l: float = 1.0
    m1: float = 1.0
    m2: float = 1.0
    l1: float = 1.0
    l2: float = 1.0
    g: float = 9.81
    damping: float = 0.0
    A: list = None                   # lqr only; double integrator when unset
    B: list = None


@dataclass
class CostConfig:
    w_p: list = field(default_factory=lambda: [1.0])
    w_u: list = field(default_factory=lambda: [0.1])
    w_x: list = field(default_factory=lambda: [0.0])
    terminal: float = 10.0


@dataclass
class SamplingConfig:
    x0_low: list = field(default_factory=lambda: [-2.0, -1.0])
    x0_high: list = field(default_factory=lambda: [2.0, 1.0])
    goal: list = field(default_factory=lambda: [0.0, 0.0])
    goal_low: list = None
    goal_high: list = None
    n_train: int = 16
    n_test: int = 32


@dataclass
class PolicyConfig:
    hidden: list = field(default_factory=lambda: [64, 64])
    activation: str = "tanh"
    out_gain: float = 1.0


@dataclass
class AlgoConfig:
    algorithm: str = "pddp"          # pddp | plal | plal_ms
    iterations: int = 20
    mu: float = 10.0
    constraints: bool = True
    online: bool = False
    eval_every: int = 1
    early_stop_tol: float = 0.0


@dataclass
class SobolevSection:
    mode: str = "off"
    weight: float = 0.1
    directions: int = 1
    unbiased: bool = False


@dataclass
class LearnConfig:
    epochs: int = 20
    batch_size: int = 64
    lr: float = 1e-3
    shadow_lr: float = 0.1


@dataclass
class SolverConfig:
    max_iters: int = 50
    grad_tol: float = 1e-8
    backtrack: float = 0.5
    min_step: float = 2.0 ** -10
    reg_min: float = 1e-6
    reg_max: float = 1e10
    qp_max_iters: int = 100


@dataclass
class SeedConfig:
    """Per-stream seeds; unset entries derive from the top-level seed."""
    train: int = None
    test: int = None
    init: int = None
    learn: int = None
    sobolev: int = None


@dataclass
class EvalConfig:
    n_test: int = 32
    seed: int = None                 # derived from the top-level seed when unset
    trace_sample: int = 0
    epsilon: float = 1e-9
    ref_max_iters: int = 300


@dataclass
class WarmstartConfig:
    n_test: int = 64
    max_iters: int = 500
    grad_tol: float = 1e-8
    threshold: int = 100


@dataclass
class AblationConfig:
    algorithms: list = field(default_factory=lambda: ["pddp", "plal"])
    sobolev: list = field(default_factory=lambda: ["off", "stochastic"])
    multiple_shooting: list = field(default_factory=lambda: [False, True])
    constraints: list = field(default_factory=lambda: [True, False])
    parallel: int = 1


@dataclass
class RunConfig:
    workers: int = 1
    out: str = None
    inline_timings: bool = False


@dataclass
class ExperimentConfig:
    task: str = "lqr"
    horizon: int = None
    seed: int = 0
    system: SystemConfig = field(default_factory=SystemConfig)
    cost: CostConfig = field(default_factory=CostConfig)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    algo: AlgoConfig = field(default_factory=AlgoConfig)
    sobolev: SobolevSection = field(default_factory=SobolevSection)
    learn: LearnConfig = field(default_factory=LearnConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    seeds: SeedConfig = field(default_factory=SeedConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    warmstart: WarmstartConfig = field(default_factory=WarmstartConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    run: RunConfig = field(default_factory=RunConfig)


def _build(cls, data, path):
    if not isinstance(data, dict):
        raise ConfigError(f"[{path}] must be a table")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        where = path or "top level"
        raise ConfigError(f"unknown key(s) at {where}: {', '.join(unknown)}")
    kw = {}
    for name, value in data.items():
        f = known[name]
        default = f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default
        if dataclasses.is_dataclass(default):
            kw[name] = _build(type(default), value, f"{path}.{name}" if path else name)
        else:
            kw[name] = value
    return cls(**kw)


def from_dict(data):
    cfg = _build(ExperimentConfig, data, "")
    validate(cfg)
    return cfg


def load(path):
    try:
        with open(path, "rb") as fh:
            data = tomli.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML in {path}: {exc}") from exc
    return from_dict(data)


def to_dict(cfg):
    """Plain nested dict without None entries (TOML has no null)."""
    def clean(obj):
        if isinstance(obj, dict):
            return {k: clean(v) for k, v in obj.items() if v is not None}
        return obj
    return clean(dataclasses.asdict(cfg))


def dumps(cfg):
    return tomli_w.dumps(to_dict(cfg))


def config_hash(cfg):
    """Stable digest of the resolved config, minus output-location fields."""
    d = to_dict(cfg)
    d.get("run", {}).pop("out", None)
    d.get("run", {}).pop("workers", None)
    blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def set_path(cfg, dotted, value):
    """Assign ``value`` to a dotted key such as ``algo.mu``."""
    parts = dotted.split(".")
    obj = cfg
    for p in parts[:-1]:
        if not hasattr(obj, p) or not dataclasses.is_dataclass(getattr(obj, p)):
            raise ConfigError(f"unknown config section {dotted!r}")
        obj = getattr(obj, p)
    if not dataclasses.is_dataclass(obj) or parts[-1] not in {f.name for f in fields(obj)}:
        raise ConfigError(f"unknown config key {dotted!r}")
    setattr(obj, parts[-1], value)


def parse_assignment(text):
    """``key.path=value`` with the value parsed as a TOML literal (bare words become strings)."""
    if "=" not in text:
        raise ConfigError(f"expected key=value, got {text!r}")
    key, raw = text.split("=", 1)
    try:
        value = tomli.loads(f"v = {raw}")["v"]
    except tomli.TOMLDecodeError:
        value = raw
    return key.strip(), value


def apply_overrides(cfg, seed=None, out=None, algo=None, sobolev=None, no_constraints=False,
                    multiple_shooting=False, workers=None, assignments=()):
    cfg = copy.deepcopy(cfg)
    for text in assignments:
        set_path(cfg, *parse_assignment(text))
    if seed is not None:
        cfg.seed = int(seed)
    if out is not None:
        cfg.run.out = str(out)
    if algo is not None:
        cfg.algo.algorithm = algo.replace("-", "_")
    if multiple_shooting:
        if cfg.algo.algorithm == "pddp":
            raise ConfigError("multiple shooting requires a plal algorithm")
        cfg.algo.algorithm = "plal_ms"
    if sobolev is not None:
        cfg.sobolev.mode = sobolev
    if no_constraints:
        cfg.algo.constraints = False
    if workers is not None:
        cfg.run.workers = int(workers)
    validate(cfg)
    return cfg


def variant_name(cfg):
    a = cfg.algo
    base = "pddp" if a.algorithm == "pddp" else "plal"
    name = base
    if cfg.sobolev.mode != "off":
        name += "+S"
    if a.algorithm == "plal_ms":
        name += "+M"
    if not a.constraints:
        name += "-C"
    return name


VARIANTS = tuple(
    base + s + m + c
    for base in ("pddp", "plal")
    for s in ("", "+S")
    for m in (("", "+M") if base == "plal" else ("",))
    for c in ("", "-C"))


def validate(cfg):
    if cfg.task not in TASKS:
        raise ConfigError(f"unknown task {cfg.task!r}; expected one of {TASKS}")
    try:
        learn.SobolevConfig(cfg.sobolev.mode, cfg.sobolev.weight, cfg.sobolev.directions)
        outer_config(cfg)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if cfg.sampling.n_train < 1 or cfg.sampling.n_test < 1 or cfg.eval.n_test < 1:
        raise ConfigError("sample counts must be >= 1")
    if cfg.policy.activation not in ("relu", "tanh"):
        raise ConfigError(f"unknown activation {cfg.policy.activation!r}")
    if cfg.run.workers < 1:
        raise ConfigError("workers must be >= 1")
    if cfg.horizon is not None and cfg.horizon < 1:
        raise ConfigError("horizon must be >= 1")
    for name in ("algorithms", "sobolev", "multiple_shooting", "constraints"):
        if not getattr(cfg.ablation, name):
            raise ConfigError(f"ablation.{name} must not be empty")


# construction of runtime objects

def seeds(cfg):
    """Independent integer seeds per stream, derived from the top-level seed."""
    base = np.random.SeedSequence(cfg.seed).generate_state(6)
    names = ("train", "test", "init", "learn", "sobolev", "eval")
    out = {n: int(b) for n, b in zip(names, base)}
    for n in names[:-1]:
        v = getattr(cfg.seeds, n)
        if v is not None:
            out[n] = int(v)
    if cfg.eval.seed is not None:
        out["eval"] = int(cfg.eval.seed)
    return out


def _bounds(value, n_u, default):
    v = default if value is None else value
    return np.broadcast_to(np.asarray(v, dtype=float), (n_u,)).copy()


def build_system(cfg):
    s = cfg.system
    try:
        if cfg.task == "lqr":
            dt = 0.1 if s.dt is None else s.dt
            if s.A is None and s.B is None:
                A, B = envs.double_integrator(dt=dt).A, envs.double_integrator(dt=dt).B
            elif s.A is None or s.B is None:
                raise ConfigError("lqr needs both system.A and system.B")
            else:
                A, B = np.atleast_2d(np.asarray(s.A, float)), np.atleast_2d(np.asarray(s.B, float))
            ub = _bounds(s.u_bound, B.shape[1], 1.0)
            return envs.linear_system(A, B, -ub, ub, dt)
        if cfg.task == "pendulum":
            dt = 0.05 if s.dt is None else s.dt
            ub = float(_bounds(s.u_bound, 1, 3.0)[0])
            return envs.pendulum(s.m, s.l, s.g, s.damping, dt, ub)
        dt = 0.05 if s.dt is None else s.dt
        ub = _bounds(s.u_bound, 2, 10.0)
        return envs.double_pendulum(s.m1, s.m2, s.l1, s.l2, s.g, s.damping, dt, ub)
    except (ValueError, envs.DimensionError) as exc:
        raise ConfigError(f"invalid system: {exc}") from exc


def build_ocp(cfg):
    spec = build_system(cfg)
    T = cfg.horizon if cfg.horizon is not None else (50 if cfg.task == "lqr" else 100)
    c = cfg.cost
    try:
        w = envs.weights_from_diag(spec, c.w_p, c.w_u, c.w_x, c.terminal)
    except ValueError as exc:
        raise ConfigError(f"invalid cost weights: {exc}") from exc
    return Ocp(spec, w, T)


def sampling_box(cfg, spec):
    s = cfg.sampling
    lo = np.asarray(s.x0_low, dtype=float)
    hi = np.asarray(s.x0_high, dtype=float)
    if lo.shape != (spec.n_x,) or hi.shape != (spec.n_x,):
        raise ConfigError(f"sampling.x0_low/x0_high need {spec.n_x} entries")
    goal = np.asarray(s.goal, dtype=float)
    if goal.shape != (spec.n_p,):
        raise ConfigError(f"sampling.goal needs {spec.n_p} entries")
    glo = None if s.goal_low is None else np.asarray(s.goal_low, dtype=float)
    ghi = None if s.goal_high is None else np.asarray(s.goal_high, dtype=float)
    if (glo is None) != (ghi is None):
        raise ConfigError("goal_low and goal_high must be given together")
    return SamplingBox(lo, hi, goal, glo, ghi)


def build_policy(cfg, spec):
    sizes = [spec.n_x, *cfg.policy.hidden, spec.n_u]
    return PolicyNet.init(sizes, spec.u_min, spec.u_max, cfg.policy.activation,
                          seed=seeds(cfg)["init"], out_gain=cfg.policy.out_gain)


def solver_settings(cfg, **override):
    s = cfg.solver
    kw = dict(max_iters=s.max_iters, grad_tol=s.grad_tol, backtrack=s.backtrack,
              min_step=s.min_step, reg_min=s.reg_min, reg_max=s.reg_max,
              qp_max_iters=s.qp_max_iters, constrained=cfg.algo.constraints)
    kw.update(override)
    return ddp.DdpSettings(**kw)


def outer_config(cfg):
    sd = seeds(cfg)
    a, sb, ln = cfg.algo, cfg.sobolev, cfg.learn
    return OuterLoopConfig(
        algorithm=a.algorithm, iterations=a.iterations, mu=a.mu, constraints=a.constraints,
        online=a.online,
        sobolev=learn.SobolevConfig(sb.mode, sb.weight, sb.directions, sb.unbiased, sd["sobolev"]),
        epochs=ln.epochs, batch_size=ln.batch_size, lr=ln.lr, shadow_lr=ln.shadow_lr,
        eval_every=a.eval_every, early_stop_tol=a.early_stop_tol, seed=sd["learn"],
        workers=cfg.run.workers, solver=solver_settings(cfg))
