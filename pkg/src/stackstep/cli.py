"""Command-line entry point and experiment runners.

Subcommands: ``gradcheck``, ``train``, ``ratefit``, ``landscape``, ``tdc``
and ``constants``. Every subcommand reads one JSON config (``--config``)
whose ``schema_version`` must be 1. Exit codes: 0 success, 2 config error,
3 numerical failure, 4 a checked property did not hold.

The experiment functions below are importable so the test-suite can drive
the same code paths as the command line.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.stats import linregress

from . import landscape as lsc
from . import stackelberg as stk
from . import tdc
from .numcore import NonFiniteError, NotSPDError, fd_grad, make_rng
from .optimizer import (
    NonFiniteGradientError,
    ScheduleError,
    StepSchedule,
    TrainTrace,
    read_trace_csv,
    run,
    tune_thm2,
    validate_schedule,
    _json_default,
)
from .problems import (
    ActivationError,
    ClassificationObjective,
    FrobeniusBall,
    LayeredParams,
    ProblemConstants,
    StochasticObjective,
    ToyObjective,
    TOY_HI,
    TOY_LO,
    clf_grad_M,
    clf_grad_w,
    clf_loss,
    constraint_from_dict,
    default_ball,
    estimate_constants,
    get_activation,
    init_params,
    make_synthetic_classification,
    make_synthetic_regression,
    reg_grad_w,
    reg_loss,
    reg_subgrad_M,
    regression_objective,
    toy_phi,
)

SCHEMA_VERSION = 1
EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_PROPERTY = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration

PROBLEM_KINDS = ("synthetic_regression", "synthetic_classification", "toy", "tdc")

DEFAULTS = {
    "schema_version": SCHEMA_VERSION,
    "problem": {"kind": "synthetic_regression", "data_seed": 0, "N": 128, "m": 20, "n": 10, "lam": 0.1,
                "noise_std": 1.0},
    "activation": "relu",
    "constraints": {"M": None, "W": None},
    "schedule": {"kind": "constant", "alpha0": 5e-5, "beta0": 2.5e-4, "h": 0.0, "zeta0": None},
    "iters": 1000,
    "batch_size": 8,
    "eval_period": 10,
    "seeds": list(range(10)),
    "constants": None,
    "output_dir": "out",
}


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def validate_config(cfg: dict) -> dict:
    """Fill defaults and check field types; raises :class:`ConfigError` naming the field."""
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    if cfg.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(f"schema_version: expected {SCHEMA_VERSION}, got {cfg.get('schema_version')!r}")
    problem = cfg.get("problem", {})
    kind = problem.get("kind", DEFAULTS["problem"]["kind"]) if isinstance(problem, dict) else None
    if kind not in PROBLEM_KINDS:
        raise ConfigError(f"problem.kind: must be one of {PROBLEM_KINDS}, got {kind!r}")
    out = _merge(DEFAULTS, cfg)
    if "schedule" in cfg:
        # a schedule is taken whole; mixing in default step sizes would change auto-tuned ones
        out["schedule"] = dict(cfg["schedule"]) if isinstance(cfg["schedule"], dict) else cfg["schedule"]
    if "activation" not in cfg:
        out["activation"] = {"synthetic_classification": "tanh", "tdc": "identity"}.get(kind, "relu")
    if kind == "toy":
        out["problem"] = {"kind": "toy", "noise_std": cfg.get("problem", {}).get("noise_std", 0.1)}
    elif kind == "tdc":
        out["problem"] = dict(cfg["problem"])
    for name in ("iters", "batch_size", "eval_period"):
        v = out[name]
        if not isinstance(v, int) or isinstance(v, bool) or v < (0 if name == "iters" else 1):
            raise ConfigError(f"{name}: expected a {'non-negative' if name == 'iters' else 'positive'} integer, got {v!r}")
    seeds = out["seeds"]
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) for s in seeds):
        raise ConfigError("seeds: expected a nonempty list of integers")
    sched = out["schedule"]
    if not isinstance(sched, dict):
        raise ConfigError("schedule: expected an object")
    try:
        schedule_from_config(sched)
    except (TypeError, KeyError, ValueError) as e:
        raise ConfigError(f"schedule: {e}") from None
    try:
        get_activation(out["activation"])
    except (ActivationError, ValueError) as e:
        raise ConfigError(f"activation: {e}") from None
    if kind == "synthetic_classification" and not get_activation(out["activation"]).smooth:
        raise ConfigError("activation: classification needs a differentiable, smooth activation "
                          "(logistic head analysis); relu is rejected")
    if kind == "synthetic_regression" and out["problem"].get("lam", 0.1) <= 0 \
            and out["problem"].get("N", 128) < out["problem"].get("n", 10):
        raise ConfigError("problem.lam: N < n with lam = 0 leaves the head problem without strong convexity")
    if kind == "tdc":
        mdp = out["problem"].get("mdp")
        if mdp not in (None, "golden") and not Path(mdp).exists():
            raise ConfigError(f"problem.mdp: file not found: {mdp}")
    return out


def load_config(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: line {e.lineno} column {e.colno}: {e.msg}") from None
    return validate_config(raw)


def schedule_from_config(spec: dict) -> StepSchedule:
    spec = dict(spec)
    if spec.get("kind") == "thm2" and spec.get("auto_h"):
        return tune_thm2(float(spec["lambda_phi"]), spec.get("alpha0"))
    allowed = {"kind", "alpha0", "beta0", "h", "zeta0", "tie"}
    extra = set(spec) - allowed
    if extra:
        raise TypeError(f"unknown fields {sorted(extra)}")
    return StepSchedule(**spec)


def constants_from_config(spec: dict) -> ProblemConstants:
    try:
        return ProblemConstants(**spec)
    except TypeError as e:
        raise ConfigError(f"constants: {e}") from None


# ---------------------------------------------------------------------------
# problem construction

def init_hash(p: LayeredParams) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(p.M).tobytes())
    h.update(np.ascontiguousarray(p.w).tobytes())
    return h.hexdigest()


def teacher_problem(seed: int, act="relu", data_seed: int = 0, N: int = 128, m: int = 20, n: int = 10,
                     lam: float = 0.1, noise_std: float = 1.0, constraints: dict | None = None):
    """The synthetic teacher regression instance with a per-seed initialization.

    The dataset depends only on ``data_seed``; ``seed`` picks the init
    (stream ``(seed, 1)``). Training noise should use stream ``(seed, 2)``.
    """
    data, _, _ = make_synthetic_regression(data_seed, N=N, m=m, n=n, lam=lam, noise_std=noise_std, act=act)
    init = init_params((m, n), make_rng(seed, 1))
    constraints = constraints or {}
    M_set = constraint_from_dict(constraints["M"], init.M) if constraints.get("M") else None
    W_set = constraint_from_dict(constraints["W"], init.w) if constraints.get("W") else None
    return regression_objective(data, act, init, M_set, W_set), init


def build_problem(cfg: dict, seed: int) -> tuple[StochasticObjective, LayeredParams, np.random.Generator]:
    """Objective, initialization and training generator for one seed."""
    p = cfg["problem"]
    kind = p["kind"]
    if kind == "synthetic_regression":
        obj, init = teacher_problem(seed, cfg["activation"], p.get("data_seed", 0), p.get("N", 128), p.get("m", 20),
                                     p.get("n", 10), p.get("lam", 0.1), p.get("noise_std", 1.0), cfg["constraints"])
        return obj, init, make_rng(seed, 2)
    if kind == "synthetic_classification":
        act = get_activation(cfg["activation"])
        m, n = p.get("m", 5), p.get("n", 4)
        data, _, _ = make_synthetic_classification(p.get("data_seed", 0), N=p.get("N", 64), m=m, n=n,
                                                   lam=p.get("lam", 0.1), act=act)
        init = init_params((m, n), make_rng(seed, 1))
        c = cfg["constraints"]
        M_set = constraint_from_dict(c.get("M"), init.M)
        W_set = constraint_from_dict(c.get("W"), init.w)
        return ClassificationObjective(data, act, M_set, W_set, n), init, make_rng(seed, 2)
    if kind == "toy":
        rng = make_rng(seed)
        init = LayeredParams([[rng.uniform(TOY_LO, TOY_HI)]], [rng.uniform(TOY_LO, TOY_HI)])
        return ToyObjective(p.get("noise_std", 0.1)), init, rng
    raise ConfigError(f"problem.kind {kind!r} has no optimizer problem (use the tdc subcommand)")


# ---------------------------------------------------------------------------
# parallel map

def n_workers() -> int:
    v = os.environ.get("STACKSTEP_THREADS", "1")
    try:
        return max(1, int(v))
    except ValueError:
        raise ConfigError(f"STACKSTEP_THREADS must be an integer, got {v!r}") from None


def pmap(fn: Callable, items: Sequence) -> list:
    """Order-preserving map, parallel over processes when ``STACKSTEP_THREADS`` > 1."""
    items = list(items)
    workers = min(n_workers(), len(items))
    if workers <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))


# ---------------------------------------------------------------------------
# rate fitting

@dataclass
class RateFit:
    k: np.ndarray
    value: np.ndarray
    tail_fraction: float
    slope: float
    stderr: float
    intercept: float
    n_points: int

    def to_dict(self) -> dict:
        return {"tail_fraction": self.tail_fraction, "slope": self.slope, "stderr": self.stderr,
                "intercept": self.intercept, "n_points": self.n_points}


def fit_rate(k, value, tail_fraction: float = 0.5, min_points: int = 10) -> RateFit:
    """Least-squares slope of ``log(value)`` against ``log(k)`` on the tail ``k >= (1 - tail_fraction) k_max``."""
    k = np.asarray(k, dtype=float)
    value = np.asarray(value, dtype=float)
    if not 0 < tail_fraction <= 1:
        raise ValueError("tail_fraction must lie in (0, 1]")
    tail = (k >= (1.0 - tail_fraction) * k.max()) & (k > 0)
    kt, vt = k[tail], value[tail]
    bad = np.flatnonzero(~(vt > 0))
    if bad.size:
        row = int(np.flatnonzero(tail)[bad[0]])
        raise ValueError(f"rate fit needs positive values; row {row} (k={k[row]:g}) has {value[row]!r}")
    if len(kt) < min_points:
        raise ValueError(f"rate fit tail has {len(kt)} points, need at least {min_points}")
    if np.all(vt == vt[0]):
        return RateFit(kt, vt, tail_fraction, 0.0, 0.0, float(np.log(vt[0])), len(kt))
    res = linregress(np.log(kt), np.log(vt))
    return RateFit(kt, vt, tail_fraction, float(res.slope), float(res.stderr), float(res.intercept), len(kt))


def average_traces(traces: Sequence[dict], quantity: str) -> tuple[np.ndarray, np.ndarray]:
    """Seed average of one column; all traces must share the same ``k`` grid."""
    if not traces:
        raise ValueError("no traces to average")
    k = traces[0]["k"]
    for t in traces:
        if quantity not in t:
            raise ValueError(f"trace has no column {quantity!r}")
        if len(t["k"]) != len(k) or np.any(t["k"] != k):
            raise ValueError("traces do not share the same k grid")
    return k, np.mean([t[quantity] for t in traces], axis=0)


# ---------------------------------------------------------------------------
# gradient checks

@dataclass
class Check:
    name: str
    max_rel_err: float
    tol: float
    n_points: int

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_err <= self.tol)


def rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    scale = max(float(np.linalg.norm(a)), float(np.linalg.norm(b)), 1e-12)
    return float(np.linalg.norm(a - b)) / scale


def _fd_check(name, sampler, analytic, f_of_x, n_points, tol, h=1e-5) -> Check:
    worst = 0.0
    for i in range(n_points):
        pt = sampler(i)
        x0, f = f_of_x(pt)
        worst = max(worst, rel_err(analytic(pt), fd_grad(f, x0, h).reshape(np.shape(analytic(pt)))))
    return Check(name, worst, tol, n_points)


def gradient_checks(seed: int = 0, n_points: int = 100, tol: float = 1e-5,
                    overrides: dict | None = None) -> list[Check]:
    """Analytic (sub)gradients against central differences at random interior points.

    ``overrides`` maps a check name to a replacement analytic function, which
    is how the negative-control test injects a corrupted gradient.
    """
    ov = overrides or {}
    rng = make_rng(seed, 31)
    checks = []

    # regression: small teacher instance
    N, m, n = 12, 4, 3
    X = rng.standard_normal((N, m))
    Y = rng.standard_normal(N)
    from .problems import RegressionDataset, ClassificationDataset
    rd = RegressionDataset(X, Y, 0.1)
    tanh, relu = get_activation("tanh"), get_activation("relu")
    pts = [LayeredParams(rng.standard_normal((m, n)), rng.standard_normal(n)) for _ in range(n_points)]

    def w_of(act, loss):
        return lambda p: (p.w, lambda w: loss(rd, act, LayeredParams(p.M, w)))

    def M_of(act, loss, data):
        return lambda p: (p.M.ravel(), lambda z: loss(data, act, LayeredParams(z.reshape(p.M.shape), p.w)))

    checks.append(_fd_check("reg_grad_w", lambda i: pts[i], ov.get("reg_grad_w", lambda p: reg_grad_w(rd, relu, p)),
                            w_of(relu, reg_loss), n_points, tol))

    # relu smooth branch: keep every preactivation at least 1e-3 away from the kink
    relu_pts = []
    while len(relu_pts) < n_points:
        p = LayeredParams(rng.standard_normal((m, n)), rng.standard_normal(n))
        if np.min(np.abs(X @ p.M)) > 1e-3:
            relu_pts.append(p)
    checks.append(_fd_check("reg_subgrad_M", lambda i: relu_pts[i],
                            ov.get("reg_subgrad_M", lambda p: reg_subgrad_M(rd, relu, p)),
                            M_of(relu, reg_loss, rd), n_points, tol, h=1e-7))

    # classification
    Yc = (rng.random(N) < 0.5).astype(float)
    cd = ClassificationDataset(X, Yc, 0.1)
    checks.append(_fd_check("clf_grad_w", lambda i: pts[i], ov.get("clf_grad_w", lambda p: clf_grad_w(cd, tanh, p)),
                            lambda p: (p.w, lambda w: clf_loss(cd, tanh, LayeredParams(p.M, w))), n_points, tol))
    checks.append(_fd_check("clf_grad_M", lambda i: pts[i], ov.get("clf_grad_M", lambda p: clf_grad_M(cd, tanh, p)),
                            M_of(tanh, clf_loss, cd), n_points, tol))

    # Danskin gradient of Phi on a smooth regression instance
    obj = danskin_instance(seed)
    Ms = [obj.M_set.project(rng.standard_normal(obj.M_shape)) for _ in range(n_points)]
    checks.append(_fd_check("phi_subgrad", lambda i: Ms[i],
                            ov.get("phi_subgrad", lambda M: stk.phi_subgrad(obj, M, 1e-12)),
                            lambda M: (M.ravel(), lambda z: stk.phi(obj, z.reshape(M.shape), 1e-12)), n_points, tol))

    # TDC with exact mu
    feats = []
    for _ in range(n_points):
        mdp = tdc.random_mdp(rng, n_states=5, n_actions=2, gamma=0.9)
        feats.append((mdp, tdc.ValueFeatures(rng.standard_normal((5, 4)), tanh, rng.standard_normal((4, 3)),
                                             rng.standard_normal(3))))

    def tdc_M(i):
        mdp, ft = feats[i]
        return tdc.tdc_grad_M(mdp, ft, tdc.mu_fixed_point(mdp, ft))

    def tdc_w(i):
        mdp, ft = feats[i]
        return tdc.tdc_grad_w(mdp, ft, tdc.mu_fixed_point(mdp, ft))

    checks.append(_fd_check("tdc_grad_M", lambda i: i, ov.get("tdc_grad_M", tdc_M),
                            lambda i: (feats[i][1].M.ravel(),
                                       lambda z: tdc.mspbe(feats[i][0], feats[i][1].with_(M=z.reshape(4, 3)))),
                            n_points, tol))
    checks.append(_fd_check("tdc_grad_w", lambda i: i, ov.get("tdc_grad_w", tdc_w),
                            lambda i: (feats[i][1].w, lambda w: tdc.mspbe(feats[i][0], feats[i][1].with_(w=w))),
                            n_points, tol))
    return checks


def danskin_instance(seed: int = 0) -> StochasticObjective:
    """tanh regression instance whose ridge head stays inside the head ball."""
    data, _, _ = make_synthetic_regression(seed, N=16, m=4, n=3, lam=0.1, act="tanh")
    init = init_params((4, 3), make_rng(seed, 1), M_scale=1.0)
    return regression_objective(data, "tanh", init, M_set=FrobeniusBall(3.0), W_set=FrobeniusBall(1e6))


# ---------------------------------------------------------------------------
# experiments

def toy_m_star() -> float:
    """Minimizer of the reduced toy objective by bounded scalar search."""
    return float(minimize_scalar(toy_phi, bounds=(TOY_LO, TOY_HI), method="bounded",
                                 options={"xatol": 1e-12}).x)


def _toy_run(args):
    seed, iters, eval_period, noise_std, sched, m_star = args
    obj = ToyObjective(noise_std)
    rng = make_rng(seed)
    init = LayeredParams([[rng.uniform(TOY_LO, TOY_HI)]], [rng.uniform(TOY_LO, TOY_HI)])
    r = run(obj, sched, init, iters, 1, eval_period, rng, with_phi=False, m_star=np.array([[m_star]]),
            meta={"seed": seed})
    return r.trace


def toy_rate_experiment(seeds: Iterable[int] = range(20), iters: int = 100_000, eval_period: int = 100,
                        noise_std: float = 0.1, lambda_phi: float = 0.05, tail_fraction: float = 0.5):
    """Seed-averaged ``||M_k - M*||^2`` under the tuned strongly-convex schedule, with its rate fit."""
    sched = tune_thm2(lambda_phi)
    ms = toy_m_star()
    traces = pmap(_toy_run, [(s, iters, eval_period, noise_std, sched, ms) for s in seeds])
    k, mean = average_traces([{c: t.column(c) for c in t.columns} for t in traces], "dist2")
    return fit_rate(k, mean, tail_fraction), sched, traces


@dataclass
class StationarityOutcome:
    seed: int
    rho_hat: float
    k: np.ndarray
    stationarity: np.ndarray
    min_so_far: np.ndarray
    loss: np.ndarray

    @property
    def ratio(self) -> float:
        return float(self.min_so_far[-1] / self.min_so_far[0])


def stationarity_experiment(seed: int, iters: int = 10_000, n_checkpoints: int = 100, alpha0: float = 1e-4,
                            beta0: float = 5e-4, batch_size: int = 8, rho_segments: int = 32,
                            act="relu") -> StationarityOutcome:
    """Decaying-schedule training with the envelope stationarity surrogate at evenly spaced checkpoints.

    ``rho_hat`` is twice the worst local negative curvature of Phi found on
    short segments (half length ``0.1 ||M0||``) centred in the ball of radius
    ``||M0||`` around the initialization.
    """
    obj, init = teacher_problem(seed, act)
    r0 = float(np.linalg.norm(init.M))
    rho_hat = stk.estimate_rho_hat(obj, make_rng(seed, 3), FrobeniusBall(r0, init.M), rho_segments,
                                   half_length=0.1 * r0)
    period = max(1, iters // n_checkpoints)
    res = run(obj, StepSchedule("thm1", alpha0, beta0), init, iters, batch_size, period, make_rng(seed, 2),
              with_phi=False, rho_hat=rho_hat, meta={"seed": seed})
    st = res.trace.column("stationarity")
    return StationarityOutcome(seed, rho_hat, res.trace.column("k"), st, np.minimum.accumulate(st),
                               res.trace.column("loss"))


def _stationarity_job(args):
    return stationarity_experiment(*args)


ARMS = ("nonuniform", "uniform_alpha", "uniform_beta")
_ARM_TIE = {"nonuniform": None, "uniform_alpha": "alpha", "uniform_beta": "beta"}


@dataclass
class ThreeArmOutcome:
    seed: int
    init_hash: str
    final_loss: dict
    diverged: dict
    traces: dict = field(default_factory=dict)
    trajectory: list = field(default_factory=list)

    def summary(self) -> dict:
        return {"seed": self.seed, "init_hash": self.init_hash, "final_loss": self.final_loss,
                "diverged": self.diverged}


def three_arm(obj: StochasticObjective, init: LayeredParams, sched: StepSchedule, iters: int, batch_size: int,
              eval_period: int, seed: int, rng_factory: Callable[[], np.random.Generator],
              with_phi: bool = False, record_params: bool = False, m_star=None) -> ThreeArmOutcome:
    """Non-uniform schedule and its two uniform baselines from one shared init.

    Each arm gets a fresh generator from ``rng_factory`` so the three arms
    see identical minibatch sequences. A run that produces a non-finite
    gradient or loss is recorded as diverged with loss ``inf``.
    """
    h0 = init_hash(init)
    final, div, traces, traj = {}, {}, {}, []
    for arm in ARMS:
        if init_hash(init) != h0:
            raise RuntimeError("initialization changed between arms")
        s = sched.tied(_ARM_TIE[arm]) if _ARM_TIE[arm] else sched
        try:
            with np.errstate(over="raise", invalid="raise"):
                r = run(obj, s, init, iters, batch_size, eval_period, rng_factory(), with_phi=with_phi,
                        record_params=record_params and arm == "nonuniform", m_star=m_star,
                        meta={"seed": seed, "arm": arm, "init_hash": h0})
            loss = float(r.trace.column("loss")[-1])
            final[arm], div[arm] = (loss, False) if math.isfinite(loss) else (math.inf, True)
            traces[arm] = r.trace
            if arm == "nonuniform":
                traj = r.trajectory
        except (NonFiniteGradientError, NonFiniteError, FloatingPointError, stk.BestResponseError):
            final[arm], div[arm] = math.inf, True
    return ThreeArmOutcome(seed, h0, final, div, traces, traj)


ARM_ALPHA = 5e-5


def three_arm_seed(seed: int, alpha0: float = ARM_ALPHA, ratio: float = 5.0, iters: int = 1000,
                 batch_size: int = 8, eval_period: int | None = None, record_params: bool = False,
                 with_phi: bool = False) -> ThreeArmOutcome:
    obj, init = teacher_problem(seed)
    return three_arm(obj, init, StepSchedule("constant", alpha0, ratio * alpha0), iters, batch_size,
                     eval_period or iters, seed, lambda: make_rng(seed, 2), with_phi, record_params)


def _three_arm_job(seed):
    return three_arm_seed(seed)


def ordering_property(outcomes: Sequence[ThreeArmOutcome]) -> dict:
    """Seed counts for the ordering claims of the three-arm comparison."""
    beat_a = sum(o.final_loss["nonuniform"] <= o.final_loss["uniform_alpha"] for o in outcomes)
    beta_bad = sum(o.diverged["uniform_beta"] or o.final_loss["uniform_beta"] > o.final_loss["nonuniform"]
                   for o in outcomes)
    return {"n_seeds": len(outcomes), "nonuniform_le_uniform_alpha": int(beat_a),
            "uniform_beta_diverged_or_worse": int(beta_bad),
            "passed": bool(beat_a >= math.ceil(0.8 * len(outcomes)) and beta_bad >= math.ceil(0.6 * len(outcomes)))}


EARLY_CHECKPOINTS = (0, 10, 50, 100)


def landscape_experiment(seed: int = 0, direction_seeds: Iterable[int] = range(10), iters: int = 1000,
                         checkpoints: Sequence[int] = EARLY_CHECKPOINTS, h: float = 1e-4,
                         full_grid: bool = False, eta_max: float = 1.0, resolution: int = 41):
    """Paired slice study along the non-uniform arm's trajectory.

    Returns ``{direction_seed: [CheckpointSlices, ...]}`` where the last
    checkpoint is always the final iterate.
    """
    out = three_arm_seed(seed, iters=iters, eval_period=10, record_params=True)
    obj, _ = teacher_problem(seed)
    cps = sorted(set(int(c) for c in checkpoints) | {iters})
    studies = {}
    for ds in direction_seeds:
        studies[ds] = lsc.trajectory_study(obj, out.trajectory, cps, make_rng(ds, 77), eta_max=eta_max,
                                           resolution=resolution, h=h, full_grid=full_grid)
    return studies


def landscape_property(studies: dict, early: Sequence[int] = EARLY_CHECKPOINTS, final_tol: float = 0.25,
                       min_fraction: float = 0.7) -> dict:
    """Per-checkpoint seed counts for sharper stackelberg curvature and final-checkpoint agreement.

    Early: a direction seed counts when both ``lambda_max`` and the slice
    gradient norm of the stackelberg slice are at least the joint ones.
    Final: a seed counts when ``|l_s - l_j| <= final_tol * max(|l_s|, |l_j|)``.
    Each early checkpoint and the final one must reach ``min_fraction`` of seeds.
    """
    n = len(studies)
    need = math.ceil(min_fraction * n)
    per_k = {}
    final_ok = 0
    for res in studies.values():
        by_k = {c.k: c for c in res}
        for k in early:
            c = by_k[k]
            hit = c.stackelberg.lambda_max >= c.joint.lambda_max and c.stackelberg.grad_norm >= c.joint.grad_norm
            per_k[k] = per_k.get(k, 0) + int(hit)
        last = res[-1]
        a, b = last.joint.lambda_max, last.stackelberg.lambda_max
        final_ok += int(abs(a - b) <= final_tol * max(abs(a), abs(b)))
    early_pass = all(per_k[k] >= need for k in early)
    return {"n_seeds": n, "required": need, "early_counts": per_k, "final_agree": final_ok,
            "final_k": next(iter(studies.values()))[-1].k if studies else None,
            "early_passed": bool(early_pass), "final_passed": bool(final_ok >= need),
            "passed": bool(early_pass and final_ok >= need)}


def golden_frozen_setup(perturb_seed: int = 9, scale: float = 0.01, mdp: tdc.TabularMDP | None = None):
    """Tabular raw features and a near-identity frozen body on ``mdp`` (the golden MDP by default).

    Returns ``(mdp, features, w_fp)`` with ``w_fp`` the linear TD fixed point.
    """
    mdp = mdp or tdc.load_golden_mdp()
    S = mdp.n_states
    psi = np.eye(S)
    M = np.eye(S) + scale * make_rng(perturb_seed).standard_normal((S, S))
    feat = tdc.ValueFeatures(psi, get_activation("identity"), M, np.zeros(S))
    return mdp, feat, tdc.linear_td_fixed_point(mdp, psi @ M)


FROZEN_SCHEDULE = StepSchedule("thm2", 0.0, 1.0, h=10.0, zeta0=1.0)


def tdc_frozen_experiment(seed: int = 0, iters: int = 1_000_000, sched: StepSchedule = FROZEN_SCHEDULE):
    """Single-loop updates with the body frozen (``alpha = 0``); returns ``(result, ||w - w_fp||)``."""
    if sched.alpha0 != 0:
        raise ValueError("frozen-body run needs alpha0 = 0")
    mdp, feat, fp = golden_frozen_setup()
    res = tdc.run_tdc(mdp, feat, sched, iters, max(1, iters // 100), make_rng(seed, 5))
    return res, float(np.linalg.norm(res.state.w - fp))


# ---------------------------------------------------------------------------
# subcommands

def _out_dir(args, cfg) -> Path:
    out = Path(args.out or cfg.get("output_dir", "out"))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _seeds(args, cfg) -> list[int]:
    if args.seeds:
        try:
            return [int(s) for s in args.seeds.split(",") if s.strip()]
        except ValueError:
            raise ConfigError(f"--seeds: expected comma-separated integers, got {args.seeds!r}") from None
    return list(cfg["seeds"])


def _write_json(path: Path, obj):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def _config_or_default(args) -> dict:
    return load_config(args.config) if args.config else validate_config({"schema_version": SCHEMA_VERSION})


def cmd_gradcheck(args) -> int:
    cfg = _config_or_default(args)
    gc = cfg.get("gradcheck", {})
    checks = gradient_checks(gc.get("seed", 0), gc.get("n_points", 100), gc.get("tol", 1e-5))
    ok = True
    for c in checks:
        print(f"{'PASS' if c.passed else 'FAIL'} {c.name:14s} max_rel_err={c.max_rel_err:.3e} tol={c.tol:g}")
        ok &= c.passed
    if args.out:
        _write_json(_out_dir(args, cfg) / "gradcheck.json", [dict(asdict(c), passed=c.passed) for c in checks])
    return EXIT_OK if ok else EXIT_PROPERTY


def _resolve_constants(cfg, obj, strict) -> ProblemConstants | None:
    if cfg.get("constants"):
        return constants_from_config(cfg["constants"])
    if not strict:
        return None
    return estimate_constants(obj, cfg.get("constants_samples", 32), make_rng(0, 7))


def cmd_train(args) -> int:
    cfg = _config_or_default(args)
    out = _out_dir(args, cfg)
    sched = schedule_from_config(cfg["schedule"])
    summaries, outcomes, reports = [], [], {}
    for seed in _seeds(args, cfg):
        obj, init, _ = build_problem(cfg, seed)
        consts = _resolve_constants(cfg, obj, args.strict_schedule)
        if consts is not None:
            rep = validate_schedule(sched, consts, cfg["iters"], strict=args.strict_schedule)
            reports[seed] = {"constants": consts.to_dict(), "report": rep.to_dict()}
        if cfg["problem"]["kind"] == "toy":
            def factory(seed=seed):
                r = make_rng(seed)
                r.uniform(size=2)  # skip the two init draws
                return r
        else:
            def factory(seed=seed):
                return make_rng(seed, 2)
        m_star = np.array([[toy_m_star()]]) if cfg["problem"]["kind"] == "toy" else None
        o = three_arm(obj, init, sched, cfg["iters"], cfg["batch_size"], cfg["eval_period"], seed, factory,
                      with_phi=cfg.get("with_phi", True), record_params=cfg.get("record_params", False),
                      m_star=m_star)
        for arm, tr in o.traces.items():
            tr.meta["schedule_check"] = reports.get(seed)
            tr.write(out / f"trace_seed{seed}_{arm}.csv", out / f"trace_seed{seed}_{arm}.json")
        if o.trajectory:
            save_trajectory(out / f"trajectory_seed{seed}.npz", o.trajectory)
        outcomes.append(o)
        summaries.append(o.summary())
    prop = ordering_property(outcomes)
    _write_json(out / "summary.json", {"seeds": summaries, "comparison": prop, "schedule": sched.to_dict()})
    print(json.dumps(prop))
    if args.check and not prop["passed"]:
        return EXIT_PROPERTY
    return EXIT_OK


def save_trajectory(path, trajectory):
    ks = np.array([k for k, _ in trajectory], dtype=np.int64)
    np.savez(path, k=ks, M=np.stack([p.M for _, p in trajectory]), w=np.stack([p.w for _, p in trajectory]))


def load_trajectory(path) -> list:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"trajectory file not found: {path}")
    with np.load(path) as z:
        return [(int(k), LayeredParams(M, w)) for k, M, w in zip(z["k"], z["M"], z["w"])]


def cmd_ratefit(args) -> int:
    traces = []
    for p in args.traces:
        if not Path(p).exists():
            raise ConfigError(f"trace file not found: {p}")
        traces.append(read_trace_csv(p))
    k, v = average_traces(traces, args.quantity)
    fit = fit_rate(k, v, args.tail_fraction)
    d = fit.to_dict()
    d["quantity"] = args.quantity
    d["n_traces"] = len(traces)
    if args.band:
        lo, hi = args.band
        d["band"] = [lo, hi]
        d["in_band"] = bool(lo <= fit.slope <= hi)
    print(json.dumps(d))
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        _write_json(Path(args.out) / "ratefit.json", d)
    return EXIT_PROPERTY if args.band and not d["in_band"] else EXIT_OK


def cmd_landscape(args) -> int:
    cfg = _config_or_default(args)
    out = _out_dir(args, cfg)
    lc = cfg.get("landscape", {})
    checkpoints = [int(c) for c in args.checkpoints.split(",")] if args.checkpoints else lc.get("checkpoints", [0, 100, 1000])
    seed = _seeds(args, cfg)[0]
    obj, init, _ = build_problem(cfg, seed)
    if args.trajectory:
        traj = load_trajectory(args.trajectory)
    else:
        sched = schedule_from_config(cfg["schedule"])
        traj = run(obj, sched, init, cfg["iters"], cfg["batch_size"], cfg["eval_period"], make_rng(seed, 2),
                   with_phi=False, record_params=True).trajectory
    res = lsc.trajectory_study(obj, traj, checkpoints, make_rng(lc.get("direction_seed", 0), 77),
                               eta_max=lc.get("eta_max", 1.0), resolution=lc.get("resolution", 41),
                               h=lc.get("h", 1e-4), full_grid=True)
    for path in lsc.write_study(res, out):
        print(path)
    return EXIT_OK


def cmd_tdc(args) -> int:
    cfg = _config_or_default(args)
    p = cfg["problem"]
    if p.get("kind") != "tdc":
        raise ConfigError("problem.kind: the tdc subcommand needs kind 'tdc'")
    out = _out_dir(args, cfg)
    mdp_src = p.get("mdp")
    if mdp_src in (None, "golden"):
        mdp = tdc.load_golden_mdp()
    else:
        try:
            mdp = tdc.TabularMDP.load(mdp_src)
        except tdc.MDPValidationError as e:
            raise ConfigError(f"problem.mdp: {e}") from None
    sched = schedule_from_config(cfg["schedule"])
    S = mdp.n_states
    feat_cfg = p.get("features", {})
    act = get_activation(cfg.get("activation", "identity") if feat_cfg.get("activation") is None
                         else feat_cfg["activation"])
    frozen = bool(p.get("frozen_body", False))
    fp = None
    summary = {"mdp": mdp.name, "schedule": sched.to_dict(), "frozen_body": frozen, "seeds": []}
    ok = True
    for seed in _seeds(args, cfg):
        if frozen:
            _, feat, fp = golden_frozen_setup(p.get("perturb_seed", 9), mdp=mdp)
            if sched.alpha0 != 0:
                raise ConfigError("schedule.alpha0: frozen_body needs alpha0 = 0")
        else:
            r = make_rng(seed, 4)
            m, n = feat_cfg.get("m", S), feat_cfg.get("n", S)
            feat = tdc.ValueFeatures(r.standard_normal((S, m)), act, r.standard_normal((m, n)) / math.sqrt(m),
                                     np.zeros(n))
        res = tdc.run_tdc(mdp, feat, sched, cfg["iters"], cfg["eval_period"], make_rng(seed, 5),
                          meta={"seed": seed})
        res.trace.write(out / f"tdc_seed{seed}.csv", out / f"tdc_seed{seed}.json")
        row = {"seed": seed, "final_mspbe": float(res.trace.column("mspbe")[-1])}
        if fp is not None:
            row["fixed_point_dist"] = float(np.linalg.norm(res.state.w - fp))
            row["within_tol"] = row["fixed_point_dist"] <= p.get("fixed_point_tol", 1e-2)
            ok &= row["within_tol"]
        summary["seeds"].append(row)
    _write_json(out / "tdc_summary.json", summary)
    print(json.dumps(summary["seeds"]))
    return EXIT_PROPERTY if args.check and not ok else EXIT_OK


def cmd_constants(args) -> int:
    cfg = _config_or_default(args)
    seed = _seeds(args, cfg)[0]
    obj, _, _ = build_problem(cfg, seed)
    consts = estimate_constants(obj, cfg.get("constants_samples", 256), make_rng(seed, 7))
    d = consts.to_dict()
    d["empirical"] = True
    print(json.dumps(d, indent=2, default=_json_default))
    if args.out:
        _write_json(_out_dir(args, cfg) / "constants.json", d)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="stackstep", description="Two-time-scale training experiments.")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="JSON experiment config")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seeds", help="comma-separated seed list overriding the config")
        return p

    common(sub.add_parser("gradcheck", help="finite-difference checks of every analytic gradient"))
    t = common(sub.add_parser("train", help="non-uniform vs uniform-alpha vs uniform-beta runs"))
    t.add_argument("--strict-schedule", action="store_true", help="reject schedules that violate the rate conditions")
    t.add_argument("--check", action="store_true", help="exit 4 if the ordering property fails")
    r = sub.add_parser("ratefit", help="log-log slope of a seed-averaged trace column")
    r.add_argument("traces", nargs="+")
    r.add_argument("--quantity", default="dist2")
    r.add_argument("--tail-fraction", type=float, default=0.5)
    r.add_argument("--band", type=float, nargs=2, metavar=("LO", "HI"))
    r.add_argument("--out")
    lp = common(sub.add_parser("landscape", help="paired joint/stackelberg slices along a trajectory"))
    lp.add_argument("--trajectory", help=".npz trajectory written by train (record_params)")
    lp.add_argument("--checkpoints", help="comma-separated iterations")
    td = common(sub.add_parser("tdc", help="single-loop TDC on a tabular MDP"))
    td.add_argument("--check", action="store_true", help="exit 4 if a frozen-body run misses the fixed point")
    common(sub.add_parser("constants", help="empirical problem constants"))
    return ap


COMMANDS = {"gradcheck": cmd_gradcheck, "train": cmd_train, "ratefit": cmd_ratefit,
            "landscape": cmd_landscape, "tdc": cmd_tdc, "constants": cmd_constants}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, tdc.MDPValidationError, ScheduleError, ActivationError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (NonFiniteError, NonFiniteGradientError, NotSPDError, stk.BestResponseError, stk.ProxError,
            tdc.SingularFeatureError, tdc.NonErgodicError, tdc.TDCDivergenceError, FloatingPointError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
