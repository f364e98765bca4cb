"""Two-time-scale projected SGD, uniform and RMSProp baselines, and run traces."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, asdict, replace
from typing import Optional, Sequence

import numpy as np

from .problems import LayeredParams, ProblemConstants, StochasticObjective
from . import stackelberg as stk


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, k, params: LayeredParams):
        self.k = k
        self.iterate = {"k": int(k), "M": params.M.tolist(), "w": params.w.tolist()}
        super().__init__(f"non-finite stochastic gradient at iteration {k}; iterate: {json.dumps(self.iterate)}")


class ScheduleError(ValueError):
    pass


SCHEDULE_KINDS = ("thm1", "thm2", "constant", "uniform")


@dataclass(frozen=True)
class StepSchedule:
    """Body/head step sizes ``(alpha_k, beta_k)`` and an auxiliary ``zeta_k``.

    ``thm1``: ``alpha0/(k+1)^(3/5)``, ``beta0/(k+1)^(2/5)``.
    ``thm2``: ``alpha0/(k+h+1)``, ``beta0/(k+h+1)^(2/3)``.
    ``constant``: ``alpha0``, ``beta0``. ``uniform``: ``alpha0`` for both.

    ``tie`` copies one sequence onto the other (``"alpha"`` gives both blocks
    the body rate, ``"beta"`` the head rate); it is how the uniform-small and
    uniform-large baselines are derived from a two-rate schedule. ``zeta_k``
    follows the head sequence's decay, scaled by ``zeta0`` (default ``beta0``).
    """

    kind: str = "thm1"
    alpha0: float = 0.01
    beta0: float = 0.05
    h: float = 0.0
    zeta0: Optional[float] = None
    tie: Optional[str] = None

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ScheduleError(f"unknown schedule kind {self.kind!r}")
        if self.tie not in (None, "alpha", "beta"):
            raise ScheduleError("tie must be None, 'alpha' or 'beta'")
        if self.alpha0 < 0 or self.beta0 < 0 or self.h < 0:
            raise ScheduleError("rates and offset must be non-negative")

    def _alpha_shape(self, k):
        if self.kind == "thm1":
            return (k + 1.0) ** -0.6
        if self.kind == "thm2":
            return 1.0 / (k + self.h + 1.0)
        return np.ones_like(np.asarray(k, dtype=float)) if np.ndim(k) else 1.0

    def _beta_shape(self, k):
        if self.kind == "thm1":
            return (k + 1.0) ** -0.4
        if self.kind == "thm2":
            return (k + self.h + 1.0) ** (-2.0 / 3.0)
        return np.ones_like(np.asarray(k, dtype=float)) if np.ndim(k) else 1.0

    def _raw_alpha(self, k):
        return self.alpha0 * self._alpha_shape(k)

    def _raw_beta(self, k):
        if self.kind == "uniform":
            return self._raw_alpha(k)
        return self.beta0 * self._beta_shape(k)

    def alpha(self, k):
        return self._raw_beta(k) if self.tie == "beta" else self._raw_alpha(k)

    def beta(self, k):
        return self._raw_alpha(k) if self.tie == "alpha" else self._raw_beta(k)

    def zeta(self, k):
        z0 = self.beta0 if self.zeta0 is None else self.zeta0
        if self.kind == "uniform":
            return z0 * self._alpha_shape(k)
        return z0 * self._beta_shape(k)

    def rates(self, k) -> tuple[float, float]:
        return float(self.alpha(k)), float(self.beta(k))

    def tied(self, which: str) -> "StepSchedule":
        return replace(self, tie=which)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Condition:
    name: str
    satisfied: Optional[bool]
    margin: Optional[float]
    detail: str = ""


@dataclass
class ScheduleReport:
    kind: str
    conditions: list[Condition]
    suggestions: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(c.satisfied is not False for c in self.conditions)

    def violated(self) -> list[Condition]:
        return [c for c in self.conditions if c.satisfied is False]

    def to_dict(self) -> dict:
        return {"kind": self.kind, "ok": self.ok, "conditions": [asdict(c) for c in self.conditions],
                "suggestions": list(self.suggestions)}


def _cond(name, margin, detail=""):
    if margin is None:
        return Condition(name, None, None, detail or "constant unavailable")
    return Condition(name, bool(margin >= 0), float(margin), detail)


def validate_schedule(sched: StepSchedule, consts: ProblemConstants, iters: int, strict: bool = False) -> ScheduleReport:
    """Check a schedule against the convergence conditions for its kind.

    Report-only: the schedule is never modified. With ``strict=True`` any
    violated condition raises :class:`ScheduleError`.
    """
    ks = np.arange(max(int(iters), 1), dtype=float)
    a, b = sched.alpha(ks), sched.beta(ks)
    conds = [
        _cond("alpha_k <= beta_k", float(np.min(b - a))),
        _cond("beta_k <= 1", float(np.min(1.0 - b))),
    ]
    suggestions = []
    lam, L = consts.lam, consts.L
    bound = min(lam / (2 * L * L), 2.0 / lam) if lam > 0 and L > 0 else None
    if sched.kind == "thm1":
        conds.append(_cond("alpha0 <= beta0", sched.beta0 - sched.alpha0))
        conds.append(_cond("beta0 <= 1", 1.0 - sched.beta0))
        conds.append(_cond("beta0 <= min(lam/(2L^2), 2/lam)", None if bound is None else bound - sched.beta0,
                           f"bound={bound}"))
    elif sched.kind == "thm2":
        conds.append(_cond("beta_k <= min(lam/(2L^2), 2/lam)", None if bound is None else bound - float(np.max(b)),
                           f"bound={bound}"))
        lp = consts.lambda_phi
        if lp is None or not lp > 0:
            conds.append(_cond("alpha0/beta0 <= 2 lam/lambda_phi", None, "lambda_phi unknown"))
            conds.append(_cond("alpha0 >= 8/lambda_phi", None, "lambda_phi unknown"))
        else:
            ratio = sched.alpha0 / sched.beta0 if sched.beta0 > 0 else math.inf
            conds.append(_cond("alpha0/beta0 <= 2 lam/lambda_phi", 2 * lam / lp - ratio))
            need = 8.0 / lp
            conds.append(_cond("alpha0 >= 8/lambda_phi", sched.alpha0 - need, f"required alpha0 >= {need:g}"))
            if sched.alpha0 < need or need / (sched.h + 1) > 1:
                h_min = math.ceil(need - 1)
                suggestions.append(
                    f"alpha0 >= {need:g} forces alpha_0 = alpha0/(h+1) > 1 unless h >= {h_min}; "
                    f"use alpha0={need:g}, h>={h_min}, beta0=(h+1)^(2/3)")
    else:
        conds.append(Condition("decaying schedule", None, None, f"{sched.kind} schedule carries no rate guarantee"))
    report = ScheduleReport(sched.kind, conds, suggestions)
    if strict and not report.ok:
        names = ", ".join(c.name for c in report.violated())
        raise ScheduleError(f"schedule violates: {names}")
    return report


def tune_thm2(lambda_phi: float, alpha0: float | None = None) -> StepSchedule:
    """Smallest-offset strongly-convex schedule with ``alpha_k <= beta_k <= 1``.

    ``alpha0`` defaults to ``8/lambda_phi``; ``h`` is raised until
    ``alpha0/(h+1) <= 1`` and ``beta0 = (h+1)^(2/3)`` pins ``beta_0 = 1``.
    """
    if not lambda_phi > 0:
        raise ScheduleError("lambda_phi must be positive")
    a0 = 8.0 / lambda_phi if alpha0 is None else float(alpha0)
    h = float(max(0, math.ceil(a0 - 1)))
    if a0 / (h + 1) > 1:
        h += 1
    return StepSchedule("thm2", a0, (h + 1.0) ** (2.0 / 3.0), h=h)


# ---------------------------------------------------------------------------
# state and steps

@dataclass
class OptimizerState:
    params: LayeredParams
    k: int
    rng: np.random.Generator
    v_M: Optional[np.ndarray] = None
    v_w: Optional[np.ndarray] = None
    gamma_rms: float = 0.99
    eps_rms: float = 1e-8


def _sample_grads(state: OptimizerState, obj: StochasticObjective, batch_size: int):
    xi = obj.sample(state.rng, batch_size)
    G, g = obj.stoch_grads(state.params.M, state.params.w, xi)
    if not (np.all(np.isfinite(G)) and np.all(np.isfinite(g))):
        raise NonFiniteGradientError(state.k, state.params)
    return G, g


def _sgd_update(state, obj, a, b, batch_size) -> OptimizerState:
    # both blocks use the same sample and the pre-update (M_k, w_k)
    G, g = _sample_grads(state, obj, batch_size)
    M, w = state.params.M, state.params.w
    new = LayeredParams(obj.M_set.project(M - a * G), obj.W_set.project(w - b * g))
    return replace(state, params=new, k=state.k + 1)


def step_two_timescale(state: OptimizerState, obj: StochasticObjective, sched: StepSchedule,
                       batch_size: int) -> OptimizerState:
    a, b = sched.rates(state.k)
    return _sgd_update(state, obj, a, b, batch_size)


def step_uniform(state: OptimizerState, obj: StochasticObjective, lr: float, batch_size: int) -> OptimizerState:
    return _sgd_update(state, obj, lr, lr, batch_size)


def step_rmsprop(state: OptimizerState, obj: StochasticObjective, lr_body: float, lr_head: float,
                 batch_size: int) -> OptimizerState:
    """RMSProp with separate body/head rates; accumulators start at zero."""
    if not 0 <= state.gamma_rms < 1:
        raise ValueError("gamma_rms must lie in [0, 1)")
    G, g = _sample_grads(state, obj, batch_size)
    gam = state.gamma_rms
    vM = np.zeros_like(G) if state.v_M is None else state.v_M
    vw = np.zeros_like(g) if state.v_w is None else state.v_w
    vM = gam * vM + (1 - gam) * G * G
    vw = gam * vw + (1 - gam) * g * g
    M, w = state.params.M, state.params.w
    new = LayeredParams(obj.M_set.project(M - lr_body * G / (np.sqrt(vM) + state.eps_rms)),
                        obj.W_set.project(w - lr_head * g / (np.sqrt(vw) + state.eps_rms)))
    return replace(state, params=new, k=state.k + 1, v_M=vM, v_w=vw)


# ---------------------------------------------------------------------------
# traces

TRACE_COLUMNS = ("k", "loss", "phi", "w_track", "stationarity", "alpha", "beta")


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return "%.17g" % float(v)


@dataclass
class TrainTrace:
    """Periodic evaluation records plus run metadata.

    Quantities that were not requested for a run are stored as NaN.
    """

    columns: tuple
    rows: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def append(self, row: Sequence):
        if len(row) != len(self.columns):
            raise ValueError("row width does not match columns")
        self.rows.append(tuple(row))

    def column(self, name: str) -> np.ndarray:
        i = self.columns.index(name)
        return np.array([r[i] for r in self.rows], dtype=float)

    def __len__(self):
        return len(self.rows)

    def to_csv_text(self) -> str:
        lines = [",".join(self.columns)]
        lines += [",".join(_fmt(v) for v in r) for r in self.rows]
        return "\n".join(lines) + "\n"

    def write(self, csv_path, meta_path=None):
        with open(csv_path, "w", newline="") as fh:
            fh.write(self.to_csv_text())
        if meta_path is not None:
            with open(meta_path, "w") as fh:
                json.dump(self.meta, fh, indent=2, sort_keys=True, default=_json_default)
                fh.write("\n")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(f"not JSON serializable: {type(o)}")


def read_trace_csv(path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [r for r in reader if r]
    cols = {name: np.array([float(r[i]) for r in rows]) for i, name in enumerate(header)}
    return cols


def eval_points(iters: int, eval_period: int) -> list[int]:
    if eval_period < 1:
        raise ValueError("eval_period must be >= 1")
    pts = list(range(0, iters + 1, eval_period))
    if pts[-1] != iters:
        pts.append(iters)
    return pts


@dataclass
class RunResult:
    trace: TrainTrace
    params: LayeredParams
    trajectory: list = field(default_factory=list)


def evaluate(obj: StochasticObjective, params: LayeredParams, *, phi_tol=1e-9, rho_hat=None, prox_tol=1e-7,
             with_phi=True, m_star=None) -> dict:
    M, w = params.M, params.w
    out = {"loss": obj.loss(M, w), "phi": math.nan, "w_track": math.nan, "stationarity": math.nan}
    if with_phi:
        br = stk.best_response(obj, M, tol=phi_tol)
        out["phi"] = obj.loss(M, br.w_star)
        out["w_track"] = float(np.linalg.norm(w - br.w_star))
    if rho_hat is not None:
        out["stationarity"] = stk.stationarity(obj, M, rho_hat, prox_tol)
    if m_star is not None:
        out["dist2"] = float(np.sum((M - m_star) ** 2))
    return out


def run(obj: StochasticObjective, sched: StepSchedule, init: LayeredParams, iters: int, batch_size: int,
        eval_period: int, rng: np.random.Generator, *, method: str = "sgd", gamma_rms: float = 0.99,
        eps_rms: float = 1e-8, with_phi: bool = True, rho_hat: float | None = None,
        stationarity_period: int | None = None, m_star=None, record_params: bool = False,
        meta: dict | None = None) -> RunResult:
    """Run the simultaneous two-block update for ``iters`` steps.

    Full-batch quantities are evaluated every ``eval_period`` steps (and at
    the end). The stationarity surrogate needs ``rho_hat`` and is computed
    every ``stationarity_period`` steps (defaults to every evaluation).
    ``m_star`` adds a ``dist2`` column with ``||M_k - m_star||^2``.
    """
    if iters < 0:
        raise ValueError("iters must be >= 0")
    if method not in ("sgd", "rmsprop"):
        raise ValueError(f"unknown method {method!r}")
    cols = TRACE_COLUMNS + (("dist2",) if m_star is not None else ())
    trace = TrainTrace(cols, meta={
        "schedule": sched.to_dict(), "method": method, "batch_size": batch_size, "eval_period": eval_period,
        "iters": iters, "problem": obj.describe(), "grad_convention": obj.grad_convention,
        "rho_hat": rho_hat, **(meta or {}),
    })
    if method == "rmsprop":
        trace.meta["rmsprop"] = {"gamma": gamma_rms, "eps": eps_rms}
    state = OptimizerState(init.copy(), 0, rng, gamma_rms=gamma_rms, eps_rms=eps_rms)
    pts = set(eval_points(iters, eval_period))
    st_period = stationarity_period or eval_period
    trajectory = []

    def record():
        k = state.k
        want_st = rho_hat is not None and (k % st_period == 0 or k == iters)
        ev = evaluate(obj, state.params, rho_hat=rho_hat if want_st else None, with_phi=with_phi, m_star=m_star)
        a, b = sched.rates(k)
        row = [k, ev["loss"], ev["phi"], ev["w_track"], ev["stationarity"], a, b]
        if m_star is not None:
            row.append(ev["dist2"])
        trace.append(row)
        if record_params:
            trajectory.append((k, state.params.copy()))

    record()
    for _ in range(iters):
        a, b = sched.rates(state.k)
        if method == "sgd":
            state = _sgd_update(state, obj, a, b, batch_size)
        else:
            state = step_rmsprop(state, obj, a, b, batch_size)
        if state.k in pts:
            record()
    return RunResult(trace, state.params, trajectory)
