"""Two-dimensional slices of the joint and reduced objectives around a body iterate.

A slice evaluates ``M_k + eta1 d1 + eta2 d2`` on a uniform grid, either with
the head held at a fixed vector (``joint``) or replaced by its best response
(``stackelberg``). Curvature summaries come from the finite-difference
Hessian of the restricted two-variable function at the grid center.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .numcore import Hessian2D, fd_hessian_2d
from .problems import LayeredParams, StochasticObjective
from . import stackelberg as stk

MODES = ("joint", "stackelberg")


def make_directions(rng: np.random.Generator, shape, normalize: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Two distinct Gaussian directions, Frobenius-normalized by default."""
    while True:
        d1, d2 = rng.standard_normal(shape), rng.standard_normal(shape)
        if normalize:
            d1 /= np.linalg.norm(d1)
            d2 /= np.linalg.norm(d2)
        if not np.allclose(d1, d2):
            return d1, d2


@dataclass
class SliceSpec:
    center: np.ndarray
    d1: np.ndarray
    d2: np.ndarray
    eta_max: float = 1.0
    resolution: int = 41
    mode: str = "joint"
    w_fixed: Optional[np.ndarray] = None
    h: Optional[float] = None       # stencil step; defaults to the grid spacing

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float)
        self.d1 = np.asarray(self.d1, dtype=float)
        self.d2 = np.asarray(self.d2, dtype=float)
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.d1.shape != self.center.shape or self.d2.shape != self.center.shape:
            raise ValueError("directions must match the center's shape")
        if np.allclose(self.d1, self.d2):
            raise ValueError("slice directions must be distinct")
        if self.resolution < 3:
            raise ValueError("grid resolution must be at least 3")
        if not self.eta_max > 0:
            raise ValueError("eta_max must be positive")
        if self.mode == "joint" and self.w_fixed is None:
            raise ValueError("joint mode needs w_fixed")

    @property
    def etas(self) -> np.ndarray:
        return np.linspace(-self.eta_max, self.eta_max, self.resolution)

    @property
    def spacing(self) -> float:
        return 2.0 * self.eta_max / (self.resolution - 1)

    def point(self, e1: float, e2: float) -> np.ndarray:
        return self.center + e1 * self.d1 + e2 * self.d2


@dataclass
class SliceResult:
    mode: str
    etas: np.ndarray
    values: np.ndarray          # values[i, j] at (etas[i], etas[j])
    feasible: np.ndarray
    hessian: Hessian2D
    grad2d: np.ndarray
    inner_tol: Optional[float]
    invalid_points: int
    warnings: list = field(default_factory=list)

    @property
    def lambda_max(self) -> float:
        return self.hessian.lambda_max

    @property
    def trace(self) -> float:
        return self.hessian.trace

    @property
    def grad_norm(self) -> float:
        return float(np.linalg.norm(self.grad2d))

    def to_csv_text(self) -> str:
        lines = ["eta1,eta2,value,feasible"]
        for i, e1 in enumerate(self.etas):
            for j, e2 in enumerate(self.etas):
                lines.append("%.17g,%.17g,%.17g,%d" % (e1, e2, self.values[i, j], int(self.feasible[i, j])))
        return "\n".join(lines) + "\n"

    def summary(self, k: int | None = None) -> dict:
        return {"k": k, "mode": self.mode, "lambda_max": self.lambda_max, "trace": self.trace,
                "grad_norm": self.grad_norm, "invalid_points": self.invalid_points}


class _SliceFunction:
    """The restricted objective ``(eta1, eta2) -> value`` with feasibility bookkeeping."""

    def __init__(self, spec: SliceSpec, obj: StochasticObjective, tol: float, cache: stk.PhiCache | None):
        self.spec, self.obj, self.tol = spec, obj, tol
        self.cache = cache if cache is not None else stk.PhiCache()
        self.w_warm = None
        self.invalid = 0

    def evaluate(self, e1: float, e2: float) -> tuple[float, bool]:
        raw = self.spec.point(e1, e2)
        feasible = self.obj.M_set.contains(raw)
        M = raw if feasible else self.obj.M_set.project(raw)
        if self.spec.mode == "joint":
            return self.obj.loss(M, self.spec.w_fixed), feasible
        try:
            br = stk.solve_head(self.obj, M, self.tol, self.w_warm, self.cache)
        except stk.BestResponseError:
            self.invalid += 1
            return float("nan"), feasible
        self.w_warm = br.w_star
        return self.obj.loss(M, br.w_star), feasible

    def __call__(self, e1: float, e2: float) -> float:
        return self.evaluate(e1, e2)[0]


def sweep(spec: SliceSpec, obj: StochasticObjective, tol: float = 1e-9,
          cache: stk.PhiCache | None = None) -> SliceResult:
    """Fill the slice grid and compute the center Hessian and gradient.

    Points outside the body set are projected before evaluation and flagged
    infeasible. In stackelberg mode a failed best response marks the point
    invalid (NaN) and the sweep continues. Warm starts run along each row.
    """
    fn = _SliceFunction(spec, obj, tol, cache)
    etas = spec.etas
    n = len(etas)
    values = np.empty((n, n))
    feasible = np.empty((n, n), dtype=bool)
    for i, e1 in enumerate(etas):
        fn.w_warm = None
        for j, e2 in enumerate(etas):
            values[i, j], feasible[i, j] = fn.evaluate(e1, e2)
    h = spec.h or spec.spacing
    fn.w_warm = None
    warnings = []
    hess = fd_hessian_2d(fn, h=h)
    if not np.all(np.isfinite(hess.matrix)):
        warnings.append("slice Hessian stencil touched an invalid point")
    warnings += hess.warnings
    g = np.array([(fn(h, 0.0) - fn(-h, 0.0)) / (2 * h), (fn(0.0, h) - fn(0.0, -h)) / (2 * h)])
    return SliceResult(spec.mode, etas, values, feasible, hess, g,
                       tol if spec.mode == "stackelberg" else None, fn.invalid, warnings)


def slice_curvature(spec: SliceSpec, obj: StochasticObjective, tol: float = 1e-9) -> SliceResult:
    """Center Hessian and gradient only, on a 3x3 grid (no full surface)."""
    h = spec.h or spec.spacing
    small = SliceSpec(spec.center, spec.d1, spec.d2, eta_max=h, resolution=3, mode=spec.mode,
                      w_fixed=spec.w_fixed, h=h)
    return sweep(small, obj, tol)


@dataclass
class CheckpointSlices:
    k: int
    joint: SliceResult
    stackelberg: SliceResult

    def summaries(self) -> list[dict]:
        return [self.joint.summary(self.k), self.stackelberg.summary(self.k)]


def trajectory_study(obj: StochasticObjective, trajectory: Sequence[tuple[int, LayeredParams]],
                     checkpoints: Sequence[int], rng: np.random.Generator | None = None,
                     directions: tuple[np.ndarray, np.ndarray] | None = None, eta_max: float = 1.0,
                     resolution: int = 41, h: float | None = None, tol: float = 1e-9,
                     full_grid: bool = True) -> list[CheckpointSlices]:
    """Paired joint / stackelberg slices at each checkpoint with shared directions.

    ``trajectory`` holds ``(k, params)`` pairs. One direction pair is used for
    every checkpoint and both modes. ``full_grid=False`` only evaluates the
    stencil needed for the curvature summaries.
    """
    if not checkpoints:
        return []
    by_k = {int(k): p for k, p in trajectory}
    missing = [k for k in checkpoints if int(k) not in by_k]
    if missing:
        raise ValueError(f"checkpoints {missing} are not in the trajectory")
    if directions is None:
        if rng is None:
            raise ValueError("need rng or directions")
        directions = make_directions(rng, obj.M_shape)
    d1, d2 = directions
    run = sweep if full_grid else slice_curvature
    out = []
    for k in checkpoints:
        p = by_k[int(k)]
        common = dict(center=p.M, d1=d1, d2=d2, eta_max=eta_max, resolution=resolution, h=h)
        joint = run(SliceSpec(mode="joint", w_fixed=p.w, **common), obj, tol)
        stack = run(SliceSpec(mode="stackelberg", **common), obj, tol)
        out.append(CheckpointSlices(int(k), joint, stack))
    return out


def write_study(results: Sequence[CheckpointSlices], out_dir) -> list[str]:
    """Surface CSVs (one per checkpoint and mode) plus ``summary.json``."""
    from pathlib import Path

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    summary = []
    for r in results:
        for res in (r.joint, r.stackelberg):
            path = out / f"surface_k{r.k}_{res.mode}.csv"
            path.write_text(res.to_csv_text())
            written.append(str(path))
        summary.append({"k": r.k, "joint": r.joint.summary(r.k), "stackelberg": r.stackelberg.summary(r.k),
                        "lambda_max_pair": [r.joint.lambda_max, r.stackelberg.lambda_max]})
    path = out / "summary.json"
    path.write_text(json.dumps(summary, indent=2) + "\n")
    written.append(str(path))
    return written


def hutchinson_trace(obj: StochasticObjective, M, rng: np.random.Generator, w=None, n_probes: int = 32,
                     h: float = 1e-4, tol: float = 1e-10) -> float:
    """Full-Hessian trace of ``f(., w)`` (or of Phi when ``w`` is None) by Rademacher probes.

    Hessian-vector products are central differences of the analytic body
    gradient, so this is meaningful only for smooth activations.
    """
    if not obj.smooth:
        raise ValueError("Hutchinson trace needs a smooth activation")
    M = np.asarray(M, dtype=float)

    def grad(Z):
        if w is None:
            return stk.phi_subgrad(obj, Z, tol)
        return obj.subgrad_M(Z, w)

    acc = 0.0
    for _ in range(n_probes):
        z = rng.choice([-1.0, 1.0], size=M.shape)
        hv = (grad(M + h * z) - grad(M - h * z)) / (2 * h)
        acc += float(np.sum(z * hv))
    return acc / n_probes
