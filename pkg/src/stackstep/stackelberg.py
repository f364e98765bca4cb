"""Best responses, the reduced objective Phi(M) = f(M, w*(M)), and its Moreau envelope."""
from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.optimize import minimize

from .numcore import solve_spd
from .problems import (
    Box,
    ConstraintSet,
    RegressionDataset,
    StochasticObjective,
    Activation,
)


class BestResponseError(RuntimeError):
    def __init__(self, message, w=None, residual=None):
        super().__init__(message)
        self.w = w
        self.residual = residual


class ProxError(RuntimeError):
    def __init__(self, message, m_last=None, residual=None):
        super().__init__(message)
        self.m_last = m_last
        self.residual = residual


@dataclass
class BestResponse:
    w_star: np.ndarray
    method: str
    inner_iters: int
    residual: float


@dataclass
class MoreauProbe:
    rho_hat: float
    m_hat: np.ndarray
    envelope_value: float
    envelope_grad_norm: float
    phi_value: float
    residual: float
    iters: int
    converged: bool


def _grad_mapping(W: ConstraintSet, w, g, step):
    return np.linalg.norm(w - W.project(w - step * g)) / step


def best_response(obj: StochasticObjective, M, tol: float = 1e-9, w0=None, max_iter: int = 100_000) -> BestResponse:
    """Minimize ``f(M, .)`` over the head set.

    The closed form is used when the objective has one and it lands inside
    the head set; otherwise projected gradient descent with step
    ``1/smoothness`` runs until the gradient-mapping norm drops below ``tol``.
    """
    M = np.asarray(M, dtype=float)
    W = obj.W_set
    cf = obj.closed_form_w(M)
    if cf is not None and W.contains(cf):
        lip = max(obj.w_smoothness(M, cf), 1e-12)
        res = _grad_mapping(W, cf, obj.grad_w(M, cf), 1.0 / lip)
        return BestResponse(cf, "closed_form", 0, float(res))
    if w0 is not None:
        w = W.project(np.asarray(w0, dtype=float))
    elif cf is not None:
        w = W.project(cf)
    else:
        w = W.project(np.zeros(obj.M_shape[1]))
    lip = max(obj.w_smoothness(M, w), 1e-12)
    step = 1.0 / lip
    res = np.inf
    for it in range(1, max_iter + 1):
        g = obj.grad_w(M, w)
        w_new = W.project(w - step * g)
        res = np.linalg.norm(w - w_new) / step
        w = w_new
        if res <= tol:
            return BestResponse(w, "inner_gd", it, float(res))
    raise BestResponseError(f"inner solver did not reach tol={tol:g} in {max_iter} iterations "
                            f"(residual {res:.3e})", w=w, residual=float(res))


class PhiCache:
    """Thread-safe memo of best responses keyed by the bytes of ``M``."""

    def __init__(self):
        self._store: dict[bytes, BestResponse] = {}
        self._lock = threading.Lock()
        self.hits = 0

    def get(self, M) -> Optional[BestResponse]:
        with self._lock:
            br = self._store.get(np.ascontiguousarray(M).tobytes())
            if br is not None:
                self.hits += 1
            return br

    def put(self, M, br: BestResponse):
        with self._lock:
            self._store[np.ascontiguousarray(M).tobytes()] = br

    def __len__(self):
        return len(self._store)


def solve_head(obj, M, tol=1e-9, w0=None, cache: PhiCache | None = None) -> BestResponse:
    if cache is not None:
        br = cache.get(M)
        if br is not None:
            return br
    br = best_response(obj, M, tol=tol, w0=w0)
    if cache is not None:
        cache.put(M, br)
    return br


def phi(obj: StochasticObjective, M, tol: float = 1e-9, w0=None, cache: PhiCache | None = None) -> float:
    """Reduced objective ``f(M, w*(M))``."""
    br = solve_head(obj, M, tol, w0, cache)
    return obj.loss(M, br.w_star)


def phi_woodbury(d: RegressionDataset, act: Activation, M) -> float:
    """Reduced regression objective through the ``N x N`` Woodbury form.

    With the ``lam/2`` head penalty, ``Phi(M) = Y^T (I + (2/lam) A A^T)^{-1} Y``
    where ``A = phi(XM)``. This never touches the ``n x n`` normal equations.
    """
    if not d.lam > 0:
        raise ValueError("Woodbury form needs lam > 0")
    A = act.apply(d.X @ np.asarray(M, dtype=float))
    K = np.eye(d.N) + (2.0 / d.lam) * (A @ A.T)
    return float(d.Y @ solve_spd(K, d.Y))


def phi_subgrad(obj: StochasticObjective, M, tol: float = 1e-9, w0=None, cache: PhiCache | None = None) -> np.ndarray:
    """Element of the subdifferential of Phi: the body subgradient at ``(M, w*(M))``."""
    br = solve_head(obj, M, tol, w0, cache)
    return obj.subgrad_M(M, br.w_star)


def _box_bounds(Mset: ConstraintSet, shape):
    if isinstance(Mset, Box):
        lo = np.broadcast_to(Mset.lo, shape).ravel()
        hi = np.broadcast_to(Mset.hi, shape).ravel()
        return list(zip(lo, hi))
    return None


def _prox_fista(F_and_grad, Mset, X, rho_hat, target, max_iter):
    """Accelerated projected gradient with backtracking and adaptive restart."""
    fX, gX = F_and_grad(X)
    t = 1.0 / rho_hat
    Y, fY, gY = X, fX, gX
    theta = 1.0
    best = (fX, X)
    res = np.inf
    it = 0
    while it < max_iter:
        it += 1
        while True:
            Xn = Mset.project(Y - t * gY)
            fXn, gXn = F_and_grad(Xn)
            d = Xn - Y
            if fXn <= fY + float(np.sum(gY * d)) + float(np.sum(d * d)) / (2 * t) + 1e-15 * abs(fY):
                break
            t *= 0.5
            if t < 1e-18 / rho_hat:
                break
        if t < 1e-18 / rho_hat:
            break
        res = np.linalg.norm(Xn - Mset.project(Xn - t * gXn)) / t
        if fXn < best[0]:
            best = (fXn, Xn)
        if res <= target:
            return Xn, fXn, res, it
        # adaptive restart when the objective goes up
        if fXn > fX:
            theta = 1.0
            Y, fY, gY = X, fX, F_and_grad(X)[1]
            continue
        theta_n = 0.5 * (1 + np.sqrt(1 + 4 * theta * theta))
        Y = Mset.project(Xn + ((theta - 1) / theta_n) * (Xn - X))
        X, fX, theta = Xn, fXn, theta_n
        fY, gY = F_and_grad(Y)
        t *= 1.25
    fX, X = best
    return X, fX, res, it


def moreau_prox(obj: StochasticObjective, M, rho_hat: float, tol: float = 1e-7, max_iter: int = 2000,
                head_tol: float = 1e-10, x0=None, ftol: float = 1e-10) -> MoreauProbe:
    """Proximal point of Phi over the body set and the envelope quantities.

    Solves ``min_{Z in body set} Phi(Z) + rho_hat/2 ||Z - M||^2``. L-BFGS-B
    runs first (box sets become bounds; for other sets the unconstrained
    minimizer is accepted when it is feasible). If that does not certify
    the tolerance, accelerated projected gradient refines the point.
    ``tol`` is relative: the gradient-mapping norm (step ``1/rho_hat``) must
    fall below ``tol * max(1, norm at the start)``.

    Nonsmooth objectives may stall at a kink. For them L-BFGS-B stops once
    the relative decrease per step falls below ``ftol``, no refinement is
    attempted, and an uncertified point comes back with ``converged=False``
    and its residual. Smooth objectives that miss the tolerance raise
    :class:`ProxError` instead.
    """
    if not rho_hat > 0:
        raise ValueError("rho_hat must be positive")
    M = np.asarray(M, dtype=float)
    shape = M.shape
    Mset = obj.M_set
    w_warm = [None]
    n_eval = [0]

    def F_and_grad(Z):
        n_eval[0] += 1
        br = best_response(obj, Z, tol=head_tol, w0=w_warm[0])
        w_warm[0] = br.w_star
        diff = Z - M
        val = obj.loss(Z, br.w_star) + 0.5 * rho_hat * float(np.sum(diff * diff))
        return val, obj.subgrad_M(Z, br.w_star) + rho_hat * diff

    t = 1.0 / rho_hat

    def residual(Z, g):
        return float(np.linalg.norm(Z - Mset.project(Z - t * g)) / t)

    X0 = Mset.project(M)
    f0, g0 = F_and_grad(X0)
    target = tol * max(1.0, residual(X0, g0))
    start = X0 if x0 is None else Mset.project(np.asarray(x0, dtype=float))

    def fun(z):
        v, g = F_and_grad(z.reshape(shape))
        return v, g.ravel()

    opt = minimize(fun, start.ravel(), jac=True, method="L-BFGS-B", bounds=_box_bounds(Mset, shape),
                   options={"maxiter": max_iter, "maxfun": 2 * max_iter, "gtol": 0.0,
                            "ftol": 0.0 if obj.smooth else ftol})
    X = opt.x.reshape(shape)
    if not Mset.contains(X):
        X = Mset.project(X)
    fX, gX = F_and_grad(X)
    res = residual(X, gX)
    iters = int(opt.nit)
    if res > target and obj.smooth:
        Xf, ff, _, it2 = _prox_fista(F_and_grad, Mset, X, rho_hat, target, max_iter)
        iters += it2
        gf = F_and_grad(Xf)[1]
        rf = residual(Xf, gf)
        if ff <= fX:
            X, fX, res = Xf, ff, rf
    converged = res <= target
    if not converged and obj.smooth:
        raise ProxError(f"prox solver stalled after {iters} iterations (residual {res:.3e}, target {target:.3e})",
                        m_last=X, residual=res)
    phi_hat = fX - 0.5 * rho_hat * float(np.sum((X - M) ** 2))
    gnorm = rho_hat * float(np.linalg.norm(M - X))
    return MoreauProbe(rho_hat, X, float(fX), gnorm, float(phi_hat), float(res), iters, bool(converged))


def stationarity(obj: StochasticObjective, M, rho_hat: float, tol: float = 1e-7) -> float:
    """Squared envelope-gradient norm ``rho_hat^2 ||M - M_hat||^2``."""
    return moreau_prox(obj, M, rho_hat, tol).envelope_grad_norm ** 2


def estimate_curvature(obj: StochasticObjective, rng: np.random.Generator, n_segments: int = 64,
                       region: ConstraintSet | None = None, tol: float = 1e-10,
                       half_length: float | None = None) -> tuple[float, float]:
    """Range of midpoint curvature ``8 (avg(Phi(a), Phi(b)) - Phi(mid)) / ||a - b||^2``.

    By default both endpoints are drawn from ``region``. With ``half_length``
    each segment is ``c +/- half_length * u`` for a center ``c`` drawn from
    the region and a random unit direction ``u``, which probes local
    curvature instead of averaging over long chords.

    A negative minimum lower-bounds the weak-convexity constant (as ``-min``);
    a positive minimum estimates strong convexity.
    """
    region = region or obj.M_set
    lo, hi = np.inf, -np.inf
    for _ in range(n_segments):
        if half_length is None:
            a = obj.M_set.project(region.sample(rng, obj.M_shape))
            b = obj.M_set.project(region.sample(rng, obj.M_shape))
        else:
            c = region.sample(rng, obj.M_shape)
            u = rng.standard_normal(obj.M_shape)
            u *= half_length / np.linalg.norm(u)
            a, b = obj.M_set.project(c - u), obj.M_set.project(c + u)
        dist2 = float(np.sum((a - b) ** 2))
        if dist2 == 0:
            continue
        mid = 0.5 * (a + b)
        c2 = 8.0 * (0.5 * (phi(obj, a, tol) + phi(obj, b, tol)) - phi(obj, mid, tol)) / dist2
        lo, hi = min(lo, c2), max(hi, c2)
    return float(lo), float(hi)


def estimate_rho_hat(obj: StochasticObjective, rng: np.random.Generator, region: ConstraintSet | None = None,
                     n_segments: int = 64, factor: float = 2.0, floor: float = 1e-6,
                     half_length: float | None = None) -> float:
    """``factor`` times the worst negative curvature seen (at least ``floor``)."""
    lo, _ = estimate_curvature(obj, rng, n_segments, region, half_length=half_length)
    return factor * max(-lo, floor)
