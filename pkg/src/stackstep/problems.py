"""Objective instances for body/head networks.

Every instance exposes the same surface (:class:`StochasticObjective`): the
full objective ``f(M, w)``, its head gradient, a body (sub)gradient, a
minibatch sampler with matching stochastic estimators, and the constraint
sets for ``M`` and ``w``.

Two gradient conventions coexist. Regression follows the sum form
``||phi(XM) w - Y||^2 + lam/2 ||w||^2`` and scales minibatch gradients by
``N/|B|``, so a stochastic gradient estimates the gradient of the *sum*.
Classification uses the per-sample mean with ``1/|B|`` scaling. Each
objective carries the convention in ``grad_convention`` so traces can record it.
"""
from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Any, Optional

import numpy as np

from .numcore import DimensionError, NotSPDError, make_rng, solve_spd


class SingularGramError(np.linalg.LinAlgError):
    """The head problem f(M, .) is not strongly convex at this M."""


class ActivationError(ValueError):
    pass


# ---------------------------------------------------------------------------
# activations

_KINDS = ("identity", "relu", "leaky_relu", "tanh", "sigmoid")


@dataclass(frozen=True)
class Activation:
    """Elementwise activation with a fixed Clarke-subgradient selection.

    At the relu/leaky-relu kink the selection is the left derivative
    (0 for relu, ``slope`` for leaky relu).
    """

    kind: str = "relu"
    slope: float = 0.01

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ActivationError(f"unknown activation {self.kind!r}; choose from {_KINDS}")

    def apply(self, a):
        a = np.asarray(a, dtype=float)
        if self.kind == "identity":
            return a.copy()
        if self.kind == "relu":
            return np.maximum(a, 0.0)
        if self.kind == "leaky_relu":
            return np.where(a > 0, a, self.slope * a)
        if self.kind == "tanh":
            return np.tanh(a)
        return _sigmoid(a)

    def subgrad(self, a):
        a = np.asarray(a, dtype=float)
        if self.kind == "identity":
            return np.ones_like(a)
        if self.kind == "relu":
            return (a > 0).astype(float)
        if self.kind == "leaky_relu":
            return np.where(a > 0, 1.0, self.slope)
        if self.kind == "tanh":
            return 1.0 - np.tanh(a) ** 2
        s = _sigmoid(a)
        return s * (1.0 - s)

    @property
    def lipschitz(self) -> float:
        if self.kind == "sigmoid":
            return 0.25
        if self.kind == "leaky_relu":
            return max(1.0, abs(self.slope))
        return 1.0

    @property
    def smooth(self) -> bool:
        """Differentiable with Lipschitz derivative."""
        return self.kind in ("identity", "tanh", "sigmoid")

    @property
    def square_smooth(self) -> bool:
        # a -> phi(a)^2 has a Lipschitz derivative for every kind offered here:
        # for (leaky) relu it is 2a on one side and 2 slope^2 a on the other.
        return True

    def __str__(self):
        return f"leaky_relu({self.slope})" if self.kind == "leaky_relu" else self.kind


def get_activation(spec) -> Activation:
    if isinstance(spec, Activation):
        return spec
    if isinstance(spec, dict):
        return Activation(**spec)
    if isinstance(spec, str) and spec.startswith("leaky_relu"):
        inner = spec[len("leaky_relu"):].strip("()")
        return Activation("leaky_relu", float(inner) if inner else 0.01)
    return Activation(str(spec))


def _sigmoid(t):
    t = np.asarray(t, dtype=float)
    out = np.empty_like(t)
    pos = t >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-t[pos]))
    e = np.exp(t[~pos])
    out[~pos] = e / (1.0 + e)
    return out


sigmoid = _sigmoid


# ---------------------------------------------------------------------------
# constraint sets

class ConstraintSet:
    kind = "abstract"

    def project(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def contains(self, x: np.ndarray, tol: float = 1e-12) -> bool:
        raise NotImplementedError

    def sample(self, rng: np.random.Generator, shape) -> np.ndarray:
        raise NotImplementedError

    @property
    def bounded(self) -> bool:
        return True

    def to_dict(self) -> dict:
        raise NotImplementedError


class Box(ConstraintSet):
    """Entrywise interval ``lo <= x <= hi`` (scalars or arrays)."""

    kind = "box"

    def __init__(self, lo, hi):
        self.lo = np.asarray(lo, dtype=float)
        self.hi = np.asarray(hi, dtype=float)
        if np.any(self.lo > self.hi):
            raise ValueError("box has lo > hi")

    def project(self, x):
        return np.clip(x, self.lo, self.hi)

    def contains(self, x, tol=1e-12):
        return bool(np.all(x >= self.lo - tol) and np.all(x <= self.hi + tol))

    def sample(self, rng, shape):
        return self.lo + (self.hi - self.lo) * rng.random(shape)

    @property
    def bounded(self):
        return bool(np.all(np.isfinite(self.lo)) and np.all(np.isfinite(self.hi)))

    def to_dict(self):
        return {"kind": "box", "lo": self.lo.tolist(), "hi": self.hi.tolist()}

    def __repr__(self):
        return f"Box({self.lo.tolist()}, {self.hi.tolist()})"


class FrobeniusBall(ConstraintSet):
    """``{x : ||x - center||_F <= radius}``."""

    kind = "frobenius_ball"

    def __init__(self, radius: float, center=None):
        if not radius > 0:
            raise ValueError("radius must be positive")
        self.radius = float(radius)
        self.center = None if center is None else np.asarray(center, dtype=float)

    def _offset(self, x):
        return x if self.center is None else x - self.center

    def project(self, x):
        d = self._offset(x)
        nrm = np.linalg.norm(d)
        if nrm <= self.radius:
            return np.array(x, dtype=float)
        d = d * (self.radius / nrm)
        return d if self.center is None else self.center + d

    def contains(self, x, tol=1e-12):
        return bool(np.linalg.norm(self._offset(x)) <= self.radius * (1 + tol) + tol)

    def sample(self, rng, shape):
        g = rng.standard_normal(shape)
        dim = g.size
        r = self.radius * rng.random() ** (1.0 / dim)
        d = g * (r / np.linalg.norm(g))
        return d if self.center is None else self.center + d

    @property
    def bounded(self):
        return np.isfinite(self.radius)

    def to_dict(self):
        out: dict[str, Any] = {"kind": "frobenius_ball", "radius": self.radius}
        if self.center is not None:
            out["center"] = self.center.tolist()
        return out

    def __repr__(self):
        return f"FrobeniusBall({self.radius})"


def default_ball(init, factor: float = 10.0, floor: float = 1.0) -> FrobeniusBall:
    """Large ball standing in for an unconstrained parameter.

    Radius is ``factor * max(||init||, floor)``; the floor keeps a zero
    initialization from collapsing the set to a point.
    """
    return FrobeniusBall(factor * max(float(np.linalg.norm(init)), floor))


def constraint_from_dict(spec: dict | None, init=None) -> ConstraintSet:
    if spec is None:
        if init is None:
            raise ValueError("default constraint needs an initial point")
        return default_ball(init)
    kind = spec.get("kind")
    if kind == "box":
        return Box(spec["lo"], spec["hi"])
    if kind == "frobenius_ball":
        return FrobeniusBall(spec["radius"], spec.get("center"))
    if kind == "default_ball":
        return default_ball(init, spec.get("factor", 10.0), spec.get("floor", 1.0))
    raise ValueError(f"unknown constraint kind {kind!r}")


# ---------------------------------------------------------------------------
# parameters and data

@dataclass
class LayeredParams:
    """Body matrix ``M`` (m x n) and head vector ``w`` (n)."""

    M: np.ndarray
    w: np.ndarray

    def __post_init__(self):
        self.M = np.asarray(self.M, dtype=float)
        self.w = np.asarray(self.w, dtype=float)
        if self.M.ndim != 2 or self.w.ndim != 1 or self.M.shape[1] != self.w.shape[0]:
            raise DimensionError(f"incompatible body {self.M.shape} and head {self.w.shape}")

    def copy(self) -> "LayeredParams":
        return LayeredParams(self.M.copy(), self.w.copy())


@dataclass
class RegressionDataset:
    X: np.ndarray
    Y: np.ndarray
    lam: float = 0.0

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        self.Y = np.asarray(self.Y, dtype=float).reshape(-1)
        if self.X.shape[0] != self.Y.shape[0]:
            raise DimensionError(f"X has {self.X.shape[0]} rows, Y has {self.Y.shape[0]}")
        if self.X.shape[0] < 1:
            raise ValueError("dataset is empty")
        if self.lam < 0:
            raise ValueError("regularization weight must be >= 0")
        if not (np.all(np.isfinite(self.X)) and np.all(np.isfinite(self.Y))):
            raise ValueError("dataset has non-finite entries")

    @property
    def N(self) -> int:
        return self.X.shape[0]


@dataclass
class ClassificationDataset:
    X: np.ndarray
    Y: np.ndarray
    lam: float = 0.1

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        self.Y = np.asarray(self.Y, dtype=float).reshape(-1)
        if self.X.shape[0] != self.Y.shape[0]:
            raise DimensionError(f"X has {self.X.shape[0]} rows, Y has {self.Y.shape[0]}")
        bad = np.flatnonzero((self.Y != 0) & (self.Y != 1))
        if bad.size:
            raise ValueError(f"labels must be 0/1; row {int(bad[0])} has {self.Y[bad[0]]}")
        if not self.lam > 0:
            raise ValueError("classification needs lam > 0 for strong convexity in w")

    @property
    def N(self) -> int:
        return self.X.shape[0]


@dataclass
class ProblemConstants:
    lam: float
    L: float
    sigma2: float
    rho: Optional[float] = None
    rho_hat: Optional[float] = None
    lambda_phi: Optional[float] = None
    empirical: bool = False
    n_samples: int = 0
    notes: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.rho is not None and self.rho_hat is not None and not self.rho_hat > self.rho:
            raise ValueError(f"rho_hat={self.rho_hat} must exceed rho={self.rho}")

    @property
    def L_phi(self) -> float:
        return self.L * (self.lam + 1.0) / self.lam

    def to_dict(self) -> dict:
        out = asdict(self)
        out["L_phi"] = self.L_phi
        return out


def sample_batch(rng: np.random.Generator, N: int, size: int) -> np.ndarray:
    """Distinct indices drawn uniformly without replacement, sorted."""
    if size < 1:
        raise ValueError("batch must be nonempty")
    if size > N:
        raise ValueError(f"batch size {size} exceeds dataset size {N}")
    if size == N:
        return np.arange(N)
    return np.sort(rng.choice(N, size=size, replace=False))


def _check_dims(X, p: LayeredParams):
    if X.shape[1] != p.M.shape[0]:
        raise DimensionError(f"features have {X.shape[1]} columns, body expects {p.M.shape[0]}")


# ---------------------------------------------------------------------------
# regression (sum form)

def reg_loss(d: RegressionDataset, act: Activation, p: LayeredParams) -> float:
    _check_dims(d.X, p)
    r = act.apply(d.X @ p.M) @ p.w - d.Y
    return float(r @ r + 0.5 * d.lam * (p.w @ p.w))


def reg_grad_w(d: RegressionDataset, act: Activation, p: LayeredParams) -> np.ndarray:
    _check_dims(d.X, p)
    A = act.apply(d.X @ p.M)
    return 2.0 * A.T @ (A @ p.w - d.Y) + d.lam * p.w


def reg_subgrad_M(d: RegressionDataset, act: Activation, p: LayeredParams) -> np.ndarray:
    _check_dims(d.X, p)
    Z = d.X @ p.M
    r = act.apply(Z) @ p.w - d.Y
    return 2.0 * d.X.T @ (np.outer(r, p.w) * act.subgrad(Z))


def reg_stoch_grads(d: RegressionDataset, act: Activation, p: LayeredParams, batch) -> tuple[np.ndarray, np.ndarray]:
    """Minibatch estimates ``(G_M, grad_w)`` scaled by ``N/|B|``.

    The deterministic regularizer gradient ``lam * w`` is added in full, so
    the full batch reproduces :func:`reg_grad_w` exactly.
    """
    idx = np.asarray(batch, dtype=int)
    if idx.size == 0:
        raise ValueError("empty minibatch")
    _check_dims(d.X, p)
    Xb, Yb = d.X[idx], d.Y[idx]
    Z = Xb @ p.M
    A = act.apply(Z)
    r = A @ p.w - Yb
    scale = 2.0 * d.N / idx.size
    G = scale * Xb.T @ (np.outer(r, p.w) * act.subgrad(Z))
    g = scale * A.T @ r + d.lam * p.w
    return G, g


# ---------------------------------------------------------------------------
# classification (mean form)

def _require_smooth(act: Activation):
    if not act.smooth:
        raise ActivationError(
            f"classification requires a differentiable activation with Lipschitz derivative; got {act}"
        )


def clf_loss(d: ClassificationDataset, act: Activation, p: LayeredParams) -> float:
    _require_smooth(act)
    _check_dims(d.X, p)
    t = act.apply(d.X @ p.M) @ p.w
    return float(np.mean(np.logaddexp(0.0, t) - d.Y * t) + 0.5 * d.lam * (p.w @ p.w))


def clf_grad_w(d: ClassificationDataset, act: Activation, p: LayeredParams) -> np.ndarray:
    _require_smooth(act)
    _check_dims(d.X, p)
    A = act.apply(d.X @ p.M)
    return A.T @ (_sigmoid(A @ p.w) - d.Y) / d.N + d.lam * p.w


def clf_grad_M(d: ClassificationDataset, act: Activation, p: LayeredParams) -> np.ndarray:
    _require_smooth(act)
    _check_dims(d.X, p)
    Z = d.X @ p.M
    e = _sigmoid(act.apply(Z) @ p.w) - d.Y
    return d.X.T @ (np.outer(e, p.w) * act.subgrad(Z)) / d.N


def clf_stoch_grads(d: ClassificationDataset, act: Activation, p: LayeredParams, batch):
    idx = np.asarray(batch, dtype=int)
    if idx.size == 0:
        raise ValueError("empty minibatch")
    _require_smooth(act)
    Xb, Yb = d.X[idx], d.Y[idx]
    Z = Xb @ p.M
    A = act.apply(Z)
    e = _sigmoid(A @ p.w) - Yb
    G = Xb.T @ (np.outer(e, p.w) * act.subgrad(Z)) / idx.size
    g = A.T @ e / idx.size + d.lam * p.w
    return G, g


# ---------------------------------------------------------------------------
# scalar convexification instance: f(M, w) = (M w - 1)^2 + 0.1 M^2 on [0.01, 10]^2

TOY_LO, TOY_HI = 0.01, 10.0


def _toy_check(name, v):
    if not (TOY_LO <= v <= TOY_HI):
        raise ValueError(f"{name}={v} outside [{TOY_LO}, {TOY_HI}]")


def toy_f(M: float, w: float) -> float:
    M, w = float(M), float(w)
    _toy_check("M", M)
    _toy_check("w", w)
    return (M * w - 1.0) ** 2 + 0.1 * M * M


def toy_grad(M: float, w: float) -> tuple[float, float]:
    r = M * w - 1.0
    return 2.0 * r * w + 0.2 * M, 2.0 * r * M


def toy_hessian(M: float, w: float) -> np.ndarray:
    return np.array([[2 * w * w + 0.2, 4 * M * w - 2], [4 * M * w - 2, 2 * M * M]])


def toy_best_w(M: float) -> float:
    return min(TOY_HI, 1.0 / float(M))


def toy_phi(M: float) -> float:
    M = float(M)
    _toy_check("M", M)
    return (M * toy_best_w(M) - 1.0) ** 2 + 0.1 * M * M


# ---------------------------------------------------------------------------
# objective interface

class StochasticObjective:
    """Base interface consumed by the solvers, optimizer and landscape code.

    Subclasses provide ``loss``, ``grad_w``, ``subgrad_M``, ``sample`` and
    ``stoch_grads``; ``closed_form_w`` may return ``None`` when no closed
    form best response exists.
    """

    name = "objective"
    grad_convention = "mean"
    smooth = True
    explicit_lambda = 0.0
    n_data: Optional[int] = None
    M_set: ConstraintSet
    W_set: ConstraintSet
    M_shape: tuple[int, int]

    def loss(self, M, w) -> float:
        raise NotImplementedError

    def grad_w(self, M, w) -> np.ndarray:
        raise NotImplementedError

    def subgrad_M(self, M, w) -> np.ndarray:
        raise NotImplementedError

    def sample(self, rng: np.random.Generator, batch_size: int):
        raise NotImplementedError

    def stoch_grads(self, M, w, sample) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def closed_form_w(self, M) -> Optional[np.ndarray]:
        return None

    def w_hessian(self, M, w) -> np.ndarray:
        n = self.M_shape[1]
        H = np.empty((n, n))
        h = 1e-6
        for i in range(n):
            e = np.zeros(n)
            e[i] = h
            H[:, i] = (self.grad_w(M, w + e) - self.grad_w(M, w - e)) / (2 * h)
        return 0.5 * (H + H.T)

    def w_smoothness(self, M, w=None) -> float:
        if w is None:
            w = np.zeros(self.M_shape[1])
        return float(np.linalg.eigvalsh(self.w_hessian(M, w))[-1])

    def describe(self) -> dict:
        return {"name": self.name, "grad_convention": self.grad_convention}


class RegressionObjective(StochasticObjective):
    name = "regression"
    grad_convention = "sum"

    def __init__(self, data: RegressionDataset, act: Activation, M_set: ConstraintSet, W_set: ConstraintSet, n: int):
        self.data, self.act = data, act
        self.M_set, self.W_set = M_set, W_set
        self.n_data = data.N
        self.explicit_lambda = data.lam
        self.smooth = act.smooth
        self.M_shape = (data.X.shape[1], int(n))

    def _p(self, M, w):
        return LayeredParams(M, w)

    def features(self, M) -> np.ndarray:
        return self.act.apply(self.data.X @ M)

    def loss(self, M, w):
        return reg_loss(self.data, self.act, self._p(M, w))

    def grad_w(self, M, w):
        return reg_grad_w(self.data, self.act, self._p(M, w))

    def subgrad_M(self, M, w):
        return reg_subgrad_M(self.data, self.act, self._p(M, w))

    def sample(self, rng, batch_size):
        return sample_batch(rng, self.data.N, batch_size)

    def stoch_grads(self, M, w, sample):
        return reg_stoch_grads(self.data, self.act, self._p(M, w), sample)

    def w_hessian(self, M, w=None):
        A = self.features(M)
        return 2.0 * A.T @ A + self.data.lam * np.eye(A.shape[1])

    def closed_form_w(self, M):
        # stationarity of ||A w - Y||^2 + lam/2 ||w||^2: (A^T A + lam/2 I) w = A^T Y
        A = self.features(M)
        G = A.T @ A + 0.5 * self.data.lam * np.eye(A.shape[1])
        try:
            return solve_spd(G, A.T @ self.data.Y)
        except NotSPDError as exc:
            raise SingularGramError(
                "head problem is not strongly convex at this M: the feature Gram matrix is "
                f"singular (pivot {exc.pivot}) and lam = {self.data.lam}; use lam > 0 or full-rank features"
            ) from exc

    def describe(self):
        return {**super().describe(), "activation": str(self.act), "lam": self.data.lam,
                "N": self.data.N, "m": self.data.X.shape[1]}


class ClassificationObjective(StochasticObjective):
    name = "classification"
    grad_convention = "mean"

    def __init__(self, data: ClassificationDataset, act: Activation, M_set: ConstraintSet, W_set: ConstraintSet, n: int):
        _require_smooth(act)
        self.data, self.act = data, act
        self.M_set, self.W_set = M_set, W_set
        self.n_data = data.N
        self.explicit_lambda = data.lam
        self.M_shape = (data.X.shape[1], int(n))

    def features(self, M):
        return self.act.apply(self.data.X @ M)

    def loss(self, M, w):
        return clf_loss(self.data, self.act, LayeredParams(M, w))

    def grad_w(self, M, w):
        return clf_grad_w(self.data, self.act, LayeredParams(M, w))

    def subgrad_M(self, M, w):
        return clf_grad_M(self.data, self.act, LayeredParams(M, w))

    def sample(self, rng, batch_size):
        return sample_batch(rng, self.data.N, batch_size)

    def stoch_grads(self, M, w, sample):
        return clf_stoch_grads(self.data, self.act, LayeredParams(M, w), sample)

    def w_hessian(self, M, w):
        A = self.features(M)
        s = _sigmoid(A @ w)
        return (A.T * (s * (1 - s))) @ A / self.data.N + self.data.lam * np.eye(A.shape[1])

    def w_smoothness(self, M, w=None):
        A = self.features(M)
        return float(np.linalg.norm(A, 2) ** 2 / (4 * self.data.N) + self.data.lam)

    def describe(self):
        return {**super().describe(), "activation": str(self.act), "lam": self.data.lam, "N": self.data.N}


class ToyObjective(StochasticObjective):
    """``(M w - 1)^2 + 0.1 M^2`` on ``[0.01, 10]^2`` with a Gaussian gradient oracle.

    The instance has a single data point, so stochasticity comes from additive
    noise of standard deviation ``noise_std`` on each gradient block.
    """

    name = "toy"
    grad_convention = "exact+gaussian"
    M_shape = (1, 1)

    def __init__(self, noise_std: float = 0.1):
        self.noise_std = float(noise_std)
        self.M_set = Box(TOY_LO, TOY_HI)
        self.W_set = Box(TOY_LO, TOY_HI)

    def loss(self, M, w):
        return toy_f(np.asarray(M).item(), np.asarray(w).item())

    def grad_w(self, M, w):
        return np.array([toy_grad(np.asarray(M).item(), np.asarray(w).item())[1]])

    def subgrad_M(self, M, w):
        return np.array([[toy_grad(np.asarray(M).item(), np.asarray(w).item())[0]]])

    def sample(self, rng, batch_size=1):
        return self.noise_std * rng.standard_normal(2) / np.sqrt(batch_size)

    def stoch_grads(self, M, w, sample):
        gM, gw = toy_grad(np.asarray(M).item(), np.asarray(w).item())
        return np.array([[gM + sample[0]]]), np.array([gw + sample[1]])

    def closed_form_w(self, M):
        return np.array([toy_best_w(np.asarray(M).item())])

    def w_hessian(self, M, w=None):
        return np.array([[2.0 * np.asarray(M).item() ** 2]])

    def describe(self):
        return {**super().describe(), "noise_std": self.noise_std}


class QuadraticHeadObjective(StochasticObjective):
    """``||w - c||^2 / 2``, independent of ``M``; deterministic gradients."""

    name = "quadratic_head"

    def __init__(self, c, W_set: ConstraintSet, m: int = 1, M_set: ConstraintSet | None = None):
        self.c = np.asarray(c, dtype=float)
        self.W_set = W_set
        self.M_set = M_set or FrobeniusBall(1.0)
        self.M_shape = (m, self.c.size)
        self.explicit_lambda = 1.0

    def loss(self, M, w):
        d = np.asarray(w) - self.c
        return 0.5 * float(d @ d)

    def grad_w(self, M, w):
        return np.asarray(w, dtype=float) - self.c

    def subgrad_M(self, M, w):
        return np.zeros(self.M_shape)

    def sample(self, rng, batch_size=1):
        return None

    def stoch_grads(self, M, w, sample):
        return self.subgrad_M(M, w), self.grad_w(M, w)

    def closed_form_w(self, M):
        return self.c.copy()

    def w_hessian(self, M, w=None):
        return np.eye(self.c.size)


# ---------------------------------------------------------------------------
# synthetic instances

def make_synthetic_regression(seed: int, N: int = 128, m: int = 20, n: int = 10, lam: float = 0.1,
                              noise_std: float = 1.0, act="relu"):
    """Teacher network data: ``y_i = phi(x_i^T M*) w* + eps_i``, all standard normal.

    Returns ``(dataset, M_true, w_true)``.
    """
    act = get_activation(act)
    rng = make_rng(seed, 101)
    X = rng.standard_normal((N, m))
    M_true = rng.standard_normal((m, n))
    w_true = rng.standard_normal(n)
    Y = act.apply(X @ M_true) @ w_true + noise_std * rng.standard_normal(N)
    return RegressionDataset(X, Y, lam), M_true, w_true


def regression_objective(data: RegressionDataset, act, init: LayeredParams, M_set: ConstraintSet | None = None,
                         W_set: ConstraintSet | None = None, factor: float = 10.0) -> "RegressionObjective":
    """Regression objective with default large balls around the problem scale.

    The body ball has radius ``factor * max(||M0||, 1)``. The head ball also
    covers ``factor`` times the unconstrained ridge head at ``M0``, so that
    the constraint stays inactive for the best response along training.
    """
    act = get_activation(act)
    M_set = M_set or default_ball(init.M, factor)
    if W_set is None:
        probe = RegressionObjective(data, act, M_set, FrobeniusBall(np.inf), init.M.shape[1])
        ref = probe.closed_form_w(init.M)
        W_set = FrobeniusBall(factor * max(float(np.linalg.norm(init.w)), float(np.linalg.norm(ref)), 1.0))
    return RegressionObjective(data, act, M_set, W_set, init.M.shape[1])


def make_synthetic_classification(seed: int, N: int = 64, m: int = 5, n: int = 4, lam: float = 0.1, act="tanh"):
    act = get_activation(act)
    rng = make_rng(seed, 102)
    X = rng.standard_normal((N, m))
    M_true = rng.standard_normal((m, n))
    w_true = 2.0 * rng.standard_normal(n)
    prob = _sigmoid(act.apply(X @ M_true) @ w_true)
    Y = (rng.random(N) < prob).astype(float)
    return ClassificationDataset(X, Y, lam), M_true, w_true


def init_params(M_shape, rng: np.random.Generator, M_scale: float | None = None, w_scale: float = 0.01) -> LayeredParams:
    """Gaussian init with ``M`` entries of std ``1/sqrt(m)`` (default) and a small head."""
    m, n = M_shape
    if M_scale is None:
        M_scale = 1.0 / np.sqrt(m)
    return LayeredParams(M_scale * rng.standard_normal((m, n)), w_scale * rng.standard_normal(n))


# ---------------------------------------------------------------------------
# constants

def _sample_point(obj: StochasticObjective, rng, region_M, region_W):
    M = region_M.sample(rng, obj.M_shape)
    w = region_W.sample(rng, (obj.M_shape[1],))
    return obj.M_set.project(M), obj.W_set.project(w)


def gradient_variance(obj: StochasticObjective, M, w, batch_size: int = 1, rng=None, n_draws: int = 256) -> float:
    """``max`` over the two blocks of ``E||stochastic - full||^2``.

    Finite datasets with ``batch_size == 1`` are enumerated exactly;
    everything else is estimated from ``n_draws`` samples.
    """
    GM, gw = obj.subgrad_M(M, w), obj.grad_w(M, w)
    if obj.n_data is not None and batch_size == 1:
        draws = [np.array([i]) for i in range(obj.n_data)]
    else:
        if rng is None:
            raise ValueError("rng required for sampled variance")
        draws = [obj.sample(rng, batch_size) for _ in range(n_draws)]
    vM = vw = 0.0
    for b in draws:
        G, g = obj.stoch_grads(M, w, b)
        vM += float(np.sum((G - GM) ** 2))
        vw += float(np.sum((g - gw) ** 2))
    return max(vM, vw) / len(draws)


def estimate_constants(obj: StochasticObjective, n_samples: int = 256, rng: np.random.Generator | None = None,
                       region_M: ConstraintSet | None = None, region_W: ConstraintSet | None = None,
                       batch_size: int = 1, with_rho: bool = True) -> ProblemConstants:
    """Empirical problem constants from ``n_samples`` random points.

    * ``lam``: smallest eigenvalue of the head Hessian over the samples, never
      below an explicit regularizer weight.
    * ``L``: largest difference quotient of ``f``, of ``G_M`` in ``w`` and of
      the head gradient in ``(M, w)``, using a shared sample per pair.
    * ``sigma2``: largest minibatch gradient spread.
    * ``rho`` / ``lambda_phi``: midpoint curvature of the reduced objective
      along random segments (weak / strong convexity).

    Sampling regions default to the objective's own constraint sets.
    """
    region_M = region_M or obj.M_set
    region_W = region_W or obj.W_set
    if not (region_M.bounded and region_W.bounded):
        raise ValueError("constant estimation needs bounded sampling regions")
    if rng is None:
        rng = make_rng(0, 7)
    lam_min, L_max, s2_max = np.inf, 0.0, 0.0
    for _ in range(n_samples):
        M, w = _sample_point(obj, rng, region_M, region_W)
        M2, w2 = _sample_point(obj, rng, region_M, region_W)
        H = obj.w_hessian(M, w)
        lam_min = min(lam_min, float(np.linalg.eigvalsh(H)[0]))
        dM, dw = np.linalg.norm(M - M2), np.linalg.norm(w - w2)
        xi = obj.sample(rng, batch_size)
        G1, g1 = obj.stoch_grads(M, w, xi)
        G2, _ = obj.stoch_grads(M, w2, xi)
        _, g3 = obj.stoch_grads(M2, w2, xi)
        if dM + dw > 0:
            L_max = max(L_max, abs(obj.loss(M, w) - obj.loss(M2, w2)) / (dM + dw),
                        float(np.linalg.norm(g1 - g3)) / (dM + dw))
        if dw > 0:
            L_max = max(L_max, float(np.linalg.norm(G1 - G2)) / dw)
        s2_max = max(s2_max, gradient_variance(obj, M, w, batch_size, rng, n_draws=32))
    lam_est = max(lam_min, obj.explicit_lambda)
    notes = {"lam_floor": obj.explicit_lambda, "region_M": region_M.to_dict(), "region_W": region_W.to_dict()}
    rho = rho_hat = lambda_phi = None
    if with_rho:
        from .stackelberg import estimate_curvature

        lo, hi = estimate_curvature(obj, rng, n_segments=max(16, n_samples // 4), region=region_M)
        rho = max(-lo, 1e-8)
        rho_hat = 2.0 * rho
        lambda_phi = lo if lo > 0 else None
        notes["curvature_range"] = [lo, hi]
    return ProblemConstants(lam=lam_est, L=L_max, sigma2=s2_max, rho=rho, rho_hat=rho_hat,
                            lambda_phi=lambda_phi, empirical=True, n_samples=n_samples, notes=notes)
