"""Gradient TD with correction (TDC) under a two-layer value approximation.

Everything here works on small tabular MDPs, so every expectation over the
stationary distribution can be evaluated exactly as a finite sum. The
stochastic single-loop updates share their per-transition increments with
the exact-expectation code so the two can be compared by enumeration.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .numcore import NotSPDError, cholesky, make_rng, smallest_eig_spd, solve_spd
from .optimizer import StepSchedule, TrainTrace, eval_points
from .problems import Activation, ActivationError, ConstraintSet, get_activation


class MDPValidationError(ValueError):
    pass


class NonErgodicError(ValueError):
    pass


class SingularFeatureError(np.linalg.LinAlgError):
    """Feature covariance ``C(M)`` is not positive definite."""


class TDCDivergenceError(FloatingPointError):
    pass


# ---------------------------------------------------------------------------
# MDPs

@dataclass
class TabularMDP:
    P: np.ndarray        # (S, A, S)
    r: np.ndarray        # (S, A)
    gamma: float
    pi: np.ndarray       # (S, A)
    name: str = ""

    def __post_init__(self):
        self.P = np.asarray(self.P, dtype=float)
        self.r = np.asarray(self.r, dtype=float)
        self.pi = np.asarray(self.pi, dtype=float)
        self.validate()

    @property
    def n_states(self) -> int:
        return self.P.shape[0]

    @property
    def n_actions(self) -> int:
        return self.P.shape[1]

    def validate(self, tol: float = 1e-12):
        if self.P.ndim != 3 or self.P.shape[0] != self.P.shape[2]:
            raise MDPValidationError(f"P must have shape (S, A, S), got {self.P.shape}")
        S, A, _ = self.P.shape
        if self.r.shape != (S, A):
            raise MDPValidationError(f"r must have shape ({S}, {A}), got {self.r.shape}")
        if self.pi.shape != (S, A):
            raise MDPValidationError(f"pi must have shape ({S}, {A}), got {self.pi.shape}")
        if not 0 < self.gamma < 1:
            raise MDPValidationError(f"gamma must lie in (0, 1), got {self.gamma}")
        for s in range(S):
            for a in range(A):
                row = self.P[s, a]
                if np.any(row < 0) or abs(row.sum() - 1) > tol:
                    raise MDPValidationError(f"P[{s}][{a}] is not a probability row (sum {row.sum():.15g})")
            if np.any(self.pi[s] < 0) or abs(self.pi[s].sum() - 1) > tol:
                raise MDPValidationError(f"pi[{s}] is not a probability row (sum {self.pi[s].sum():.15g})")
            if np.any(self.r[s] < 0) or np.any(self.r[s] > 1):
                raise MDPValidationError(f"r[{s}] has entries outside [0, 1]")

    @property
    def P_pi(self) -> np.ndarray:
        return np.einsum("sa,sat->st", self.pi, self.P)

    @property
    def r_pi(self) -> np.ndarray:
        return np.sum(self.pi * self.r, axis=1)

    def to_dict(self) -> dict:
        return {"n_states": self.n_states, "n_actions": self.n_actions, "P": self.P.tolist(),
                "r": self.r.tolist(), "gamma": self.gamma, "pi": self.pi.tolist(), "name": self.name}

    @classmethod
    def from_dict(cls, spec: dict) -> "TabularMDP":
        for key in ("n_states", "n_actions", "P", "r", "gamma", "pi"):
            if key not in spec:
                raise MDPValidationError(f"MDP spec is missing field {key!r}")
        S, A = int(spec["n_states"]), int(spec["n_actions"])
        try:
            P = np.array(spec["P"], dtype=float)
        except ValueError as exc:
            raise MDPValidationError(f"P is ragged: {exc}") from None
        if P.shape != (S, A, S):
            raise MDPValidationError(f"P has shape {P.shape}, expected ({S}, {A}, {S})")
        return cls(P, spec["r"], float(spec["gamma"]), spec["pi"], spec.get("name", ""))

    @classmethod
    def load(cls, path) -> "TabularMDP":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def random_mdp(rng: np.random.Generator, n_states: int = 5, n_actions: int = 2, gamma: float = 0.9,
               concentration: float = 1.0) -> TabularMDP:
    """Dirichlet rows for ``P`` and ``pi``, uniform rewards in ``[0, 1]``."""
    P = rng.dirichlet(np.full(n_states, concentration), size=(n_states, n_actions))
    pi = rng.dirichlet(np.ones(n_actions), size=n_states)
    r = rng.random((n_states, n_actions))
    return TabularMDP(P, r, gamma, pi, name=f"dirichlet{n_states}x{n_actions}")


def golden_mdp_path() -> Path:
    return Path(__file__).parent / "data" / "chain_walk5.json"


def load_golden_mdp() -> TabularMDP:
    return TabularMDP.load(golden_mdp_path())


def is_primitive(P: np.ndarray) -> bool:
    """Irreducible and aperiodic, via positivity of a boolean matrix power.

    A primitive ``n x n`` matrix has a strictly positive power no later than
    ``(n-1)^2 + 1`` (Wielandt).
    """
    n = P.shape[0]
    B = (P > 0).astype(np.int64)
    Q = B.copy()
    for _ in range((n - 1) ** 2 + 1):
        if np.all(Q > 0):
            return True
        Q = np.minimum(Q @ B, 1)
    return bool(np.all(Q > 0))


def stationary_dist(P, tol: float = 1e-14, max_iter: int = 1_000_000) -> np.ndarray:
    """Stationary distribution of a row-stochastic matrix (or of an MDP's policy chain).

    Rejects chains that are not irreducible and aperiodic.
    """
    if isinstance(P, TabularMDP):
        P = P.P_pi
    P = np.asarray(P, dtype=float)
    if not is_primitive(P):
        raise NonErgodicError("policy chain is not irreducible and aperiodic; stationary distribution is not unique")
    n = P.shape[0]
    d = np.full(n, 1.0 / n)
    for _ in range(max_iter):
        nd = d @ P
        nd /= nd.sum()
        if np.abs(nd - d).sum() <= tol:
            return nd
        d = nd
    raise NonErgodicError(f"power iteration did not converge in {max_iter} steps")


def v_pi(mdp: TabularMDP) -> np.ndarray:
    """True values from ``(I - gamma P_pi) V = r_pi``."""
    S = mdp.n_states
    return np.linalg.solve(np.eye(S) - mdp.gamma * mdp.P_pi, mdp.r_pi)


# ---------------------------------------------------------------------------
# features and exact objective

@dataclass
class ValueFeatures:
    """``psi_M(s) = act(M^T psi(s))`` with value ``psi_M(s)^T w``."""

    psi: np.ndarray
    act: Activation
    M: np.ndarray
    w: np.ndarray

    def __post_init__(self):
        self.psi = np.asarray(self.psi, dtype=float)
        self.M = np.asarray(self.M, dtype=float)
        self.w = np.asarray(self.w, dtype=float)
        if isinstance(self.act, str):
            self.act = get_activation(self.act)
        if self.psi.shape[1] != self.M.shape[0] or self.M.shape[1] != self.w.shape[0]:
            raise ValueError(f"inconsistent shapes psi {self.psi.shape}, M {self.M.shape}, w {self.w.shape}")

    def with_(self, **kw) -> "ValueFeatures":
        return replace(self, **kw)

    def pre(self) -> np.ndarray:
        return self.psi @ self.M

    def phi(self) -> np.ndarray:
        return self.act.apply(self.pre())

    def dphi(self) -> np.ndarray:
        return self.act.subgrad(self.pre())

    def values(self) -> np.ndarray:
        return self.phi() @ self.w


def _require_smooth(act: Activation):
    if not act.smooth:
        raise ActivationError(f"TDC body gradients need a differentiable, smooth activation; got {act}")


@dataclass
class Moments:
    """Exact stationary expectations that the TDC quantities are built from."""

    d: np.ndarray          # stationary distribution
    Phi: np.ndarray        # (S, n) features
    dphi: np.ndarray       # (S, n) activation derivative
    C: np.ndarray          # E[psi psi^T]
    b: np.ndarray          # E[delta psi]
    E_delta: np.ndarray    # E[delta | s]
    cross: np.ndarray      # E[psi(s') psi(s)^T]


def moments(mdp: TabularMDP, feat: ValueFeatures, d: Optional[np.ndarray] = None) -> Moments:
    d = stationary_dist(mdp) if d is None else d
    Phi = feat.phi()
    P = mdp.P_pi
    v = Phi @ feat.w
    E_delta = mdp.r_pi + mdp.gamma * (P @ v) - v
    DPhi = d[:, None] * Phi
    C = Phi.T @ DPhi
    b = DPhi.T @ E_delta
    cross = (P @ Phi).T @ DPhi
    return Moments(d, Phi, feat.dphi(), C, b, E_delta, cross)


def _check_C(C):
    try:
        cholesky(C)
    except NotSPDError as exc:
        raise SingularFeatureError(
            f"feature covariance C(M) is singular (pivot {exc.pivot}); the analysis assumes C(M) >= lambda_A I "
            "with lambda_A > 0") from None


def mspbe(mdp: TabularMDP, feat: ValueFeatures, d=None, check_tol: float = 1e-9) -> float:
    """Mean-squared projected Bellman error, computed two ways.

    The projected form ``||Psi w - Pi T Psi w||^2_d`` and the ``b^T C^{-1} b``
    form are evaluated independently and must agree to ``check_tol``
    (relative to ``max(1, value)``).
    """
    mo = moments(mdp, feat, d)
    _check_C(mo.C)
    v = mo.Phi @ feat.w
    Tv = mdp.r_pi + mdp.gamma * (mdp.P_pi @ v)
    # weighted least-squares projection of Tv onto the feature span
    sq = np.sqrt(mo.d)
    coef, *_ = np.linalg.lstsq(sq[:, None] * mo.Phi, sq * Tv, rcond=None)
    e = v - mo.Phi @ coef
    proj_form = float(np.sum(mo.d * e * e))
    quad_form = float(mo.b @ solve_spd(mo.C, mo.b))
    if abs(proj_form - quad_form) > check_tol * max(1.0, abs(quad_form)):
        raise ArithmeticError(f"MSPBE forms disagree: projected {proj_form!r} vs b^T C^-1 b {quad_form!r}")
    return quad_form


def mu_fixed_point(mdp: TabularMDP, feat: ValueFeatures, d=None) -> np.ndarray:
    """``mu = C(M)^{-1} b(M, w)``."""
    mo = moments(mdp, feat, d)
    _check_C(mo.C)
    return solve_spd(mo.C, mo.b)


def tdc_grad_w(mdp: TabularMDP, feat: ValueFeatures, mu, d=None) -> np.ndarray:
    mo = moments(mdp, feat, d)
    return -2.0 * mo.b + 2.0 * mdp.gamma * mo.cross @ np.asarray(mu, dtype=float)


def tdc_grad_M(mdp: TabularMDP, feat: ValueFeatures, mu, d=None) -> np.ndarray:
    """Exact expectation of the body increment for a given ``mu``.

    With ``mu = C^{-1} b`` this is the gradient of the MSPBE in ``M``. The
    last term multiplies ``(delta - psi^T mu)`` by ``grad_M(psi_M(s)^T mu)``,
    which is what differentiating ``b^T C^{-1} b`` produces.
    """
    _require_smooth(feat.act)
    mu = np.asarray(mu, dtype=float)
    mo = moments(mdp, feat, d)
    c = mo.Phi @ mu
    dc = mo.d * c
    # weights on grad_M(psi(s)^T w) and grad_M(psi(s)^T mu), indexed by state
    a_w = mdp.gamma * (mdp.P_pi.T @ dc) - dc
    a_mu = mo.d * (mo.E_delta - c)
    inner = a_w[:, None] * (mo.dphi * feat.w) + a_mu[:, None] * (mo.dphi * mu)
    return 2.0 * feat.psi.T @ inner


def linear_td_fixed_point(mdp: TabularMDP, Phi, d=None) -> np.ndarray:
    """Solution of the projected Bellman equation for fixed features ``Phi``."""
    d = stationary_dist(mdp) if d is None else d
    Phi = np.asarray(Phi, dtype=float)
    A = Phi.T @ (d[:, None] * (Phi - mdp.gamma * mdp.P_pi @ Phi))
    return np.linalg.solve(A, Phi.T @ (d * mdp.r_pi))


# ---------------------------------------------------------------------------
# stochastic increments

def transition_increments(mdp: TabularMDP, feat: ValueFeatures, mu, s: int, a: int, s2: int, need_M: bool = True):
    """Per-transition increments ``(G_M, G_w, G_mu)``; updates subtract step * increment.

    ``need_M=False`` skips the body increment (returned as ``None``).
    """
    return _increments(mdp, feat.psi, feat.act, feat.M, feat.w, np.asarray(mu, dtype=float), s, a, s2, need_M)


def _increments(mdp, psi, act, M, w, mu, s, a, s2, need_M):
    x, x2 = psi[s], psi[s2]
    pre, pre2 = x @ M, x2 @ M
    f, f2 = act.apply(pre), act.apply(pre2)
    delta = mdp.r[s, a] + mdp.gamma * (f2 @ w) - f @ w
    c = f @ mu
    G_M = None
    if need_M:
        g, g2 = act.subgrad(pre), act.subgrad(pre2)
        G_M = 2.0 * (mdp.gamma * c * np.outer(x2, g2 * w) - c * np.outer(x, g * w)
                     + (delta - c) * np.outer(x, g * mu))
    G_w = 2.0 * (mdp.gamma * c * f2 - delta * f)
    G_mu = c * f - delta * f
    return G_M, G_w, G_mu


def expected_increments(mdp: TabularMDP, feat: ValueFeatures, mu, d=None):
    """Exhaustive expectation of :func:`transition_increments` over ``d x pi x P``."""
    d = stationary_dist(mdp) if d is None else d
    S, A = mdp.n_states, mdp.n_actions
    EM = np.zeros_like(feat.M)
    Ew = np.zeros_like(feat.w)
    Emu = np.zeros(feat.w.shape[0])
    for s in range(S):
        for a in range(A):
            for s2 in range(S):
                q = d[s] * mdp.pi[s, a] * mdp.P[s, a, s2]
                if q == 0:
                    continue
                GM, Gw, Gmu = transition_increments(mdp, feat, mu, s, a, s2)
                EM += q * GM
                Ew += q * Gw
                Emu += q * Gmu
    return EM, Ew, Emu


class TransitionSampler:
    """i.i.d. transitions ``s ~ d, a ~ pi(.|s), s' ~ P(.|s,a)`` by inverse-CDF lookup."""

    def __init__(self, mdp: TabularMDP, d=None):
        self.mdp = mdp
        self.d = stationary_dist(mdp) if d is None else d
        self._cd = np.cumsum(self.d)
        self._cpi = np.cumsum(mdp.pi, axis=1)
        self._cP = np.cumsum(mdp.P, axis=2)

    def draw(self, rng: np.random.Generator) -> tuple[int, int, int]:
        s, a, s2 = self.draw_block(rng, 1)[0]
        return int(s), int(a), int(s2)

    def draw_block(self, rng: np.random.Generator, size: int) -> np.ndarray:
        """``size`` transitions as an integer array of shape ``(size, 3)``."""
        u = rng.random((size, 3))
        S, A = self.mdp.n_states, self.mdp.n_actions
        s = np.minimum(np.searchsorted(self._cd, u[:, 0], side="right"), S - 1)
        a = np.minimum((u[:, 1:2] >= self._cpi[s]).sum(axis=1), A - 1)
        s2 = np.minimum((u[:, 2:3] >= self._cP[s, a]).sum(axis=1), S - 1)
        return np.stack([s, a, s2], axis=1)


@dataclass
class TDCState:
    M: np.ndarray
    w: np.ndarray
    mu: np.ndarray
    k: int = 0


def tdc_step(state: TDCState, mdp: TabularMDP, feat: ValueFeatures, sched: StepSchedule,
             rng: np.random.Generator, sampler: TransitionSampler | None = None,
             M_set: ConstraintSet | None = None, W_set: ConstraintSet | None = None,
             transition=None) -> TDCState:
    """One single-loop update; all three blocks read the pre-update state and one transition.

    ``transition`` supplies a pre-drawn ``(s, a, s')``; otherwise one is sampled.
    """
    if transition is None:
        sampler = sampler or TransitionSampler(mdp)
        transition = sampler.draw(rng)
    s, a, s2 = (int(t) for t in transition)
    k = state.k
    al, be, ze = float(sched.alpha(k)), float(sched.beta(k)), float(sched.zeta(k))
    G_M, G_w, G_mu = _increments(mdp, feat.psi, feat.act, state.M, state.w, state.mu, s, a, s2, al != 0)
    M = state.M - al * G_M if al else state.M
    w = state.w - be * G_w
    mu = state.mu - ze * G_mu
    if M_set is not None:
        M = M_set.project(M)
    if W_set is not None:
        w = W_set.project(w)
    if not (np.all(np.isfinite(M)) and np.all(np.isfinite(w)) and np.all(np.isfinite(mu))):
        raise TDCDivergenceError(f"non-finite TDC iterate at step {k} (transition {s},{a},{s2})")
    return TDCState(M, w, mu, k + 1)


_BLOCK = 4096
TDC_COLUMNS = ("k", "mspbe", "mu_err", "value_err", "alpha", "beta", "zeta")


@dataclass
class TDCResult:
    trace: TrainTrace
    state: TDCState
    warnings: list = field(default_factory=list)


def run_tdc(mdp: TabularMDP, feat_init: ValueFeatures, sched: StepSchedule, iters: int, eval_period: int,
            rng: np.random.Generator, mu0=None, lambda_a_floor: float = 1e-8, abort_on_floor: bool = True,
            M_set: ConstraintSet | None = None, W_set: ConstraintSet | None = None,
            meta: dict | None = None) -> TDCResult:
    """Run the single-loop TDC updates and record exact evaluation quantities.

    Each record holds the exact MSPBE, ``||mu_k - mu(M_k, w_k)||`` and the
    ``d``-weighted value error against the true values.
    """
    if iters < 0:
        raise ValueError("iters must be >= 0")
    if not feat_init.act.smooth and sched.alpha0 > 0:
        _require_smooth(feat_init.act)
    d = stationary_dist(mdp)
    v_true = v_pi(mdp)
    sampler = TransitionSampler(mdp, d)
    n = feat_init.w.shape[0]
    mu = np.zeros(n) if mu0 is None else np.asarray(mu0, dtype=float)
    state = TDCState(feat_init.M.copy(), feat_init.w.copy(), mu.copy(), 0)
    trace = TrainTrace(TDC_COLUMNS, meta={"schedule": sched.to_dict(), "iters": iters, "eval_period": eval_period,
                                          "mdp": mdp.name, "gamma": mdp.gamma, "activation": str(feat_init.act),
                                          "lambda_a_floor": lambda_a_floor, **(meta or {})})
    warnings = []
    pts = set(eval_points(iters, eval_period))

    def record():
        cur = feat_init.with_(M=state.M, w=state.w)
        mo = moments(mdp, cur, d)
        lam_a = smallest_eig_spd(mo.C)
        if lam_a < lambda_a_floor:
            msg = f"smallest eigenvalue of C(M) is {lam_a:.3e} < {lambda_a_floor:g} at k={state.k}"
            if abort_on_floor:
                raise SingularFeatureError(msg + "; the analysis assumes C(M) >= lambda_A I")
            warnings.append(msg)
        val = mspbe(mdp, cur, d)
        mu_star = solve_spd(mo.C, mo.b)
        err = cur.values() - v_true
        k = state.k
        trace.append([k, val, float(np.linalg.norm(state.mu - mu_star)), math.sqrt(float(np.sum(d * err * err))),
                      float(sched.alpha(k)), float(sched.beta(k)), float(sched.zeta(k))])

    record()
    block = np.empty((0, 3), dtype=np.int64)
    pos = 0
    for _ in range(iters):
        if pos == len(block):
            block, pos = sampler.draw_block(rng, min(_BLOCK, iters - state.k)), 0
        state = tdc_step(state, mdp, feat_init, sched, rng, sampler, M_set, W_set, transition=block[pos])
        pos += 1
        if state.k in pts:
            record()
    trace.meta["warnings"] = warnings
    return TDCResult(trace, state, warnings)
