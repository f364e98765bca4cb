import json

import numpy as np
import pytest

from stackstep import landscape as lsc
from stackstep import stackelberg as stk
from stackstep.cli import teacher_problem
from stackstep.numcore import make_rng
from stackstep.problems import FrobeniusBall, LayeredParams, StochasticObjective


class Quadratic(StochasticObjective):
    """``1/2 vec(M)^T A vec(M) + 1/2 ||w - c||^2``."""

    name = "quadratic"

    def __init__(self, A, shape, c=None, radius=100.0):
        self.A = np.asarray(A, dtype=float)
        self.M_shape = shape
        self.c = np.zeros(shape[1]) if c is None else np.asarray(c, dtype=float)
        self.M_set, self.W_set = FrobeniusBall(radius), FrobeniusBall(1e6)

    def loss(self, M, w):
        z = np.asarray(M).ravel()
        d = np.asarray(w) - self.c
        return 0.5 * float(z @ self.A @ z) + 0.5 * float(d @ d)

    def grad_w(self, M, w):
        return np.asarray(w, dtype=float) - self.c

    def subgrad_M(self, M, w):
        return (self.A @ np.asarray(M).ravel()).reshape(self.M_shape)

    def closed_form_w(self, M):
        return self.c.copy()

    def w_hessian(self, M, w=None):
        return np.eye(self.M_shape[1])


def orthonormal_pair(rng, shape):
    q, _ = np.linalg.qr(rng.standard_normal((shape[0] * shape[1], 2)))
    return q[:, 0].reshape(shape), q[:, 1].reshape(shape)


@pytest.mark.parametrize("mode", lsc.MODES)
def test_quadratic_slice(mode):
    shape = (3, 2)
    obj = Quadratic(0.2 * np.eye(6), shape)
    d1, d2 = orthonormal_pair(make_rng(0), shape)
    spec = lsc.SliceSpec(make_rng(1).standard_normal(shape), d1, d2, eta_max=0.5, resolution=5, mode=mode,
                         w_fixed=np.zeros(2))
    res = lsc.sweep(spec, obj)
    assert np.allclose(res.hessian.matrix, 0.2 * np.eye(2), atol=1e-6)
    assert res.lambda_max == pytest.approx(0.2, abs=1e-6) and res.trace == pytest.approx(0.4, abs=1e-6)
    assert res.values.shape == (5, 5) and res.feasible.all() and res.invalid_points == 0


def test_fd_slice_matches_analytic_restriction():
    rng = make_rng(3)
    shape = (2, 3)
    B = rng.standard_normal((6, 6))
    A = B @ B.T
    obj = Quadratic(A, shape)
    d1, d2 = rng.standard_normal(shape), rng.standard_normal(shape)
    d1 /= np.linalg.norm(d1)
    d2 /= np.linalg.norm(d2)
    res = lsc.slice_curvature(lsc.SliceSpec(rng.standard_normal(shape), d1, d2, mode="joint", w_fixed=np.zeros(3),
                                            h=1e-3), obj)
    D = np.stack([d1.ravel(), d2.ravel()])
    assert np.allclose(res.hessian.matrix, D @ A @ D.T, atol=1e-4)


def test_joint_zero_head_is_flat():
    obj, init = teacher_problem(0)
    d1, d2 = lsc.make_directions(make_rng(0), obj.M_shape)
    res = lsc.sweep(lsc.SliceSpec(init.M, d1, d2, resolution=5, mode="joint", w_fixed=np.zeros(10)), obj)
    assert np.allclose(res.values, res.values[0, 0]) and res.grad_norm == pytest.approx(0, abs=1e-9)


def test_mode_consistency_and_dominance():
    obj, init = teacher_problem(1)
    d1, d2 = lsc.make_directions(make_rng(2), obj.M_shape)
    common = dict(center=init.M, d1=d1, d2=d2, eta_max=0.5, resolution=7)
    joint = lsc.sweep(lsc.SliceSpec(mode="joint", w_fixed=init.w, **common), obj)
    stack = lsc.sweep(lsc.SliceSpec(mode="stackelberg", **common), obj)
    c = 3
    assert joint.values[c, c] == obj.loss(init.M, init.w)
    assert stack.values[c, c] == pytest.approx(stk.phi(obj, init.M), rel=1e-12)
    assert np.all(stack.values <= joint.values + 1e-9)
    assert stack.inner_tol == 1e-9 and joint.inner_tol is None


def test_swap_invariance():
    obj, init = teacher_problem(2)
    d1, d2 = lsc.make_directions(make_rng(3), obj.M_shape)
    for mode in lsc.MODES:
        a = lsc.slice_curvature(lsc.SliceSpec(init.M, d1, d2, mode=mode, w_fixed=init.w, h=1e-3), obj)
        b = lsc.slice_curvature(lsc.SliceSpec(init.M, d2, d1, mode=mode, w_fixed=init.w, h=1e-3), obj)
        assert a.trace == pytest.approx(b.trace, rel=1e-9)
        assert a.lambda_max == pytest.approx(b.lambda_max, rel=1e-9)


def test_spec_validation():
    M = np.zeros((2, 2))
    d = np.ones((2, 2))
    with pytest.raises(ValueError, match="distinct"):
        lsc.SliceSpec(M, d, d, mode="stackelberg")
    with pytest.raises(ValueError, match="resolution"):
        lsc.SliceSpec(M, d, -d, resolution=2, mode="stackelberg")
    with pytest.raises(ValueError, match="w_fixed"):
        lsc.SliceSpec(M, d, -d, mode="joint")
    with pytest.raises(ValueError, match="mode"):
        lsc.SliceSpec(M, d, -d, mode="other")


def test_infeasible_points_flagged():
    obj = Quadratic(np.eye(4), (2, 2), radius=1.0)
    d1, d2 = orthonormal_pair(make_rng(0), (2, 2))
    res = lsc.sweep(lsc.SliceSpec(np.zeros((2, 2)), d1, d2, eta_max=2.0, resolution=5, mode="stackelberg"), obj)
    assert not res.feasible[0, 0] and res.feasible[2, 2]
    assert np.all(np.isfinite(res.values))


def test_invalid_points_counted(monkeypatch):
    obj = Quadratic(np.eye(4), (2, 2))
    d1, d2 = orthonormal_pair(make_rng(0), (2, 2))
    real = stk.solve_head

    def flaky(o, M, tol=1e-9, w0=None, cache=None):
        if np.linalg.norm(M) > 0.9:
            raise stk.BestResponseError("forced")
        return real(o, M, tol, w0, cache)

    monkeypatch.setattr(lsc.stk, "solve_head", flaky)
    res = lsc.sweep(lsc.SliceSpec(np.zeros((2, 2)), d1, d2, resolution=5, mode="stackelberg"), obj)
    assert res.invalid_points > 0 and np.isnan(res.values).sum() >= 1


def test_trajectory_study_and_export(tmp_path):
    obj, init = teacher_problem(0)
    traj = [(0, init), (5, LayeredParams(init.M * 1.01, init.w)), (9, LayeredParams(init.M * 0.99, init.w + 0.1))]
    assert lsc.trajectory_study(obj, traj, [], make_rng(0)) == []
    with pytest.raises(ValueError, match="not in the trajectory"):
        lsc.trajectory_study(obj, traj, [7], make_rng(0))
    res = lsc.trajectory_study(obj, traj, [0, 5, 9], make_rng(0), resolution=5, eta_max=0.2)
    assert [r.k for r in res] == [0, 5, 9]
    files = lsc.write_study(res, tmp_path)
    assert len([f for f in files if f.endswith(".csv")]) == 6
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert len(summary) == 3 and len(summary[0]["lambda_max_pair"]) == 2
    header = (tmp_path / "surface_k0_joint.csv").read_text().splitlines()[0]
    assert header == "eta1,eta2,value,feasible"
    assert set(summary[0]["joint"]) == {"k", "mode", "lambda_max", "trace", "grad_norm", "invalid_points"}


def test_hutchinson_trace_quadratic():
    obj = Quadratic(np.diag(np.arange(1.0, 7.0)), (2, 3))
    tr = lsc.hutchinson_trace(obj, np.ones((2, 3)), make_rng(0), w=np.zeros(3), n_probes=8)
    # Rademacher probes are exact for diagonal Hessians
    assert tr == pytest.approx(21.0, rel=1e-6)
    obj_relu, init = teacher_problem(0)
    with pytest.raises(ValueError):
        lsc.hutchinson_trace(obj_relu, init.M, make_rng(0))
