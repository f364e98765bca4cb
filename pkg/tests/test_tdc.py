import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stackstep import tdc
from stackstep.numcore import fd_grad, make_rng, solve_spd
from stackstep.optimizer import StepSchedule
from stackstep.problems import ActivationError, get_activation

ID = get_activation("identity")
TANH = get_activation("tanh")


def two_state(p=0.3, q=0.7, gamma=0.8):
    P = np.array([[[1 - p, p]], [[q, 1 - q]]])
    return tdc.TabularMDP(P, [[0.2], [0.9]], gamma, [[1.0], [1.0]], name="two")


def rand_feat(rng, S, m=3, n=2, act=TANH):
    return tdc.ValueFeatures(rng.standard_normal((S, m)), act, rng.standard_normal((m, n)), rng.standard_normal(n))


def projected_form(mdp, feat):
    d = tdc.stationary_dist(mdp)
    Phi = feat.phi()
    v = Phi @ feat.w
    Tv = mdp.r_pi + mdp.gamma * mdp.P_pi @ v
    D = np.diag(d)
    proj = Phi @ np.linalg.solve(Phi.T @ D @ Phi, Phi.T @ D @ Tv)
    return float((v - proj) @ D @ (v - proj))


def test_stationary_examples():
    assert np.allclose(tdc.stationary_dist(np.array([[0.5, 0.5], [0.5, 0.5]])), [0.5, 0.5], atol=1e-12)
    d = tdc.stationary_dist(two_state())
    assert np.allclose(d, [0.7, 0.3], atol=1e-12)
    with pytest.raises(tdc.NonErgodicError):
        tdc.stationary_dist(np.eye(3))
    with pytest.raises(tdc.NonErgodicError):
        tdc.stationary_dist(np.array([[0.0, 1.0], [1.0, 0.0]]))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_stationary_invariant(seed):
    mdp = tdc.random_mdp(make_rng(seed), 5, 2)
    d = tdc.stationary_dist(mdp)
    assert np.all(d >= 0) and abs(d.sum() - 1) < 1e-12
    assert np.abs(d @ mdp.P_pi - d).max() < 1e-12


def test_mspbe_examples():
    mdp = tdc.random_mdp(make_rng(1), 4, 2)
    S = mdp.n_states
    exact = tdc.ValueFeatures(np.eye(S), ID, np.eye(S), tdc.v_pi(mdp))
    assert tdc.mspbe(mdp, exact) == pytest.approx(0, abs=1e-20)
    zero_r = tdc.TabularMDP(mdp.P, np.zeros_like(mdp.r), mdp.gamma, mdp.pi)
    f = rand_feat(make_rng(2), S).with_(w=np.zeros(2))
    assert tdc.mspbe(zero_r, f) == 0.0
    assert np.allclose(tdc.mu_fixed_point(zero_r, f), 0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_mspbe_forms_agree(seed):
    rng = make_rng(seed)
    mdp = tdc.random_mdp(rng, 4, 2)
    f = rand_feat(rng, 4)
    val = tdc.mspbe(mdp, f)
    assert abs(val - projected_form(mdp, f)) <= 1e-9 * max(1.0, val)


def test_mu_cross_checks():
    rng = make_rng(3)
    mdp = tdc.random_mdp(rng, 5, 2)
    f = rand_feat(rng, 5, n=3)
    mu = tdc.mu_fixed_point(mdp, f)
    mo = tdc.moments(mdp, f)
    assert np.linalg.norm(mo.C @ mu - mo.b) <= 1e-10
    assert float(mo.b @ mu) == pytest.approx(tdc.mspbe(mdp, f), rel=1e-10)
    assert np.allclose(mu, solve_spd(mo.C, mo.b))
    # at the linear TD fixed point b = 0, so mu = 0 and the MSPBE vanishes
    Phi = f.phi()
    wfp = tdc.linear_td_fixed_point(mdp, Phi)
    lin = tdc.ValueFeatures(Phi, ID, np.eye(3), wfp)
    assert np.allclose(tdc.mu_fixed_point(mdp, lin), 0, atol=1e-10)
    assert tdc.mspbe(mdp, lin) == pytest.approx(0, abs=1e-18)


def test_grads_two_state_fd():
    mdp = two_state()
    f = tdc.ValueFeatures([[1.0], [0.5]], TANH, [[0.7]], [1.3])
    mu = tdc.mu_fixed_point(mdp, f)
    gM = tdc.tdc_grad_M(mdp, f, mu)
    fd = fd_grad(lambda M: tdc.mspbe(mdp, f.with_(M=M)), f.M)
    assert np.allclose(gM, fd, rtol=1e-6, atol=1e-10)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_grads_fd_random(seed):
    rng = make_rng(seed)
    mdp = tdc.random_mdp(rng, 5, 2)
    f = rand_feat(rng, 5, 4, 3)
    mu = tdc.mu_fixed_point(mdp, f)
    fdM = fd_grad(lambda M: tdc.mspbe(mdp, f.with_(M=M)), f.M)
    fdw = fd_grad(lambda w: tdc.mspbe(mdp, f.with_(w=w)), f.w)
    gM, gw = tdc.tdc_grad_M(mdp, f, mu), tdc.tdc_grad_w(mdp, f, mu)
    assert np.linalg.norm(gM - fdM) <= 1e-5 * max(np.linalg.norm(fdM), 1e-8)
    assert np.linalg.norm(gw - fdw) <= 1e-6 * max(np.linalg.norm(fdw), 1e-8)


def test_grad_M_flat_direction_and_fixed_point():
    rng = make_rng(4)
    mdp = tdc.random_mdp(rng, 4, 2)
    psi = rng.standard_normal((4, 3))
    psi[:, 1] = 0.0  # row 1 of M never touches the features
    f = tdc.ValueFeatures(psi, TANH, rng.standard_normal((3, 2)), rng.standard_normal(2))
    g = tdc.tdc_grad_M(mdp, f, tdc.mu_fixed_point(mdp, f))
    assert np.allclose(g[1], 0)
    exact = tdc.ValueFeatures(np.eye(4), ID, np.eye(4), tdc.v_pi(mdp))
    mu = tdc.mu_fixed_point(mdp, exact)
    assert np.allclose(mu, 0, atol=1e-12)
    assert np.allclose(tdc.tdc_grad_M(mdp, exact, mu), 0, atol=1e-12)


def test_grad_w_examples():
    rng = make_rng(5)
    mdp = tdc.random_mdp(rng, 5, 2)
    f = rand_feat(rng, 5, 3, 2)
    # MSPBE minimizer over w: the linear TD fixed point of the current features
    w_opt = tdc.linear_td_fixed_point(mdp, f.phi())
    fo = f.with_(w=w_opt)
    assert np.allclose(tdc.tdc_grad_w(mdp, fo, tdc.mu_fixed_point(mdp, fo)), 0, atol=1e-10)
    g0 = tdc.TabularMDP(mdp.P, mdp.r, 1e-300, mdp.pi)
    d = tdc.stationary_dist(g0)
    Phi = f.phi()
    mc = -2 * Phi.T @ (d * (g0.r_pi - Phi @ f.w))
    assert np.allclose(tdc.tdc_grad_w(g0, f, rng.standard_normal(2)), mc, atol=1e-12)


def test_relu_rejected():
    mdp = two_state()
    f = tdc.ValueFeatures([[1.0], [0.5]], get_activation("relu"), [[0.7]], [1.3])
    with pytest.raises(ActivationError):
        tdc.tdc_grad_M(mdp, f, [0.0])


@pytest.mark.parametrize("seed", range(5))
def test_increment_expectations_exact(seed):
    rng = make_rng(seed, 8)
    mdp = tdc.random_mdp(rng, 3, 2)
    f = rand_feat(rng, 3, 2, 2)
    mu = rng.standard_normal(2)
    EM, Ew, Emu = tdc.expected_increments(mdp, f, mu)
    mo = tdc.moments(mdp, f)
    assert np.abs(EM - tdc.tdc_grad_M(mdp, f, mu)).max() <= 1e-12
    assert np.abs(Ew - tdc.tdc_grad_w(mdp, f, mu)).max() <= 1e-12
    assert np.abs(Emu - (mo.C @ mu - mo.b)).max() <= 1e-12


def test_next_state_gradient_uses_next_state_features():
    mdp = two_state()
    f = tdc.ValueFeatures([[1.0], [-2.0]], TANH, [[0.4]], [1.0])
    mu = np.array([0.5])
    GM, _, _ = tdc.transition_increments(mdp, f, mu, 0, 0, 1)
    x, x2 = 1.0, -2.0
    g, g2 = 1 - np.tanh(0.4 * x) ** 2, 1 - np.tanh(0.4 * x2) ** 2
    c = np.tanh(0.4 * x) * 0.5
    delta = 0.2 + 0.8 * np.tanh(0.4 * x2) - np.tanh(0.4 * x)
    expect = 2 * (0.8 * c * x2 * g2 - c * x * g + (delta - c) * x * g * 0.5)
    assert GM[0, 0] == pytest.approx(expect, rel=1e-14)


def test_zero_step_unchanged():
    rng = make_rng(0)
    mdp = tdc.random_mdp(rng, 4, 2)
    f = rand_feat(rng, 4)
    s = tdc.TDCState(f.M.copy(), f.w.copy(), np.ones(2), 0)
    s2 = tdc.tdc_step(s, mdp, f, StepSchedule("constant", 0.0, 0.0, zeta0=0.0), make_rng(1))
    assert np.array_equal(s2.M, s.M) and np.array_equal(s2.w, s.w) and np.array_equal(s2.mu, s.mu)


def test_sampler_frequencies():
    mdp = tdc.random_mdp(make_rng(2), 3, 2)
    tr = tdc.TransitionSampler(mdp).draw_block(make_rng(3), 200_000)
    d = tdc.stationary_dist(mdp)
    emp = np.bincount(tr[:, 0], minlength=3) / len(tr)
    assert np.allclose(emp, d, atol=5e-3)


def test_run_representable_zero_steps():
    mdp = tdc.load_golden_mdp()
    S = mdp.n_states
    f = tdc.ValueFeatures(np.eye(S), ID, np.eye(S), tdc.v_pi(mdp))
    r = tdc.run_tdc(mdp, f, StepSchedule("constant", 0.0, 0.0, zeta0=0.0), 100, 10, make_rng(0))
    assert np.all(r.trace.column("mspbe") <= 1e-10)


def test_zeta_tracks_beta_in_trace():
    mdp = tdc.load_golden_mdp()
    S = mdp.n_states
    f = tdc.ValueFeatures(np.eye(S), ID, np.eye(S), np.zeros(S))
    r = tdc.run_tdc(mdp, f, StepSchedule("thm1", 0.0, 0.1, zeta0=0.3), 200, 20, make_rng(0))
    ratio = r.trace.column("zeta") / r.trace.column("beta")
    assert np.allclose(ratio, 3.0)
    assert r.trace.to_csv_text().splitlines()[0] == "k,mspbe,mu_err,value_err,alpha,beta,zeta"


def test_decreasing_mspbe_trend():
    wins = 0
    for seed in range(10):
        rng = make_rng(seed, 40)
        mdp = tdc.random_mdp(rng, 5, 2, 0.9)
        f = tdc.ValueFeatures(rng.standard_normal((5, 4)), TANH, rng.standard_normal((4, 3)) / 2, np.zeros(3))
        r = tdc.run_tdc(mdp, f, StepSchedule("thm1", 0.01, 0.05), 20_000, 200, make_rng(seed, 41))
        m = r.trace.column("mspbe")
        n = len(m) // 10
        wins += m[-n:].mean() < m[:n].mean()
    assert wins >= 8


def test_lambda_a_floor_abort():
    mdp = tdc.load_golden_mdp()
    psi = np.ones((5, 2))  # rank-one features
    f = tdc.ValueFeatures(psi, ID, np.eye(2), np.zeros(2))
    with pytest.raises(tdc.SingularFeatureError, match="lambda_A"):
        tdc.run_tdc(mdp, f, StepSchedule("constant", 0.0, 0.1), 10, 5, make_rng(0))


def test_mdp_validation(tmp_path):
    g = tdc.load_golden_mdp()
    assert g.n_states == 5 and g.n_actions == 2
    spec = g.to_dict()
    spec["P"][2][1] = [0.5, 0.6, 0.0, 0.0, 0.0]
    p = tmp_path / "bad.json"
    p.write_text(json.dumps(spec))
    with pytest.raises(tdc.MDPValidationError, match=r"P\[2\]\[1\]"):
        tdc.TabularMDP.load(p)
    spec = g.to_dict()
    del spec["gamma"]
    with pytest.raises(tdc.MDPValidationError, match="gamma"):
        tdc.TabularMDP.from_dict(spec)
    round_trip = tdc.TabularMDP.from_dict(g.to_dict())
    assert np.array_equal(round_trip.P, g.P)


def test_golden_mdp_ergodic():
    g = tdc.load_golden_mdp()
    d = tdc.stationary_dist(g)
    assert np.all(d > 0)
