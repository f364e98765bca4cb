import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stackstep.numcore import DimensionError, fd_grad, make_rng
from stackstep.problems import (
    ActivationError,
    Box,
    ClassificationDataset,
    ClassificationObjective,
    FrobeniusBall,
    LayeredParams,
    ProblemConstants,
    QuadraticHeadObjective,
    RegressionDataset,
    RegressionObjective,
    ToyObjective,
    clf_grad_M,
    clf_grad_w,
    clf_loss,
    default_ball,
    estimate_constants,
    get_activation,
    gradient_variance,
    make_synthetic_regression,
    reg_grad_w,
    reg_loss,
    reg_stoch_grads,
    reg_subgrad_M,
    sample_batch,
    toy_f,
    toy_hessian,
    toy_phi,
)

ID = get_activation("identity")
RELU = get_activation("relu")
TANH = get_activation("tanh")


def one_d(lam=0.0):
    return RegressionDataset([[1.0]], [1.0], lam)


def P(M, w):
    return LayeredParams(np.atleast_2d(M), np.atleast_1d(np.asarray(w, dtype=float)))


def test_reg_loss_examples():
    assert reg_loss(one_d(), ID, P(1.0, 1.0)) == 0.0
    assert reg_loss(one_d(), ID, P(2.0, 1.0)) == 1.0
    assert reg_loss(one_d(0.1), ID, P(1.0, 2.0)) == pytest.approx(1.2)


def test_reg_grads_examples():
    assert np.array_equal(reg_grad_w(one_d(), ID, P(1.0, 1.0)), [0.0])
    assert reg_grad_w(one_d(), ID, P(2.0, 1.0))[0] == pytest.approx(4.0)
    assert reg_subgrad_M(one_d(), ID, P(2.0, 1.0))[0, 0] == pytest.approx(2.0)
    d = RegressionDataset(np.ones((3, 2)), np.ones(3), 0.1)
    assert np.array_equal(reg_subgrad_M(d, RELU, LayeredParams(np.ones((2, 2)), np.zeros(2))), np.zeros((2, 2)))


def test_dimension_errors():
    d = RegressionDataset(np.ones((3, 2)), np.ones(3))
    with pytest.raises(DimensionError):
        reg_loss(d, ID, LayeredParams(np.ones((3, 1)), np.ones(1)))
    with pytest.raises(DimensionError):
        LayeredParams(np.ones((2, 2)), np.ones(3))


def test_relu_positive_branch_equals_identity():
    rng = make_rng(3)
    X = np.abs(rng.standard_normal((6, 3)))
    d = RegressionDataset(X, rng.standard_normal(6), 0.1)
    p = LayeredParams(np.abs(rng.standard_normal((3, 2))) + 0.1, rng.standard_normal(2))
    assert np.allclose(reg_subgrad_M(d, RELU, p), reg_subgrad_M(d, ID, p))


def test_relu_kink_selection():
    assert RELU.subgrad(np.array([0.0]))[0] == 0.0
    lk = get_activation("leaky_relu(0.1)")
    assert lk.subgrad(np.array([0.0]))[0] == pytest.approx(0.1)


def test_leaky_relu_square_is_smooth():
    # phi^2 derivative: 2a on the right, 2 s^2 a on the left -> continuous at 0
    lk = get_activation("leaky_relu(0.2)")
    a = np.linspace(-1e-3, 1e-3, 2001)
    d = np.gradient(lk.apply(a) ** 2, a)
    assert np.max(np.abs(np.diff(d))) < 1e-5
    assert lk.square_smooth


def test_minibatch_full_batch_equals_full_gradient():
    d, _, _ = make_synthetic_regression(1, N=8, m=3, n=2)
    p = LayeredParams(make_rng(0).standard_normal((3, 2)), make_rng(1).standard_normal(2))
    G, g = reg_stoch_grads(d, RELU, p, np.arange(8))
    assert np.allclose(G, reg_subgrad_M(d, RELU, p), atol=1e-12)
    assert np.allclose(g, reg_grad_w(d, RELU, p), atol=1e-12)


def test_minibatch_pairs():
    d = RegressionDataset([[1.0], [2.0]], [1.0, -1.0], 0.0)
    p = P(0.5, 1.5)
    Gs = [reg_stoch_grads(d, ID, p, [i])[0] for i in range(2)]
    assert np.allclose(np.mean(Gs, axis=0), reg_subgrad_M(d, ID, p), atol=1e-12)


def test_minibatch_unbiased_all_sizes():
    d, _, _ = make_synthetic_regression(2, N=6, m=3, n=2)
    p = LayeredParams(make_rng(4).standard_normal((3, 2)), make_rng(5).standard_normal(2))
    GM, gw = reg_subgrad_M(d, RELU, p), reg_grad_w(d, RELU, p)
    for size in range(1, 7):
        batches = list(itertools.combinations(range(6), size))
        Gs = [reg_stoch_grads(d, RELU, p, b) for b in batches]
        assert np.allclose(np.mean([G for G, _ in Gs], axis=0), GM, atol=1e-12, rtol=0)
        assert np.allclose(np.mean([g for _, g in Gs], axis=0), gw, atol=1e-12, rtol=0)


def test_singleton_variance_within_estimated_bound():
    d, _, _ = make_synthetic_regression(3, N=8, m=3, n=2)
    init = LayeredParams(0.5 * make_rng(0).standard_normal((3, 2)), make_rng(1).standard_normal(2))
    obj = RegressionObjective(d, RELU, default_ball(init.M), default_ball(init.w), 2)
    # sample the constants at the point itself, then compare with exhaustive enumeration
    here_M, here_W = FrobeniusBall(1e-9, center=init.M), FrobeniusBall(1e-9, center=init.w)
    consts = estimate_constants(obj, 16, make_rng(2), region_M=here_M, region_W=here_W, with_rho=False)
    GM, gw = obj.subgrad_M(init.M, init.w), obj.grad_w(init.M, init.w)
    pairs = [obj.stoch_grads(init.M, init.w, [i]) for i in range(8)]
    var_M = np.mean([np.sum((G - GM) ** 2) for G, _ in pairs])
    var_w = np.mean([np.sum((g - gw) ** 2) for _, g in pairs])
    assert max(var_M, var_w) <= consts.sigma2 * (1 + 1e-6)


def test_empty_batch_rejected():
    with pytest.raises(ValueError):
        reg_stoch_grads(one_d(), ID, P(1.0, 1.0), [])
    with pytest.raises(ValueError):
        sample_batch(make_rng(0), 5, 0)


def test_sample_batch_distinct():
    b = sample_batch(make_rng(0), 10, 4)
    assert len(set(b.tolist())) == 4


def test_classification_examples():
    d = ClassificationDataset([[1.0], [1.0]], [0.0, 1.0], lam=1e-12)
    assert clf_loss(d, ID, P(1.0, 0.0)) == pytest.approx(np.log(2))
    d1 = ClassificationDataset([[1.0]], [1.0], lam=1e-12)
    losses = [clf_loss(d1, ID, P(1.0, w)) for w in (1, 5, 20, 40)]
    assert all(a > b for a, b in zip(losses, losses[1:])) and losses[-1] < 1e-8


def test_classification_rejects_relu_and_bad_labels():
    d = ClassificationDataset([[1.0]], [1.0])
    with pytest.raises(ActivationError):
        clf_grad_M(d, RELU, P(1.0, 1.0))
    with pytest.raises(ActivationError):
        ClassificationObjective(d, RELU, Box(-1, 1), Box(-1, 1), 1)
    with pytest.raises(ValueError, match="row 1"):
        ClassificationDataset([[1.0], [2.0]], [1.0, 0.5])


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_gradients_match_fd(seed):
    rng = make_rng(seed)
    X = rng.standard_normal((7, 3))
    rd = RegressionDataset(X, rng.standard_normal(7), 0.1)
    cd = ClassificationDataset(X, (rng.random(7) < 0.5).astype(float), 0.1)
    p = LayeredParams(rng.standard_normal((3, 2)), rng.standard_normal(2))
    fw = lambda loss, d, act: fd_grad(lambda w: loss(d, act, LayeredParams(p.M, w)), p.w)
    fM = lambda loss, d, act: fd_grad(lambda M: loss(d, act, LayeredParams(M, p.w)), p.M)
    rel = lambda a, b: np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12)
    assert rel(reg_grad_w(rd, TANH, p), fw(reg_loss, rd, TANH)) < 1e-6
    assert rel(reg_subgrad_M(rd, TANH, p), fM(reg_loss, rd, TANH)) < 1e-6
    assert rel(clf_grad_w(cd, TANH, p), fw(clf_loss, cd, TANH)) < 1e-6
    assert rel(clf_grad_M(cd, TANH, p), fM(clf_loss, cd, TANH)) < 1e-6


def test_toy_examples():
    assert toy_f(1, 1) == pytest.approx(0.1)
    assert toy_f(0.01, 10) == pytest.approx(0.81001)
    H = toy_hessian(0.5, 0.5)
    assert np.allclose(H, [[0.7, -1], [-1, 0.5]])
    assert np.linalg.det(H) == pytest.approx(-0.65, abs=1e-12)
    assert toy_phi(1.0) == pytest.approx(0.1)
    assert toy_phi(0.05) == pytest.approx(0.25025)
    for M in (0.1, 0.5, 3.0, 10.0):
        assert toy_phi(M) == pytest.approx(0.1 * M * M)
    with pytest.raises(ValueError):
        toy_f(0.0, 1.0)


def test_toy_stochastic_gradient_unbiased():
    toy = ToyObjective(0.1)
    rng = make_rng(0)
    G = np.mean([toy.stoch_grads(np.array([[1.0]]), np.array([2.0]), toy.sample(rng, 1))[0][0, 0]
                 for _ in range(20000)])
    assert G == pytest.approx(toy.subgrad_M(np.array([[1.0]]), np.array([2.0]))[0, 0], abs=5e-3)


@pytest.mark.parametrize("C", [Box(-1.0, 2.0), FrobeniusBall(1.5), FrobeniusBall(0.5, center=np.ones((2, 3)))])
def test_projection_properties(C):
    rng = make_rng(11)
    for _ in range(1000):
        a, b = 3 * rng.standard_normal((2, 3)), 3 * rng.standard_normal((2, 3))
        pa, pb = C.project(a), C.project(b)
        assert C.contains(pa)
        assert np.allclose(C.project(pa), pa)
        assert np.linalg.norm(pa - pb) <= np.linalg.norm(a - b) * (1 + 1e-12)


def test_ball_projection_lands_on_boundary():
    B = FrobeniusBall(2.0)
    assert np.linalg.norm(B.project(np.full((2, 2), 10.0))) == pytest.approx(2.0)


def test_constants_examples():
    d, _, _ = make_synthetic_regression(0, N=16, m=4, n=3, lam=0.1)
    init = LayeredParams(0.5 * make_rng(0).standard_normal((4, 3)), np.zeros(3))
    obj = RegressionObjective(d, RELU, default_ball(init.M), default_ball(init.w), 3)
    c = estimate_constants(obj, 16, make_rng(1), with_rho=False)
    assert c.lam >= 0.1 and c.empirical and c.n_samples == 16
    toy = estimate_constants(ToyObjective(0.1), 64, make_rng(2))
    assert toy.lambda_phi is not None and toy.lambda_phi >= 0.05 - 1e-6
    quad = QuadraticHeadObjective(np.array([0.5, -0.2]), FrobeniusBall(2.0))
    cq = estimate_constants(quad, 16, make_rng(3), batch_size=1, with_rho=False)
    assert cq.lam == pytest.approx(1.0) and cq.sigma2 == 0.0


def test_constants_unbounded_rejected():
    quad = QuadraticHeadObjective(np.array([0.5]), FrobeniusBall(np.inf))
    with pytest.raises(ValueError):
        estimate_constants(quad, 4, make_rng(0))


def test_problem_constants_invariants():
    c = ProblemConstants(lam=0.5, L=2.0, sigma2=1.0, rho=1.0, rho_hat=2.0)
    assert c.L_phi == 2.0 * 1.5 / 0.5
    with pytest.raises(ValueError):
        ProblemConstants(lam=0.5, L=2.0, sigma2=1.0, rho=1.0, rho_hat=0.5)


def test_gradient_variance_full_batch_zero():
    d, _, _ = make_synthetic_regression(0, N=8, m=3, n=2)
    obj = RegressionObjective(d, RELU, FrobeniusBall(10), FrobeniusBall(10), 2)
    M, w = make_rng(0).standard_normal((3, 2)), np.ones(2)
    assert gradient_variance(obj, M, w, batch_size=8, rng=make_rng(1), n_draws=4) == pytest.approx(0, abs=1e-18)
