import numpy as np
import pytest
from sklearn.metrics import adjusted_rand_score

from trendmix.em import (
    COLLAPSED,
    EmConfig,
    SpuriousSolution,
    detect_spurious,
    e_step,
    em_fit,
    m_step_sigma,
    m_step_theta,
    m_step_weights,
    q_tilde,
    spurious_reason,
)
from trendmix.growth import BivariateCurve, LogisticParams, curve_means, logistic_values
from trendmix.mixture import Component, Covariance2, MixtureModel, Posteriors, block_log_score, sample_block
from trendmix.pipeline import Block
from trendmix.selection import random_init

from synthetic import mixture_dataset, random_model, recovery_dataset, recovery_truth

LP = LogisticParams
CURVE = BivariateCurve(LP(500.0, 20.0, 8.0, 1.0), LP(40.0, 30.0, 9.0, 1.0))
UNIT = Covariance2(1.0, 1.0, 0.0)


def one_hot(labels, K):
    m = np.zeros((len(labels), K))
    m[np.arange(len(labels)), labels] = 1.0
    return m


def exact_blocks(curve, sizes, start=0.0):
    out = []
    for i, n in enumerate(sizes):
        t = np.linspace(start, 1.0, n)
        out.append(Block(f"x{i}", t, curve_means(t, curve)))
    return out


# --- E-step -----------------------------------------------------------------------


def test_e_step_single_component():
    blocks = [sample_block(MixtureModel((1.0,), (Component(CURVE, UNIT),)), 5, seed=s, region_id=str(s))[0] for s in range(3)]
    model = MixtureModel((1.0,), (Component(CURVE, UNIT),))
    post, ll = e_step(blocks, model)
    np.testing.assert_array_equal(post.matrix, np.ones((3, 1)))
    assert ll == pytest.approx(sum(block_log_score(b, 1.0, model.components[0]) for b in blocks), rel=1e-14)


def test_e_step_weight_exponent():
    comp = Component(CURVE, UNIT)
    model = MixtureModel((0.3, 0.7), (comp, comp))
    block = Block("r", [0.1, 0.2], [[3.0, 1.0], [4.0, 2.0]])
    post, _ = e_step([block], model)
    np.testing.assert_allclose(post.matrix[0], [0.09 / 0.58, 0.49 / 0.58], rtol=0, atol=1e-12)


def test_e_step_well_separated_one_hot():
    blocks, labels = recovery_dataset(0, per_component=3)
    post, _ = e_step(blocks, recovery_truth())
    np.testing.assert_allclose(post.matrix, one_hot(labels, 3), atol=1e-6)


# --- M-step: weights ---------------------------------------------------------------


def weights_for(sizes, matrix):
    blocks = [Block(str(i), np.arange(n, dtype=float), np.zeros((n, 2))) for i, n in enumerate(sizes)]
    return m_step_weights(Posteriors(np.asarray(matrix, float), [b.region_id for b in blocks]), blocks)


def test_weights_examples():
    np.testing.assert_allclose(weights_for([5, 5], [[1, 0], [0, 1]]), [0.5, 0.5], rtol=1e-15)
    np.testing.assert_allclose(weights_for([10, 30], [[1, 0], [0, 1]]), [0.25, 0.75], rtol=1e-15)
    np.testing.assert_allclose(weights_for([3, 7, 2], np.full((3, 3), 1 / 3)), [1 / 3] * 3, rtol=1e-15)


def test_weights_sum_to_one():
    rng = np.random.default_rng(0)
    m = rng.dirichlet(np.ones(4), size=6)
    w = weights_for(rng.integers(1, 50, size=6), m)
    assert w.sum() == pytest.approx(1.0, abs=1e-15)


# --- M-step: covariances -----------------------------------------------------------


def test_sigma_zero_residuals_is_spurious():
    blocks = exact_blocks(CURVE, [10, 12])
    with pytest.raises(SpuriousSolution):
        m_step_sigma(Posteriors(np.ones((2, 1)), ["x0", "x1"]), blocks, [CURVE])


def test_sigma_singular_is_spurious():
    t = np.array([0.2, 0.6])
    mu = curve_means(t, CURVE)
    block = Block("r", t, mu + np.array([[1.0, 0.0], [-1.0, 0.0]]))
    with pytest.raises(SpuriousSolution, match=COLLAPSED):
        m_step_sigma(Posteriors(np.ones((1, 1)), ["r"]), [block], [CURVE])


def test_sigma_k1_is_sample_residual_covariance():
    model = MixtureModel((1.0,), (Component(CURVE, Covariance2.from_sd(5.0, 1.0, 0.5)),))
    blocks = [sample_block(model, 20, seed=s, region_id=str(s))[0] for s in range(4)]
    resid = np.concatenate([b.obs - curve_means(b.times, CURVE) for b in blocks])
    (sigma,) = m_step_sigma(Posteriors(np.ones((4, 1)), [str(s) for s in range(4)]), blocks, [CURVE])
    np.testing.assert_allclose(sigma.matrix, resid.T @ resid / len(resid), rtol=1e-12)


def test_sigma_uses_block_weights():
    t = np.array([0.0, 0.5, 1.0])
    mu = curve_means(t, CURVE)
    b1 = Block("a", t, mu + [[1, 0.5], [-1, 0.2], [2, -1]])
    b2 = Block("b", t, mu + [[3, 1], [0, 2], [-2, 1]])
    tau = np.array([[0.25], [0.75]])
    (sigma,) = m_step_sigma(Posteriors(tau, ["a", "b"]), [b1, b2], [CURVE])
    r1, r2 = b1.obs - mu, b2.obs - mu
    expected = (0.25 * r1.T @ r1 + 0.75 * r2.T @ r2) / (3 * 0.25 + 3 * 0.75)
    np.testing.assert_allclose(sigma.matrix, expected, rtol=1e-12)


# --- M-step: curves ----------------------------------------------------------------


def test_theta_noise_free_at_truth():
    blocks = exact_blocks(CURVE, [30])
    post = Posteriors(np.ones((1, 1)), ["x0"])
    (curve,) = m_step_theta(post, blocks, [UNIT], [CURVE])
    np.testing.assert_allclose(curve.to_array(), CURVE.to_array(), rtol=1e-10)
    assert q_tilde(post, blocks, 0, curve, UNIT) == pytest.approx(0.0, abs=1e-20)


def test_theta_descent():
    rng = np.random.default_rng(4)
    for seed in range(10):
        model = random_model(rng, 2)
        blocks, _ = mixture_dataset(model, seed, B=6, n_range=(10, 30))
        post = Posteriors(rng.dirichlet(np.ones(2), size=6), [b.region_id for b in blocks])
        init = [c.curve for c in random_model(rng, 2).components]
        sigmas = [c.sigma for c in model.components]
        new = m_step_theta(post, blocks, sigmas, init)
        for k in range(2):
            assert q_tilde(post, blocks, k, new[k], sigmas[k]) <= q_tilde(post, blocks, k, init[k], sigmas[k])


def grid_refined_fit(t, y, lo, hi, levels=120, points=21, keep=5):
    """Least squares for one coordinate by zooming grid search over (log b, log c, log gamma).

    The capacity enters linearly and is profiled out in closed form.
    """
    lo, hi = np.array(lo, float), np.array(hi, float)
    best = None
    for _ in range(levels):
        axes = [np.linspace(l, h, points) for l, h in zip(lo, hi)]
        g = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
        shape = logistic_values(t[None, :], 1.0, np.exp(g[:, :1]), np.exp(g[:, 1:2]), np.exp(g[:, 2:3]))
        a = (shape @ y) / np.einsum("ij,ij->i", shape, shape)
        sse = np.sum((y[None, :] - a[:, None] * shape) ** 2, axis=1)
        i = int(np.argmin(sse))
        best = (a[i], *np.exp(g[i]))
        step = (hi - lo) / (points - 1)
        lo, hi = g[i] - keep * step, g[i] + keep * step
    return np.array(best)


def test_theta_matches_independent_least_squares():
    truth = BivariateCurve(LP(300.0, 25.0, 9.0, 1.3), LP(20.0, 40.0, 10.0, 0.9))
    t = np.linspace(0, 1, 50)
    rng = np.random.default_rng(0)
    y = curve_means(t, truth) + rng.normal(size=(50, 2)) * [3.0, 0.2]
    block = Block("r", t, y)
    init = BivariateCurve(LP(250.0, 15.0, 7.0, 1.0), LP(25.0, 30.0, 8.0, 1.0))
    (fit,) = m_step_theta(Posteriors(np.ones((1, 1)), ["r"]), [block], [UNIT], [init])
    box = ([np.log(2.0), np.log(2.0), np.log(0.2)], [np.log(200.0), np.log(30.0), np.log(5.0)])
    for j, params in enumerate((fit.cases, fit.deaths)):
        oracle = grid_refined_fit(t, y[:, j], *box)
        np.testing.assert_allclose(params.to_array(), oracle, rtol=1e-4)


# --- spurious detection ---------------------------------------------------------------


def healthy_model():
    return MixtureModel((0.5, 0.5), (Component(CURVE, Covariance2(1.0, 2.0, 0.1)), Component(CURVE, Covariance2(3.0, 1.0, 0.0))))


def test_detect_spurious_collapsed_covariance():
    m = MixtureModel((0.5, 0.5), (Component(CURVE, Covariance2(1.0, 1e-12, 0.0)), Component(CURVE, Covariance2(2.0, 1.0, 0.0))))
    post = Posteriors(np.full((4, 2), 0.5), list("abcd"))
    assert detect_spurious(m, post, None)
    assert spurious_reason(m, post) == COLLAPSED


def test_detect_spurious_healthy():
    post = Posteriors(np.full((4, 2), 0.5), list("abcd"))
    assert not detect_spurious(healthy_model(), post, None)


def test_detect_spurious_low_mass():
    post = Posteriors(np.array([[0.9, 0.1], [0.9, 0.1], [0.9, 0.1], [1.0, 0.0]]), list("abcd"))
    assert detect_spurious(healthy_model(), post, None)


# --- full EM ------------------------------------------------------------------------


def test_single_component_recovery():
    truth_curve = BivariateCurve(LP(600.0, 30.0, 8.0, 1.5), LP(50.0, 40.0, 9.0, 1.2))
    truth = MixtureModel((1.0,), (Component(truth_curve, Covariance2.from_sd(3.0, 0.25, 0.5)),))
    blocks = [sample_block(truth, 50, np.linspace(0, 1, 50), seed=s, region_id=str(s))[0] for s in range(8)]
    fit = em_fit(blocks, 1, random_init(blocks, 1, 0))
    assert fit.trace.termination == "converged"
    np.testing.assert_allclose(fit.model.components[0].curve.to_array(), truth_curve.to_array(), rtol=0.05)
    # the noise actually drawn, not the nominal covariance, is what the fit can recover
    resid = np.concatenate([b.obs - curve_means(b.times, truth_curve) for b in blocks])
    drawn = Covariance2.from_matrix(resid.T @ resid / len(resid))
    np.testing.assert_allclose(fit.model.components[0].sigma.sd, drawn.sd, rtol=0.05)


def test_fixed_point_restart():
    blocks, _ = recovery_dataset(1, per_component=4)
    first = em_fit(blocks, 3, random_init(blocks, 3, 0), EmConfig(tol=1e-10))
    assert not first.spurious
    again = em_fit(blocks, 3, first.model, EmConfig(tol=1e-6))
    assert again.trace.iterations <= 2
    assert again.loglik == pytest.approx(first.loglik, rel=1e-8)


def test_two_groups_exact_labels():
    truth = recovery_truth()
    two = MixtureModel((0.5, 0.5), truth.components[::2])
    rng = np.random.default_rng(5)
    blocks, labels = [], []
    for k in (0, 1):
        for j in range(6):
            blocks.append(sample_block(two, 40, seed=int(rng.integers(2**32)), region_id=f"{k}{j}", label=k)[0])
            labels.append(k)
    best = None
    for s in range(5):
        fit = em_fit(blocks, 2, random_init(blocks, 2, s))
        if not fit.spurious and (best is None or fit.loglik > best.loglik):
            best = fit
    assert adjusted_rand_score(labels, [lab for _, lab, _ in best.assignments]) == 1.0
    assert len(best.assignments) == len(blocks)


def test_trace_is_nondecreasing():
    rng = np.random.default_rng(8)
    for seed in range(4):
        blocks, _ = mixture_dataset(random_model(rng, 2), seed, B=10)
        fit = em_fit(blocks, 2, random_init(blocks, 2, seed))
        assert np.all(np.diff(fit.trace.loglik_per_iter) >= -1e-8)


def test_permutation_equivariance():
    blocks, _ = recovery_dataset(2, per_component=4)
    init = random_init(blocks, 3, 1)
    order = [2, 0, 1]
    a = em_fit(blocks, 3, init)
    b = em_fit(blocks, 3, init.permuted(order))
    assert b.loglik == pytest.approx(a.loglik, rel=1e-10)
    for i, j in enumerate(order):
        np.testing.assert_allclose(b.model.components[i].curve.to_array(), a.model.components[j].curve.to_array(), rtol=1e-6)
        np.testing.assert_allclose(b.posteriors.matrix[:, i], a.posteriors.matrix[:, j], atol=1e-8)


def test_deterministic_trace():
    blocks, _ = recovery_dataset(3, per_component=3)
    init = random_init(blocks, 3, 4)
    a = em_fit(blocks, 3, init)
    b = em_fit(blocks, 3, init)
    assert a.trace.loglik_per_iter == b.trace.loglik_per_iter
    assert a.model == b.model


def test_init_with_wrong_k_rejected():
    blocks, _ = recovery_dataset(0, per_component=2)
    with pytest.raises(ValueError):
        em_fit(blocks, 2, random_init(blocks, 3, 0))


def test_collapse_is_reported_spurious():
    # a zero-noise pair pulled into its own component collapses that covariance
    truth = recovery_truth()
    noisy = [sample_block(truth, 30, seed=s, region_id=f"n{s}", label=0)[0] for s in range(4)]
    pair = exact_blocks(truth.components[2].curve, [30, 30])
    init = MixtureModel((0.5, 0.5), (truth.components[0], truth.components[2]))
    fit = em_fit(noisy + pair, 2, init)
    assert fit.spurious
    assert fit.trace.reason == COLLAPSED
    # the last valid model is kept
    assert fit.model.components[1].sigma.eigenvalues()[0] > 0


def test_config_validation():
    with pytest.raises(ValueError):
        EmConfig(tol=0)
    with pytest.raises(ValueError):
        EmConfig(max_iter=-1)
