import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedabml.varinf import (
    NU_MAX,
    NU_MIN,
    AggregationStrategy,
    MeanFieldGaussian,
    aggregate,
    draw_noise,
    kl_diag,
    kl_grad_wrt_p,
    kl_grad_wrt_p_sampled,
    kl_grad_wrt_q,
    reparam_chain,
    sample,
)

G = MeanFieldGaussian


def random_gaussian(rng, d, spread=1.0):
    return G(rng.normal(0, spread, d), rng.uniform(-1.5, 1.0, d))


def kl_reference(q, p):
    # per-coordinate univariate formula, written out independently
    total = 0.0
    for mq, sq, mp, sp in zip(q.mean, np.exp(q.log_std), p.mean, np.exp(p.log_std)):
        total += math.log(sp / sq) + (sq**2 + (mq - mp) ** 2) / (2 * sp**2) - 0.5
    return total


# --- construction ---------------------------------------------------------


def test_log_std_is_clamped():
    q = G([0.0, 0.0], [-50.0, 50.0])
    assert q.log_std.tolist() == [NU_MIN, NU_MAX]


def test_dimension_mismatch_rejected():
    with pytest.raises(ValueError, match="length"):
        G([0.0, 1.0], [0.0])


def test_nonfinite_rejected():
    with pytest.raises(ValueError):
        G([np.nan], [0.0])


def test_parameters_are_read_only():
    q = G([1.0], [0.0])
    with pytest.raises(ValueError):
        q.mean[0] = 2.0


def test_record_round_trip_is_bitwise():
    q = random_gaussian(np.random.default_rng(0), 7)
    assert G.from_record(q.to_record()).equals(q)


def test_step_respects_clamp():
    q = G([0.0], [NU_MIN + 0.1])
    stepped = q.step([0.0], [100.0], lr=1.0)
    assert stepped.log_std[0] == NU_MIN


# --- sampling -------------------------------------------------------------


def test_sample_examples():
    q = G([0.0, 0.0], [0.0, 0.0])
    assert np.array_equal(sample(q, [1.0, -1.0]), [1.0, -1.0])
    q = G([1.0], [math.log(2.0)])
    assert sample(q, [0.5])[0] == pytest.approx(2.0, abs=1e-12)


def test_sample_stack_shape_and_dimension_check():
    q = G(np.zeros(3), np.zeros(3))
    noise = draw_noise(np.random.default_rng(1), 3, 4)
    assert sample(q, noise).shape == (4, 3)
    with pytest.raises(ValueError, match="dimension"):
        sample(q, np.zeros(2))


def test_sample_moments():
    q = G([1.0, -2.0], [math.log(0.5), math.log(3.0)])
    w = sample(q, draw_noise(np.random.default_rng(2), 2, 200_000))
    se_mean = q.std / math.sqrt(len(w))
    assert np.all(np.abs(w.mean(0) - q.mean) < 4 * se_mean)
    assert np.allclose(w.std(0), q.std, rtol=0.01)


# --- KL ---------------------------------------------------------------------


def test_kl_exact_values():
    q = G([0.3, -1.2], [0.1, -0.4])
    assert abs(kl_diag(q, q)) <= 1e-12
    assert abs(kl_diag(G([0.0], [0.0]), G([1.0], [0.0])) - 0.5) <= 1e-12
    # N(0,1) || N(0,4): log 2 + 1/8 - 1/2
    expected = math.log(2.0) + 1 / 8 - 0.5
    assert abs(kl_diag(G([0.0], [0.0]), G([0.0], [math.log(2.0)])) - expected) <= 1e-12
    assert expected == pytest.approx(0.3181, abs=1e-4)


def test_kl_matches_reference_formula():
    rng = np.random.default_rng(3)
    for _ in range(50):
        d = int(rng.integers(1, 21))
        q, p = random_gaussian(rng, d), random_gaussian(rng, d)
        assert kl_diag(q, p) == pytest.approx(kl_reference(q, p), rel=1e-12, abs=1e-12)


def test_kl_dimension_mismatch():
    with pytest.raises(ValueError, match="dimension"):
        kl_diag(G([0.0], [0.0]), G([0.0, 0.0], [0.0, 0.0]))


@settings(max_examples=60, deadline=None)
@given(
    st.lists(st.floats(-5, 5), min_size=1, max_size=6),
    st.lists(st.floats(-3, 2), min_size=1, max_size=6),
    st.floats(-5, 5),
    st.floats(-3, 2),
)
def test_kl_nonnegative_and_zero_only_on_equality(means, log_stds, shift, log_shift):
    d = min(len(means), len(log_stds))
    q = G(means[:d], log_stds[:d])
    p = G(np.array(means[:d]) + shift, np.array(log_stds[:d]) + log_shift)
    assert kl_diag(q, p) >= -1e-12
    assert abs(kl_diag(q, q)) <= 1e-12


def _fd(f, x, h=1e-6):
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def _rel_err(a, b):
    return np.max(np.abs(a - b) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(b))))


def test_kl_gradients_match_finite_differences():
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(100):
        d = int(rng.integers(1, 6))
        q, p = random_gaussian(rng, d), random_gaussian(rng, d)
        gqm, gqs = kl_grad_wrt_q(q, p)
        gpm, gps = kl_grad_wrt_p(q, p)
        fd = [
            _fd(lambda m: kl_diag(G(m, q.log_std), p), q.mean.copy()),
            _fd(lambda s: kl_diag(G(q.mean, s), p), q.log_std.copy()),
            _fd(lambda m: kl_diag(q, G(m, p.log_std)), p.mean.copy()),
            _fd(lambda s: kl_diag(q, G(p.mean, s)), p.log_std.copy()),
        ]
        for analytic, numeric in zip((gqm, gqs, gpm, gps), fd):
            worst = max(worst, _rel_err(analytic, numeric))
    assert worst <= 1e-5


def test_sampled_theta_gradient_is_unbiased():
    rng = np.random.default_rng(5)
    q, p = random_gaussian(rng, 4), random_gaussian(rng, 4)
    noise = draw_noise(rng, 4, 400_000)
    gm, gs = kl_grad_wrt_p_sampled(q, p, noise)
    em, es = kl_grad_wrt_p(q, p)
    assert np.allclose(gm, em, atol=0.02 * max(1.0, np.abs(em).max()))
    assert np.allclose(gs, es, atol=0.02 * max(1.0, np.abs(es).max()))


# --- reparameterization chain ---------------------------------------------


def test_reparam_chain_examples():
    q = G([0.0, 0.0], [0.0, math.log(2.0)])
    gm, gs = reparam_chain([1.0, 3.0], [0.5, -1.0], q)
    assert np.allclose(gm, [1.0, 3.0])
    assert np.allclose(gs, [0.5, -6.0])
    gm, gs = reparam_chain([1.0, 3.0], [0.5, -1.0], q, [1.0, 1.0], [2.0, 2.0])
    assert np.allclose(gm, [2.0, 4.0])
    assert np.allclose(gs, [2.5, -4.0])


def test_reparam_chain_matches_finite_differences():
    rng = np.random.default_rng(6)
    a = rng.normal(size=5)
    f = lambda w: float(np.sum(np.sin(w) * a))  # noqa: E731
    q = random_gaussian(rng, 5)
    eps = rng.normal(size=5)
    gm, gs = reparam_chain(np.cos(sample(q, eps)) * a, eps, q)
    assert _rel_err(gm, _fd(lambda m: f(sample(G(m, q.log_std), eps)), q.mean.copy())) < 1e-7
    assert _rel_err(gs, _fd(lambda s: f(sample(G(q.mean, s), eps)), q.log_std.copy())) < 1e-7


def test_reparam_chain_dimension_check():
    with pytest.raises(ValueError, match="dimension"):
        reparam_chain([1.0], [1.0, 2.0], G([0.0], [0.0]))


# --- aggregation ------------------------------------------------------------


def test_aggregation_hand_values():
    a, b = G([0.0], [0.0]), G([2.0], [0.0])
    prod = aggregate([a, b], strategy="product")
    assert abs(prod.mean[0] - 1.0) <= 1e-12 and abs(prod.var[0] - 1.0) <= 1e-12
    mean = aggregate([a, b], strategy="mean")
    assert abs(mean.mean[0] - 1.0) <= 1e-12 and abs(mean.var[0] - 1.0) <= 1e-12
    mix = aggregate([a, b], strategy="mixture")
    assert abs(mix.mean[0] - 1.0) <= 1e-12 and abs(mix.var[0] - 2.0) <= 1e-12
    orc = aggregate([G([0.0], [0.0]), G([2.0], [math.log(4.0)])], strategy="oracle")
    assert abs(orc.mean[0] - 1.0) <= 1e-12 and abs(orc.std[0] - 2.0) <= 1e-12


def test_product_with_unequal_precisions():
    # N(0, 1) and N(3, 1/4), uniform weights: precision 2.5, mean (0*0.5 + 3*2)/2.5
    a, b = G([0.0], [0.0]), G([3.0], [math.log(0.5)])
    prod = aggregate([a, b], strategy=AggregationStrategy.PRODUCT)
    assert abs(prod.var[0] - 1 / 2.5) <= 1e-12
    assert abs(prod.mean[0] - 2.4) <= 1e-12


def test_product_precision_is_weighted_precision():
    rng = np.random.default_rng(7)
    members = [random_gaussian(rng, 6) for _ in range(5)]
    pi = rng.dirichlet(np.ones(5))
    pi /= pi.sum()
    prod = aggregate(members, pi, "product")
    expected = sum(w / m.var for w, m in zip(pi, members))
    assert np.max(np.abs(1.0 / prod.var - expected) / expected) <= 1e-12


def test_mixture_matches_sampled_moments():
    rng = np.random.default_rng(8)
    members = [G([0.0, 1.0], [0.0, -1.0]), G([3.0, -1.0], [math.log(0.5), 0.5]), G([-1.0, 0.0], [0.3, 0.0])]
    pi = np.array([0.2, 0.5, 0.3])
    mix = aggregate(members, pi, "mixture")
    n = 1_000_000
    comp = rng.choice(3, size=n, p=pi)
    means = np.stack([m.mean for m in members])[comp]
    stds = np.stack([m.std for m in members])[comp]
    x = means + stds * rng.standard_normal((n, 2))
    emp_mean, emp_var = x.mean(0), x.var(0)
    se_mean = np.sqrt(emp_var / n)
    fourth = ((x - emp_mean) ** 4).mean(0)
    se_var = np.sqrt((fourth - emp_var**2) / n)
    assert np.all(np.abs(mix.mean - emp_mean) < 4 * se_mean)
    assert np.all(np.abs(mix.var - emp_var) < 4 * se_var)


@pytest.mark.parametrize("strategy", list(AggregationStrategy))
def test_identical_members_are_a_fixed_point(strategy):
    q = random_gaussian(np.random.default_rng(9), 11)
    out = aggregate([q, G(q.mean.copy(), q.log_std.copy()), q], strategy=strategy)
    assert out.equals(q)


@pytest.mark.parametrize("strategy", list(AggregationStrategy))
def test_aggregation_is_permutation_invariant(strategy):
    rng = np.random.default_rng(10)
    members = [random_gaussian(rng, 4) for _ in range(4)]
    pi = np.array([0.1, 0.2, 0.3, 0.4])
    perm = [2, 0, 3, 1]
    a = aggregate(members, pi, strategy)
    b = aggregate([members[i] for i in perm], pi[perm], strategy)
    assert np.allclose(a.mean, b.mean, rtol=1e-12, atol=1e-12)
    assert np.allclose(a.log_std, b.log_std, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("strategy", list(AggregationStrategy))
def test_single_member_is_identity(strategy):
    q = random_gaussian(np.random.default_rng(11), 3)
    assert aggregate([q], strategy=strategy).equals(q)


def test_aggregation_input_validation():
    q = G([0.0], [0.0])
    with pytest.raises(ValueError, match="empty"):
        aggregate([])
    with pytest.raises(ValueError, match="sum to 1"):
        aggregate([q, q], [0.5, 0.6])
    with pytest.raises(ValueError, match="sum to 1"):
        aggregate([q, q], [1.5, -0.5])
    with pytest.raises(ValueError, match="dimension"):
        aggregate([q, G([0.0, 0.0], [0.0, 0.0])])
    with pytest.raises(ValueError):
        aggregate([q], strategy="median")


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 5), st.integers(1, 4))
def test_aggregated_mean_lies_in_member_hull(seed, n, d):
    rng = np.random.default_rng(seed)
    members = [random_gaussian(rng, d) for _ in range(n)]
    means = np.stack([m.mean for m in members])
    for strategy in AggregationStrategy:
        out = aggregate(members, strategy=strategy)
        assert np.all(out.mean >= means.min(0) - 1e-9)
        assert np.all(out.mean <= means.max(0) + 1e-9)
        assert np.all(np.isfinite(out.log_std))
