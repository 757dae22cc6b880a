import itertools

import numpy as np
import pytest
from scipy.special import expit

from recipeforge import mask_diffusion as md
from recipeforge import netcore
from recipeforge.corpus import Corpus, IngredientVocabulary, Recipe
from recipeforge.errors import DataError
from recipeforge.mask_diffusion import (MaskDiffusionModel, NoiseSchedule, _kl_bernoulli,
                                        _posterior_prob, _reverse_prob, linear_schedule)


def make_model(schedule, K, seed=0, width=8):
    net = netcore.init_network([K + 3, width, K], seed=seed)
    return MaskDiffusionModel(schedule=schedule, net=net, K=K)


# ---------------------------------------------------------------------------
# kernels

def test_forward_step_kernel_values():
    assert md.forward_step_kernel(1, 0.0) == 1.0       # no-noise identity
    assert md.forward_step_kernel(1, 1.0) == 0.5       # full randomization
    assert abs(md.forward_step_kernel(0, 0.2) - 0.1) < 1e-15
    with pytest.raises(ValueError):
        md.forward_step_kernel(1, 1.5)


def test_schedule_invariants():
    sched = linear_schedule(10, 0.02, 0.5)
    assert sched.T == 10
    assert sched.alpha_bar[0] == 1.0
    assert np.all(np.diff(sched.alpha_bar) < 0)
    with pytest.raises(ValueError):
        NoiseSchedule(betas=np.array([0.5, 0.0]))
    with pytest.raises(ValueError):
        NoiseSchedule(betas=np.array([1.0, 1.0]))  # alpha_bar stalls at 0


def test_marginal_kernel_t0_returns_x0():
    sched = linear_schedule(5)
    assert md.marginal_kernel(1, 0, sched) == 1.0
    assert md.marginal_kernel(0, 0, sched) == 0.0


def test_marginal_kernel_two_step_enumeration():
    # beta = (0.5, 0.5), x0 = 1: enumerate the chain over x1
    sched = NoiseSchedule(betas=np.array([0.5, 0.5]))
    p = 0.0
    for x1 in (0, 1):
        p_x1 = md.forward_step_kernel(1, 0.5) if x1 == 1 else 1 - md.forward_step_kernel(1, 0.5)
        p += p_x1 * md.forward_step_kernel(x1, 0.5)
    got = md.marginal_kernel(1, 2, sched)
    assert abs(got - p) < 1e-15
    assert abs(got - 0.625) < 1e-15


def test_marginal_kernel_stationary_limit():
    sched = NoiseSchedule(betas=np.full(200, 0.2))
    assert abs(md.marginal_kernel(1, 200, sched) - 0.5) < 1e-15
    assert abs(md.marginal_kernel(0, 200, sched) - 0.5) < 1e-15


def test_marginal_kernel_range_check():
    sched = linear_schedule(5)
    with pytest.raises(ValueError):
        md.marginal_kernel(1, 6, sched)


def test_kernel_consistency_identity():
    # marginal(x0, t) = sum_u step(u, beta_t) P(x_{t-1}=u | x0), exactly
    rng = np.random.default_rng(0)
    for _ in range(200):
        T = int(rng.integers(2, 12))
        sched = NoiseSchedule(betas=rng.uniform(0.01, 0.99, T))
        t = int(rng.integers(1, T + 1))
        x0 = int(rng.integers(0, 2))
        prev1 = md.marginal_kernel(x0, t - 1, sched)
        composed = prev1 * md.forward_step_kernel(1, sched.betas[t - 1]) \
            + (1 - prev1) * md.forward_step_kernel(0, sched.betas[t - 1])
        assert abs(composed - md.marginal_kernel(x0, t, sched)) < 1e-12


# ---------------------------------------------------------------------------
# posterior

def brute_posterior(x_t, x0, t, sched):
    # normalize P(x_t | x_{t-1}) P(x_{t-1} | x0) over x_{t-1} in {0, 1}
    probs = {}
    for x_prev in (0, 1):
        like = md.forward_step_kernel(x_prev, sched.betas[t - 1])
        like = like if x_t == 1 else 1 - like
        prior = md.marginal_kernel(x0, t - 1, sched)
        prior = prior if x_prev == 1 else 1 - prior
        probs[x_prev] = like * prior
    z = probs[0] + probs[1]
    return probs[1] / z


def test_posterior_matches_brute_force_enumeration():
    sched = NoiseSchedule(betas=np.array([0.5, 0.5]))
    got = md.posterior(1, 1, 2, sched)
    assert abs(got - brute_posterior(1, 1, 2, sched)) < 1e-12
    assert abs(got - 0.9) < 1e-12
    rng = np.random.default_rng(1)
    for _ in range(100):
        T = int(rng.integers(2, 10))
        sched = NoiseSchedule(betas=rng.uniform(0.01, 0.99, T))
        t = int(rng.integers(2, T + 1))
        x_t, x0 = int(rng.integers(0, 2)), int(rng.integers(0, 2))
        assert abs(md.posterior(x_t, x0, t, sched) - brute_posterior(x_t, x0, t, sched)) < 1e-12


def test_posterior_normalization():
    rng = np.random.default_rng(2)
    for _ in range(100):
        T = int(rng.integers(2, 10))
        sched = NoiseSchedule(betas=rng.uniform(0.01, 0.99, T))
        t = int(rng.integers(2, T + 1))
        beta, ab = sched.betas[t - 1], sched.alpha_bar[t - 1]
        for x_t, x0 in itertools.product((0, 1), repeat=2):
            like1 = md.forward_step_kernel(1, beta)
            like0 = md.forward_step_kernel(0, beta)
            l1 = like1 if x_t == 1 else 1 - like1
            l0 = like0 if x_t == 1 else 1 - like0
            m = md.marginal_kernel(x0, t - 1, sched)
            p1 = l1 * m / (l1 * m + l0 * (1 - m))
            assert abs(p1 + (l0 * (1 - m)) / (l1 * m + l0 * (1 - m)) - 1.0) < 1e-12
            assert abs(md.posterior(x_t, x0, t, sched) - p1) < 1e-12


def test_posterior_zero_beta_is_point_mass():
    # the deterministic-step limit of the posterior formula
    for x_t in (0, 1):
        for x0 in (0, 1):
            assert _posterior_prob(x_t, x0, 0.0, 0.7) == float(x_t)


def test_posterior_tiny_beta_continuity():
    sched = NoiseSchedule(betas=np.array([1e-9, 1e-9]))
    for b in (0, 1):
        assert abs(md.posterior(b, b, 2, sched) - b) < 1e-6


def test_posterior_range_check():
    sched = linear_schedule(5)
    with pytest.raises(ValueError):
        md.posterior(1, 1, 1, sched)
    with pytest.raises(ValueError):
        md.posterior(1, 1, 6, sched)


def test_reverse_prob_reduces_to_p_hat_at_t1():
    # alpha_bar_prev = 1: reconstruction distribution is Bern(p_hat)
    for x_t in (0.0, 1.0):
        for p_hat in (0.1, 0.5, 0.93):
            assert abs(_reverse_prob(x_t, p_hat, 0.02, 1.0) - p_hat) < 1e-12


# ---------------------------------------------------------------------------
# ELBO

def enumerate_negative_elbo(model, x0):
    """Exact negative ELBO by summation over all latent paths."""
    sched = model.schedule
    T = sched.T

    def p_hat(x_t, t):
        inp = md._model_inputs(np.array([[float(x_t)]]), np.array([t]), sched)
        return float(np.clip(expit(netcore.forward(model.net, inp))[0, 0], md._PCLIP, 1 - md._PCLIP))

    def q_step(x_t, x_prev, beta):
        p1 = md.forward_step_kernel(x_prev, beta)
        return p1 if x_t == 1 else 1 - p1

    def p_rev(x_prev, x_t, t):
        pi = _reverse_prob(float(x_t), p_hat(x_t, t), sched.betas[t - 1], sched.alpha_bar[t - 1])
        return pi if x_prev == 1 else 1 - pi

    total = 0.0
    for path in itertools.product((0, 1), repeat=T):
        states = (x0,) + path
        q = 1.0
        for t in range(1, T + 1):
            q *= q_step(states[t], states[t - 1], sched.betas[t - 1])
        val = -np.log(0.5)
        for t in range(1, T + 1):
            val -= np.log(p_rev(states[t - 1], states[t], t))
            val += np.log(q_step(states[t], states[t - 1], sched.betas[t - 1]))
        total += q * val
    return total


def test_elbo_matches_path_enumeration_toy():
    sched = NoiseSchedule(betas=np.array([0.3, 0.6]))
    model = make_model(sched, K=1, seed=42)
    for x0 in (0, 1):
        exact = enumerate_negative_elbo(model, x0)
        draws = md.elbo_estimates(model, np.array([x0]), seed=1, draws=30000)
        se = draws.std() / np.sqrt(draws.size)
        assert abs(draws.mean() - exact) < 4 * se + 1e-9


def test_elbo_near_zero_for_saturated_delta_model():
    sched = linear_schedule(8, 0.02, 0.3)
    model = make_model(sched, K=4, seed=3)
    for w in model.net.weights:
        w[:] = 0.0
    model.net.biases[-1][:] = 30.0  # denoiser pinned at x0 = all-ones
    loss = md.elbo_loss(model, np.ones(4), seed=0, draws=500)
    # only the constant terminal-prior KL remains; every per-step KL
    # term vanishes when the denoiser matches x0 exactly
    x0 = np.ones((1, 4))
    qT = sched.alpha_bar[-1] * x0 + (1 - sched.alpha_bar[-1]) / 2
    prior = float(_kl_bernoulli(qT, np.full_like(qT, 0.5)).sum())
    assert 0.0 <= loss - prior < 1e-5


def test_elbo_positive_for_random_model():
    sched = linear_schedule(10)
    model = make_model(sched, K=5, seed=9)
    assert md.elbo_loss(model, np.array([1, 0, 1, 1, 0]), seed=2, draws=200) > 0


def test_elbo_rejects_wrong_length():
    model = make_model(linear_schedule(5), K=3)
    with pytest.raises(ValueError):
        md.elbo_loss(model, np.ones(4), seed=0)


def test_elbo_gradient_matches_finite_differences():
    sched = linear_schedule(10)
    K = 5
    net = netcore.init_network([K + 3, 8, K], seed=3)
    model = MaskDiffusionModel(schedule=sched, net=net, K=K)
    rng = np.random.default_rng(0)
    x0 = (rng.random((4, K)) < 0.5).astype(float)
    t = rng.integers(1, 11, size=4)
    ab_t = sched.alpha_bar[t][:, None]
    x_t = (rng.random(x0.shape) < ab_t * x0 + (1 - ab_t) / 2).astype(float)
    inputs = md._model_inputs(x_t, t, sched)
    beta_t = sched.betas[t - 1][:, None]
    ab_prev = sched.alpha_bar[t - 1][:, None]
    pi1 = _posterior_prob(x_t, 1.0, beta_t, ab_prev)
    pi0 = _posterior_prob(x_t, 0.0, beta_t, ab_prev)
    q_true = _posterior_prob(x_t, x0, beta_t, ab_prev)

    def loss_of(net):
        s = np.clip(expit(netcore.forward(net, inputs)), md._PCLIP, 1 - md._PCLIP)
        pi = np.clip(s * pi1 + (1 - s) * pi0, md._PCLIP, 1 - md._PCLIP)
        return float(_kl_bernoulli(q_true, pi).sum() * sched.T / 4)

    s = np.clip(expit(netcore.forward(net, inputs)), md._PCLIP, 1 - md._PCLIP)
    pi = np.clip(s * pi1 + (1 - s) * pi0, md._PCLIP, 1 - md._PCLIP)
    dkl = -q_true / pi + (1 - q_true) / (1 - pi)
    cot = dkl * (pi1 - pi0) * s * (1 - s) * (sched.T / 4)
    grads = netcore.gradient(net, inputs, cot)
    flat = np.concatenate([np.concatenate([dw.ravel(), db.ravel()]) for dw, db in grads])
    theta = netcore._flatten_params(net)
    h = 1e-6
    worst = 0.0
    for i in np.random.default_rng(1).choice(theta.size, 30, replace=False):
        tp = theta.copy(); tp[i] += h
        netcore._write_params(net, tp)
        fp = loss_of(net)
        tm = theta.copy(); tm[i] -= h
        netcore._write_params(net, tm)
        fm = loss_of(net)
        num = (fp - fm) / (2 * h)
        worst = max(worst, abs(num - flat[i]) / (abs(num) + abs(flat[i]) + 1e-12))
    netcore._write_params(net, theta)
    assert worst < 1e-4


# ---------------------------------------------------------------------------
# training and sampling

def delta_corpus(mask_bits, n=240):
    K = len(mask_bits)
    vocab = IngredientVocabulary.from_ids([f"i{j:02d}" for j in range(K)])
    w = np.asarray(mask_bits, dtype=float) * 100.0
    recipes = [Recipe.from_weights(w) for _ in range(n)]
    return Corpus(vocabulary=vocab, recipes=recipes, splits=["train"] * n)


def test_train_delta_recovery_and_determinism():
    corpus = delta_corpus([1, 0, 1, 1, 0, 0])
    sched = linear_schedule(40, 0.02, 0.3)
    cfg = netcore.TrainConfig(steps=4000, batch_size=32, learning_rate=3e-3,
                              hidden_width=16, hidden_depth=2, val_interval=4000)
    model = md.train_mask_model(corpus, sched, cfg, seed=5)
    assert model.history[-1][1] < model.history[0][1]  # val -ELBO decreased
    target = np.array([1, 0, 1, 1, 0, 0], dtype=np.uint8)
    samples = md.sample_masks(model, 2000, seed=8)
    hit = (samples == target).all(axis=1).mean()
    assert hit >= 0.99
    # determinism of training and sampling
    model2 = md.train_mask_model(corpus, sched, cfg, seed=5)
    for a, b in zip(model.net.weights, model2.net.weights):
        np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(md.sample_mask(model, 123), md.sample_mask(model, 123))


def test_sampling_varies_with_seed_for_diffuse_model():
    model = make_model(linear_schedule(10), K=8, seed=21)
    assert not np.array_equal(md.sample_masks(model, 50, seed=1),
                              md.sample_masks(model, 50, seed=2))


def test_train_two_equiprobable_masks():
    K = 6
    vocab = IngredientVocabulary.from_ids([f"i{j}" for j in range(K)])
    a = np.array([1, 1, 1, 0, 0, 0], dtype=float) * 80
    b = np.array([0, 0, 0, 1, 1, 1], dtype=float) * 80
    recipes = [Recipe.from_weights(a if i % 2 == 0 else b) for i in range(400)]
    corpus = Corpus(vocabulary=vocab, recipes=recipes, splits=["train"] * 400)
    sched = linear_schedule(40, 0.02, 0.3)
    cfg = netcore.TrainConfig(steps=20000, batch_size=32, learning_rate=2e-3,
                              final_learning_rate=5e-5, ema_decay=0.999,
                              hidden_width=32, hidden_depth=2, val_interval=20000)
    model = md.train_mask_model(corpus, sched, cfg, seed=6)
    samples = md.sample_masks(model, 5000, seed=11)
    fa = (samples == (a > 0).astype(np.uint8)).all(axis=1).mean()
    fb = (samples == (b > 0).astype(np.uint8)).all(axis=1).mean()
    assert abs(fa - 0.5) < 0.03
    assert abs(fb - 0.5) < 0.03


def test_train_rejects_empty_corpus():
    vocab = IngredientVocabulary.from_ids(["a", "b"])
    corpus = Corpus(vocabulary=vocab, recipes=[], splits=[])
    with pytest.raises(DataError):
        md.train_mask_model(corpus, linear_schedule(10), netcore.TrainConfig(steps=10), seed=0)


def test_sample_t0_returns_prior_draw():
    sched = linear_schedule(0)
    model = make_model(sched, K=8, seed=1)
    samples = md.sample_masks(model, 4000, seed=3, discard_empty=False)
    assert abs(samples.mean() - 0.5) < 0.02
    np.testing.assert_array_equal(samples, md.sample_masks(model, 4000, seed=3, discard_empty=False))


def test_sample_threads_do_not_change_output():
    sched = linear_schedule(10)
    model = make_model(sched, K=5, seed=2)
    a = md.sample_masks(model, 600, seed=4, chunk_size=128, threads=1)
    b = md.sample_masks(model, 600, seed=4, chunk_size=128, threads=4)
    np.testing.assert_array_equal(a, b)


def test_sample_discards_empty_masks():
    sched = linear_schedule(0)
    model = make_model(sched, K=2, seed=3)
    samples = md.sample_masks(model, 3000, seed=5)  # prior would emit 25% empties
    assert samples.any(axis=1).all()


def test_checkpoint_round_trip(tmp_path):
    corpus = delta_corpus([1, 0, 1])
    sched = linear_schedule(6, 0.05, 0.4)
    cfg = netcore.TrainConfig(steps=50, batch_size=16, hidden_width=8, hidden_depth=2,
                              val_interval=50)
    model = md.train_mask_model(corpus, sched, cfg, seed=7)
    path = tmp_path / "mask.json"
    md.save_mask_model(path, model)
    clone = md.load_mask_model(path)
    assert clone.K == model.K
    assert clone.vocab_fingerprint == model.vocab_fingerprint
    np.testing.assert_allclose(clone.schedule.betas, model.schedule.betas)
    np.testing.assert_array_equal(md.sample_masks(clone, 40, seed=9),
                                  md.sample_masks(model, 40, seed=9))
