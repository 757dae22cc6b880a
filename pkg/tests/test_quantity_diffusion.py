import math

import numpy as np
import pytest

from recipeforge import netcore
from recipeforge import quantity_diffusion as qd
from recipeforge.corpus import Corpus, IngredientVocabulary, Recipe, SynthIngredient, SynthSpec, synthesize_corpus
from recipeforge.errors import DataError, NumericError


def make_codec(K, mu=4.0, sd=0.5):
    return qd.WeightCodec(log_mean=np.full(K, mu), log_std=np.full(K, sd))


def make_model(K=4, seed=0, sde=None):
    sde = sde or qd.SDESpec()
    net = netcore.init_network([2 * K + 3, 8, K], seed=seed)
    return qd.QuantityScoreModel(sde=sde, net=net, codec=make_codec(K), K=K)


# ---------------------------------------------------------------------------
# codec

def test_encode_at_log_mean_gives_zero():
    codec = make_codec(3, mu=math.log(150.0))
    r = Recipe.from_weights(np.array([150.0, 0.0, 150.0]))
    z = qd.encode_weights(r, codec)
    np.testing.assert_allclose(z, [0.0, 0.0, 0.0], atol=1e-12)


def test_encode_absent_is_zero():
    codec = make_codec(2)
    r = Recipe.from_weights(np.array([0.0, 55.0]))
    assert qd.encode_weights(r, codec)[0] == 0.0


def test_encode_decode_round_trip_within_half_gram():
    rng = np.random.default_rng(0)
    codec = qd.WeightCodec(log_mean=rng.uniform(1, 5, 6), log_std=rng.uniform(0.1, 0.6, 6))
    for _ in range(50):
        w = np.where(rng.random(6) < 0.7, np.round(rng.uniform(2, 400, 6)), 0.0)
        if not w.any():
            continue
        r = Recipe.from_weights(w)
        back = qd.decode_weights(qd.encode_weights(r, codec), r.mask, codec)
        assert np.abs(back.weights - w).max() <= 0.5


def test_decode_zero_is_rounded_exp_mean():
    codec = make_codec(2, mu=math.log(42.4))
    r = qd.decode_weights(np.zeros(2), np.array([1, 0], dtype=np.uint8), codec)
    assert r.weights[0] == 42.0
    assert r.weights[1] == 0.0


def test_decode_empty_mask_gives_empty_recipe():
    codec = make_codec(3)
    r = qd.decode_weights(np.zeros(3), np.zeros(3, dtype=np.uint8), codec)
    assert r.is_empty


def test_decode_extreme_z_is_finite():
    codec = make_codec(1, mu=4.0, sd=0.5)
    r = qd.decode_weights(np.array([10.0]), np.array([1], dtype=np.uint8), codec)
    assert np.isfinite(r.weights[0]) and r.weights[0] > 1000


def test_decode_floors_at_one_gram():
    codec = make_codec(1, mu=0.0, sd=1.0)
    r = qd.decode_weights(np.array([-8.0]), np.array([1], dtype=np.uint8), codec)
    assert r.weights[0] == 1.0


def test_decode_rejects_non_finite():
    codec = make_codec(1)
    with pytest.raises(DataError):
        qd.decode_weights(np.array([np.nan]), np.array([1], dtype=np.uint8), codec)


def test_codec_floors_tiny_std():
    codec = qd.WeightCodec(log_mean=np.zeros(2), log_std=np.array([0.0, 0.5]))
    assert codec.log_std[0] == 1e-3


# ---------------------------------------------------------------------------
# forward perturbation

def test_perturb_small_t_is_near_identity():
    sde = qd.SDESpec()
    x0 = np.array([1.5, -0.7, 0.2])
    out = qd.perturb(x0, 1e-3, sde, seed=1)
    assert np.abs(out - x0).max() < 0.1


def test_perturb_t1_matches_standard_normal_moments():
    sde = qd.SDESpec()
    x0 = np.full(100_000, 1.7)
    out = qd.perturb(x0, 1.0, sde, seed=2)
    assert abs(out.mean()) < 0.02
    assert abs(out.var() - 1.0) < 0.03


def test_perturb_deterministic_and_range_checked():
    sde = qd.SDESpec()
    x0 = np.ones(5)
    np.testing.assert_array_equal(qd.perturb(x0, 0.5, sde, seed=3),
                                  qd.perturb(x0, 0.5, sde, seed=3))
    with pytest.raises(ValueError):
        qd.perturb(x0, 0.0, sde, seed=0)
    with pytest.raises(ValueError):
        qd.perturb(x0, 1.5, sde, seed=0)


def test_vp_marginal_variance_identity():
    # Var[x_t] = 1 - ab + ab Var[x0], checked within 3 standard errors
    sde = qd.SDESpec()
    rng = np.random.default_rng(4)
    x0 = rng.normal(0.0, 2.0, size=200_000)
    for t in (0.2, 0.5, 0.9):
        ab = float(sde.alpha_bar(t))
        out = qd.perturb(x0, t, sde, seed=5)
        expected = 1.0 - ab + ab * 4.0
        se = expected * math.sqrt(2.0 / x0.size)
        assert abs(out.var() - expected) < 3 * se


# ---------------------------------------------------------------------------
# denoising score matching loss

def test_dsm_zero_for_exact_conditional_score():
    model = make_model(K=3)
    x0 = np.array([0.4, -1.0, 0.0])
    mask = np.array([1.0, 1.0, 0.0])

    def exact_score(x, m, t):
        ab = float(model.sde.alpha_bar(t))
        return -(x - math.sqrt(ab) * x0 * m) / (1.0 - ab) * m

    model.score = exact_score
    assert qd.dsm_loss(model, x0, mask, seed=0, t=0.5, draws=64) < 1e-20


def test_dsm_zero_score_expectation():
    # with score = 0 the expected loss at fixed t is n_active / (1 - ab)
    model = make_model(K=5)
    model.score = lambda x, m, t: np.zeros_like(x)
    x0 = np.zeros(5)
    mask = np.array([1.0, 1.0, 1.0, 0.0, 0.0])
    t = 0.6
    draws = 4000
    rng = np.random.default_rng(1)
    vals = [qd.dsm_loss(model, x0, mask, seed=int(rng.integers(1 << 31)), t=t) for _ in range(draws)]
    vals = np.array(vals)
    ab = float(model.sde.alpha_bar(t))
    expected = 3.0 / (1.0 - ab)
    se = vals.std() / math.sqrt(draws)
    assert abs(vals.mean() - expected) < 3 * se


def test_dsm_all_masked_returns_zero():
    model = make_model(K=4)
    assert qd.dsm_loss(model, np.zeros(4), np.zeros(4), seed=0) == 0.0


def test_dsm_gradient_matches_finite_differences():
    sde = qd.SDESpec()
    K = 4
    net = netcore.init_network([2 * K + 3, 8, K], seed=5)
    rng = np.random.default_rng(2)
    x0 = rng.standard_normal((3, K))
    masks = (rng.random((3, K)) < 0.7).astype(float)
    x0 *= masks
    t = rng.uniform(0.05, 1.0, size=3)
    eps = rng.standard_normal((3, K)) * masks
    ab = sde.alpha_bar(t)[:, None]
    sigma = np.sqrt(1.0 - ab)
    x_t = np.sqrt(ab) * x0 + sigma * eps
    emb = netcore.time_embedding(t, 1.0)
    inputs = np.concatenate([x_t, masks, emb], axis=1)
    target_resid = eps - sigma * x_t

    def loss_of(n):
        out = netcore.forward(n, inputs)
        r = (out - target_resid) * masks
        return float((r ** 2 / (1.0 - ab)).sum() / 3)

    out = netcore.forward(net, inputs)
    resid = (out - target_resid) * masks
    cot = 2.0 * resid / (1.0 - ab) / 3
    grads = netcore.gradient(net, inputs, cot)
    flat = np.concatenate([np.concatenate([dw.ravel(), db.ravel()]) for dw, db in grads])
    theta = netcore._flatten_params(net)
    h = 1e-6
    worst = 0.0
    for i in np.random.default_rng(3).choice(theta.size, 30, replace=False):
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
# reverse-time sampling against analytic oracles

def test_reverse_sampler_recovers_analytic_gaussian():
    sde = qd.SDESpec()

    def score(x, mask, t):
        ab = float(sde.alpha_bar(t))
        var = ab * 0.25 + 1.0 - ab
        return -(x - math.sqrt(ab) * 2.0) / var

    rng = np.random.default_rng(6)
    x = qd.reverse_integrate(score, np.ones((4000, 1)), sde, rng)[:, 0]
    assert abs(x.mean() - 2.0) < 0.05
    assert abs(x.var() - 0.25) < 0.03


def test_reverse_sampler_recovers_two_component_mixture():
    sde = qd.SDESpec()
    mus = np.array([-2.0, 2.0])
    var0 = 0.25

    def score(x, mask, t):
        ab = float(sde.alpha_bar(t))
        means = math.sqrt(ab) * mus
        var = ab * var0 + 1.0 - ab
        d = x[..., None] - means
        logp = -0.5 * d * d / var
        logp -= logp.max(axis=-1, keepdims=True)
        g = np.exp(logp)
        g /= g.sum(axis=-1, keepdims=True)
        return (g * (-d / var)).sum(axis=-1)

    rng = np.random.default_rng(7)
    x = qd.reverse_integrate(score, np.ones((10_000, 1)), sde, rng)[:, 0]
    mass_high = (x > 0).mean()
    assert abs(mass_high - 0.5) < 0.05
    assert abs(x[x > 0].mean() - 2.0) < 0.1
    assert abs(x[x < 0].mean() + 2.0) < 0.1


def test_reverse_sample_deterministic_per_seed_and_mask():
    model = make_model(K=4, seed=8)
    mask = np.array([1, 0, 1, 1], dtype=np.uint8)
    a = qd.reverse_sample(model, mask, seed=9)
    b = qd.reverse_sample(model, mask, seed=9)
    np.testing.assert_array_equal(a.weights, b.weights)
    c = qd.reverse_sample(model, mask, seed=10)
    assert not np.array_equal(a.weights, c.weights)


def test_reverse_sample_pins_masked_coordinates():
    model = make_model(K=4, seed=11)
    mask = np.array([1, 0, 0, 1], dtype=np.uint8)
    r = qd.reverse_sample(model, mask, seed=12)
    assert r.weights[1] == 0.0 and r.weights[2] == 0.0
    assert r.weights[0] >= 1.0 and r.weights[3] >= 1.0


def test_reverse_sample_batch_thread_determinism():
    model = make_model(K=3, seed=13)
    masks = (np.random.default_rng(0).random((300, 3)) < 0.7).astype(np.uint8)
    masks[masks.sum(axis=1) == 0, 0] = 1
    a = qd.reverse_sample_batch(model, masks, seed=14, chunk_size=64, threads=1)
    b = qd.reverse_sample_batch(model, masks, seed=14, chunk_size=64, threads=4)
    for ra, rb in zip(a, b):
        np.testing.assert_array_equal(ra.weights, rb.weights)


def test_reverse_integrate_reports_non_finite_state():
    sde = qd.SDESpec(steps=200)

    def exploding(x, mask, t):
        with np.errstate(over="ignore"):
            return 50.0 * x ** 3 + 10.0

    rng = np.random.default_rng(15)
    with pytest.raises(NumericError, match="step"):
        qd.reverse_integrate(exploding, np.ones((8, 2)), sde, rng)


# ---------------------------------------------------------------------------
# training

def delta_corpus():
    vocab = IngredientVocabulary.from_ids(["beef", "bun", "cheese", "onion"])
    w = np.array([150.0, 75.0, 25.0, 10.0])
    recipes = [Recipe.from_weights(w) for _ in range(300)]
    return Corpus(vocabulary=vocab, recipes=recipes,
                  splits=["train"] * 270 + ["validation"] * 30), w


def test_train_delta_corpus_recovery():
    corpus, w = delta_corpus()
    cfg = netcore.TrainConfig(steps=3000, batch_size=64, learning_rate=1e-3,
                              hidden_width=32, hidden_depth=3, val_interval=3000)
    model = qd.train_quantity_model(corpus, qd.SDESpec(), cfg, seed=16)
    assert model.history[-1][1] < model.history[0][1]
    mask = (w > 0).astype(np.uint8)
    samples = qd.reverse_sample_batch(model, np.tile(mask, (100, 1)), seed=17)
    rel = np.stack([np.abs(s.weights - w)[mask == 1] / w[mask == 1] for s in samples])
    assert (rel.max(axis=1) <= 0.25).mean() >= 0.9


def lognormal_spec(n=1500):
    ings = [
        SynthIngredient("beef", 0.6, 5.0, 0.30),
        SynthIngredient("bun", 0.7, 4.3, 0.20),
        SynthIngredient("cheese", 0.5, 3.2, 0.30),
        SynthIngredient("lettuce", 0.5, 3.0, 0.25),
        SynthIngredient("onion", 0.4, 3.4, 0.35),
        SynthIngredient("tomato", 0.5, 3.7, 0.25),
    ]
    return SynthSpec(ingredients=ings, pairs=[], planted=[], count=n)


def test_train_lognormal_moment_recovery():
    spec = lognormal_spec()
    corpus = synthesize_corpus(spec, seed=18)
    cfg = netcore.TrainConfig(steps=8000, batch_size=64, learning_rate=1e-3,
                              hidden_width=32, hidden_depth=3, val_interval=8000)
    model = qd.train_quantity_model(corpus, qd.SDESpec(), cfg, seed=19)
    masks, _ = corpus.matrices("train")
    samples = qd.reverse_sample_batch(model, masks[:2500], seed=20)
    W = np.stack([s.weights for s in samples])
    M = np.stack([s.mask for s in samples])
    vocab = corpus.vocabulary
    for ing in spec.ingredients:
        i = vocab.index_of(ing.ingredient_id)
        logs = np.log(W[M[:, i] == 1, i])
        assert abs(logs.mean() - ing.weight_log_mean) < 0.1
        assert abs(logs.std() - ing.weight_log_sd) < 0.1


def test_train_rejects_empty_corpus():
    vocab = IngredientVocabulary.from_ids(["a"])
    corpus = Corpus(vocabulary=vocab, recipes=[], splits=[])
    with pytest.raises(DataError):
        qd.train_quantity_model(corpus, qd.SDESpec(), netcore.TrainConfig(steps=5), seed=0)


def test_checkpoint_round_trip(tmp_path):
    corpus, w = delta_corpus()
    cfg = netcore.TrainConfig(steps=100, batch_size=32, hidden_width=8, hidden_depth=2,
                              val_interval=100)
    model = qd.train_quantity_model(corpus, qd.SDESpec(steps=50), cfg, seed=21)
    path = tmp_path / "qty.json"
    qd.save_quantity_model(path, model)
    clone = qd.load_quantity_model(path)
    assert clone.K == model.K and clone.sde.steps == 50
    np.testing.assert_allclose(clone.codec.log_mean, model.codec.log_mean)
    mask = (w > 0).astype(np.uint8)
    np.testing.assert_array_equal(qd.reverse_sample(clone, mask, seed=22).weights,
                                  qd.reverse_sample(model, mask, seed=22).weights)
