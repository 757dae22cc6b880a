"""Score-based continuous diffusion over ingredient weights.

Weights are modeled in standardized log-space per ingredient,
conditioned on a presence mask. The forward process is a
variance-preserving SDE dx = -1/2 beta(t) x dt + sqrt(beta(t)) dB with
beta linear in t, whose exact marginal is
x_t = sqrt(ab(t)) x_0 + sqrt(1 - ab(t)) eps, ab(t) = exp(-int_0^t beta).

The model's score is a standard-normal base plus a learned residual,
score(x, t) = -x - net(x, mask, emb) / sigma(t) with sigma = sqrt(1-ab).
Encoded data is standardized per ingredient, so net = 0 already gives
the exact unit-Gaussian score; outside the data support the -x base
keeps the reverse drift contractive, which a saturating tanh network
alone cannot (the true score grows linearly in x). The residual is
regressed with the sigma^2-weighted matching objective, i.e. onto
eps - sigma(t) x_t, an order-one target at all times. Reverse-time
sampling integrates dx = [g^2 score - f] dt + g dB~ with Euler-Maruyama
from t = 1 down to t_eps, pinning masked-out coordinates at zero.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import netcore
from .corpus import Corpus, Recipe
from .errors import DataError, NumericError
from .netcore import Network, TrainConfig

ScoreFn = Callable[[np.ndarray, np.ndarray, float], np.ndarray]


@dataclass
class SDESpec:
    """Variance-preserving SDE with beta(t) linear on [0, 1]."""

    beta_min: float = 0.1
    beta_max: float = 20.0
    steps: int = 500
    t_eps: float = 1e-3

    def __post_init__(self):
        if self.beta_min <= 0 or self.beta_max < self.beta_min:
            raise ValueError("need 0 < beta_min <= beta_max")
        if self.steps < 1:
            raise ValueError("integration step count must be >= 1")

    def beta(self, t):
        return self.beta_min + (self.beta_max - self.beta_min) * np.asarray(t, dtype=float)

    def alpha_bar(self, t):
        t = np.asarray(t, dtype=float)
        integral = self.beta_min * t + 0.5 * (self.beta_max - self.beta_min) * t * t
        return np.exp(-integral)


@dataclass
class WeightCodec:
    """Per-ingredient mean and standard deviation of log-grams."""

    log_mean: np.ndarray
    log_std: np.ndarray

    def __post_init__(self):
        self.log_mean = np.asarray(self.log_mean, dtype=float)
        self.log_std = np.maximum(np.asarray(self.log_std, dtype=float), 1e-3)


@dataclass
class QuantityScoreModel:
    sde: SDESpec
    net: Network
    codec: WeightCodec
    K: int
    vocab_fingerprint: str = ""
    history: list[tuple[int, float]] = field(default_factory=list)

    def score(self, x: np.ndarray, mask: np.ndarray, t: float) -> np.ndarray:
        """Approximate score of the time-t marginal, zero on masked coords."""
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        x = np.atleast_2d(x)
        mask = np.atleast_2d(np.asarray(mask, dtype=float))
        emb = np.broadcast_to(netcore.time_embedding(t, 1.0), (x.shape[0], 3))
        out = netcore.forward(self.net, np.concatenate([x, mask, emb], axis=1))
        sigma = math.sqrt(max(1.0 - float(self.sde.alpha_bar(t)), 1e-12))
        s = (-x - out / sigma) * mask
        return s[0] if single else s


def fit_codec(corpus: Corpus) -> WeightCodec:
    """Log-gram statistics over the train split; unseen ingredients get
    neutral defaults (mean log 100 g, unit spread)."""
    masks, weights = corpus.matrices("train")
    K = corpus.vocabulary.K
    mu = np.full(K, math.log(100.0))
    sd = np.ones(K)
    for i in range(K):
        present = masks[:, i] == 1
        if present.any():
            logs = np.log(weights[present, i])
            mu[i] = logs.mean()
            sd[i] = logs.std()
    return WeightCodec(log_mean=mu, log_std=sd)


def encode_weights(recipe: Recipe, codec: WeightCodec) -> np.ndarray:
    """Standardized log-grams where present, zero elsewhere."""
    z = np.zeros(recipe.mask.shape[0])
    active = recipe.mask == 1
    z[active] = (np.log(recipe.weights[active]) - codec.log_mean[active]) / codec.log_std[active]
    return z


def decode_weights(encoded, mask, codec: WeightCodec) -> Recipe:
    """Grams = exp(sd * z + mean) rounded to 1 g and floored at 1 g."""
    z = np.asarray(encoded, dtype=float)
    mask = np.asarray(mask, dtype=np.uint8)
    if not np.isfinite(z[mask == 1]).all():
        raise DataError("non-finite encoded weight value")
    grams = np.zeros_like(z)
    active = mask == 1
    grams[active] = np.maximum(1.0, np.round(np.exp(codec.log_std[active] * z[active] + codec.log_mean[active])))
    return Recipe(mask=mask, weights=grams)


def perturb(x0, t: float, sde: SDESpec, seed: int) -> np.ndarray:
    """Exact VP forward marginal: sqrt(ab) x0 + sqrt(1 - ab) eps."""
    if not 0.0 < t <= 1.0:
        raise ValueError(f"t must lie in (0, 1], got {t}")
    x0 = np.asarray(x0, dtype=float)
    rng = np.random.default_rng(seed)
    ab = float(sde.alpha_bar(t))
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * rng.standard_normal(x0.shape)


def dsm_loss(model: QuantityScoreModel, x0, mask, seed: int,
             t: float | None = None, draws: int = 1) -> float:
    """Denoising score-matching loss restricted to active coordinates.

    One Monte Carlo draw of (t, eps) per repetition; t is sampled
    uniformly on (t_eps, 1] unless fixed explicitly. With no active
    coordinates the loss is 0.
    """
    x0 = np.asarray(x0, dtype=float)
    mask = np.asarray(mask, dtype=float)
    if not mask.any():
        return 0.0
    rng = np.random.default_rng(seed)
    total = 0.0
    for _ in range(draws):
        ti = float(rng.uniform(model.sde.t_eps, 1.0)) if t is None else float(t)
        ab = float(model.sde.alpha_bar(ti))
        eps = rng.standard_normal(x0.shape) * mask
        x_t = math.sqrt(ab) * x0 * mask + math.sqrt(1.0 - ab) * eps
        target = -eps / math.sqrt(1.0 - ab)
        s = model.score(x_t, mask, ti)
        total += float((((s - target) * mask) ** 2).sum())
    return total / draws


def _dsm_batch_step(model: QuantityScoreModel, x0: np.ndarray, masks: np.ndarray,
                    opt: netcore.OptimizerState, rng: np.random.Generator) -> float:
    """One Adam step on the sigma^2-weighted DSM objective (the
    noise-residual regression, same minimizer as the unweighted loss)."""
    B = x0.shape[0]
    t = rng.uniform(model.sde.t_eps, 1.0, size=B)
    ab = model.sde.alpha_bar(t)[:, None]
    sigma = np.sqrt(1.0 - ab)
    eps = rng.standard_normal(x0.shape) * masks
    x_t = np.sqrt(ab) * x0 * masks + sigma * eps
    emb = netcore.time_embedding(t, 1.0)
    inputs = np.concatenate([x_t, masks, emb], axis=1)
    out = netcore.forward(model.net, inputs)
    resid = (out - (eps - sigma * x_t)) * masks
    loss = float((resid ** 2).sum() / B)
    grads = netcore.gradient(model.net, inputs, 2.0 * resid / B)
    netcore.optimizer_step(model.net, grads, opt)
    return loss


def _validation_dsm(model: QuantityScoreModel, x0: np.ndarray, masks: np.ndarray, seed: int) -> float:
    """Unweighted DSM on a fixed deterministic t grid over [0.1, 0.95]."""
    rng = np.random.default_rng(seed)
    n = x0.shape[0]
    t = np.linspace(0.1, 0.95, n)
    ab = model.sde.alpha_bar(t)[:, None]
    sigma = np.sqrt(1.0 - ab)
    eps = rng.standard_normal(x0.shape) * masks
    x_t = np.sqrt(ab) * x0 * masks + sigma * eps
    emb = netcore.time_embedding(t, 1.0)
    out = netcore.forward(model.net, np.concatenate([x_t, masks, emb], axis=1))
    resid = (out - (eps - sigma * x_t)) * masks
    per_row = (resid ** 2).sum(axis=1) / (1.0 - ab[:, 0])
    return float(per_row.mean())


def train_quantity_model(corpus: Corpus, sde: SDESpec, config: TrainConfig,
                         seed: int) -> QuantityScoreModel:
    """Fit the codec and train the score network on the corpus train split."""
    masks, weights = corpus.matrices("train")
    if masks.shape[0] == 0:
        raise DataError("training corpus is empty")
    codec = fit_codec(corpus)
    K = corpus.vocabulary.K
    x0 = np.zeros_like(weights)
    active = masks == 1
    x0[active] = (np.log(weights[active]) - np.broadcast_to(codec.log_mean, weights.shape)[active]) \
        / np.broadcast_to(codec.log_std, weights.shape)[active]

    sizes = [2 * K + 3] + [config.hidden_width] * config.hidden_depth + [K]
    net = netcore.init_network(sizes, seed)
    model = QuantityScoreModel(sde=sde, net=net, codec=codec, K=K,
                               vocab_fingerprint=corpus.vocabulary.fingerprint())
    opt = netcore.init_optimizer(net, learning_rate=config.learning_rate)
    rng = np.random.default_rng(seed)

    val_masks, val_weights = corpus.matrices("validation")
    if val_masks.shape[0] == 0:
        val_masks, val_weights = masks[:256], weights[:256]
    vx0 = np.zeros_like(val_weights)
    vact = val_masks == 1
    vx0[vact] = (np.log(val_weights[vact]) - np.broadcast_to(codec.log_mean, val_weights.shape)[vact]) \
        / np.broadcast_to(codec.log_std, val_weights.shape)[vact]

    fmask = masks.astype(float)
    ema = netcore.ParameterAverage(net, config.ema_decay) if config.ema_decay else None
    lr0 = config.learning_rate
    lr1 = config.final_learning_rate if config.final_learning_rate is not None else lr0
    model.history.append((0, _validation_dsm(model, vx0, val_masks.astype(float), seed + 1)))
    for step in range(1, config.steps + 1):
        opt.learning_rate = lr0 + (lr1 - lr0) * (step / config.steps)
        idx = rng.integers(0, masks.shape[0], size=config.batch_size)
        _dsm_batch_step(model, x0[idx], fmask[idx], opt, rng)
        if ema is not None:
            ema.update(net)
        if step % config.val_interval == 0 or step == config.steps:
            model.history.append((step, _validation_dsm(model, vx0, val_masks.astype(float), seed + 1)))
    if ema is not None:
        ema.copy_to(net)
        model.history.append((config.steps, _validation_dsm(model, vx0, val_masks.astype(float), seed + 1)))
    return model


def reverse_integrate(score_fn: ScoreFn, masks: np.ndarray, sde: SDESpec,
                      rng: np.random.Generator) -> np.ndarray:
    """Euler-Maruyama integration of the reverse-time VP SDE.

    Starts from a standard normal on active coordinates at t = 1 and
    steps down to t_eps on a uniform grid; no noise is injected on the
    final step. Masked-out coordinates stay pinned at zero throughout.
    """
    masks = np.atleast_2d(np.asarray(masks, dtype=float))
    n, K = masks.shape
    x = rng.standard_normal((n, K)) * masks
    ts = np.linspace(1.0, sde.t_eps, sde.steps + 1)
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(sde.steps):
            t = float(ts[k])
            dt = float(ts[k] - ts[k + 1])
            b = float(sde.beta(t))
            s = score_fn(x, masks, t)
            x = x + b * (s + 0.5 * x) * dt * masks
            if k < sde.steps - 1:
                x = x + math.sqrt(b * dt) * rng.standard_normal((n, K)) * masks
            if not np.isfinite(x).all():
                norm = float(np.abs(x[np.isfinite(x)]).max()) if np.isfinite(x).any() else float("inf")
                raise NumericError(
                    f"non-finite state at reverse step {k + 1}/{sde.steps} "
                    f"(t={t:.4f}, max |x|={norm:.3e})")
    return x


def reverse_sample(model: QuantityScoreModel, mask, seed: int) -> Recipe:
    """Sample weights for one mask; deterministic for a fixed (mask, seed)."""
    recipes = reverse_sample_batch(model, np.atleast_2d(mask), seed)
    return recipes[0]


def reverse_sample_batch(model: QuantityScoreModel, masks: np.ndarray, seed: int, *,
                         chunk_size: int = 2048, threads: int = 1) -> list[Recipe]:
    """Sample weights for each mask row; chunks are seeded by
    (seed, chunk_index) so any thread count gives identical output."""
    masks = np.atleast_2d(np.asarray(masks, dtype=np.uint8))
    n = masks.shape[0]
    if n == 0:
        return []
    n_chunks = (n + chunk_size - 1) // chunk_size

    def run(c: int) -> np.ndarray:
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(c,)))
        rows = masks[c * chunk_size:(c + 1) * chunk_size]
        return reverse_integrate(model.score, rows, model.sde, rng)

    if threads > 1 and n_chunks > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            parts = list(ex.map(run, range(n_chunks)))
    else:
        parts = [run(c) for c in range(n_chunks)]
    z = np.concatenate(parts, axis=0)
    return [decode_weights(z[i], masks[i], model.codec) for i in range(n)]


def save_quantity_model(path: str | Path, model: QuantityScoreModel, seed_lineage=None) -> None:
    doc = {
        "schema_version": 1,
        "kind": "quantity_diffusion",
        "K": model.K,
        "vocab_fingerprint": model.vocab_fingerprint,
        "sde": {"beta_min": model.sde.beta_min, "beta_max": model.sde.beta_max,
                "steps": model.sde.steps, "t_eps": model.sde.t_eps},
        "codec": {"log_mean": model.codec.log_mean.tolist(),
                  "log_std": model.codec.log_std.tolist()},
        "net": netcore.net_to_dict(model.net),
        "seed_lineage": list(seed_lineage or []),
    }
    Path(path).write_text(json.dumps(doc) + "\n")


def load_quantity_model(path: str | Path) -> QuantityScoreModel:
    doc = json.loads(Path(path).read_text())
    if doc.get("kind") != "quantity_diffusion":
        raise DataError(f"{path}: not a quantity diffusion checkpoint")
    sde = SDESpec(**doc["sde"])
    codec = WeightCodec(log_mean=np.asarray(doc["codec"]["log_mean"]),
                        log_std=np.asarray(doc["codec"]["log_std"]))
    return QuantityScoreModel(
        sde=sde, net=netcore.net_from_dict(doc["net"]), codec=codec,
        K=int(doc["K"]), vocab_fingerprint=str(doc.get("vocab_fingerprint", "")),
    )
