"""Binary multinomial diffusion over ingredient masks.

Forward process per ingredient: P(x_t = 1 | x_{t-1}) = (1 - beta_t) x_{t-1}
+ beta_t / 2, the two-category case of mixing with the uniform
distribution at rate beta_t. The denoiser predicts per-ingredient
probabilities that x_0 = 1; the reverse kernel substitutes that
prediction for x_0 in the analytic posterior by marginalizing over it,
p(x_{t-1}|x_t) = p_hat * q(x_{t-1}|x_t, x_0=1)
               + (1 - p_hat) * q(x_{t-1}|x_t, x_0=0),
under which the variational-bound-optimal prediction is exactly
E[x_0 | x_t]. Training maximizes the variational lower bound via a
uniformly sampled time step per example.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit, rel_entr

from . import netcore
from .corpus import Corpus
from .errors import DataError, NumericError
from .netcore import Network, TrainConfig

_PCLIP = 1e-7


@dataclass
class NoiseSchedule:
    """Step count T, per-step beta_t, and cumulative alpha_bar products.

    alpha_bar has length T + 1 with alpha_bar[0] = 1 (the t = 0
    convention); alpha_bar[t] = prod_{s<=t} (1 - beta_s).
    """

    betas: np.ndarray
    alpha_bar: np.ndarray = field(init=False)

    def __post_init__(self):
        self.betas = np.asarray(self.betas, dtype=float)
        if ((self.betas <= 0) | (self.betas > 1)).any():
            raise ValueError("all beta_t must lie in (0, 1]")
        self.alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - self.betas)])
        if (np.diff(self.alpha_bar) >= 0).any():
            raise ValueError("alpha_bar must be strictly decreasing")

    @property
    def T(self) -> int:
        return len(self.betas)


def linear_schedule(T: int, beta_start: float = 0.02, beta_end: float = 0.5) -> NoiseSchedule:
    return NoiseSchedule(betas=np.linspace(beta_start, beta_end, T))


@dataclass
class MaskDiffusionModel:
    """Denoiser = analytic independent-ingredient posterior + residual net.

    The prediction for P(x0_i = 1 | x_t) is
    sigmoid(base_logits_i + (2 x_t_i - 1) lambda(t) + net(x_t, t)_i) with
    lambda(t) = log((1 + ab_t) / (1 - ab_t)), the exact log-likelihood
    ratio one noisy bit contributes under the mixing kernel. With
    base_logits at the corpus base rates and a zero residual this is the
    exact posterior for independent ingredients; the network only has to
    learn ingredient interactions.
    """

    schedule: NoiseSchedule
    net: Network
    K: int
    base_logits: np.ndarray | None = None
    vocab_fingerprint: str = ""
    history: list[tuple[int, float]] = field(default_factory=list)


def forward_step_kernel(x_prev, beta_t):
    """P(x_t = 1 | x_{t-1}): (1 - beta) x_prev + beta / 2. Works elementwise.

    beta = 0 is allowed here as the no-noise identity limit; schedules
    themselves require beta in (0, 1].
    """
    beta = np.asarray(beta_t, dtype=float)
    if ((beta < 0) | (beta > 1)).any():
        raise ValueError(f"beta_t must lie in [0, 1], got {beta_t}")
    return (1.0 - beta) * np.asarray(x_prev, dtype=float) + beta / 2.0


def marginal_kernel(x0, t: int, schedule: NoiseSchedule):
    """P(x_t = 1 | x_0) = alpha_bar_t x_0 + (1 - alpha_bar_t) / 2.

    t = 0 is allowed and returns x0 itself (alpha_bar_0 = 1).
    """
    if not 0 <= t <= schedule.T:
        raise ValueError(f"t must lie in 0..{schedule.T}, got {t}")
    ab = schedule.alpha_bar[t]
    return ab * np.asarray(x0, dtype=float) + (1.0 - ab) / 2.0


def _posterior_prob(x_t, x0_prob, beta_t, alpha_bar_prev):
    """P(x_{t-1} = 1 | x_t, x0) with x0 generalized to a probability.

    Proportional to P(x_t | x_{t-1}) * P(x_{t-1} | x0), normalized over
    x_{t-1} in {0, 1}. All arguments broadcast elementwise.
    """
    x_t = np.asarray(x_t, dtype=float)
    like1 = (1.0 - beta_t) * x_t + beta_t / 2.0          # P(x_t | x_{t-1}=1)
    like0 = (1.0 - beta_t) * (1.0 - x_t) + beta_t / 2.0  # P(x_t | x_{t-1}=0)
    m = alpha_bar_prev * np.asarray(x0_prob, dtype=float) + (1.0 - alpha_bar_prev) / 2.0
    num = like1 * m
    return num / (num + like0 * (1.0 - m))


def posterior(x_t, x0, t: int, schedule: NoiseSchedule):
    """P(x_{t-1} = 1 | x_t, x_0) for a forward-chain step, 2 <= t <= T."""
    if not 2 <= t <= schedule.T:
        raise ValueError(f"t must lie in 2..{schedule.T}, got {t}")
    return _posterior_prob(x_t, x0, schedule.betas[t - 1], schedule.alpha_bar[t - 1])


def _reverse_prob(x_t, p_hat, beta_t, alpha_bar_prev):
    """Model reverse kernel: posterior marginalized over x0 ~ Bern(p_hat).

    At t = 1 (alpha_bar_prev = 1) the posterior is a point mass at x0,
    so this reduces to Bern(p_hat), the reconstruction distribution.
    """
    pi1 = _posterior_prob(x_t, 1.0, beta_t, alpha_bar_prev)
    pi0 = _posterior_prob(x_t, 0.0, beta_t, alpha_bar_prev)
    p_hat = np.asarray(p_hat, dtype=float)
    return p_hat * pi1 + (1.0 - p_hat) * pi0


_EVIDENCE_CAP = 12.0


def _model_inputs(x_t: np.ndarray, t: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    # bits enter as +-1; tanh layers calibrate better on centered inputs
    emb = netcore.time_embedding(t, float(max(schedule.T, 1)))
    return np.concatenate([2.0 * x_t - 1.0, emb], axis=-1)


def _evidence_weight(t, schedule: NoiseSchedule) -> np.ndarray:
    """Per-bit log-likelihood ratio lambda(t) = log((1+ab_t)/(1-ab_t))."""
    ab = schedule.alpha_bar[np.asarray(t, dtype=int)]
    return np.minimum(np.log((1.0 + ab) / np.maximum(1.0 - ab, 1e-15)), _EVIDENCE_CAP)


def _predict_p_hat(model: MaskDiffusionModel, x_t: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Denoiser output probabilities, clipped away from 0 and 1."""
    logits = netcore.forward(model.net, _model_inputs(x_t, t, model.schedule))
    if model.base_logits is not None:
        lam = _evidence_weight(t, model.schedule)
        logits = logits + model.base_logits + (2.0 * x_t - 1.0) * lam[..., None]
    return np.clip(expit(logits), _PCLIP, 1.0 - _PCLIP)


def _kl_bernoulli(q: np.ndarray, p: np.ndarray) -> np.ndarray:
    p = np.clip(p, _PCLIP, 1.0 - _PCLIP)
    q = np.asarray(q, dtype=float)
    return rel_entr(q, p) + rel_entr(1.0 - q, 1.0 - p)


def _elbo_terms(model: MaskDiffusionModel, masks: np.ndarray,
                rng: np.random.Generator) -> np.ndarray:
    """One negative-ELBO Monte Carlo draw per row of masks.

    Each row gets one uniformly sampled t in 1..T; the per-step KL (or the
    t = 1 reconstruction term, which the same formula yields because
    alpha_bar_0 = 1 makes the true posterior degenerate) is scaled by T
    and the constant terminal prior KL is added.
    """
    sched = model.schedule
    T = sched.T
    n = masks.shape[0]
    x0 = masks.astype(float)
    t = rng.integers(1, T + 1, size=n)
    ab_t = sched.alpha_bar[t][:, None]
    x_t = (rng.random(x0.shape) < ab_t * x0 + (1.0 - ab_t) / 2.0).astype(float)
    p_hat = _predict_p_hat(model, x_t, t)
    beta_t = sched.betas[t - 1][:, None]
    ab_prev = sched.alpha_bar[t - 1][:, None]
    q_true = _posterior_prob(x_t, x0, beta_t, ab_prev)
    q_model = _reverse_prob(x_t, p_hat, beta_t, ab_prev)
    step_term = _kl_bernoulli(q_true, q_model).sum(axis=1)
    qT = sched.alpha_bar[T] * x0 + (1.0 - sched.alpha_bar[T]) / 2.0
    prior = _kl_bernoulli(qT, np.full_like(qT, 0.5)).sum(axis=1)
    return prior + T * step_term


def elbo_loss(model: MaskDiffusionModel, recipe_mask, seed: int, draws: int = 1) -> float:
    """Monte Carlo estimate of the negative ELBO for one mask."""
    mask = np.asarray(recipe_mask, dtype=float)
    if mask.shape[0] != model.K:
        raise ValueError(f"mask length {mask.shape[0]} != model K {model.K}")
    rng = np.random.default_rng(seed)
    reps = np.repeat(mask[None, :], draws, axis=0)
    return float(_elbo_terms(model, reps, rng).mean())


def elbo_estimates(model: MaskDiffusionModel, recipe_mask, seed: int, draws: int) -> np.ndarray:
    """Per-draw negative-ELBO estimates (for standard-error computations)."""
    mask = np.asarray(recipe_mask, dtype=float)
    rng = np.random.default_rng(seed)
    reps = np.repeat(mask[None, :], draws, axis=0)
    return _elbo_terms(model, reps, rng)


def _train_step(model: MaskDiffusionModel, batch: np.ndarray,
                opt: netcore.OptimizerState, rng: np.random.Generator) -> float:
    sched = model.schedule
    T = sched.T
    B = batch.shape[0]
    x0 = batch.astype(float)
    t = rng.integers(1, T + 1, size=B)
    ab_t = sched.alpha_bar[t][:, None]
    x_t = (rng.random(x0.shape) < ab_t * x0 + (1.0 - ab_t) / 2.0).astype(float)
    inputs = _model_inputs(x_t, t, sched)
    logits = netcore.forward(model.net, inputs)
    if model.base_logits is not None:
        lam = _evidence_weight(t, sched)
        logits = logits + model.base_logits + (2.0 * x_t - 1.0) * lam[:, None]
    s = np.clip(expit(logits), _PCLIP, 1.0 - _PCLIP)

    beta_t = sched.betas[t - 1][:, None]
    ab_prev = sched.alpha_bar[t - 1][:, None]
    pi1 = _posterior_prob(x_t, 1.0, beta_t, ab_prev)
    pi0 = _posterior_prob(x_t, 0.0, beta_t, ab_prev)
    pi = np.clip(s * pi1 + (1.0 - s) * pi0, _PCLIP, 1.0 - _PCLIP)
    q_true = _posterior_prob(x_t, x0, beta_t, ab_prev)

    loss = float(_kl_bernoulli(q_true, pi).sum() * T / B)
    dkl_dpi = -q_true / pi + (1.0 - q_true) / (1.0 - pi)
    cot = dkl_dpi * (pi1 - pi0) * s * (1.0 - s) * (T / B)
    grads = netcore.gradient(model.net, inputs, cot)
    netcore.optimizer_step(model.net, grads, opt)
    return loss


def _validation_loss(model: MaskDiffusionModel, masks: np.ndarray, seed: int, draws: int) -> float:
    rng = np.random.default_rng(seed)
    reps = np.repeat(masks, max(1, draws // max(1, masks.shape[0])), axis=0)
    return float(_elbo_terms(model, reps, rng).mean())


def train_mask_model(corpus: Corpus, schedule: NoiseSchedule, config: TrainConfig,
                     seed: int) -> MaskDiffusionModel:
    """Train the mask denoiser on the corpus train split.

    Deterministic for a fixed seed; validation negative ELBO is recorded
    in model.history at config.val_interval (falling back to the train
    split when the corpus has no validation recipes).
    """
    masks, _ = corpus.matrices("train")
    if masks.shape[0] == 0:
        raise DataError("training corpus is empty")
    if (~masks.any(axis=1)).any():
        raise DataError("training corpus contains an all-zero mask")
    val_masks, _ = corpus.matrices("validation")
    if val_masks.shape[0] == 0:
        val_masks = masks[: min(len(masks), 256)]
    K = corpus.vocabulary.K
    sizes = [K + 3] + [config.hidden_width] * config.hidden_depth + [K]
    net = netcore.init_network(sizes, seed)
    # zero output layer: the model starts exactly at the analytic
    # independent-ingredient posterior and learns only the residual
    net.weights[-1][:] = 0.0
    marg = np.clip(masks.mean(axis=0), 1e-3, 1.0 - 1e-3)
    model = MaskDiffusionModel(schedule=schedule, net=net, K=K,
                               base_logits=np.log(marg / (1.0 - marg)),
                               vocab_fingerprint=corpus.vocabulary.fingerprint())
    opt = netcore.init_optimizer(net, learning_rate=config.learning_rate)
    rng = np.random.default_rng(seed)
    ema = netcore.ParameterAverage(net, config.ema_decay) if config.ema_decay else None
    lr0 = config.learning_rate
    lr1 = config.final_learning_rate if config.final_learning_rate is not None else lr0
    model.history.append((0, _validation_loss(model, val_masks, seed + 1, config.val_draws)))
    for step in range(1, config.steps + 1):
        opt.learning_rate = lr0 + (lr1 - lr0) * (step / config.steps)
        idx = rng.integers(0, masks.shape[0], size=config.batch_size)
        _train_step(model, masks[idx], opt, rng)
        if ema is not None:
            ema.update(net)
        if step % config.val_interval == 0 or step == config.steps:
            model.history.append((step, _validation_loss(model, val_masks, seed + 1, config.val_draws)))
    if ema is not None:
        ema.copy_to(net)
        model.history.append((config.steps, _validation_loss(model, val_masks, seed + 1, config.val_draws)))
    return model


def _sample_chunk(model: MaskDiffusionModel, n: int, rng: np.random.Generator,
                  discard_empty: bool) -> tuple[np.ndarray, int]:
    sched = model.schedule
    T = sched.T
    K = model.K

    def chain(m: int) -> np.ndarray:
        x = (rng.random((m, K)) < 0.5).astype(float)
        for t in range(T, 0, -1):
            p_hat = _predict_p_hat(model, x, np.full(m, t))
            pi = _reverse_prob(x, p_hat, sched.betas[t - 1], sched.alpha_bar[t - 1])
            x = (rng.random((m, K)) < pi).astype(float)
        return x

    x = chain(n)
    discarded = 0
    if discard_empty:
        for _ in range(1000):
            empty = ~x.astype(bool).any(axis=1)
            if not empty.any():
                break
            discarded += int(empty.sum())
            x[empty] = chain(int(empty.sum()))
        else:
            raise NumericError("mask sampler kept producing all-zero masks")
    return x.astype(np.uint8), discarded


def sample_masks(model: MaskDiffusionModel, count: int, seed: int, *,
                 chunk_size: int = 2048, threads: int = 1,
                 discard_empty: bool = True) -> np.ndarray:
    """Draw count masks by ancestral sampling; (count, K) uint8 array.

    The stream is partitioned into fixed-size chunks seeded by
    (seed, chunk_index), so results are byte-identical for any thread
    count. All-zero masks are discarded and resampled by default.
    """
    if count == 0:
        return np.zeros((0, model.K), dtype=np.uint8)
    n_chunks = (count + chunk_size - 1) // chunk_size
    sizes = [min(chunk_size, count - c * chunk_size) for c in range(n_chunks)]

    def run(c: int) -> np.ndarray:
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(c,)))
        return _sample_chunk(model, sizes[c], rng, discard_empty)[0]

    if threads > 1 and n_chunks > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            parts = list(ex.map(run, range(n_chunks)))
    else:
        parts = [run(c) for c in range(n_chunks)]
    return np.concatenate(parts, axis=0)


def sample_mask(model: MaskDiffusionModel, seed: int, discard_empty: bool = True) -> np.ndarray:
    """Draw a single mask; deterministic for a fixed seed."""
    return sample_masks(model, 1, seed, discard_empty=discard_empty)[0]


def save_mask_model(path: str | Path, model: MaskDiffusionModel, seed_lineage=None) -> None:
    doc = {
        "schema_version": 1,
        "kind": "mask_diffusion",
        "K": model.K,
        "vocab_fingerprint": model.vocab_fingerprint,
        "schedule": {"T": model.schedule.T, "beta": model.schedule.betas.tolist()},
        "base_logits": None if model.base_logits is None else model.base_logits.tolist(),
        "net": netcore.net_to_dict(model.net),
        "seed_lineage": list(seed_lineage or []),
    }
    Path(path).write_text(json.dumps(doc) + "\n")


def load_mask_model(path: str | Path) -> MaskDiffusionModel:
    doc = json.loads(Path(path).read_text())
    if doc.get("kind") != "mask_diffusion":
        raise DataError(f"{path}: not a mask diffusion checkpoint")
    schedule = NoiseSchedule(betas=np.asarray(doc["schedule"]["beta"], dtype=float))
    base = doc.get("base_logits")
    return MaskDiffusionModel(
        schedule=schedule,
        net=netcore.net_from_dict(doc["net"]),
        K=int(doc["K"]),
        base_logits=None if base is None else np.asarray(base, dtype=float),
        vocab_fingerprint=str(doc.get("vocab_fingerprint", "")),
    )
