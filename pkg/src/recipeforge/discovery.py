"""Generation and selection pipelines.

Batch sampling couples the two models (mask first, then weights
conditioned on the mask), and the selection operations reproduce the
discovery recipes: novelty-filtered repetition counting, lowest-decile
environmental selection, top-fraction nutrition selection, and
personalized selection. Rediscovery streams samples with constant memory
until one matches a reference at SDS = 0.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .corpus import Corpus, Recipe
from .errors import DataError
from .mask_diffusion import MaskDiffusionModel, _sample_chunk
from .quantity_diffusion import QuantityScoreModel, decode_weights, reverse_integrate, reverse_sample_batch
from .scoring import (HEIComponentStandard, ImpactTable, NutrientTable, PersonProfile,
                      env_impact_score, env_impact_scores, group_recipes, hei_score,
                      hei_totals, personalized_scores, sds)
from . import mask_diffusion

# distinct stream for quantity noise so mask and weight chunks never share
# a seed sequence
_QTY_STREAM = 0x9E3779B9


@dataclass
class GenerationBatch:
    samples: list[Recipe]
    seed: int
    mask_fingerprint: str
    quantity_fingerprint: str
    created_at: float = field(default_factory=time.time)

    def __len__(self) -> int:
        return len(self.samples)

    def weight_matrix(self) -> np.ndarray:
        if not self.samples:
            return np.zeros((0, 0))
        return np.stack([r.weights for r in self.samples])


@dataclass
class DiscoveryResult:
    selected: Recipe
    rule: str
    group_count: int
    total_samples: int
    popularity: float
    novelty_sds: int | None = None
    env_score: float | None = None
    hei_total: float | None = None

    def to_dict(self, vocabulary) -> dict:
        return {
            "rule": self.rule,
            "ingredients": [{"id": i, "grams": g} for i, g in self.selected.items(vocabulary)],
            "group_count": self.group_count,
            "total_samples": self.total_samples,
            "popularity": self.popularity,
            "novelty_sds": self.novelty_sds,
            "env_score": self.env_score,
            "hei_total": self.hei_total,
        }


def _model_fingerprints(mask_model: MaskDiffusionModel, quantity_model: QuantityScoreModel):
    if mask_model.vocab_fingerprint != quantity_model.vocab_fingerprint:
        raise DataError("mask and quantity models were trained on different vocabularies")
    if mask_model.K != quantity_model.K:
        raise DataError("mask and quantity models disagree on vocabulary size")
    return mask_model.vocab_fingerprint, quantity_model.vocab_fingerprint


def generate_batch(mask_model: MaskDiffusionModel, quantity_model: QuantityScoreModel,
                   count: int, seed: int, *, chunk_size: int = 2048,
                   threads: int = 1) -> GenerationBatch:
    """Draw count complete recipes: a mask, then weights given the mask.

    Deterministic for a fixed seed and chunk size regardless of thread
    count; masks use the (seed, chunk) stream and weights an independent
    derived stream.
    """
    mfp, qfp = _model_fingerprints(mask_model, quantity_model)
    if count == 0:
        return GenerationBatch(samples=[], seed=seed, mask_fingerprint=mfp, quantity_fingerprint=qfp)
    masks = mask_diffusion.sample_masks(mask_model, count, seed,
                                        chunk_size=chunk_size, threads=threads)
    recipes = reverse_sample_batch(quantity_model, masks, seed + _QTY_STREAM,
                                   chunk_size=chunk_size, threads=threads)
    return GenerationBatch(samples=recipes, seed=seed, mask_fingerprint=mfp,
                           quantity_fingerprint=qfp)


def novelty(recipe: Recipe, corpus: Corpus) -> int:
    """Minimum SDS between the recipe and any corpus recipe."""
    if len(corpus) == 0:
        raise DataError("novelty undefined against an empty corpus")
    if recipe.weights.shape[0] != corpus.vocabulary.K:
        raise DataError("recipe does not match corpus vocabulary")
    _, W = corpus.matrices()
    from .scoring import _sds_rows
    return int(_sds_rows(recipe.weights, W).min())


def novelty_many(samples: list[Recipe], corpus: Corpus, block: int = 256) -> np.ndarray:
    """Vectorized novelty for a list of samples."""
    if len(corpus) == 0:
        raise DataError("novelty undefined against an empty corpus")
    _, W = corpus.matrices()
    S = np.stack([r.weights for r in samples])
    out = np.zeros(S.shape[0], dtype=int)
    Pw = W > 0
    for lo in range(0, S.shape[0], block):
        s = S[lo:lo + block]
        Ps = s > 0
        only = Ps[:, None, :] ^ Pw[None, :, :]
        both = Ps[:, None, :] & Pw[None, :, :]
        hi = np.maximum(s[:, None, :], W[None, :, :])
        lo_w = np.minimum(s[:, None, :], W[None, :, :])
        d = (only | (both & (hi >= 2.0 * lo_w))).sum(axis=2)
        out[lo:lo + block] = d.min(axis=1)
    return out


@dataclass
class RediscoveryOutcome:
    found: bool
    index: int | None
    recipe: Recipe | None
    draws: int


def rediscover(mask_model: MaskDiffusionModel, quantity_model: QuantityScoreModel,
               reference: Recipe, budget: int, seed: int, *,
               chunk_size: int = 64) -> RediscoveryOutcome:
    """Stream samples until one matches the reference at SDS = 0.

    Samples are generated in fixed-size chunks, so memory is constant in
    the budget and the i-th sample of the stream depends only on
    (models, seed, chunk_size). Returns the first matching stream index,
    or not-found once the budget is exhausted.
    """
    _model_fingerprints(mask_model, quantity_model)
    if reference.weights.shape[0] != mask_model.K:
        raise DataError("reference recipe does not match model vocabulary")
    n_chunks = (budget + chunk_size - 1) // chunk_size
    for c in range(n_chunks):
        mask_rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(c,)))
        masks, _ = _sample_chunk(mask_model, chunk_size, mask_rng, True)
        qty_rng = np.random.default_rng(
            np.random.SeedSequence(entropy=seed + _QTY_STREAM, spawn_key=(c,)))
        z = reverse_integrate(quantity_model.score, masks.astype(float), quantity_model.sde, qty_rng)
        limit = min(chunk_size, budget - c * chunk_size)
        for r in range(limit):
            candidate = decode_weights(z[r], masks[r], quantity_model.codec)
            if sds(candidate, reference) == 0:
                return RediscoveryOutcome(found=True, index=c * chunk_size + r,
                                          recipe=candidate, draws=c * chunk_size + r + 1)
    return RediscoveryOutcome(found=False, index=None, recipe=None, draws=budget)


def _top_group(samples: list[Recipe], indices: list[int]) -> tuple[Recipe, int]:
    kept = [samples[i] for i in indices]
    groups = group_recipes(kept)
    best = groups[0]
    return best.representative, best.count


def discover_novel(batch: GenerationBatch, corpus: Corpus, min_sds: int) -> DiscoveryResult:
    """Most repeated sample among those with novelty >= min_sds."""
    if not batch.samples:
        raise DataError("batch is empty")
    nov = novelty_many(batch.samples, corpus)
    keep = [i for i in range(len(batch)) if nov[i] >= min_sds]
    if not keep:
        raise DataError(f"no sample has novelty >= {min_sds}")
    rep, count = _top_group(batch.samples, keep)
    return DiscoveryResult(
        selected=rep, rule=f"discover_novel(min_sds={min_sds})",
        group_count=count, total_samples=len(batch),
        popularity=count / len(batch), novelty_sds=novelty(rep, corpus))


def select_sustainable(batch: GenerationBatch, table: ImpactTable,
                       required: set[str] | None = None) -> DiscoveryResult:
    """Most repeated sample within the lowest-impact decile.

    Sorting alone does not define a repeat set, so the candidates are
    restricted to the lowest-scoring 10 percent (at least one sample)
    before grouping. A required-ingredient constraint is applied first
    and the decile taken within the constrained subset, so a constraint
    is unsatisfiable only when no sample in the whole batch meets it.
    """
    if not batch.samples:
        raise DataError("batch is empty")
    candidates = list(range(len(batch)))
    if required:
        idx = [table.vocabulary.index_of(r) for r in required]
        candidates = [i for i in candidates
                      if all(batch.samples[i].mask[j] == 1 for j in idx)]
        if not candidates:
            raise DataError(f"no sample in the batch contains all of {sorted(required)}")
    weights = np.stack([batch.samples[i].weights for i in candidates])
    scores = env_impact_scores(weights, table)
    k = max(1, math.ceil(0.1 * len(candidates)))
    order = np.argsort(scores, kind="stable")[:k]
    keep = sorted(candidates[int(i)] for i in order)
    rep, count = _top_group(batch.samples, keep)
    return DiscoveryResult(
        selected=rep, rule="select_sustainable" + (f"(require={sorted(required)})" if required else ""),
        group_count=count, total_samples=len(batch),
        popularity=count / len(batch), env_score=env_impact_score(rep, table))


def select_nutritious(batch: GenerationBatch, table: NutrientTable, top_fraction: float,
                      standards: list[HEIComponentStandard] | None = None) -> DiscoveryResult:
    """Most repeated sample within the top fraction by healthy eating index."""
    if not batch.samples:
        raise DataError("batch is empty")
    if not 0.0 < top_fraction <= 1.0:
        raise ValueError(f"top fraction must lie in (0, 1], got {top_fraction}")
    totals = hei_totals(batch.weight_matrix(), table, standards)
    k = max(1, math.ceil(top_fraction * len(batch)))
    order = np.argsort(-totals, kind="stable")[:k]
    keep = sorted(int(i) for i in order)
    rep, count = _top_group(batch.samples, keep)
    return DiscoveryResult(
        selected=rep, rule=f"select_nutritious(top={top_fraction})",
        group_count=count, total_samples=len(batch),
        popularity=count / len(batch), hei_total=float(hei_score(rep, table, standards).total))


def select_personalized(batch: GenerationBatch, profile: PersonProfile, table: NutrientTable,
                        top_fraction: float, meal_fraction: float = 1.0 / 3.0) -> DiscoveryResult:
    """Most repeated sample within the top fraction by personalized score."""
    if not batch.samples:
        raise DataError("batch is empty")
    if not 0.0 < top_fraction <= 1.0:
        raise ValueError(f"top fraction must lie in (0, 1], got {top_fraction}")
    scores = personalized_scores(batch.weight_matrix(), profile, table, meal_fraction)
    k = max(1, math.ceil(top_fraction * len(batch)))
    order = np.argsort(-scores, kind="stable")[:k]
    keep = sorted(int(i) for i in order)
    rep, count = _top_group(batch.samples, keep)
    return DiscoveryResult(
        selected=rep,
        rule=f"select_personalized(top={top_fraction}, age={profile.age}, sex={profile.sex})",
        group_count=count, total_samples=len(batch), popularity=count / len(batch))


@dataclass
class LandscapeRow:
    group_index: int
    count: int
    popularity: float
    env_score: float
    hei_total: float
    novelty_sds: int


def landscape_map(batch: GenerationBatch, impact: ImpactTable, nutrients: NutrientTable,
                  corpus: Corpus,
                  standards: list[HEIComponentStandard] | None = None) -> list[LandscapeRow]:
    """One row per SDS-0 group: popularity, impact, nutrition, novelty."""
    if not batch.samples:
        raise DataError("batch is empty")
    groups = group_recipes(batch.samples)
    reps = [g.representative for g in groups]
    W = np.stack([r.weights for r in reps])
    env = env_impact_scores(W, impact)
    hei = hei_totals(W, nutrients, standards)
    nov = novelty_many(reps, corpus)
    total = len(batch)
    return [
        LandscapeRow(group_index=g_i, count=g.count, popularity=g.count / total,
                     env_score=float(env[g_i]), hei_total=float(hei[g_i]),
                     novelty_sds=int(nov[g_i]))
        for g_i, g in enumerate(groups)
    ]
