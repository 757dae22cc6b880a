"""Statistical validation of the generators against a reference corpus.

Checks the per-ingredient inclusion marginals, held-out quantity error,
pairwise presence correlations, and the recipe-length distribution of
generated samples, mirroring how the learned distribution is compared
against the training data.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .corpus import Corpus, Recipe
from .errors import DataError
from .mask_diffusion import MaskDiffusionModel, sample_masks
from .quantity_diffusion import QuantityScoreModel, reverse_sample_batch


def _as_masks(x) -> np.ndarray:
    if isinstance(x, Corpus):
        return x.matrices()[0]
    if isinstance(x, np.ndarray):
        return np.atleast_2d(x)
    if isinstance(x, (list, tuple)):
        return np.stack([r.mask for r in x])
    raise TypeError(f"cannot interpret {type(x).__name__} as a mask set")


def marginal_error(samples, corpus) -> float:
    """Max over ingredients of |inclusion frequency difference|."""
    a = _as_masks(samples)
    b = _as_masks(corpus)
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise DataError("marginal error needs nonempty sample and corpus sets")
    return float(np.abs(a.mean(axis=0) - b.mean(axis=0)).max())


def length_distance(samples, corpus) -> float:
    """Total-variation distance between ingredient-count histograms."""
    a = _as_masks(samples).sum(axis=1).astype(int)
    b = _as_masks(corpus).sum(axis=1).astype(int)
    if a.size == 0 or b.size == 0:
        raise DataError("length distance needs nonempty sample and corpus sets")
    hi = int(max(a.max(), b.max()))
    pa = np.bincount(a, minlength=hi + 1) / a.size
    pb = np.bincount(b, minlength=hi + 1) / b.size
    return float(0.5 * np.abs(pa - pb).sum())


def pairwise_correlations(recipes) -> np.ndarray:
    """K x K Pearson (phi) correlation matrix over presence bits.

    Zero-variance columns yield 0 by convention (including the diagonal).
    """
    masks = _as_masks(recipes).astype(float)
    if masks.shape[0] < 2:
        raise DataError("need at least 2 recipes for correlations")
    centered = masks - masks.mean(axis=0)
    cov = centered.T @ centered / masks.shape[0]
    sd = np.sqrt(np.diag(cov))
    ok = sd > 0
    denom = np.outer(sd, sd)
    with np.errstate(divide="ignore", invalid="ignore"):
        corr = np.where(np.outer(ok, ok), cov / np.where(denom > 0, denom, 1.0), 0.0)
    return np.clip(corr, -1.0, 1.0)


def quantity_mae(model: QuantityScoreModel, held_out: list[Recipe], seed: int) -> float:
    """Mean absolute gram error of one conditional sample per held-out recipe.

    Weights are sampled conditioned on each recipe's true mask; the error
    is averaged over active ingredients within a recipe, then over
    recipes.
    """
    if not held_out:
        raise DataError("held-out set is empty")
    masks = np.stack([r.mask for r in held_out])
    sampled = reverse_sample_batch(model, masks, seed)
    errs = []
    for r, s in zip(held_out, sampled):
        active = r.mask == 1
        errs.append(float(np.abs(s.weights[active] - r.weights[active]).mean()))
    return float(np.mean(errs))


@dataclass
class PairAgreement:
    index_a: int
    index_b: int
    id_a: str
    id_b: str
    corpus_corr: float
    sample_corr: float

    @property
    def difference(self) -> float:
        return self.sample_corr - self.corpus_corr


@dataclass
class FidelityReport:
    max_marginal_error: float
    quantity_mae_grams: float
    top_pairs: list[PairAgreement]
    length_total_variation: float
    sample_count: int
    corpus_count: int
    corpus_marginals: np.ndarray = field(repr=False, default=None)
    sample_marginals: np.ndarray = field(repr=False, default=None)
    corpus_length_hist: np.ndarray = field(repr=False, default=None)
    sample_length_hist: np.ndarray = field(repr=False, default=None)

    def to_dict(self) -> dict:
        return {
            "max_marginal_error": self.max_marginal_error,
            "quantity_mae_grams": self.quantity_mae_grams,
            "length_total_variation": self.length_total_variation,
            "sample_count": self.sample_count,
            "corpus_count": self.corpus_count,
            "top_pairs": [
                {"a": p.id_a, "b": p.id_b, "corpus_corr": p.corpus_corr,
                 "sample_corr": p.sample_corr, "difference": p.difference}
                for p in self.top_pairs
            ],
        }


def top_correlated_pairs(corr: np.ndarray, k: int) -> list[tuple[int, int]]:
    """Indices (i < j) of the k strongest off-diagonal correlations."""
    K = corr.shape[0]
    iu, ju = np.triu_indices(K, k=1)
    order = np.argsort(-np.abs(corr[iu, ju]), kind="stable")
    return [(int(iu[o]), int(ju[o])) for o in order[:k]]


def fidelity_report(mask_model: MaskDiffusionModel, quantity_model: QuantityScoreModel,
                    corpus: Corpus, sample_count: int, seed: int, *,
                    top_k: int = 10, threads: int = 1) -> FidelityReport:
    """Run all four checks against the corpus train split.

    Deterministic for a fixed seed: masks come from (seed), the held-out
    quantity samples from (seed + 1).
    """
    if mask_model.vocab_fingerprint != quantity_model.vocab_fingerprint:
        raise DataError("mask and quantity models were trained on different vocabularies")
    train_masks, _ = corpus.matrices("train")
    if train_masks.shape[0] == 0:
        raise DataError("corpus train split is empty")
    samples = sample_masks(mask_model, sample_count, seed, threads=threads)

    corr_corpus = pairwise_correlations(train_masks)
    corr_samples = pairwise_correlations(samples)
    ids = corpus.vocabulary.ids
    pairs = [
        PairAgreement(i, j, ids[i], ids[j],
                      float(corr_corpus[i, j]), float(corr_samples[i, j]))
        for i, j in top_correlated_pairs(corr_corpus, top_k)
    ]

    held_out = corpus.subset("validation")
    mae = quantity_mae(quantity_model, held_out, seed + 1) if held_out else float("nan")

    a_len = samples.sum(axis=1).astype(int)
    b_len = train_masks.sum(axis=1).astype(int)
    hi = int(max(a_len.max(), b_len.max()))
    return FidelityReport(
        max_marginal_error=marginal_error(samples, train_masks),
        quantity_mae_grams=mae,
        top_pairs=pairs,
        length_total_variation=length_distance(samples, train_masks),
        sample_count=sample_count,
        corpus_count=train_masks.shape[0],
        corpus_marginals=train_masks.mean(axis=0),
        sample_marginals=samples.mean(axis=0),
        corpus_length_hist=np.bincount(b_len, minlength=hi + 1) / b_len.size,
        sample_length_hist=np.bincount(a_len, minlength=hi + 1) / a_len.size,
    )
