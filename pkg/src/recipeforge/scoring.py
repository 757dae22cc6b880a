"""Recipe-level metrics.

Substantial difference score (SDS) and SDS-0 grouping, popularity,
quantity-weighted environmental impact, the 13-component healthy eating
index, dietary energy requirements, and a personalized nutrition score.
All operations are pure functions over immutable tables.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .corpus import Corpus, IngredientVocabulary, Recipe
from .errors import DataError


# ---------------------------------------------------------------------------
# substantial difference score

def sds(r1: Recipe, r2: Recipe) -> int:
    """Count of ingredients differing in presence or by a >= 2x weight ratio."""
    if r1.weights.shape != r2.weights.shape:
        raise DataError("recipes use different vocabularies")
    return int(_sds_rows(r1.weights, r2.weights[None, :])[0])


def _sds_rows(w: np.ndarray, W: np.ndarray) -> np.ndarray:
    """SDS of one weight vector against each row of a weight matrix."""
    p = w > 0
    P = W > 0
    only_one = P ^ p
    both = P & p
    hi = np.maximum(W, w)
    lo = np.minimum(W, w)
    ratio_hit = both & (hi >= 2.0 * lo)
    return (only_one | ratio_hit).sum(axis=1).astype(int)


@dataclass
class SDSGroup:
    representative: Recipe
    count: int
    founder_index: int


def group_recipes(samples: list[Recipe]) -> list[SDSGroup]:
    """Greedy leader clustering at SDS = 0 in input order.

    Each sample joins the first existing representative at SDS = 0, else
    founds a new group. SDS = 0 requires an identical presence mask, so
    candidates are bucketed by mask; within a bucket only the weight
    ratio rule decides. Output is sorted by count descending, ties broken
    by earliest founder.
    """
    if not samples:
        raise DataError("cannot group an empty sample list")
    buckets: dict[bytes, list[int]] = {}
    groups: list[SDSGroup] = []
    rep_weights: dict[bytes, list[np.ndarray]] = {}
    for i, r in enumerate(samples):
        key = np.packbits(r.mask).tobytes()
        reps = buckets.setdefault(key, [])
        ws = rep_weights.setdefault(key, [])
        joined = False
        if ws:
            d = _sds_rows(r.weights, np.stack(ws))
            hits = np.flatnonzero(d == 0)
            if hits.size:
                groups[reps[hits[0]]].count += 1
                joined = True
        if not joined:
            reps.append(len(groups))
            ws.append(r.weights)
            groups.append(SDSGroup(representative=r, count=1, founder_index=i))
    groups.sort(key=lambda g: (-g.count, g.founder_index))
    return groups


def group_by_sds(samples: list[Recipe]) -> list[tuple[Recipe, int]]:
    """(representative, count) pairs, most repeated first."""
    return [(g.representative, g.count) for g in group_recipes(samples)]


def popularity_score(group_count: int, total_samples: int) -> float:
    """Frequency of a recipe's SDS-0 group among the generated samples."""
    if group_count < 1 or total_samples < group_count:
        raise ValueError("need 1 <= group_count <= total_samples")
    return group_count / total_samples


# ---------------------------------------------------------------------------
# environmental impact

IMPACT_METRICS = ("land_m2_per_kg", "eutro_gPO4eq_per_kg", "water_L_per_kg", "ghg_kgCO2eq_per_kg")


@dataclass
class ImpactTable:
    """Per-ingredient life-cycle metrics per kg, aligned to a vocabulary,
    plus one normalization constant per metric."""

    vocabulary: IngredientVocabulary
    values: np.ndarray  # (K, 4) in IMPACT_METRICS order
    norms: np.ndarray   # (4,)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.norms = np.asarray(self.norms, dtype=float)
        if self.values.shape != (self.vocabulary.K, 4):
            raise DataError("impact table shape does not match vocabulary")
        if (self.values < 0).any():
            raise DataError("impact values must be >= 0")
        if (self.norms <= 0).any():
            raise DataError("impact normalization constants must be > 0")


def load_impact_table(path: str | Path, vocabulary: IngredientVocabulary,
                      norms_path: str | Path | None = None) -> ImpactTable:
    """Read the impact CSV; every vocabulary ingredient must be present.

    Normalization constants come from a sidecar JSON when given
    (keys land, eutrophication, water, ghg), else default to the median
    per-kg impact of each metric across the table.
    """
    rows: dict[str, list[float]] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing_cols = {"ingredient_id", *IMPACT_METRICS} - set(reader.fieldnames or [])
        if missing_cols:
            raise DataError(f"impact table missing columns: {sorted(missing_cols)}")
        for rec in reader:
            rows[rec["ingredient_id"]] = [float(rec[m]) for m in IMPACT_METRICS]
    missing = [i for i in vocabulary.ids if i not in rows]
    if missing:
        raise DataError(f"impact table missing ingredients: {missing[:5]}")
    values = np.array([rows[i] for i in vocabulary.ids])
    if norms_path is not None:
        doc = json.loads(Path(norms_path).read_text())
        try:
            norms = np.array([float(doc[k]) for k in ("land", "eutrophication", "water", "ghg")])
        except KeyError as e:
            raise DataError(f"impact norms file missing key {e}") from e
    else:
        norms = np.median(values, axis=0)
        norms = np.where(norms <= 0, 1.0, norms)
    return ImpactTable(vocabulary=vocabulary, values=values, norms=norms)


def env_impact_scores(weights: np.ndarray, table: ImpactTable) -> np.ndarray:
    """Vectorized impact score per weight-matrix row."""
    weights = np.atleast_2d(np.asarray(weights, dtype=float))
    if (weights.sum(axis=1) <= 0).any():
        raise DataError("environmental score undefined for a zero-mass recipe")
    per_metric = (weights / 1000.0) @ table.values  # (n, 4)
    return (per_metric / table.norms).mean(axis=1)


def env_impact_score(recipe: Recipe, table: ImpactTable) -> float:
    """Quantity-weighted mean of the four normalized life-cycle metrics."""
    if recipe.weights.shape[0] != table.vocabulary.K:
        raise DataError("recipe does not match impact table vocabulary")
    return float(env_impact_scores(recipe.weights[None, :], table)[0])


# ---------------------------------------------------------------------------
# nutrient table and healthy eating index

NUTRIENT_FIELDS = (
    "kcal_per_100g",
    "total_fruits_cup_per_100g",
    "whole_fruits_cup_per_100g",
    "total_vegetables_cup_per_100g",
    "greens_and_beans_cup_per_100g",
    "whole_grains_oz_per_100g",
    "dairy_cup_per_100g",
    "total_protein_foods_oz_per_100g",
    "seafood_plant_proteins_oz_per_100g",
    "refined_grains_oz_per_100g",
    "sodium_mg_per_100g",
    "added_sugars_g_per_100g",
    "saturated_fat_g_per_100g",
    "unsaturated_fat_g_per_100g",
    "protein_g_per_100g",
    "carbohydrate_g_per_100g",
    "fat_g_per_100g",
)


@dataclass
class NutrientTable:
    """Per-100 g nutrient and food-pattern-equivalent data per ingredient."""

    vocabulary: IngredientVocabulary
    columns: dict[str, np.ndarray]  # field -> (K,)

    def __post_init__(self):
        for f in NUTRIENT_FIELDS:
            if f not in self.columns:
                raise DataError(f"nutrient table missing field {f}")
            col = np.asarray(self.columns[f], dtype=float)
            if col.shape[0] != self.vocabulary.K:
                raise DataError(f"nutrient column {f} does not match vocabulary")
            if (col < 0).any():
                raise DataError(f"nutrient column {f} has negative entries")
            self.columns[f] = col

    def amounts(self, weights: np.ndarray, fields: list[str]) -> np.ndarray:
        """(n, len(fields)) totals for each weight-matrix row."""
        weights = np.atleast_2d(np.asarray(weights, dtype=float))
        mat = np.stack([self.columns[f] for f in fields], axis=1)
        return (weights / 100.0) @ mat


def load_nutrient_table(path: str | Path, vocabulary: IngredientVocabulary) -> NutrientTable:
    rows: dict[str, dict[str, float]] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing_cols = {"ingredient_id", *NUTRIENT_FIELDS} - set(reader.fieldnames or [])
        if missing_cols:
            raise DataError(f"nutrient table missing columns: {sorted(missing_cols)}")
        for rec in reader:
            rows[rec["ingredient_id"]] = {f: float(rec[f]) for f in NUTRIENT_FIELDS}
    missing = [i for i in vocabulary.ids if i not in rows]
    if missing:
        raise DataError(f"nutrient table missing ingredients: {missing[:5]}")
    columns = {f: np.array([rows[i][f] for i in vocabulary.ids]) for f in NUTRIENT_FIELDS}
    return NutrientTable(vocabulary=vocabulary, columns=columns)


@dataclass
class HEIComponentStandard:
    component: str
    curve: str          # "increasing" or "decreasing"
    max_points: float
    max_at: float       # density scoring max_points
    zero_at: float      # density scoring 0


@dataclass
class HEIResult:
    components: dict[str, float]
    total: float


def load_hei_standards(path: str | Path | None = None) -> list[HEIComponentStandard]:
    """Component curves; defaults to the bundled HEI-2015 standards file."""
    if path is None:
        src = resources.files("recipeforge").joinpath("data/hei2015_standards.csv")
        text = src.read_text()
    else:
        text = Path(path).read_text()
    out = []
    for rec in csv.DictReader(text.splitlines()):
        out.append(HEIComponentStandard(
            component=rec["component"], curve=rec["curve"],
            max_points=float(rec["max_points"]),
            max_at=float(rec["max_at"]), zero_at=float(rec["zero_at"])))
    if len(out) != 13:
        raise DataError(f"expected 13 HEI components, found {len(out)}")
    return out


def _component_score(std: HEIComponentStandard, value: np.ndarray) -> np.ndarray:
    if std.curve == "increasing":
        frac = (value - std.zero_at) / (std.max_at - std.zero_at)
    elif std.curve == "decreasing":
        frac = (std.zero_at - value) / (std.zero_at - std.max_at)
    else:
        raise DataError(f"unknown HEI curve {std.curve!r}")
    return std.max_points * np.clip(frac, 0.0, 1.0)


_HEI_DENSITY_FIELDS = {
    "total_fruits": "total_fruits_cup_per_100g",
    "whole_fruits": "whole_fruits_cup_per_100g",
    "total_vegetables": "total_vegetables_cup_per_100g",
    "greens_and_beans": "greens_and_beans_cup_per_100g",
    "whole_grains": "whole_grains_oz_per_100g",
    "dairy": "dairy_cup_per_100g",
    "total_protein_foods": "total_protein_foods_oz_per_100g",
    "seafood_plant_proteins": "seafood_plant_proteins_oz_per_100g",
    "refined_grains": "refined_grains_oz_per_100g",
}


def hei_components_matrix(weights: np.ndarray, table: NutrientTable,
                          standards: list[HEIComponentStandard]) -> tuple[np.ndarray, list[str]]:
    """Component scores (n, 13) for each weight-matrix row.

    Scoring normalizes each recipe to a 500 kcal serving; the component
    inputs are per-1000-kcal densities (or percent of energy, or the
    unsaturated/saturated fat ratio), which that scaling leaves
    invariant.
    """
    weights = np.atleast_2d(np.asarray(weights, dtype=float))
    energy = table.amounts(weights, ["kcal_per_100g"])[:, 0]
    if (energy <= 0).any():
        raise DataError("healthy eating index undefined for a zero-energy recipe")
    names = [s.component for s in standards]
    scores = np.zeros((weights.shape[0], len(standards)))
    for c, std in enumerate(standards):
        if std.component in _HEI_DENSITY_FIELDS:
            amt = table.amounts(weights, [_HEI_DENSITY_FIELDS[std.component]])[:, 0]
            value = amt * 1000.0 / energy
        elif std.component == "fatty_acids":
            unsat = table.amounts(weights, ["unsaturated_fat_g_per_100g"])[:, 0]
            sat = table.amounts(weights, ["saturated_fat_g_per_100g"])[:, 0]
            # zero saturated fat: max ratio credit if any unsaturated fat, else none
            with np.errstate(divide="ignore", invalid="ignore"):
                value = np.where(sat > 0, unsat / np.where(sat > 0, sat, 1.0),
                                 np.where(unsat > 0, std.max_at, std.zero_at))
        elif std.component == "sodium":
            amt = table.amounts(weights, ["sodium_mg_per_100g"])[:, 0]
            value = amt / 1000.0 * 1000.0 / energy  # grams per 1000 kcal
        elif std.component == "added_sugars":
            amt = table.amounts(weights, ["added_sugars_g_per_100g"])[:, 0]
            value = amt * 4.0 / energy * 100.0  # percent of energy
        elif std.component == "saturated_fats":
            amt = table.amounts(weights, ["saturated_fat_g_per_100g"])[:, 0]
            value = amt * 9.0 / energy * 100.0
        else:
            raise DataError(f"unknown HEI component {std.component!r}")
        scores[:, c] = _component_score(std, value)
    return scores, names


def hei_totals(weights: np.ndarray, table: NutrientTable,
               standards: list[HEIComponentStandard] | None = None) -> np.ndarray:
    standards = standards or load_hei_standards()
    scores, _ = hei_components_matrix(weights, table, standards)
    return scores.sum(axis=1)


def hei_score(recipe: Recipe, table: NutrientTable,
              standards: list[HEIComponentStandard] | None = None) -> HEIResult:
    """13-component healthy eating index of one recipe, total in [0, 100]."""
    if recipe.weights.shape[0] != table.vocabulary.K:
        raise DataError("recipe does not match nutrient table vocabulary")
    standards = standards or load_hei_standards()
    scores, names = hei_components_matrix(recipe.weights[None, :], table, standards)
    comps = {n: float(s) for n, s in zip(names, scores[0])}
    return HEIResult(components=comps, total=float(scores[0].sum()))


# ---------------------------------------------------------------------------
# personalization

ACTIVITY_LEVELS = ("sedentary", "moderate", "active")

# dietary-reference-intake physical activity coefficients by (sex, age group)
_PA = {
    ("male", "child"): {"sedentary": 1.00, "moderate": 1.13, "active": 1.26},
    ("female", "child"): {"sedentary": 1.00, "moderate": 1.16, "active": 1.31},
    ("male", "adult"): {"sedentary": 1.00, "moderate": 1.11, "active": 1.25},
    ("female", "adult"): {"sedentary": 1.00, "moderate": 1.12, "active": 1.27},
}


@dataclass
class PersonProfile:
    age: float
    sex: str
    height_cm: float
    weight_kg: float
    activity: str

    def __post_init__(self):
        if self.age <= 0 or self.height_cm <= 0 or self.weight_kg <= 0:
            raise DataError("age, height, and weight must be positive")
        if self.sex not in ("male", "female"):
            raise DataError(f"unsupported sex {self.sex!r}")
        if self.activity not in ACTIVITY_LEVELS:
            raise DataError(f"activity must be one of {ACTIVITY_LEVELS}")


def energy_requirement(profile: PersonProfile) -> float:
    """Estimated energy requirement in kcal/day from the DRI equations."""
    if profile.age < 1:
        raise DataError("energy requirement is not defined below age 1")
    a, w = profile.age, profile.weight_kg
    h = profile.height_cm / 100.0
    if a < 3:
        return 89.0 * w - 100.0 + 20.0
    group = "adult" if a >= 19 else "child"
    pa = _PA[(profile.sex, group)][profile.activity]
    if a < 19:
        growth = 20.0 if a < 9 else 25.0
        if profile.sex == "male":
            return 88.5 - 61.9 * a + pa * (26.7 * w + 903.0 * h) + growth
        return 135.3 - 30.8 * a + pa * (10.0 * w + 934.0 * h) + growth
    if profile.sex == "male":
        return 662.0 - 9.53 * a + pa * (15.91 * w + 539.6 * h)
    return 354.0 - 6.91 * a + pa * (9.36 * w + 726.0 * h)


def _amdr_ranges(age: float) -> dict[str, tuple[float, float]]:
    # acceptable macronutrient distribution ranges, percent of energy
    if age < 4:
        return {"protein": (5.0, 20.0), "carbohydrate": (45.0, 65.0), "fat": (30.0, 40.0)}
    if age < 19:
        return {"protein": (10.0, 30.0), "carbohydrate": (45.0, 65.0), "fat": (25.0, 35.0)}
    return {"protein": (10.0, 35.0), "carbohydrate": (45.0, 65.0), "fat": (20.0, 35.0)}


# WHO guideline upper limits: sodium 2 g/day; free sugars and saturated
# fats each below 10 percent of energy intake
_WHO_SODIUM_MG_PER_DAY = 2000.0
_WHO_SUGAR_PCT = 10.0
_WHO_SATFAT_PCT = 10.0


def _range_subscore(value: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """100 inside [lo, hi], linear to 0 at twice the bound distance.

    Above hi the score hits 0 at 2*hi; below lo it hits 0 at lo/2.
    """
    value = np.asarray(value, dtype=float)
    out = np.full(value.shape, 100.0)
    over = value > hi
    out = np.where(over, 100.0 * np.clip((2.0 * hi - value) / hi, 0.0, 1.0), out)
    if lo > 0:
        under = value < lo
        out = np.where(under, 100.0 * np.clip(2.0 * value / lo - 1.0, 0.0, 1.0), out)
    return out


def personalized_scores(weights: np.ndarray, profile: PersonProfile,
                        table: NutrientTable, meal_fraction: float = 1.0 / 3.0) -> np.ndarray:
    """Vectorized personalized nutrition score per weight-matrix row.

    Each recipe is scaled to meal_fraction of the profile's daily energy
    requirement; macronutrients are judged against the age-specific
    acceptable distribution ranges and sodium, free sugars, and saturated
    fat against the WHO upper limits, pro-rated to the meal.
    """
    weights = np.atleast_2d(np.asarray(weights, dtype=float))
    fields = ["kcal_per_100g", "protein_g_per_100g", "carbohydrate_g_per_100g",
              "fat_g_per_100g", "sodium_mg_per_100g", "added_sugars_g_per_100g",
              "saturated_fat_g_per_100g"]
    amt = table.amounts(weights, fields)
    energy = amt[:, 0]
    if (energy <= 0).any():
        raise DataError("personalized score undefined for a zero-energy recipe")
    eer = energy_requirement(profile)
    scale = (eer * meal_fraction) / energy

    amdr = _amdr_ranges(profile.age)
    protein_pct = amt[:, 1] * 4.0 / energy * 100.0
    carb_pct = amt[:, 2] * 4.0 / energy * 100.0
    fat_pct = amt[:, 3] * 9.0 / energy * 100.0
    sodium_mg = amt[:, 4] * scale
    sugar_pct = amt[:, 5] * 4.0 / energy * 100.0
    satfat_pct = amt[:, 6] * 9.0 / energy * 100.0

    subs = np.stack([
        _range_subscore(protein_pct, *amdr["protein"]),
        _range_subscore(carb_pct, *amdr["carbohydrate"]),
        _range_subscore(fat_pct, *amdr["fat"]),
        _range_subscore(sodium_mg, 0.0, _WHO_SODIUM_MG_PER_DAY * meal_fraction),
        _range_subscore(sugar_pct, 0.0, _WHO_SUGAR_PCT),
        _range_subscore(satfat_pct, 0.0, _WHO_SATFAT_PCT),
    ], axis=1)
    return subs.mean(axis=1)


def personalized_score(recipe: Recipe, profile: PersonProfile, table: NutrientTable,
                       meal_fraction: float = 1.0 / 3.0) -> float:
    """Personalized nutrition score of one recipe on a 0-100 scale."""
    if recipe.weights.shape[0] != table.vocabulary.K:
        raise DataError("recipe does not match nutrient table vocabulary")
    return float(personalized_scores(recipe.weights[None, :], profile, table, meal_fraction)[0])
