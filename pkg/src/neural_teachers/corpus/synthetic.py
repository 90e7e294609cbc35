"""Scripted-procedure recipes drawn from a small ordered-stage grammar.

Every body walks the grammar's stages in order (prep, combine, heat, finish by
default), one to three sentences per stage, so sentence order carries real
signal for the ordering teachers while the vocabulary stays small.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .records import RecipeRecord


@dataclass(frozen=True)
class Stage:
    name: str
    templates: tuple[str, ...]
    # dish -> template indices allowed for that dish; dishes not listed use all
    by_dish: dict[str, tuple[int, ...]] = field(default_factory=dict)


@dataclass(frozen=True)
class Grammar:
    stages: tuple[Stage, ...]
    dishes: tuple[str, ...]
    adjectives: tuple[str, ...]
    ingredients: tuple[tuple[str, str], ...]  # (phrase, head word used in the body)
    numbers: tuple[str, ...] = ("10", "15", "20", "30", "45")
    temperatures: tuple[str, ...] = ("350", "375", "400")
    sentences_per_stage: tuple[int, int] = (1, 3)
    ingredients_per_recipe: tuple[int, int] = (3, 5)


def default_grammar() -> Grammar:
    prep = Stage("prep", (
        "wash and chop the {a} .",
        "peel the {a} and slice it thin .",
        "dice the {b} .",
        "rinse the {a} well .",
        "preheat the oven to {temp} degrees .",
        "grate the {c} .",
    ), {"soup": (0, 1, 2, 3, 5), "stew": (0, 1, 2, 3, 5), "fritters": (0, 1, 2, 3, 5)})
    combine = Stage("combine", (
        "mix the {a} with the {b} in a large bowl .",
        "stir the {b} into the {a} .",
        "combine the {a} , {b} and {c} .",
        "add the {c} and blend well .",
        "whisk the {b} until smooth .",
    ))
    heat = Stage("heat", (
        "bake for {n} minutes .",
        "simmer over low heat for {n} minutes .",
        "fry the mixture in hot oil until golden .",
        "cook until the {a} is tender .",
        "heat the pan and melt the {b} .",
        "boil the mixture gently .",
    ), {
        "casserole": (0, 3), "pie": (0,), "bake": (0, 3),
        "soup": (1, 3, 5), "stew": (1, 3, 5), "fritters": (2, 4),
    })
    finish = Stage("finish", (
        "serve warm .",
        "garnish with {c} and serve .",
        "let cool before slicing .",
        "transfer to a plate and serve hot .",
        "chill for {n} minutes before serving .",
    ))
    ingredients = (
        ("chopped onion", "onion"), ("carrots", "carrots"), ("potatoes", "potatoes"),
        ("chicken breast", "chicken"), ("butter", "butter"), ("2 cups flour", "flour"),
        ("sugar", "sugar"), ("eggs", "eggs"), ("milk", "milk"), ("shredded cheese", "cheese"),
        ("tomatoes", "tomatoes"), ("garlic", "garlic"), ("rice", "rice"), ("ground beef", "beef"),
        ("apples", "apples"), ("spinach", "spinach"), ("mushrooms", "mushrooms"),
        ("cream", "cream"), ("lemon juice", "lemon"), ("bread crumbs", "crumbs"),
    )
    return Grammar(
        stages=(prep, combine, heat, finish),
        dishes=("casserole", "soup", "stew", "pie", "bake", "fritters"),
        adjectives=("easy", "classic", "spicy", "creamy", "quick", "country"),
        ingredients=ingredients,
    )


def _one_recipe(rng: np.random.Generator, g: Grammar) -> RecipeRecord:
    dish = g.dishes[rng.integers(len(g.dishes))]
    k = int(rng.integers(g.ingredients_per_recipe[0], g.ingredients_per_recipe[1] + 1))
    chosen = [g.ingredients[i] for i in rng.choice(len(g.ingredients), size=k, replace=False)]
    heads = [h for _, h in chosen]
    slots = {
        "a": heads[0], "b": heads[1], "c": heads[2],
        "n": g.numbers[rng.integers(len(g.numbers))],
        "temp": g.temperatures[rng.integers(len(g.temperatures))],
    }
    adjective = g.adjectives[rng.integers(len(g.adjectives))]
    title = f"{adjective} {heads[0]} {dish}"
    sentences, stages = [], []
    lo, hi = g.sentences_per_stage
    for label, stage in enumerate(g.stages):
        allowed = stage.by_dish.get(dish, tuple(range(len(stage.templates))))
        count = min(int(rng.integers(lo, hi + 1)), len(allowed))
        picks = sorted(rng.choice(len(allowed), size=count, replace=False))
        for p in picks:
            sentences.append(stage.templates[allowed[p]].format(**slots))
            stages.append(label)
    return RecipeRecord.from_text(title, [p for p, _ in chosen], " ".join(sentences), stages)


def generate_synthetic_corpus(seed: int, n_recipes: int, grammar: Grammar | None = None) -> list[RecipeRecord]:
    """``n_recipes`` distinct recipes; identical output for identical seed and grammar."""
    g = grammar or default_grammar()
    rng = np.random.default_rng(seed)
    seen: set[str] = set()
    out: list[RecipeRecord] = []
    attempts = 0
    while len(out) < n_recipes:
        attempts += 1
        if attempts > 100 * max(n_recipes, 1):
            raise RuntimeError("grammar too small to produce the requested number of distinct recipes")
        rec = _one_recipe(rng, g)
        key = repr(rec.to_json())
        if key in seen:
            continue
        seen.add(key)
        out.append(rec)
    return out


def split_corpus(records: list[RecipeRecord], n_dev: int, n_test: int = 0):
    """Head/tail split into (train, dev, test); records are distinct so the parts are disjoint."""
    if n_dev + n_test > len(records):
        raise ValueError("held-out sizes exceed the corpus")
    n_train = len(records) - n_dev - n_test
    return records[:n_train], records[n_train:n_train + n_dev], records[n_train + n_dev:]
