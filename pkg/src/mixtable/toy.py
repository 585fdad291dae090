"""Small synthetic tables with known ground truth, for demos and tests."""
from __future__ import annotations

import numpy as np

from .data import DatasetBundle, FeatureSchema


def _bundle(id, description, features, columns):
    n = len(columns[0])
    return DatasetBundle(id, description, tuple(features), tuple(columns), np.zeros((n, len(features)), dtype=bool))


def table_a(n, seed=0):
    """score ~ N(2, 1); group in {X, Y} with P(X) = 0.7 overall,
    0.9 above the mean and 0.5 below it."""
    rng = np.random.default_rng([seed, 1])
    score = rng.normal(2.0, 1.0, n)
    p_x = np.where(score > 2.0, 0.9, 0.5)
    group = (rng.random(n) >= p_x).astype(np.int64)  # 0 = X, 1 = Y
    feats = [FeatureSchema("score", "numerical"), FeatureSchema("group", "categorical", ("X", "Y"))]
    return _bundle("toy_a", "Scores of participants and their assigned group.", feats, [score, group])


TABLE_A_TRUTH = {"score": (2.0, 1.0), "group": (0.7, 0.3)}


def table_b(n, seed=0):
    """level ~ U(0, 10); colour in {red, green, blue} with probabilities (0.5, 0.3, 0.2)."""
    rng = np.random.default_rng([seed, 2])
    level = rng.uniform(0.0, 10.0, n)
    colour = rng.choice(3, size=n, p=[0.5, 0.3, 0.2]).astype(np.int64)
    feats = [FeatureSchema("level", "numerical"), FeatureSchema("colour", "categorical", ("red", "green", "blue"))]
    return _bundle("toy_b", "Fill level of containers and their colour.", feats, [level, colour])


TABLE_B_TRUTH = {"level": (5.0, 10.0 / np.sqrt(12.0)), "colour": (0.5, 0.3, 0.2)}


def table_c(n, seed=0):
    """Held-out table unlike A and B: pressure tracks temperature almost
    linearly (correlation ~0.99) and phase switches from cold to warm
    around 20 degrees."""
    rng = np.random.default_rng([seed, 3])
    temperature = rng.normal(20.0, 5.0, n)
    pressure = 1.5 * temperature + rng.normal(0.0, 1.0, n)
    p_warm = 1.0 / (1.0 + np.exp(-(temperature - 20.0) / 1.5))
    phase = (rng.random(n) < p_warm).astype(np.int64)  # 0 = cold, 1 = warm
    feats = [
        FeatureSchema("temperature", "numerical"),
        FeatureSchema("pressure", "numerical"),
        FeatureSchema("phase", "categorical", ("cold", "warm")),
    ]
    return _bundle("toy_c", "Temperature, pressure and phase readings from a sealed chamber.", feats, [temperature, pressure, phase])
