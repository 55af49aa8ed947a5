from __future__ import annotations

import random

import pytest

from groundtok.geometry import BoundingBox, ScoredBox


@pytest.fixture
def rnd() -> random.Random:
    return random.Random(12345)


def box(x0, y0, x1, y1) -> BoundingBox:
    return BoundingBox(float(x0), float(y0), float(x1), float(y1))


def random_boxes(rng: random.Random, n: int, extent: float = 100.0) -> list[BoundingBox]:
    out = []
    for _ in range(n):
        x0 = rng.uniform(0, extent * 0.9)
        y0 = rng.uniform(0, extent * 0.9)
        out.append(BoundingBox(x0, y0, x0 + rng.uniform(0.5, extent * 0.4), y0 + rng.uniform(0.5, extent * 0.4)))
    return out


def random_scored(rng: random.Random, n: int, extent: float = 100.0) -> list[ScoredBox]:
    return [ScoredBox(b, round(rng.random(), 6)) for b in random_boxes(rng, n, extent)]
