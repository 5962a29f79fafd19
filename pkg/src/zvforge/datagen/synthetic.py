"""Seeded symbolic scenes standing in for annotated images."""
from __future__ import annotations

from typing import List

import numpy as np

from .types import Box, Exemplar, JobKind, SymbolicImage

OBJECTS = ("dog", "cat", "bicycle", "car", "person", "umbrella", "bench", "kite", "horse", "boat",
           "cup", "laptop", "tree", "bus", "bird", "ball")
PLACES = ("park", "street", "beach", "kitchen", "garden", "harbor", "field", "office")
ACTIONS = ("playing", "resting", "waiting", "standing", "moving", "sitting")


def _box(rng) -> tuple:
    x1, y1 = (round(float(v), 3) for v in rng.uniform(0.0, 0.6, size=2))
    w, h = (round(float(v), 3) for v in rng.uniform(0.1, 0.39, size=2))
    return x1, y1, round(x1 + w, 3), round(y1 + h, 3)


def synthetic_images(n: int, seed: int = 0, prefix: str = "scene") -> List[SymbolicImage]:
    rng = np.random.default_rng([seed, 2718])
    out = []
    for i in range(n):
        objs = [OBJECTS[j] for j in rng.choice(len(OBJECTS), size=int(rng.integers(1, 4)), replace=False)]
        place = PLACES[int(rng.integers(len(PLACES)))]
        act = ACTIONS[int(rng.integers(len(ACTIONS)))]
        caps = (f"A {objs[0]} {act} in the {place}.",
                f"There is a {' and a '.join(objs)} in a {place}.")
        boxes = tuple(Box(o, *_box(rng)) for o in objs)
        out.append(SymbolicImage(f"{prefix}-{i:06d}", caps, boxes))
    return out


def synthetic_exemplars(n: int = 50, seed: int = 0) -> List[Exemplar]:
    """Hand-style exemplars cycling through the three generation kinds."""
    kinds = (JobKind.CONVERSATION, JobKind.DETAIL, JobKind.REASONING)
    out = []
    for i, img in enumerate(synthetic_images(n, seed + 10_000, prefix="exemplar")):
        kind = kinds[i % 3]
        main = img.boxes[0]
        coords = f"({main.x1:.3f},{main.y1:.3f},{main.x2:.3f},{main.y2:.3f})"
        if kind is JobKind.CONVERSATION:
            turns = (("user", "What can you see in this image?"), ("assistant", img.captions[0]),
                     ("user", f"Where exactly is the {main.tag}?"),
                     ("assistant", f"The {main.tag} occupies the region {coords}."))
            out.append(Exemplar(f"ex-{i:03d}", img, turns[0][1], turns[1][1], kind, turns))
        elif kind is JobKind.DETAIL:
            text = " ".join(img.captions) + " " + "; ".join(
                f"the {b.tag} sits at ({b.x1:.3f},{b.y1:.3f},{b.x2:.3f},{b.y2:.3f})" for b in img.boxes) + "."
            out.append(Exemplar(f"ex-{i:03d}", img, "Describe this image in detail.", text, kind))
        else:
            out.append(Exemplar(f"ex-{i:03d}", img, f"What might the {main.tag} do next, and why?",
                                f"Judging from the scene ({img.captions[0].rstrip('.').lower()}), the "
                                f"{main.tag} will probably keep {img.captions[0].split()[2]} for a while "
                                f"because nothing in the picture interrupts it.", kind))
    return out
