"""Semantic counting on a two-colour scene with a colour-matching oracle in
place of a trained model, so the discovery loop can be watched in isolation.

    python demos/semantic_demo.py
"""

import numpy as np

from selfcollage.composer import build_density_map
from selfcollage.semantic import semantic_count

SIZE, PATCH = 384, 16
COLOURS = {"red": (220, 30, 30), "blue": (30, 30, 220)}


def scene(rng):
    image = np.full((SIZE, SIZE, 3), 235, np.uint8)
    saliency = np.zeros((SIZE // PATCH, SIZE // PATCH))
    cells = rng.permutation([(r, c) for r in range(1, 24, 4) for c in range(1, 24, 4)])
    planted, boxes = {}, {}
    for name, n in zip(COLOURS, rng.integers(3, 8, 2)):
        planted[name] = int(n)
        boxes[name] = []
        for r, c in cells[:n]:
            y, x = r * PATCH + PATCH // 2, c * PATCH + PATCH // 2
            image[y - 10:y + 10, x - 10:x + 10] = COLOURS[name]
            saliency[r, c] = 1.0
            boxes[name].append((x - 10, y - 10, 20, 20))
        cells = cells[n:]
    return image, saliency, planted, boxes


class ColourOracle:
    def __init__(self, boxes):
        self.boxes = boxes

    def predict_density(self, image, exemplars):
        mean = exemplars[0].reshape(-1, 3).mean(axis=0)
        name = min(COLOURS, key=lambda k: np.abs(mean - COLOURS[k]).sum())
        return build_density_map(self.boxes[name], SIZE, SIZE)


if __name__ == "__main__":
    image, saliency, planted, boxes = scene(np.random.default_rng(0))
    result = semantic_count(ColourOracle(boxes), image, attention=saliency)
    print("planted:", planted)
    for i, cat in enumerate(result.categories):
        print(f"category {i}: count {cat.count:.2f}, exemplar box {tuple(round(v) for v in cat.refined_box)}")
    print("stopped:", result.stop_reason)
