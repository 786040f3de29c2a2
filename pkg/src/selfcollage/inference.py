"""Image-level counting protocol.

Any object with ``predict_density(image, exemplars) -> H x W array`` can be
used as the predictor; :class:`~selfcollage.model.CountingModel` is the usual
one, test stubs are another.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .composer import crop_exemplar
from .io import resize_density, resize_image


@dataclass(frozen=True)
class InferenceConfig:
    target_height: int | None = 384  # None processes images at native size
    window: int = 384
    stride: int = 128
    small_object_px: float = 10
    tiling_grid: int = 3
    ttn_threshold: float = 1.8
    refine_count_threshold: float | None = None
    exemplar_height: int = 64
    exemplar_width: int = 64

    def __post_init__(self):
        if not 0 < self.stride <= self.window:
            raise ValueError("need 0 < stride <= window")
        if self.small_object_px <= 0 or self.ttn_threshold <= 0:
            raise ValueError("thresholds must be positive")
        if self.refine_count_threshold is not None and self.refine_count_threshold <= 0:
            raise ValueError("refine_count_threshold must be positive")
        if self.tiling_grid < 1:
            raise ValueError("tiling_grid must be >= 1")


@dataclass
class CountResult:
    count: float
    rounded: int
    density: np.ndarray  # original image coordinates, before normalisation
    path: str  # "direct" | "tiled" | "refined"
    metadata: dict = field(default_factory=dict)

    def to_dict(self, include_density: bool = False) -> dict:
        out = {"count": float(self.count), "rounded": int(self.rounded), "path": self.path,
               "metadata": self.metadata}
        if include_density:
            out["density"] = self.density.tolist()
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def _patch_size(predictor) -> int:
    return int(getattr(predictor, "patch_size", 1) or 1)


def resized_shape(height: int, width: int, target_height: int | None, patch_size: int = 16):
    if target_height is None:
        return height, width
    new_w = max(1, int(round(width * target_height / height)))
    return target_height, int(math.ceil(new_w / patch_size) * patch_size)


def resize_to_height(image: np.ndarray, target_height: int, patch_size: int = 16) -> np.ndarray:
    """Aspect-preserving resize to ``target_height``; the width is rounded and
    then snapped up to a multiple of ``patch_size``."""
    h, w = resized_shape(image.shape[0], image.shape[1], target_height, patch_size)
    return resize_image(image, h, w)


def window_starts(width: int, window: int, stride: int) -> list[int]:
    if width <= window:
        return [0]
    starts = list(range(0, width - window + 1, stride))
    if starts[-1] + window < width:
        starts.append(width - window)
    return starts


def sliding_window_density(predictor, image: np.ndarray, exemplars, config: InferenceConfig) -> np.ndarray:
    """Scan full-height windows along the width and average overlaps."""
    h, w = image.shape[:2]
    win = config.window
    if w < win:
        padded = np.pad(image, ((0, 0), (0, win - w), (0, 0)), mode="reflect" if w > 1 else "edge")
        return np.asarray(predictor.predict_density(padded, exemplars), np.float64)[:, :w]
    acc = np.zeros((h, w), np.float64)
    cover = np.zeros(w, np.float64)
    for x0 in window_starts(w, win, config.stride):
        acc[:, x0:x0 + win] += predictor.predict_density(image[:, x0:x0 + win], exemplars)
        cover[x0:x0 + win] += 1
    return acc / cover[None, :]


def needs_tiling(exemplar_boxes, config: InferenceConfig) -> bool:
    return any(b[2] < config.small_object_px and b[3] < config.small_object_px for b in exemplar_boxes)


def _scale_boxes(boxes, sx, sy):
    return [(b[0] * sx, b[1] * sy, b[2] * sx, b[3] * sy) for b in boxes]


def box_mass(density: np.ndarray, box) -> float:
    x, y, w, h = box
    H, W = density.shape
    x0, y0 = max(0, int(math.floor(x))), max(0, int(math.floor(y)))
    x1, y1 = min(W, int(math.ceil(x + w))), min(H, int(math.ceil(y + h)))
    if x1 <= x0 or y1 <= y0:
        return 0.0
    return float(density[y0:y1, x0:x1].sum())


def _resize(image, config, patch):
    if config.target_height is None:
        return np.asarray(image)
    return resize_to_height(image, config.target_height, patch)


def _exemplar_crops(predictor, image, boxes, config):
    patch = _patch_size(predictor)
    resized = _resize(image, config, patch)
    sy, sx = resized.shape[0] / image.shape[0], resized.shape[1] / image.shape[1]
    rboxes = _scale_boxes(boxes, sx, sy)
    crops = [crop_exemplar(resized, b, config.exemplar_height, config.exemplar_width) for b in rboxes]
    return resized, rboxes, crops


def _predict_region(predictor, region, crops, config):
    """Density of ``region`` mapped back to the region's own pixel grid."""
    resized = _resize(region, config, _patch_size(predictor))
    density = sliding_window_density(predictor, resized, crops, config)
    return resize_density(density.astype(np.float32), region.shape[0], region.shape[1]).astype(np.float64)


def tile_bounds(size: int, parts: int) -> list[tuple[int, int]]:
    """Even partition of ``[0, size)``; the last part absorbs the remainder."""
    step = size // parts
    if step == 0:
        return [(0, size)]
    edges = [i * step for i in range(parts)] + [size]
    return [(edges[i], edges[i + 1]) for i in range(parts)]


def _count_direct(predictor, image, boxes, config):
    resized, rboxes, crops = _exemplar_crops(predictor, image, boxes, config)
    density = sliding_window_density(predictor, resized, crops, config)
    raw = float(density.sum())
    mass = float(np.mean([box_mass(density, b) for b in rboxes]))
    orig = resize_density(density.astype(np.float32), image.shape[0], image.shape[1])
    return raw, mass, orig


def _count_tiled(predictor, image, boxes, config):
    _, _, crops = _exemplar_crops(predictor, image, boxes, config)
    H, W = image.shape[:2]
    density = np.zeros((H, W), np.float64)
    for y0, y1 in tile_bounds(H, config.tiling_grid):
        for x0, x1 in tile_bounds(W, config.tiling_grid):
            density[y0:y1, x0:x1] = _predict_region(predictor, image[y0:y1, x0:x1], crops, config)
    raw = float(density.sum())
    mass = float(np.mean([box_mass(density, b) for b in boxes]))
    return raw, mass, density.astype(np.float32)


def _finish(raw, mass, density, path, config):
    normalized = mass > config.ttn_threshold
    count = raw / mass if normalized else raw
    meta = {"raw_count": raw, "exemplar_mass": mass, "normalized": bool(normalized)}
    return CountResult(count, int(round(count)), density, path, meta)


def count_image(predictor, image: np.ndarray, exemplar_boxes, config: InferenceConfig = InferenceConfig()) -> CountResult:
    """Count objects matching the exemplar boxes (original image coordinates).

    Test-time normalisation rescales only the scalar count; the raw exemplar
    mass and raw count are kept in ``metadata``.
    """
    boxes = [tuple(float(v) for v in b) for b in exemplar_boxes]
    if not boxes:
        raise ValueError("at least one exemplar box is required")
    image = np.asarray(image)
    h, w = image.shape[:2]
    rh, rw = resized_shape(h, w, config.target_height, _patch_size(predictor))
    if needs_tiling(_scale_boxes(boxes, rw / w, rh / h), config):
        result = _finish(*_count_tiled(predictor, image, boxes, config), "tiled", config)
    else:
        result = _finish(*_count_direct(predictor, image, boxes, config), "direct", config)
        thr = config.refine_count_threshold
        if thr is not None and result.count > thr:
            first = result.count
            result = _finish(*_count_tiled(predictor, image, boxes, config), "refined", config)
            result.metadata["first_pass_count"] = first
    return result
