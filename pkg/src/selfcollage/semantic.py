"""Self-supervised semantic counting: discover object types from CLS
attention, refine self-proposed exemplars with the counting model and count
each type in turn."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .composer import crop_exemplar
from .inference import box_mass
from .io import resize_density, resize_image

logger = logging.getLogger(__name__)

FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)


class NoSalientObject(ValueError):
    pass


@dataclass(frozen=True)
class SemanticConfig:
    input_size: int = 384
    blur_kernel: int = 3
    blur_sigma: float = 1.5
    candidate_frac: float = 0.5
    refine_frac: float = 0.2
    refine_iters: int = 2
    shrink: float = 0.3
    mask_value: float = 0.5
    mask_block: int = 5
    stop_frac: float = 0.2
    ttn_threshold: float = 1.8
    exemplar_height: int = 64
    exemplar_width: int = 64


@dataclass
class Category:
    candidate_box: tuple
    refined_box: tuple
    exemplar: np.ndarray
    density: np.ndarray
    count: float
    raw_count: float
    peak: tuple


@dataclass
class SemanticResult:
    categories: list = field(default_factory=list)
    stop_reason: str = ""
    attention_peaks: list = field(default_factory=list)  # blurred max before each proposal
    attention_mass: list = field(default_factory=list)  # raw attention sum before each proposal

    def to_dict(self) -> dict:
        return {
            "stop_reason": self.stop_reason,
            "attention_peaks": [float(v) for v in self.attention_peaks],
            "attention_mass": [float(v) for v in self.attention_mass],
            "categories": [{"candidate_box": list(map(float, c.candidate_box)),
                            "refined_box": list(map(float, c.refined_box)),
                            "count": float(c.count), "raw_count": float(c.raw_count),
                            "peak": list(map(int, c.peak))} for c in self.categories],
        }


def blur_attention(attention, kernel: int = 3, sigma: float = 1.5) -> np.ndarray:
    radius = kernel // 2
    return ndimage.gaussian_filter(np.asarray(attention, np.float64), sigma,
                                   mode="nearest", truncate=radius / sigma)


def _bbox(mask):
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return cols[0], rows[0], cols[-1] + 1 - cols[0], rows[-1] + 1 - rows[0]


def propose_candidate(attention, patch_size: int, blur: bool = True, frac: float = 0.5,
                      kernel: int = 3, sigma: float = 1.5):
    """Box (image pixels) of the above-``frac * max`` component holding the
    attention peak.  Returns ``(box, (row, col))``."""
    a = np.asarray(getattr(attention, "values", attention), np.float64)
    if blur:
        a = blur_attention(a, kernel, sigma)
    peak_value = a.max()
    if not peak_value > 0:
        raise NoSalientObject("attention map has no positive entry")
    peak = np.unravel_index(int(np.argmax(a)), a.shape)
    labels, _ = ndimage.label(a > frac * peak_value, structure=FOUR_CONNECTED)
    x, y, w, h = _bbox(labels == labels[peak])
    return (x * patch_size, y * patch_size, w * patch_size, h * patch_size), (int(peak[0]), int(peak[1]))


def shrink_box(box, factor: float):
    """Centre crop reducing each side by ``factor`` of its length."""
    x, y, w, h = box
    nw, nh = max(1.0, w * (1 - factor)), max(1.0, h * (1 - factor))
    return (x + (w - nw) / 2, y + (h - nh) / 2, nw, nh)


def _crop(image, box, config):
    return crop_exemplar(image, box, config.exemplar_height, config.exemplar_width)


def second_largest_component(density: np.ndarray, frac: float):
    """Mask of the second-largest above-``frac * max`` component, or None."""
    peak = density.max()
    if not peak > 0:
        return None
    labels, n = ndimage.label(density > frac * peak, structure=FOUR_CONNECTED)
    if n < 2:
        return None
    sizes = np.bincount(labels.ravel())[1:]
    order = np.argsort(-sizes, kind="stable")
    return labels == order[1] + 1


def refine_exemplar(model, image: np.ndarray, candidate_box, iters: int = 2,
                    config: SemanticConfig = SemanticConfig()):
    """Iteratively move the exemplar onto a single predicted object."""
    box = tuple(float(v) for v in candidate_box)
    for it in range(iters):
        density = np.asarray(model.predict_density(image, [_crop(image, box, config)]))
        comp = second_largest_component(density, config.refine_frac)
        if comp is None:
            logger.info("refinement step %d found fewer than two components; keeping box", it)
            break
        box = shrink_box(tuple(float(v) for v in _bbox(comp)), config.shrink)
    return box


def mask_counted(attention, candidate_density, refined_density, peak, value: float = 0.5,
                 block: int = 5) -> np.ndarray:
    """Zero attention where either density reaches ``value`` and in a
    ``block x block`` window around ``peak``."""
    a = np.array(attention, dtype=np.float64)
    a[(np.asarray(candidate_density) >= value) | (np.asarray(refined_density) >= value)] = 0.0
    r, c = peak
    half = block // 2
    a[max(0, r - half):r + half + 1, max(0, c - half):c + half + 1] = 0.0
    return a


def semantic_count(model, image: np.ndarray, config: SemanticConfig = SemanticConfig(),
                   attention: np.ndarray | None = None) -> SemanticResult:
    """Discover and count every salient object type in ``image``.

    ``attention`` (an ``h x w`` saliency map for the resized image) defaults
    to the model backbone's head-averaged CLS attention.
    """
    img = resize_image(image, config.input_size, config.input_size)
    if attention is None:
        attention = model.backbone.cls_attention(img).values
    # the raw map is the loop state: masking acts on it and every proposal
    # re-blurs it, so masked peaks leave no blurred halo behind
    raw_attention = np.array(attention, dtype=np.float64)
    gh, gw = raw_attention.shape
    patch = config.input_size // gh
    blur = (config.blur_kernel, config.blur_sigma)
    result = SemanticResult()
    original_max = blur_attention(raw_attention, *blur).max()
    if not original_max > 0:
        result.stop_reason = "no salient object"
        return result
    previous = np.zeros((config.input_size, config.input_size), np.float64)
    # every pass zeroes a block holding the blurred peak's support, so the
    # remaining attention mass strictly falls; the cap bounds the pass count
    for _ in range(math.ceil(gh * gw / config.mask_block ** 2)):
        current = float(blur_attention(raw_attention, *blur).max())
        result.attention_peaks.append(current)
        result.attention_mass.append(float(raw_attention.sum()))
        if current < config.stop_frac * original_max:
            result.stop_reason = "attention exhausted"
            return result
        box, peak = propose_candidate(raw_attention, patch, frac=config.candidate_frac,
                                      kernel=config.blur_kernel, sigma=config.blur_sigma)
        y_cand = np.asarray(model.predict_density(img, [_crop(img, box, config)]), np.float64)
        refined = refine_exemplar(model, img, box, config.refine_iters, config)
        exemplar = _crop(img, refined, config)
        y_ref = np.asarray(model.predict_density(img, [exemplar]), np.float64)
        y_t = np.maximum(y_ref - previous, 0.0)
        previous += y_t  # y_t is already clamped at zero
        raw = float(y_t.sum())
        mass = box_mass(y_t, refined)
        count = raw / mass if mass > config.ttn_threshold else raw
        result.categories.append(Category(box, refined, exemplar, y_t, count, raw, peak))
        raw_attention = mask_counted(raw_attention, resize_density(y_cand.astype(np.float32), gh, gw),
                                     resize_density(y_ref.astype(np.float32), gh, gw), peak,
                                     config.mask_value, config.mask_block)
    result.stop_reason = "iteration cap"
    return result
