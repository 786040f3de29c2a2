"""Self-Collage composer: turn unlabelled object and background pools into
``(image, exemplars, density)`` training tuples."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .clustering import ClusterModel, SimilarityRange, pick_nontarget_clusters
from .datasets import BackgroundSource, DatasetError, ObjectSource
from .io import resize_field, resize_image

logger = logging.getLogger(__name__)

MAX_LAYOUT_ATTEMPTS = 20
PASTE_MODES = ("segmented", "whole-image")


@dataclass(frozen=True)
class ComposerConfig:
    t_min: int = 2
    t_max: int = 2
    n_min: int = 3
    n_max: int = 20
    d_min: float = 15.0
    d_max: float = 70.0
    sigma: float = 0.3
    overlap_allowed: bool = True
    paste_mode: str = "segmented"
    height: int = 224
    width: int = 224
    exemplar_height: int = 64
    exemplar_width: int = 64
    num_exemplars: int = 3
    similarity_range: SimilarityRange | None = None

    def __post_init__(self):
        if not 1 <= self.t_min <= self.t_max:
            raise ValueError("need 1 <= t_min <= t_max")
        if not 1 <= self.n_min <= self.n_max - self.t_max + 1:
            raise ValueError("need 1 <= n_min <= n_max - t_max + 1")
        if not 0 < self.d_min <= self.d_max <= min(self.height, self.width):
            raise ValueError("need 0 < d_min <= d_max <= min(H, W)")
        if not 0 < self.sigma < 1:
            raise ValueError("sigma must lie in (0, 1)")
        if self.paste_mode not in PASTE_MODES:
            raise ValueError(f"paste_mode must be one of {PASTE_MODES}")
        if self.num_exemplars < 1:
            raise ValueError("num_exemplars must be >= 1")
        if isinstance(self.similarity_range, (list, tuple)):
            object.__setattr__(self, "similarity_range", SimilarityRange(*self.similarity_range))


@dataclass
class CountPlan:
    n_c: int
    counts: tuple  # counts[0] is the target cluster


@dataclass
class PlacedObject:
    box: tuple  # (x, y, w, h) in canvas pixels
    cluster_id: int
    is_target: bool
    source_index: int = -1


@dataclass
class SelfCollageSample:
    image: np.ndarray
    placed: list
    density: np.ndarray
    exemplar_boxes: list
    seed: int
    owner: np.ndarray | None = field(default=None, repr=False)  # top-most object per pixel, -1 = background

    @property
    def target_boxes(self) -> list:
        return [p.box for p in self.placed if p.is_target]

    @property
    def count(self) -> int:
        return sum(p.is_target for p in self.placed)

    def metadata(self) -> dict:
        return {
            "seed": int(self.seed),
            "count": self.count,
            "placed": [{"box": list(p.box), "cluster_id": int(p.cluster_id),
                        "is_target": bool(p.is_target), "source_index": int(p.source_index)}
                       for p in self.placed],
            "exemplar_boxes": [list(b) for b in self.exemplar_boxes],
        }


def sample_counts(config: ComposerConfig, rng) -> CountPlan:
    n_c = int(rng.integers(config.t_min, config.t_max + 1))
    counts = [int(rng.integers(config.n_min, config.n_max - n_c + 2))]
    for i in range(1, n_c - 1):
        remaining = n_c - i - 1  # clusters still needing at least one object
        hi = config.n_max - sum(counts) - remaining
        counts.append(int(rng.integers(1, hi + 1)))
    if n_c > 1:
        counts.append(config.n_max - sum(counts))
    return CountPlan(n_c, tuple(counts))


def select_images(plan: CountPlan, cluster_model: ClusterModel, object_source=None,
                  similarity_range: SimilarityRange | None = None, rng=None):
    """Pick ``plan.n_c`` distinct clusters and ``counts[i]`` member images of
    each.  Returns ``[(cluster_id, indices), ...]`` with the target first."""
    if object_source is not None and len(object_source) != len(cluster_model.assignments):
        raise ValueError("cluster model was not fit on this object source")
    sizes = np.bincount(cluster_model.assignments, minlength=cluster_model.k)
    live = np.flatnonzero(sizes > 0)
    if live.size == 0:
        raise DatasetError("no cluster has any member images")
    target = int(live[rng.integers(live.size)])
    clusters = [target]
    if plan.n_c > 1:
        clusters += pick_nontarget_clusters(cluster_model, target, plan.n_c - 1, similarity_range, rng)
    out = []
    for cid, n in zip(clusters, plan.counts):
        members = cluster_model.members(cid)
        if members.size == 0:
            raise DatasetError(f"cluster {cid} has no member images")
        replace = members.size < n
        if replace:
            logger.warning("cluster %d has %d images, %d requested; sampling with replacement",
                           cid, members.size, n)
        out.append((cid, rng.choice(members, size=n, replace=replace)))
    return out


def cut_object(image: np.ndarray, mask: np.ndarray):
    """Premultiply by the mask and drop fully masked rows and columns."""
    mask = np.asarray(mask, dtype=np.float32)
    if mask.shape != image.shape[:2]:
        raise ValueError("mask and image dimensions differ")
    rows = np.flatnonzero((mask > 0).any(axis=1))
    cols = np.flatnonzero((mask > 0).any(axis=0))
    if rows.size == 0:
        raise ValueError("empty mask: nothing to cut")
    r0, r1, c0, c1 = rows[0], rows[-1] + 1, cols[0], cols[-1] + 1
    m = mask[r0:r1, c0:c1]
    cut = np.round(image[r0:r1, c0:c1].astype(np.float32) * m[..., None]).astype(np.uint8)
    return cut, m.copy()


def sample_sizes(config: ComposerConfig, object_count: int, rng) -> np.ndarray:
    d_mean = rng.uniform(config.d_min, config.d_max)
    sizes = rng.uniform((1 - config.sigma) * d_mean, (1 + config.sigma) * d_mean, size=object_count)
    return np.clip(sizes, 1, min(config.height, config.width))


def resized_dims(shape, size: int, mode: str = "segmented") -> tuple[int, int]:
    """``(h, w)`` of an object of ``shape`` pasted at ``size``."""
    if mode == "whole-image":
        return size, size
    h, w = shape[:2]
    scale = size / max(h, w)
    return max(1, int(round(h * scale))), max(1, int(round(w * scale)))


def paste_object(canvas: np.ndarray, object_image: np.ndarray, object_mask: np.ndarray,
                 position, size: int, on_top: bool = True, top_alpha: np.ndarray | None = None,
                 mode: str = "segmented"):
    """Composite an object into ``canvas`` (float ``H x W x 3``, modified in place).

    ``top_alpha`` accumulates the coverage of on-top pastes; later pastes with
    ``on_top=False`` are slipped underneath it.  Returns ``(canvas, box,
    alpha)`` where ``alpha`` is the effective per-pixel weight used.
    """
    size = int(round(size))
    h, w = resized_dims(object_image.shape, size, mode)
    x, y = (int(v) for v in position)
    H, W = canvas.shape[:2]
    if x < 0 or y < 0 or x + w > W or y + h > H:
        raise ValueError(f"object of size {h}x{w} at ({x}, {y}) leaves the {H}x{W} canvas")
    obj = resize_image(object_image, h, w).astype(np.float32)
    m = np.clip(resize_field(object_mask, h, w), 0.0, 1.0)
    m[m > 1 - 1e-5] = 1.0
    m[m < 1e-5] = 0.0
    region = (slice(y, y + h), slice(x, x + w))
    if top_alpha is not None and not on_top:
        m = m * (1.0 - top_alpha[region])
    canvas[region] = m[..., None] * obj + (1.0 - m[..., None]) * canvas[region]
    if top_alpha is not None and on_top:
        top_alpha[region] = m + (1.0 - m) * top_alpha[region]
    return canvas, (x, y, w, h), m


def _boxes_overlap(a, b) -> bool:
    return a[0] < b[0] + b[2] and b[0] < a[0] + a[2] and a[1] < b[1] + b[3] and b[1] < a[1] + a[3]


def _layout(config, shapes, rng):
    """Sizes and top-left positions for every object, honouring the overlap policy."""
    H, W = config.height, config.width
    for attempt in range(MAX_LAYOUT_ATTEMPTS + 1):
        sizes = sample_sizes(config, len(shapes), rng)
        boxes = []
        ok = True
        for shape, s in zip(shapes, sizes):
            h, w = resized_dims(shape, int(round(s)), config.paste_mode)
            x = int(rng.integers(0, W - w + 1))
            y = int(rng.integers(0, H - h + 1))
            box = (x, y, w, h)
            if not config.overlap_allowed and attempt < MAX_LAYOUT_ATTEMPTS:
                if any(_boxes_overlap(box, b) for b in boxes):
                    ok = False
                    break
            boxes.append(box)
        if ok:
            if attempt == MAX_LAYOUT_ATTEMPTS and not config.overlap_allowed:
                logger.debug("no-overlap layout failed %d times; allowing overlap", attempt)
            return [int(round(s)) for s in sizes], boxes
    raise AssertionError("unreachable")


def build_density_map(target_boxes, height: int, width: int) -> np.ndarray:
    """Unit impulses at box centres blurred by a Gaussian whose std is the
    mean box side divided by 8, renormalised to sum to the box count."""
    density = np.zeros((height, width), dtype=np.float64)
    if not target_boxes:
        return density.astype(np.float32)
    for x, y, w, h in target_boxes:
        cx = min(width - 1, max(0, int(x + w / 2.0)))
        cy = min(height - 1, max(0, int(y + h / 2.0)))
        density[cy, cx] += 1.0
    std = float(np.mean([(w + h) / 2.0 for _, _, w, h in target_boxes])) / 8.0
    ksize = int(6 * std + 1)
    if ksize % 2 == 0:
        ksize += 1
    radius = ksize // 2
    if radius > 0 and std > 0:
        density = gaussian_filter(density, std, mode="reflect", truncate=radius / std)
    density *= len(target_boxes) / density.sum()
    return density.astype(np.float32)


def crop_exemplar(image: np.ndarray, box, height: int, width: int) -> np.ndarray:
    x, y, w, h = (int(round(v)) for v in box)
    H, W = image.shape[:2]
    x0, y0 = max(0, min(x, W - 1)), max(0, min(y, H - 1))
    x1, y1 = max(x0 + 1, min(x + max(w, 1), W)), max(y0 + 1, min(y + max(h, 1), H))
    return resize_image(image[y0:y1, x0:x1], height, width)


def select_exemplars(sample: SelfCollageSample, num: int, rng, height: int = 64, width: int = 64):
    """Sample ``num`` distinct target boxes and crop them from the collage.

    Returns ``(crops, boxes)``.
    """
    targets = sample.target_boxes
    if not 1 <= num <= len(targets):
        raise ValueError(f"cannot draw {num} exemplars from {len(targets)} target objects")
    idx = rng.choice(len(targets), size=num, replace=False)
    boxes = [targets[i] for i in idx]
    return [crop_exemplar(sample.image, b, height, width) for b in boxes], boxes


def compose(config: ComposerConfig, objects: ObjectSource, backgrounds: BackgroundSource,
            cluster_model: ClusterModel, seed: int) -> SelfCollageSample:
    """Build one Self-Collage; a pure function of its arguments."""
    rng = np.random.default_rng(seed)
    plan = sample_counts(config, rng)
    groups = select_images(plan, cluster_model, objects, config.similarity_range, rng)
    background = backgrounds[int(rng.integers(len(backgrounds)))]
    canvas = resize_image(background, config.height, config.width).astype(np.float32)

    items = [(int(idx), cid, gi == 0) for gi, (cid, idxs) in enumerate(groups) for idx in idxs]
    order = rng.permutation(len(items))
    items = [items[i] for i in order]

    cut = []
    for idx, _, _ in items:
        item = objects[idx]
        mask = item.mask
        if config.paste_mode == "whole-image" or mask is None or not (mask > 0).any():
            cut.append((item.image, np.ones(item.image.shape[:2], np.float32)))
        else:
            cut.append(cut_object(item.image, mask))

    sizes, boxes = _layout(config, [c[0].shape for c in cut], rng)

    top_alpha = np.zeros((config.height, config.width), np.float32)
    owner = np.full((config.height, config.width), -1, np.int16)
    placed = []
    for k, ((idx, cid, is_target), (img, mask), size, box) in enumerate(zip(items, cut, sizes, boxes)):
        _, realized, alpha = paste_object(canvas, img, mask, box[:2], size, on_top=is_target,
                                          top_alpha=top_alpha, mode=config.paste_mode)
        x, y, w, h = realized
        region = owner[y:y + h, x:x + w]
        region[alpha >= 0.5] = k
        placed.append(PlacedObject(realized, cid, is_target, idx))

    image = np.clip(np.round(canvas), 0, 255).astype(np.uint8)
    targets = [p.box for p in placed if p.is_target]
    density = build_density_map(targets, config.height, config.width)
    n_ex = min(config.num_exemplars, len(targets))
    ex_idx = rng.choice(len(targets), size=n_ex, replace=False)
    return SelfCollageSample(image, placed, density, [targets[i] for i in ex_idx], seed, owner)


class Composer:
    """Bundle of composer configuration and data pools; ``composer(seed)``
    returns a sample."""

    def __init__(self, config: ComposerConfig, objects: ObjectSource,
                 backgrounds: BackgroundSource, cluster_model: ClusterModel):
        self.config = config
        self.objects = objects
        self.backgrounds = backgrounds
        self.cluster_model = cluster_model

    def __call__(self, seed: int) -> SelfCollageSample:
        return compose(self.config, self.objects, self.backgrounds, self.cluster_model, seed)

    def exemplars(self, sample, num, rng):
        return select_exemplars(sample, num, rng, self.config.exemplar_height, self.config.exemplar_width)
