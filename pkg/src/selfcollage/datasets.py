"""Object and background image sources plus evaluation-set adapters.

Sources are indexable and restartable: item ``i`` is a pure function of the
constructor arguments, so two passes always yield the same sequence.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from itertools import product
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .io import read_image, read_manifest, read_mask, resize_field

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")

COLORS = {
    "red": (220, 30, 30),
    "green": (30, 180, 40),
    "blue": (30, 60, 220),
    "yellow": (235, 215, 30),
}
SHAPES = ("square", "circle", "triangle")


class DatasetError(ValueError):
    pass


@dataclass
class ObjectItem:
    image: np.ndarray
    mask: np.ndarray | None = None
    label: str | None = None  # generator metadata when known; never used for training


class ObjectSource(Sequence):
    """Indexable pool of object images (the set O)."""

    def __init__(self, loader: Callable[[int], ObjectItem], size: int, name: str = "objects"):
        self._loader = loader
        self._size = int(size)
        self.name = name
        self._embeddings = {}

    def __len__(self):
        return self._size

    def __getitem__(self, i) -> ObjectItem:
        if not -self._size <= i < self._size:
            raise IndexError(i)
        return self._loader(i % self._size)

    def embeddings(self, backbone) -> np.ndarray:
        """CLS embeddings of every image, cached per backbone instance."""
        key = id(backbone)
        if key not in self._embeddings:
            self._embeddings[key] = np.stack(
                [backbone.cls_embedding(self[i].image) for i in range(len(self))])
        return self._embeddings[key]


class BackgroundSource(Sequence):
    """Indexable pool of background images (the set B)."""

    def __init__(self, loader: Callable[[int], np.ndarray], size: int, name: str = "backgrounds"):
        self._loader = loader
        self._size = int(size)
        self.name = name

    def __len__(self):
        return self._size

    def __getitem__(self, i) -> np.ndarray:
        if not -self._size <= i < self._size:
            raise IndexError(i)
        return self._loader(i % self._size)


@dataclass(frozen=True)
class ShapeParams:
    shapes: tuple = SHAPES
    colors: tuple = tuple(COLORS)
    canvas: int = 32
    size_range: tuple = (16, 28)

    def __post_init__(self):
        if not self.shapes or any(s not in SHAPES for s in self.shapes):
            raise ValueError(f"shapes must be a non-empty subset of {SHAPES}")
        if len(self.colors) < 2 or any(c not in COLORS for c in self.colors):
            raise ValueError("need at least two known colours")
        lo, hi = self.size_range
        if not 1 <= lo <= hi <= self.canvas:
            raise ValueError("size_range must lie within the canvas")

    @property
    def types(self) -> list[tuple[str, str]]:
        return list(product(self.shapes, self.colors))


def shape_mask(shape: str, size: int, canvas: int, center=None) -> np.ndarray:
    """Rasterise a filled shape of extent ``size`` into a ``canvas`` square.

    Pixel centres are tested against the analytic region.  Triangles are
    isosceles with the apex up.
    """
    cy, cx = (canvas / 2.0, canvas / 2.0) if center is None else center
    ys, xs = np.mgrid[0:canvas, 0:canvas] + 0.5
    half = size / 2.0
    if shape == "square":
        m = (np.abs(xs - cx) <= half) & (np.abs(ys - cy) <= half)
    elif shape == "circle":
        m = (xs - cx) ** 2 + (ys - cy) ** 2 <= half ** 2
    elif shape == "triangle":
        t = (ys - (cy - half)) / size  # 0 at apex, 1 at base
        m = (t >= 0) & (t <= 1) & (np.abs(xs - cx) <= t * half)
    else:
        raise ValueError(f"unknown shape {shape!r}")
    return m.astype(np.float32)


def _paint(mask, fg, bg):
    img = np.empty(mask.shape + (3,), dtype=np.float32)
    img[:] = bg
    img = mask[..., None] * np.asarray(fg, np.float32) + (1 - mask[..., None]) * img
    return np.round(img).astype(np.uint8)


def synthetic_shape_source(params: ShapeParams = ShapeParams(), count: int = 1000,
                           seed: int = 0) -> ObjectSource:
    """One centred shape per image on a background coloured with one of the
    colours not used by the object; the rasterised region is the mask."""
    types = params.types

    def load(i):
        rng = np.random.default_rng([seed, i])
        shape, color = types[rng.integers(len(types))]
        others = [c for c in params.colors if c != color]
        bg = others[rng.integers(len(others))]
        size = int(rng.integers(params.size_range[0], params.size_range[1] + 1))
        mask = shape_mask(shape, size, params.canvas)
        return ObjectItem(_paint(mask, COLORS[color], COLORS[bg]), mask, f"{shape}-{color}")

    return ObjectSource(load, count, name="synthetic-shapes")


def value_noise(rng, canvas: int, octaves: int = 5) -> np.ndarray:
    """Multi-octave value noise, ``canvas x canvas x 3`` uint8."""
    out = np.zeros((canvas, canvas, 3), dtype=np.float32)
    amp, norm = 1.0, 0.0
    for o in range(octaves):
        cells = 2 ** (o + 2)
        for ch in range(3):
            grid = rng.random((cells, cells)).astype(np.float32)
            out[..., ch] += amp * resize_field(grid, canvas, canvas)
        norm += amp
        amp *= 0.5
    out /= norm
    tint = rng.uniform(60, 170, size=3).astype(np.float32)
    out = tint + (out - 0.5) * 120.0
    return np.clip(np.round(out), 0, 255).astype(np.uint8)


def noise_background_source(count: int = 1000, canvas: int = 64, seed: int = 0) -> BackgroundSource:
    def load(i):
        return value_noise(np.random.default_rng([seed, i, 1]), canvas)

    return BackgroundSource(load, count, name="noise")


def attention_mask(image: np.ndarray, backbone=None, threshold: float = 0.3) -> np.ndarray:
    """Foreground mask from thresholded saliency, upsampled to pixel grid."""
    from .backbone import HandcraftedBackbone

    backbone = backbone or HandcraftedBackbone(patch_size=2)
    att = backbone.cls_attention(image).values
    binary = (att >= threshold * att.max()).astype(np.float32)
    p = backbone.patch_size
    up = np.kron(binary, np.ones((p, p), np.float32))
    mask = np.zeros(image.shape[:2], np.float32)
    mask[:up.shape[0], :up.shape[1]] = up
    return mask


def _list_images(path: Path) -> list[Path]:
    if not path.is_dir():
        raise DatasetError(f"image directory not found: {path}")
    files = sorted(p for p in path.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES
                   and not p.stem.endswith(".mask"))
    if not files:
        raise DatasetError(f"no decodable images in {path}")
    return files


def directory_source(path, role: str = "object", mask_policy: str = "analytic-none"):
    """Lazily decoded images from a directory.

    For the object role, ``mask_policy`` is ``"analytic-none"`` (use a
    ``<stem>.mask.png`` next to the image when present, otherwise no mask) or
    ``"attention-threshold"`` (saliency-derived mask).
    """
    files = _list_images(Path(path))
    if role == "background":
        return BackgroundSource(lambda i: read_image(files[i]), len(files), name=str(path))
    if role != "object":
        raise ValueError(f"role must be 'object' or 'background', got {role!r}")
    if mask_policy not in ("analytic-none", "attention-threshold"):
        raise ValueError(f"unknown mask policy {mask_policy!r}")

    def load(i):
        image = read_image(files[i])
        if mask_policy == "attention-threshold":
            return ObjectItem(image, attention_mask(image))
        side = files[i].with_name(files[i].stem + ".mask.png")
        return ObjectItem(image, read_mask(side) if side.exists() else None)

    return ObjectSource(load, len(files), name=str(path))


# -- evaluation records ------------------------------------------------------

@dataclass
class EvalRecord:
    image_path: str
    boxes: list  # (x, y, w, h) exemplar boxes
    count: int
    points: list | None = None
    split: str | None = None
    extra: dict = field(default_factory=dict)


def _corners_to_box(corners, key, name):
    try:
        pts = np.asarray(corners, dtype=np.float64).reshape(-1, 2)
    except (TypeError, ValueError) as exc:
        raise DatasetError(f"{name}: malformed '{key}' entry {corners!r}") from exc
    x0, y0 = pts.min(axis=0)
    x1, y1 = pts.max(axis=0)
    return (float(x0), float(y0), float(x1 - x0), float(y1 - y0))


def fsc147_adapter(annotation_json, split_file, image_dir, split: str = "test") -> list[EvalRecord]:
    """Read FSC-147 style annotations.

    ``annotation_json`` maps image filenames to objects holding
    ``box_examples_coordinates`` (lists of 4 corner points) and ``points``.
    ``split_file`` maps split names to filename lists.
    """
    ann = json.loads(Path(annotation_json).read_text())
    splits = json.loads(Path(split_file).read_text())
    if split not in splits:
        raise DatasetError(f"split file has no key {split!r}")
    records = []
    for name in splits[split]:
        if name not in ann:
            raise DatasetError(f"annotation file has no entry for {name!r}")
        entry = ann[name]
        for key in ("box_examples_coordinates", "points"):
            if key not in entry:
                raise DatasetError(f"{name}: missing key '{key}'")
        if not isinstance(entry["points"], list):
            raise DatasetError(f"{name}: 'points' must be a list")
        boxes = [_corners_to_box(c, "box_examples_coordinates", name)
                 for c in entry["box_examples_coordinates"]]
        records.append(EvalRecord(str(Path(image_dir) / name), boxes, len(entry["points"]),
                                  entry["points"], split))
    return records


def mso_adapter(annotation_json, image_dir) -> list[EvalRecord]:
    """MSO-style annotations: ``{filename: {"boxes": [[x, y, w, h], ...]}}``.

    Images without objects are dropped and only the first box is kept as the
    exemplar.
    """
    ann = json.loads(Path(annotation_json).read_text())
    records = []
    for name, entry in ann.items():
        if "boxes" not in entry:
            raise DatasetError(f"{name}: missing key 'boxes'")
        boxes = [tuple(map(float, b)) for b in entry["boxes"]]
        if not boxes:
            continue
        records.append(EvalRecord(str(Path(image_dir) / name), boxes[:1], len(boxes)))
    return records


def manifest_records(dataset_dir) -> list[EvalRecord]:
    """Evaluation records for a composed dataset directory."""
    dataset_dir = Path(dataset_dir)
    records = []
    for rec in read_manifest(dataset_dir / "manifest.jsonl"):
        meta = json.loads((dataset_dir / rec["meta"]).read_text())
        records.append(EvalRecord(str(dataset_dir / rec["image"]),
                                  [tuple(b) for b in meta["exemplar_boxes"]],
                                  int(rec["count"]), split=None,
                                  extra={"id": rec["id"], "density": str(dataset_dir / rec["density"])}))
    return records
