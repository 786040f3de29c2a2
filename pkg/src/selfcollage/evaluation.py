"""Counting metrics, evaluation reports and the two annotation-free baselines
(constant average and attention connected components)."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from itertools import product
from pathlib import Path

import numpy as np
from scipy import ndimage, stats

from .inference import InferenceConfig, count_image
from .io import read_image, resize_image

logger = logging.getLogger(__name__)

P_ATT_GRID = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 0.99)
N_HEAD_GRID = tuple(range(1, 13))
P_SIZE_GRID = (0.0, 0.01, 0.02, 0.05, 0.1, 0.2)


class UndefinedCorrelation(ValueError):
    pass


def _pair(preds, truths):
    p = np.asarray(preds, dtype=np.float64).ravel()
    t = np.asarray(truths, dtype=np.float64).ravel()
    if p.shape != t.shape:
        raise ValueError(f"length mismatch: {p.size} predictions vs {t.size} targets")
    if p.size == 0:
        raise ValueError("empty input")
    return p, t


def mae(preds, truths) -> float:
    p, t = _pair(preds, truths)
    return float(np.mean(np.abs(p - t)))


def rmse(preds, truths) -> float:
    p, t = _pair(preds, truths)
    return float(np.sqrt(np.mean((p - t) ** 2)))


def kendall_tau(preds, truths) -> float:
    """Tie-corrected Kendall rank correlation (tau-b)."""
    p, t = _pair(preds, truths)
    if p.size < 2:
        raise ValueError("need at least two observations")
    if np.all(p == p[0]) or np.all(t == t[0]):
        raise UndefinedCorrelation("Kendall's tau is undefined for constant input")
    return float(stats.kendalltau(p, t, variant="b").statistic)


@dataclass(frozen=True)
class SplitBounds:
    low: tuple = (8, 16)
    medium: tuple = (17, 40)
    high: tuple = (41, 3701)

    def items(self):
        return (("low", self.low), ("medium", self.medium), ("high", self.high))


def split_by_count(records, bounds: SplitBounds = SplitBounds(), key=lambda r: r.count) -> dict:
    out = {"low": [], "medium": [], "high": [], "other": []}
    for rec in records:
        c = key(rec)
        for name, (lo, hi) in bounds.items():
            if lo <= c <= hi:
                out[name].append(rec)
                break
        else:
            logger.warning("count %s falls outside every split range", c)
            out["other"].append(rec)
    return out


class ConstantPredictor:
    def __init__(self, value: float):
        self.value = float(value)

    def count(self, image, boxes=None) -> float:
        return self.value


def average_baseline(train_records) -> ConstantPredictor:
    counts = [r.count for r in train_records]
    if not counts:
        raise ValueError("need at least one training record")
    return ConstantPredictor(float(np.mean(counts)))


# -- connected components ----------------------------------------------------

@dataclass(frozen=True)
class CCConfig:
    p_att: float = 0.7
    n_head: int = 10
    p_size: float = 0.0
    connectivity: int = 4

    def __post_init__(self):
        if not 0 < self.p_att <= 1:
            raise ValueError("p_att must lie in (0, 1]")
        if self.n_head < 1:
            raise ValueError("n_head must be >= 1")
        if not 0 <= self.p_size <= 1:
            raise ValueError("p_size must lie in [0, 1]")
        if self.connectivity not in (4, 8):
            raise ValueError("connectivity must be 4 or 8")


def retained_mass_mask(attention: np.ndarray, p_att: float) -> np.ndarray:
    """Keep the largest values until they hold at least ``p_att`` of the mass."""
    a = np.asarray(attention, dtype=np.float64)
    flat = a.ravel()
    total = flat.sum()
    if total <= 0:
        return np.zeros(a.shape, dtype=bool)
    order = np.argsort(-flat, kind="stable")
    csum = np.cumsum(flat[order])
    k = int(np.searchsorted(csum, p_att * total * (1 - 1e-12), side="left"))
    threshold = flat[order[min(k, flat.size - 1)]]
    return a >= threshold


def _structure(connectivity):
    return ndimage.generate_binary_structure(2, 1 if connectivity == 4 else 2)


def count_components(binary: np.ndarray, min_size_frac: float = 0.0, connectivity: int = 4) -> int:
    labels, n = ndimage.label(binary, structure=_structure(connectivity))
    if n == 0:
        return 0
    sizes = np.bincount(labels.ravel())[1:]
    return int(np.sum(sizes > min_size_frac * binary.size))


def connected_components_count(per_head_attention: np.ndarray, config: CCConfig) -> int:
    heads = np.asarray(per_head_attention)
    if heads.ndim != 3:
        raise ValueError("expected heads x h x w attention")
    if config.n_head > heads.shape[0]:
        raise ValueError(f"n_head={config.n_head} exceeds the {heads.shape[0]} available heads")
    votes = sum(retained_mass_mask(a, config.p_att).astype(np.int32) for a in heads)
    return count_components(votes >= config.n_head, config.p_size, config.connectivity)


class CCBaseline:
    """Connected-components counter on backbone CLS attention."""

    def __init__(self, backbone, config: CCConfig = CCConfig(), input_size: int = 384):
        self.backbone = backbone
        self.config = config
        self.input_size = input_size

    def attention(self, image):
        img = resize_image(image, self.input_size, self.input_size)
        return self.backbone.cls_attention_heads(img)

    def count(self, image, boxes=None) -> float:
        return float(connected_components_count(self.attention(image), self.config))


def grid_configs(num_heads: int = 12):
    return [CCConfig(p, n, s) for p, n, s in product(P_ATT_GRID, N_HEAD_GRID, P_SIZE_GRID)
            if n <= num_heads]


@dataclass
class GridSearchResult:
    best: CCConfig
    best_mae: float
    table: list  # dicts with p_att, n_head, p_size, mae

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=["p_att", "n_head", "p_size", "mae"])
        writer.writeheader()
        writer.writerows(self.table)
        return buf.getvalue()


def grid_search_cc(dataset, backbone, configs=None, input_size: int = 384) -> GridSearchResult:
    """Exhaustive search for the lowest-MAE connected-components config.

    ``dataset`` yields ``(image, count)`` pairs or records with
    ``image_path`` and ``count``.
    """
    items = [(d if isinstance(d, tuple) else (read_image(d.image_path), d.count)) for d in dataset]
    counter = CCBaseline(backbone, input_size=input_size)
    attentions = [counter.attention(img) for img, _ in items]
    truths = [c for _, c in items]
    configs = grid_configs(backbone.num_heads) if configs is None else list(configs)
    table = []
    for cfg in configs:
        preds = [connected_components_count(a, cfg) for a in attentions]
        table.append({"p_att": cfg.p_att, "n_head": cfg.n_head, "p_size": cfg.p_size,
                      "mae": mae(preds, truths)})
    best_i = int(np.argmin([row["mae"] for row in table]))
    return GridSearchResult(configs[best_i], table[best_i]["mae"], table)


# -- evaluation --------------------------------------------------------------

@dataclass
class EvalReport:
    splits: dict  # name -> {"mae", "rmse", "tau", "n_images"}
    rows: list  # per-image dicts: id, truth, pred, path
    skipped: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps({"splits": self.splits, "rows": self.rows, "skipped": self.skipped}, indent=2)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=["id", "truth", "pred", "path"])
        writer.writeheader()
        writer.writerows(self.rows)
        return buf.getvalue()

    def write(self, out_dir, stem: str = "report") -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / f"{stem}.json").write_text(self.to_json())
        (out_dir / f"{stem}.csv").write_text(self.to_csv())


def _metrics(rows) -> dict:
    if not rows:
        return {"mae": None, "rmse": None, "tau": None, "n_images": 0}
    p = [r["pred"] for r in rows]
    t = [r["truth"] for r in rows]
    try:
        tau = kendall_tau(p, t) if len(rows) > 1 else None
    except UndefinedCorrelation:
        tau = None
    return {"mae": mae(p, t), "rmse": rmse(p, t), "tau": tau, "n_images": len(rows)}


def evaluate(predictor, records, config: InferenceConfig = InferenceConfig(),
             bounds: SplitBounds | None = SplitBounds(), num_exemplars: int = 3,
             strict_tau: bool = True) -> EvalReport:
    """Count every record and aggregate metrics overall and per count split.

    ``predictor`` is either a density model (``predict_density``) run through
    :func:`count_image`, or a baseline exposing ``count(image, boxes)``.
    With ``strict_tau`` an undefined overall tau raises instead of being
    reported as ``None``.
    """
    records = list(records)
    if not records:
        raise ValueError("no records to evaluate")
    rows, skipped = [], []
    for i, rec in enumerate(records):
        try:
            image = read_image(rec.image_path)
        except (OSError, ValueError) as exc:
            logger.warning("skipping unreadable image %s: %s", rec.image_path, exc)
            skipped.append(rec.image_path)
            continue
        boxes = list(rec.boxes)[:num_exemplars]
        if hasattr(predictor, "predict_density"):
            res = count_image(predictor, image, boxes, config)
            pred, path = res.count, res.path
        else:
            pred, path = predictor.count(image, boxes), "baseline"
        rows.append({"id": rec.extra.get("id", i) if rec.extra else i, "truth": rec.count,
                     "pred": float(pred), "path": path})
    splits = {"all": _metrics(rows)}
    if strict_tau and len(rows) > 1:
        kendall_tau([r["pred"] for r in rows], [r["truth"] for r in rows])
    if bounds is not None:
        parts = split_by_count(rows, bounds, key=lambda r: r["truth"])
        for name in ("low", "medium", "high"):
            splits[name] = _metrics(parts[name])
    return EvalReport(splits, rows, skipped)
