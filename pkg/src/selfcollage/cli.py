"""Command-line entry points.

Every command takes ``--config`` (one JSON file), ``--seed`` and ``--out``;
``--set section.key=value`` overrides single fields.  The resolved
configuration is written to ``<out>/config.json`` so any run can be repeated
from its snapshot.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure.
"""

from __future__ import annotations

import argparse
import copy
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image, ImageDraw

from .backbone import BackboneLoadError, BackboneSpec, load_backbone
from .clustering import ClusterModel, fit_kmeans
from .composer import Composer, ComposerConfig
from .datasets import (DatasetError, ShapeParams, directory_source, fsc147_adapter,
                       manifest_records, mso_adapter, noise_background_source,
                       synthetic_shape_source)
from .evaluation import CCBaseline, CCConfig, average_baseline, evaluate, grid_search_cc
from .inference import InferenceConfig, count_image
from .io import ContainerError, read_image, write_image, write_manifest, write_pfm
from .model import CountingModel, ModelConfig, load_checkpoint
from .semantic import SemanticConfig, semantic_count
from .training import NumericalError, TrainConfig, sample_seed, train

logger = logging.getLogger("selfcollage")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


# -- configuration -----------------------------------------------------------

SECTIONS = {
    "build-dataset": {"seed", "backbone", "objects", "backgrounds", "clusters", "composer", "num_samples"},
    "train": {"seed", "backbone", "objects", "backgrounds", "clusters", "composer", "model", "train"},
    "eval": {"seed", "dataset", "checkpoint", "baseline", "inference", "backbone", "cc", "input_size",
             "num_exemplars"},
    "count": {"seed", "checkpoint", "inference"},
    "semantic-count": {"seed", "checkpoint", "semantic"},
    "cc-baseline": {"seed", "dataset", "backbone", "cc", "input_size"},
}

SOURCE_KEYS = {
    "synthetic-shapes": {"kind", "count", "shapes", "colors", "canvas", "size_range", "seed"},
    "noise": {"kind", "count", "canvas", "seed"},
    "directory": {"kind", "path", "mask_policy"},
}

DATASET_KEYS = {
    "manifest": {"kind", "path"},
    "fsc147": {"kind", "annotations", "splits", "images", "split"},
    "mso": {"kind", "annotations", "images"},
}


def _build(cls, values, where):
    """Construct a dataclass, rejecting unknown keys."""
    values = dict(values or {})
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _check_keys(section, allowed, where):
    if not isinstance(section, dict):
        raise ConfigError(f"{where} must be an object")
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_config(command: str, path=None, overrides=(), seed=None) -> dict:
    """Read, override and validate the JSON configuration of ``command``."""
    config = {}
    if path is not None:
        try:
            config = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(config, dict):
        raise ConfigError("config must be a JSON object")
    config = copy.deepcopy(config)
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        *parents, leaf = key.split(".")
        node = config
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = _parse_value(value)
    if seed is not None:
        config["seed"] = seed
    config.setdefault("seed", 0)
    _check_keys(config, SECTIONS[command], "config")
    for name in ("objects", "backgrounds"):
        if name in config:
            src = config[name]
            kind = src.get("kind") if isinstance(src, dict) else None
            if kind not in SOURCE_KEYS:
                raise ConfigError(f"{name}.kind must be one of {sorted(SOURCE_KEYS)}")
            _check_keys(src, SOURCE_KEYS[kind], name)
    if "dataset" in config:
        ds = config["dataset"]
        kind = ds.get("kind", "manifest") if isinstance(ds, dict) else None
        if kind not in DATASET_KEYS:
            raise ConfigError(f"dataset.kind must be one of {sorted(DATASET_KEYS)}")
        _check_keys(ds, DATASET_KEYS[kind], "dataset")
    # dataclass sections fail fast here rather than mid-run
    for name, cls in (("backbone", BackboneSpec), ("composer", ComposerConfig), ("train", TrainConfig),
                      ("inference", InferenceConfig), ("cc", CCConfig), ("semantic", SemanticConfig)):
        if name in config:
            _build(cls, config[name], name)
    if "model" in config:
        _check_keys(config["model"], {f.name for f in dataclasses.fields(ModelConfig)} - {"backbone"}, "model")
    return config


def write_snapshot(out_dir: Path, command: str, config: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(json.dumps({"command": command, **config}, indent=2))


# -- builders ----------------------------------------------------------------

def make_objects(cfg: dict, seed: int):
    cfg = dict(cfg or {"kind": "synthetic-shapes"})
    kind = cfg.pop("kind")
    if kind == "directory":
        return directory_source(cfg["path"], "object", cfg.get("mask_policy", "analytic-none"))
    count = cfg.pop("count", 1000)
    src_seed = cfg.pop("seed", seed)
    if "size_range" in cfg:
        cfg["size_range"] = tuple(cfg["size_range"])
    for key in ("shapes", "colors"):
        if key in cfg:
            cfg[key] = tuple(cfg[key])
    return synthetic_shape_source(_build(ShapeParams, cfg, "objects"), count, src_seed)


def make_backgrounds(cfg: dict, seed: int):
    cfg = dict(cfg or {"kind": "noise"})
    if cfg["kind"] == "directory":
        return directory_source(cfg["path"], "background")
    return noise_background_source(cfg.get("count", 1000), cfg.get("canvas", 64), cfg.get("seed", seed))


def make_composer(config: dict, backbone, out_dir: Path | None = None) -> Composer:
    seed = config["seed"]
    objects = make_objects(config.get("objects"), seed)
    backgrounds = make_backgrounds(config.get("backgrounds"), seed)
    clusters = config.get("clusters", {})
    _check_keys(clusters, {"k", "max_iters"}, "clusters")
    k = clusters.get("k", 36)
    if k > len(objects):
        raise ConfigError(f"clusters.k={k} exceeds the {len(objects)} object images")
    cluster_model = fit_kmeans(objects.embeddings(backbone), k, clusters.get("max_iters", 100), seed)
    if out_dir is not None:
        cluster_model.save(out_dir / "clusters.scna")
    composer_cfg = _build(ComposerConfig, config.get("composer"), "composer")
    return Composer(composer_cfg, objects, backgrounds, cluster_model)


def load_predictor(checkpoint):
    """Counting model behind ``checkpoint``; tests substitute stubs here."""
    return load_checkpoint(checkpoint)


def load_records(cfg: dict):
    cfg = dict(cfg)
    kind = cfg.pop("kind", "manifest")
    if kind == "manifest":
        return manifest_records(cfg["path"])
    if kind == "fsc147":
        return fsc147_adapter(cfg["annotations"], cfg["splits"], cfg["images"], cfg.get("split", "test"))
    return mso_adapter(cfg["annotations"], cfg["images"])


# -- commands ----------------------------------------------------------------

def cmd_build_dataset(config: dict, out_dir: Path) -> dict:
    backbone = load_backbone(_build(BackboneSpec, config.get("backbone"), "backbone"))
    composer = make_composer(config, backbone, out_dir)
    n = int(config.get("num_samples", 100))
    records = []
    for i in range(n):
        sample = composer(sample_seed(config["seed"], i))
        sid = f"{i:06d}"
        write_image(out_dir / f"{sid}.png", sample.image)
        write_pfm(out_dir / f"{sid}.pfm", sample.density)
        (out_dir / f"{sid}.json").write_text(json.dumps(sample.metadata(), indent=2))
        records.append({"id": sid, "image": f"{sid}.png", "density": f"{sid}.pfm", "meta": f"{sid}.json",
                        "count": sample.count})
    write_manifest(out_dir / "manifest.jsonl", records)
    return {"num_samples": n, "manifest": str(out_dir / "manifest.jsonl")}


def cmd_train(config: dict, out_dir: Path) -> dict:
    seed = config["seed"]
    torch.manual_seed(seed)
    spec = _build(BackboneSpec, config.get("backbone"), "backbone")
    model_cfg = dict(config.get("model", {}))
    model_cfg.setdefault("seed", seed)
    model = CountingModel(_build(ModelConfig, {**model_cfg, "backbone": spec}, "model"))
    composer = make_composer(config, model.backbone, out_dir)
    train_cfg = dict(config.get("train", {}))
    train_cfg.setdefault("seed", seed)
    result = train(model, composer, _build(TrainConfig, train_cfg, "train"), out_dir, log_every=50)
    return {"checkpoint": str(result.checkpoint), "final_loss": result.losses[-1] if result.losses else None,
            "seconds": result.seconds}


def cmd_eval(config: dict, out_dir: Path) -> dict:
    if "dataset" not in config:
        raise ConfigError("eval needs a dataset section")
    records = load_records(config["dataset"])
    baseline = config.get("baseline")
    if baseline == "average":
        predictor = average_baseline(records)
    elif baseline == "cc":
        backbone = load_backbone(_build(BackboneSpec, config.get("backbone"), "backbone"))
        predictor = CCBaseline(backbone, _build(CCConfig, config.get("cc"), "cc"), config.get("input_size", 384))
    elif baseline is None:
        if "checkpoint" not in config:
            raise ConfigError("eval needs a checkpoint or a baseline")
        predictor = load_predictor(config["checkpoint"])
    else:
        raise ConfigError(f"unknown baseline {baseline!r}")
    report = evaluate(predictor, records, _build(InferenceConfig, config.get("inference"), "inference"),
                      num_exemplars=config.get("num_exemplars", 3), strict_tau=False)
    report.write(out_dir)
    return {"splits": report.splits, "report": str(out_dir / "report.json")}


def write_overlay(path, image: np.ndarray, density: np.ndarray, boxes) -> None:
    """Image blended with the normalised density in red, exemplar boxes in green."""
    d = np.clip(np.asarray(density, np.float64), 0, None)
    d = d / d.max() if d.max() > 0 else d
    base = image.astype(np.float64)
    heat = np.zeros_like(base)
    heat[..., 0] = 255.0
    blended = base * (1 - 0.6 * d[..., None]) + heat * 0.6 * d[..., None]
    pil = Image.fromarray(np.clip(blended, 0, 255).astype(np.uint8))
    draw = ImageDraw.Draw(pil)
    for x, y, w, h in boxes:
        draw.rectangle([x, y, x + w - 1, y + h - 1], outline=(0, 255, 0))
    pil.save(path)


def cmd_count(config: dict, out_dir: Path, image_path, boxes, overlay: bool = False) -> dict:
    if "checkpoint" not in config:
        raise ConfigError("count needs --checkpoint")
    predictor = load_predictor(config["checkpoint"])
    image = read_image(image_path)
    result = count_image(predictor, image, boxes, _build(InferenceConfig, config.get("inference"), "inference"))
    out = {"image": str(image_path), "boxes": [list(b) for b in boxes], **result.to_dict()}
    (out_dir / "count.json").write_text(json.dumps(out, indent=2))
    if overlay:
        write_overlay(out_dir / "overlay.png", image, result.density, boxes)
    return out


def cmd_semantic_count(config: dict, out_dir: Path, image_path) -> dict:
    if "checkpoint" not in config:
        raise ConfigError("semantic-count needs --checkpoint")
    model = load_predictor(config["checkpoint"])
    result = semantic_count(model, read_image(image_path), _build(SemanticConfig, config.get("semantic"), "semantic"))
    out = {"image": str(image_path), **result.to_dict()}
    (out_dir / "semantic.json").write_text(json.dumps(out, indent=2))
    return out


def cmd_cc_baseline(config: dict, out_dir: Path, grid_search: bool = False) -> dict:
    if "dataset" not in config:
        raise ConfigError("cc-baseline needs --dataset")
    records = load_records(config["dataset"])
    backbone = load_backbone(_build(BackboneSpec, config.get("backbone"), "backbone"))
    size = config.get("input_size", 384)
    if grid_search:
        result = grid_search_cc(records, backbone, input_size=size)
        (out_dir / "grid.csv").write_text(result.to_csv())
        best = dataclasses.asdict(result.best)
        (out_dir / "best.json").write_text(json.dumps({"config": best, "mae": result.best_mae}, indent=2))
        return {"rows": len(result.table), "best": best, "mae": result.best_mae}
    report = evaluate(CCBaseline(backbone, _build(CCConfig, config.get("cc"), "cc"), size), records,
                      strict_tau=False)
    report.write(out_dir)
    return {"splits": report.splits}


# -- argument parsing --------------------------------------------------------

def _box(text):
    try:
        values = [float(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"box must be x,y,w,h, got {text!r}")
    if len(values) != 4 or values[2] <= 0 or values[3] <= 0:
        raise argparse.ArgumentTypeError(f"box must be x,y,w,h with positive size, got {text!r}")
    return tuple(values)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="selfcollage", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON configuration file")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config field, e.g. composer.n_max=9")
        return p

    common(sub.add_parser("build-dataset", help="compose a synthetic dataset"))
    common(sub.add_parser("train", help="train a counting model on streamed collages"))
    p = common(sub.add_parser("eval", help="evaluate a checkpoint or baseline"))
    p.add_argument("--checkpoint")
    p.add_argument("--dataset", help="dataset directory with manifest.jsonl")
    p.add_argument("--baseline", choices=["average", "cc"])
    p = common(sub.add_parser("count", help="count objects matching exemplar boxes"))
    p.add_argument("image")
    p.add_argument("--box", type=_box, action="append", required=True, help="x,y,w,h (repeatable)")
    p.add_argument("--checkpoint")
    p.add_argument("--overlay", action="store_true", help="also write overlay.png")
    p = common(sub.add_parser("semantic-count", help="discover and count object types"))
    p.add_argument("image")
    p.add_argument("--checkpoint")
    p = common(sub.add_parser("cc-baseline", help="connected-components baseline"))
    p.add_argument("--dataset", help="dataset directory with manifest.jsonl")
    p.add_argument("--grid-search", action="store_true")
    return parser


def _flag_overrides(args) -> list[str]:
    sets = list(args.set)
    for name in ("checkpoint", "baseline"):
        value = getattr(args, name, None)
        if value is not None:
            sets.append(f"{name}={json.dumps(value)}")
    if getattr(args, "dataset", None):
        sets += ["dataset.kind=manifest", f"dataset.path={json.dumps(args.dataset)}"]
    return sets


def run(args) -> dict:
    config = load_config(args.command, args.config, _flag_overrides(args), args.seed)
    out_dir = Path(args.out)
    write_snapshot(out_dir, args.command, config)
    if args.command == "build-dataset":
        return cmd_build_dataset(config, out_dir)
    if args.command == "train":
        return cmd_train(config, out_dir)
    if args.command == "eval":
        return cmd_eval(config, out_dir)
    if args.command == "count":
        return cmd_count(config, out_dir, args.image, args.box, args.overlay)
    if args.command == "semantic-count":
        return cmd_semantic_count(config, out_dir, args.image)
    return cmd_cc_baseline(config, out_dir, args.grid_search)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        summary = run(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DatasetError, BackboneLoadError, ContainerError, OSError, KeyError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    print(json.dumps(summary, indent=2, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
