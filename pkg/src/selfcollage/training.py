"""Training loop on streamed Self-Collages."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .backbone import image_to_tensor
from .composer import Composer, SelfCollageSample
from .model import CountingModel, save_checkpoint

logger = logging.getLogger(__name__)

NON_OBJECT_EPS = 1e-8


class NumericalError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    loss_scale: float = 3000.0
    drop_frac: float = 0.2
    max_lr: float = 5e-4
    warmup_frac: float = 0.1
    batch_size: int = 128
    epochs: int = 50
    samples_per_epoch: int = 10_000
    exemplar_range: tuple = (1, 3)
    weight_decay: float = 0.05
    betas: tuple = (0.9, 0.999)
    seed: int = 0
    max_steps: int | None = None
    # when set, collages are drawn from a fixed pool of this many seeds
    # instead of being composed fresh for every batch
    sample_pool: int | None = None

    def __post_init__(self):
        self.exemplar_range = tuple(self.exemplar_range)
        self.betas = tuple(self.betas)
        if not 0 <= self.drop_frac < 1:
            raise ValueError("drop_frac must lie in [0, 1)")
        if not 0 <= self.warmup_frac <= 0.5:
            raise ValueError("warmup_frac must lie in [0, 0.5]")
        lo, hi = self.exemplar_range
        if not 1 <= lo <= hi:
            raise ValueError("exemplar_range must satisfy 1 <= lo <= hi")
        if self.batch_size < 1 or self.epochs < 1 or self.samples_per_epoch < 1:
            raise ValueError("batch_size, epochs and samples_per_epoch must be positive")

    @property
    def steps_per_epoch(self) -> int:
        return math.ceil(self.samples_per_epoch / self.batch_size)

    @property
    def total_steps(self) -> int:
        total = self.epochs * self.steps_per_epoch
        return min(total, self.max_steps) if self.max_steps else total


def sample_keep_mask(target_density, drop_frac: float, rng) -> np.ndarray:
    """Keep every object pixel and all but a random ``drop_frac`` share of
    the non-object pixels."""
    target = np.asarray(target_density)
    keep = np.ones(target.shape, dtype=np.float32)
    background = np.flatnonzero(target.ravel() < NON_OBJECT_EPS)
    n_drop = background.size - int(round((1 - drop_frac) * background.size))
    if n_drop > 0:
        keep.ravel()[rng.choice(background, size=n_drop, replace=False)] = 0.0
    return keep


def masked_scaled_mse(pred, target, keep_mask, scale: float = 1.0):
    """``scale * sum(keep * (target - pred)^2) / sum(keep)``; works on numpy
    arrays and torch tensors alike."""
    denom = keep_mask.sum()
    if float(denom) <= 0:
        raise ValueError("keep mask is empty")
    return scale * (keep_mask * (target - pred) ** 2).sum() / denom


def lr_at_step(config: TrainConfig, step: int, total_steps: int) -> float:
    """Linear warmup to ``max_lr`` then half-cosine decay to zero at the last step."""
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps})")
    warmup = int(round(config.warmup_frac * total_steps))
    if step < warmup:
        return config.max_lr * step / warmup
    decay = total_steps - 1 - warmup
    if decay <= 0:
        return config.max_lr
    progress = (step - warmup) / decay
    return 0.5 * config.max_lr * (1.0 + math.cos(math.pi * progress))


def make_batch(samples, exemplar_lists, keep_masks):
    images = torch.cat([image_to_tensor(s.image) for s in samples])
    exemplars = torch.stack([torch.cat([image_to_tensor(e) for e in ex]) for ex in exemplar_lists])
    target = torch.from_numpy(np.stack([s.density for s in samples]))
    keep = torch.from_numpy(np.stack(keep_masks))
    return images, exemplars, target, keep


def train_step(model: CountingModel, optimizer, batch, scale: float, lr: float | None = None) -> float:
    if lr is not None:
        for group in optimizer.param_groups:
            group["lr"] = lr
    images, exemplars, target, keep = batch
    model.train()
    pred = model(images, exemplars)
    loss = masked_scaled_mse(pred, target, keep, scale)
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    return float(loss.detach())


def make_optimizer(model: CountingModel, config: TrainConfig):
    return torch.optim.AdamW(model.trainable_parameters(), lr=config.max_lr,
                             betas=config.betas, weight_decay=config.weight_decay)


def sample_seed(base: int, index: int) -> int:
    return int(np.random.SeedSequence([base, index]).generate_state(1)[0])


@dataclass
class TrainResult:
    losses: list = field(default_factory=list)
    checkpoint: Path | None = None
    seconds: float = 0.0


def train(model: CountingModel, composer: Composer, config: TrainConfig, out_dir=None,
          log_every: int = 0) -> TrainResult:
    """Optimise the FIM and decoder on composed collages.

    Writes ``metrics.jsonl``, ``train_config.json`` and a checkpoint per epoch
    into ``out_dir`` when given.
    """
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "train_config.json").write_text(json.dumps(asdict(config), indent=2))
        metrics = open(out_dir / "metrics.jsonl", "w")
    else:
        metrics = None
    optimizer = make_optimizer(model, config)
    total = config.total_steps
    cache: dict[int, SelfCollageSample] = {}
    result = TrainResult()
    t0 = time.time()
    step = 0
    try:
        for epoch in range(config.epochs):
            epoch_rng = np.random.default_rng([config.seed, epoch, 7])
            if config.sample_pool:
                order = epoch_rng.permutation(config.sample_pool)
                order = np.resize(order, config.samples_per_epoch)
            else:
                order = epoch * config.samples_per_epoch + np.arange(config.samples_per_epoch)
            for s in range(config.steps_per_epoch):
                if step >= total:
                    break
                idx = order[s * config.batch_size:(s + 1) * config.batch_size]
                seeds = [sample_seed(config.seed, int(i)) for i in idx]
                samples = []
                for sd in seeds:
                    smp = cache.get(sd) if config.sample_pool else None
                    if smp is None:
                        smp = composer(sd)
                        if config.sample_pool:
                            cache[sd] = smp
                    samples.append(smp)
                rng = np.random.default_rng([config.seed, epoch, s])
                lo, hi = config.exemplar_range
                n_ex = int(rng.integers(lo, hi + 1))
                n_ex = min(n_ex, min(smp.count for smp in samples))
                ex_lists = [composer.exemplars(smp, n_ex, rng)[0] for smp in samples]
                keeps = [sample_keep_mask(smp.density, config.drop_frac, rng) for smp in samples]
                lr = lr_at_step(config, step, total)
                loss = train_step(model, optimizer, make_batch(samples, ex_lists, keeps),
                                  config.loss_scale, lr)
                if not math.isfinite(loss):
                    dump = {"step": step, "epoch": epoch, "sample_seeds": seeds, "loss": str(loss)}
                    if out_dir is not None:
                        (out_dir / "diverged_batch.json").write_text(json.dumps(dump, indent=2))
                    raise NumericalError(f"non-finite loss at step {step}; batch seeds {seeds}")
                result.losses.append(loss)
                if metrics is not None:
                    metrics.write(json.dumps({"step": step, "epoch": epoch, "lr": lr, "loss": loss}) + "\n")
                if log_every and step % log_every == 0:
                    logger.info("step %d/%d epoch %d lr %.2e loss %.4f", step, total, epoch, lr, loss)
                step += 1
            if out_dir is not None:
                result.checkpoint = out_dir / "checkpoint.scna"
                save_checkpoint(model, result.checkpoint,
                                {"train": asdict(config), "epoch": epoch, "step": step})
            if step >= total:
                break
    finally:
        if metrics is not None:
            metrics.close()
    model.eval()
    result.seconds = time.time() - t0
    return result
