"""Exemplar-conditioned counting network.

Frozen backbone features -> feature interaction module (self-attention over
patches, cross-attention to exemplar tokens) -> convolutional upsampling
decoder -> density map at input resolution.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .backbone import Backbone, BackboneSpec, image_to_tensor, load_backbone, sincos_2d
from .io import load_arrays, save_arrays

logger = logging.getLogger(__name__)


@dataclass
class ModelConfig:
    backbone: BackboneSpec = field(default_factory=BackboneSpec)
    fim_dim: int = 512
    fim_blocks: int = 2
    fim_heads: int = 16
    fim_mlp_dim: int = 2048
    decoder_channels: int = 256
    decoder_blocks: int = 4
    decoder_groups: int = 8
    exemplar_height: int = 64
    exemplar_width: int = 64
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.backbone, dict):
            self.backbone = BackboneSpec(**self.backbone)
        if self.fim_dim % self.fim_heads:
            raise ValueError("fim_dim must be divisible by fim_heads")
        if self.fim_dim % 4:
            raise ValueError("fim_dim must be divisible by 4")
        if self.decoder_blocks < 1:
            raise ValueError("decoder_blocks must be >= 1")
        if self.decoder_channels % self.decoder_groups:
            raise ValueError("decoder_channels must be divisible by decoder_groups")

    def to_dict(self) -> dict:
        return asdict(self)


def encode_exemplar_features(feats: torch.Tensor, attention: torch.Tensor) -> torch.Tensor:
    """Attention-weighted average of exemplar patch features.

    ``feats``: ``N x h x w x d``; ``attention``: ``N x h x w`` (head-averaged).
    Rows whose attention sums to zero fall back to the plain mean.
    """
    w = attention.flatten(1)
    total = w.sum(dim=1, keepdim=True)
    degenerate = total <= 0
    if bool(degenerate.any()):
        logger.warning("exemplar attention sums to zero; using the unweighted mean")
        w = torch.where(degenerate, torch.ones_like(w), w)
        total = w.sum(dim=1, keepdim=True)
    return (w[..., None] * feats.flatten(1, 2)).sum(dim=1) / total


def encode_exemplar(backbone: Backbone, exemplar_image: np.ndarray) -> np.ndarray:
    with torch.no_grad():
        feats, attn, _ = backbone.encode(image_to_tensor(exemplar_image))
        return encode_exemplar_features(feats, attn.mean(dim=1))[0].numpy()


class MultiHeadAttention(nn.Module):
    def __init__(self, dim, heads):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x, memory):
        b, n, c = x.shape
        m = memory.shape[1]
        hd = c // self.heads
        q = self.q(x).view(b, n, self.heads, hd).transpose(1, 2)
        k = self.k(memory).view(b, m, self.heads, hd).transpose(1, 2)
        v = self.v(memory).view(b, m, self.heads, hd).transpose(1, 2)
        attn = (q @ k.transpose(-2, -1) * self.scale).softmax(dim=-1)
        return self.proj((attn @ v).transpose(1, 2).reshape(b, n, c))


class FimBlock(nn.Module):
    """Pre-norm block: self-attention -> cross-attention -> MLP."""

    def __init__(self, dim, heads, mlp_dim):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.self_attn = MultiHeadAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.norm_mem = nn.LayerNorm(dim)
        self.cross_attn = MultiHeadAttention(dim, heads)
        self.norm3 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, mlp_dim), nn.GELU(), nn.Linear(mlp_dim, dim))

    def forward(self, x, exemplars):
        h = self.norm1(x)
        x = x + self.self_attn(h, h)
        x = x + self.cross_attn(self.norm2(x), self.norm_mem(exemplars))
        return x + self.mlp(self.norm3(x))


class FeatureInteraction(nn.Module):
    def __init__(self, in_dim, dim, blocks, heads, mlp_dim):
        super().__init__()
        self.dim = dim
        self.proj_image = nn.Linear(in_dim, dim)
        self.proj_exemplar = nn.Linear(in_dim, dim)
        self.blocks = nn.ModuleList(FimBlock(dim, heads, mlp_dim) for _ in range(blocks))
        self.norm = nn.LayerNorm(dim)

    def forward(self, grid, exemplars):
        """``grid``: ``B x h x w x d``; ``exemplars``: ``B x E x d`` -> ``B x h x w x dim``."""
        if exemplars.shape[1] < 1:
            raise ValueError("at least one exemplar is required")
        b, h, w, _ = grid.shape
        x = self.proj_image(grid.flatten(1, 2)) + sincos_2d(h, w, self.dim).to(grid.dtype)
        z = self.proj_exemplar(exemplars)  # no position embedding: exemplars form a set
        for blk in self.blocks:
            x = blk(x, z)
        return self.norm(x).view(b, h, w, self.dim)


class Decoder(nn.Module):
    def __init__(self, in_dim, channels, blocks, groups):
        super().__init__()
        layers = []
        for i in range(blocks):
            layers.append(nn.Sequential(
                nn.Conv2d(in_dim if i == 0 else channels, channels, 3, padding=1),
                nn.GroupNorm(groups, channels),
                nn.ReLU(inplace=True),
            ))
        self.blocks = nn.ModuleList(layers)
        self.head = nn.Conv2d(channels, 1, 1)

    def forward(self, grid, out_hw):
        x = grid.permute(0, 3, 1, 2)
        for blk in self.blocks:
            x = F.interpolate(blk(x), scale_factor=2, mode="bilinear", align_corners=False)
        x = self.head(x)
        if tuple(x.shape[-2:]) != tuple(out_hw):
            x = F.interpolate(x, size=tuple(out_hw), mode="bilinear", align_corners=False)
        return x[:, 0]


def canonical_order(exemplars: torch.Tensor) -> torch.Tensor:
    """Index ordering ``E`` exemplar images by their raw bytes.

    Feeding exemplars in a canonical order makes the whole forward pass
    bitwise independent of the caller's ordering.
    """
    keys = [exemplars[i].detach().cpu().contiguous().numpy().tobytes() for i in range(exemplars.shape[0])]
    return torch.tensor(sorted(range(len(keys)), key=keys.__getitem__), dtype=torch.long)


class CountingModel(nn.Module):
    def __init__(self, config: ModelConfig, backbone: Backbone | None = None):
        super().__init__()
        self.config = config
        self.backbone = (backbone or load_backbone(config.backbone)).freeze()
        d = self.backbone.dim
        self.fim = FeatureInteraction(d, config.fim_dim, config.fim_blocks, config.fim_heads,
                                      config.fim_mlp_dim)
        self.decoder = Decoder(config.fim_dim, config.decoder_channels, config.decoder_blocks,
                               config.decoder_groups)
        self._init(config.seed)

    def _init(self, seed):
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for m in list(self.fim.modules()) + list(self.decoder.modules()):
                if isinstance(m, nn.Linear):
                    nn.init.trunc_normal_(m.weight, std=0.02, a=-0.04, b=0.04, generator=gen)
                    nn.init.zeros_(m.bias)
                elif isinstance(m, nn.Conv2d):
                    nn.init.kaiming_uniform_(m.weight, a=5 ** 0.5, generator=gen)
                    nn.init.zeros_(m.bias)
            # a zero head starts every density at 0, which keeps the first
            # updates from driving the decoder ReLUs dead
            nn.init.zeros_(self.decoder.head.weight)
            nn.init.zeros_(self.decoder.head.bias)

    def trainable_parameters(self):
        return [p for n, p in self.named_parameters() if not n.startswith("backbone.")]

    @property
    def patch_size(self) -> int:
        return self.backbone.patch_size

    def encode_image(self, images: torch.Tensor) -> torch.Tensor:
        feats, _, _ = self.backbone.encode(images)
        return feats

    def encode_exemplars(self, exemplars: torch.Tensor) -> torch.Tensor:
        """``B x E x 3 x h x w`` -> ``B x E x d`` in canonical exemplar order."""
        b, e = exemplars.shape[:2]
        order = torch.stack([canonical_order(exemplars[i]) for i in range(b)])
        exemplars = torch.gather(exemplars, 1, order.view(b, e, 1, 1, 1).expand_as(exemplars))
        feats, attn, _ = self.backbone.encode(exemplars.flatten(0, 1))
        z = encode_exemplar_features(feats, attn.mean(dim=1))
        return z.view(b, e, -1)

    def forward_features(self, feats, exemplars, out_hw):
        return self.decoder(self.fim(feats, self.encode_exemplars(exemplars)), out_hw)

    def forward(self, images: torch.Tensor, exemplars: torch.Tensor) -> torch.Tensor:
        """``images``: ``B x 3 x H x W`` in [0, 1]; ``exemplars``: ``B x E x 3 x h' x w'``."""
        if exemplars.ndim != 5 or exemplars.shape[1] < 1:
            raise ValueError("exemplars must be B x E x 3 x h x w with E >= 1")
        return self.forward_features(self.encode_image(images), exemplars, images.shape[-2:])

    @torch.no_grad()
    def predict_density(self, image: np.ndarray, exemplars) -> np.ndarray:
        """Density map for one uint8 image given uint8 exemplar crops."""
        if len(exemplars) < 1:
            raise ValueError("at least one exemplar is required")
        x = image_to_tensor(image)
        ex = torch.cat([image_to_tensor(e) for e in exemplars])[None]
        return self(x, ex)[0].numpy()


def save_checkpoint(model: CountingModel, path, extra: dict | None = None) -> None:
    """Write ``<path>`` (named arrays) and ``<path>.json`` (config snapshot)."""
    path = Path(path)
    save_arrays(path, {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()})
    meta = {"model": model.config.to_dict()}
    if extra:
        meta.update(extra)
    path.with_name(path.name + ".json").write_text(json.dumps(meta, indent=2, default=str))


def load_checkpoint(path) -> CountingModel:
    path = Path(path)
    meta = json.loads(path.with_name(path.name + ".json").read_text())
    cfg = dict(meta["model"])
    spec = dict(cfg.pop("backbone"))
    if spec["kind"] != "handcrafted":
        # backbone weights travel inside the checkpoint
        spec["weights_path"] = None
        spec["kind"] = "tiny-vit"
    model = CountingModel(ModelConfig(backbone=BackboneSpec(**spec), **cfg))
    arrays = load_arrays(path)
    state = model.state_dict()
    missing = set(state) - set(arrays)
    if missing:
        raise IOError(f"checkpoint {path} lacks {sorted(missing)[:5]}")
    model.load_state_dict({k: torch.from_numpy(arrays[k]) for k in state})
    model.eval()
    return model
