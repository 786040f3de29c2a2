"""Frozen visual feature extractors.

Every backbone maps an image to a patch feature grid, the final-layer CLS
attention over patches (per head) and a global CLS embedding.  Two
implementations ship with the package:

* ``HandcraftedBackbone`` -- a training-free, fully deterministic extractor
  built from per-patch colour/gradient statistics.
* ``TinyViT`` -- a small ViT with fixed sinusoidal position embeddings whose
  parameter names follow the usual ViT layout, so externally trained weights
  can be loaded into it.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .io import ContainerError, load_arrays, save_arrays

logger = logging.getLogger(__name__)

VALID_PATCH_SIZES = (4, 8, 14, 16)
BACKBONE_KINDS = ("handcrafted", "tiny-vit", "external-weights")
HANDCRAFTED_DIM = 6


class BackboneLoadError(IOError):
    pass


@dataclass(frozen=True)
class BackboneSpec:
    kind: str = "handcrafted"
    patch_size: int = 16
    depth: int = 2
    heads: int = 4
    width: int = 96
    weights_path: str | None = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in BACKBONE_KINDS:
            raise ValueError(f"unknown backbone kind {self.kind!r}")
        if self.patch_size not in VALID_PATCH_SIZES:
            raise ValueError(f"patch_size must be one of {VALID_PATCH_SIZES}, got {self.patch_size}")
        if self.kind != "handcrafted":
            if self.depth < 1 or self.heads < 1 or self.width < 1:
                raise ValueError("depth, heads and width must be positive")
            if self.width % self.heads:
                raise ValueError("width must be divisible by heads")
            if self.width % 4:
                raise ValueError("width must be divisible by 4 for 2-D sinusoidal embeddings")


@dataclass
class FeatureGrid:
    values: np.ndarray  # h x w x d
    patch_size: int

    @property
    def shape(self):
        return self.values.shape


@dataclass
class AttentionMap:
    values: np.ndarray  # h x w, head-averaged


def image_to_tensor(image: np.ndarray) -> torch.Tensor:
    """uint8 ``H x W x 3`` -> float ``1 x 3 x H x W`` in [0, 1]."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected an H x W x 3 image, got shape {image.shape}")
    t = torch.from_numpy(np.array(image, dtype=np.float32)) / 255.0
    return t.permute(2, 0, 1).unsqueeze(0)


def sincos_2d(h: int, w: int, dim: int) -> torch.Tensor:
    """Fixed 2-D sine/cosine position embeddings, shape ``(h * w, dim)``."""
    if dim % 4:
        raise ValueError("embedding dim must be divisible by 4")
    quarter = dim // 4
    omega = 1.0 / 10000 ** (torch.arange(quarter, dtype=torch.float64) / quarter)
    ys, xs = torch.meshgrid(torch.arange(h, dtype=torch.float64),
                            torch.arange(w, dtype=torch.float64), indexing="ij")
    out_y = ys.reshape(-1, 1) * omega
    out_x = xs.reshape(-1, 1) * omega
    emb = torch.cat([out_y.sin(), out_y.cos(), out_x.sin(), out_x.cos()], dim=1)
    return emb.to(torch.float32)


class Backbone(nn.Module):
    """Common interface.  Subclasses implement :meth:`encode`."""

    patch_size: int
    dim: int
    num_heads: int

    def freeze(self) -> "Backbone":
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()
        return self

    def train(self, mode: bool = True):
        # frozen backbones never leave eval mode
        return super().train(False)

    def encode(self, images: torch.Tensor):
        """Encode a batch ``B x 3 x H x W`` (floats in [0, 1]).

        Returns ``(features B x h x w x d, attention B x heads x h x w,
        cls B x d)``.
        """
        raise NotImplementedError

    def grid_shape(self, height: int, width: int) -> tuple[int, int]:
        return height // self.patch_size, width // self.patch_size

    def _check(self, image: np.ndarray) -> torch.Tensor:
        image = np.asarray(image)
        if image.ndim != 3 or image.shape[0] < self.patch_size or image.shape[1] < self.patch_size:
            raise ValueError(
                f"image of shape {image.shape} is smaller than one {self.patch_size}px patch")
        return image_to_tensor(image)

    @torch.no_grad()
    def encode_patches(self, image: np.ndarray) -> FeatureGrid:
        feats, _, _ = self.encode(self._check(image))
        return FeatureGrid(feats[0].numpy(), self.patch_size)

    @torch.no_grad()
    def cls_attention_heads(self, image: np.ndarray) -> np.ndarray:
        _, attn, _ = self.encode(self._check(image))
        return attn[0].numpy()

    def cls_attention(self, image: np.ndarray) -> AttentionMap:
        return AttentionMap(self.cls_attention_heads(image).mean(axis=0))

    @torch.no_grad()
    def cls_embedding(self, image: np.ndarray) -> np.ndarray:
        _, _, cls = self.encode(self._check(image))
        return cls[0].numpy()


class HandcraftedBackbone(Backbone):
    """Per-patch ``[mean R, mean G, mean B, horizontal gradient energy,
    vertical gradient energy, std]`` features.

    The CLS embedding is the image-wide mean of the patch features.  The
    single attention "head" is the distance of each patch's mean colour from
    the mean colour of the outer ring of patches, normalised to sum to one
    (uniform when every distance is zero).
    """

    def __init__(self, patch_size: int = 16):
        super().__init__()
        self.patch_size = patch_size
        self.dim = HANDCRAFTED_DIM
        self.num_heads = 1

    @torch.no_grad()
    def encode(self, images):
        p = self.patch_size
        b, _, H, W = images.shape
        h, w = H // p, W // p
        x = images[:, :, :h * p, :w * p].to(torch.float64)
        patches = x.reshape(b, 3, h, p, w, p)
        color = patches.mean(dim=(3, 5))  # b 3 h w
        gray = patches.mean(dim=1)  # b h p w p
        gx = (gray[..., 1:] - gray[..., :-1]).pow(2).mean(dim=(2, 4))
        gy = (gray[:, :, 1:] - gray[:, :, :-1]).pow(2).mean(dim=(2, 4))
        std = gray.std(dim=(2, 4), unbiased=False)
        feats = torch.cat([color, gx[:, None], gy[:, None], std[:, None]], dim=1)
        feats = feats.permute(0, 2, 3, 1)

        ring = torch.zeros(h, w, dtype=torch.bool)
        ring[0, :] = ring[-1, :] = ring[:, 0] = ring[:, -1] = True
        border = color[:, :, ring].mean(dim=2)  # b 3
        dist = (color - border[:, :, None, None]).pow(2).sum(dim=1).sqrt()  # b h w
        total = dist.sum(dim=(1, 2), keepdim=True)
        attn = torch.where(total > 0, dist / total.clamp_min(1e-300),
                           torch.full_like(dist, 1.0 / (h * w)))
        cls = feats.mean(dim=(1, 2))
        return feats.float(), attn[:, None].float(), cls.float()


class _Attention(nn.Module):
    def __init__(self, dim, heads):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        b, n, c = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, c // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q @ k.transpose(-2, -1) * self.scale).softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, c)
        return self.proj(out), attn


class _Mlp(nn.Module):
    def __init__(self, dim, hidden):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


class _Block(nn.Module):
    def __init__(self, dim, heads):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, eps=1e-6)
        self.attn = _Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim, eps=1e-6)
        self.mlp = _Mlp(dim, 4 * dim)

    def forward(self, x):
        y, attn = self.attn(self.norm1(x))
        x = x + y
        x = x + self.mlp(self.norm2(x))
        return x, attn


class TinyViT(Backbone):
    """Small ViT; final-block CLS attention is taken post-softmax with the CLS
    self-entry dropped (no renormalisation)."""

    MEAN = (0.485, 0.456, 0.406)
    STD = (0.229, 0.224, 0.225)

    def __init__(self, patch_size=8, depth=2, heads=4, width=96, seed=0):
        super().__init__()
        self.patch_size = patch_size
        self.dim = width
        self.num_heads = heads
        self.patch_embed = nn.Conv2d(3, width, patch_size, stride=patch_size)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, width))
        self.blocks = nn.ModuleList(_Block(width, heads) for _ in range(depth))
        self.norm = nn.LayerNorm(width, eps=1e-6)
        self.register_buffer("mean", torch.tensor(self.MEAN).view(1, 3, 1, 1), persistent=False)
        self.register_buffer("std", torch.tensor(self.STD).view(1, 3, 1, 1), persistent=False)
        self._init(seed)

    def _init(self, seed):
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name.endswith("bias"):
                    p.zero_()
                elif ".norm" in name or name.startswith("norm"):
                    p.fill_(1.0)
                else:
                    nn.init.trunc_normal_(p, std=0.02, a=-0.04, b=0.04, generator=gen)

    @torch.no_grad()
    def encode(self, images):
        p = self.patch_size
        b, _, H, W = images.shape
        h, w = H // p, W // p
        x = (images[:, :, :h * p, :w * p] - self.mean) / self.std
        tokens = self.patch_embed(x).flatten(2).transpose(1, 2)
        tokens = tokens + sincos_2d(h, w, self.dim)
        x = torch.cat([self.cls_token.expand(b, -1, -1), tokens], dim=1)
        attn = None
        for blk in self.blocks:
            x, attn = blk(x)
        x = self.norm(x)
        feats = x[:, 1:].reshape(b, h, w, self.dim)
        cls_attn = attn[:, :, 0, 1:].reshape(b, self.num_heads, h, w)
        return feats, cls_attn, x[:, 0]


def backbone_arrays(backbone: Backbone) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy() for k, v in backbone.state_dict().items()}


def save_backbone(backbone: Backbone, path) -> None:
    save_arrays(path, backbone_arrays(backbone))


def _load_weights(backbone: Backbone, path) -> None:
    try:
        arrays = load_arrays(path)
    except ContainerError as exc:
        raise BackboneLoadError(str(exc)) from exc
    state = backbone.state_dict()
    missing = set(state) - set(arrays)
    unexpected = set(arrays) - set(state)
    if missing or unexpected:
        raise BackboneLoadError(
            f"weights file {path} does not match the backbone layout "
            f"(missing={sorted(missing)[:5]}, unexpected={sorted(unexpected)[:5]})")
    for name, arr in arrays.items():
        if tuple(arr.shape) != tuple(state[name].shape):
            raise BackboneLoadError(
                f"weights file {path}: {name} has shape {arr.shape}, expected {tuple(state[name].shape)}")
    backbone.load_state_dict({k: torch.from_numpy(v) for k, v in arrays.items()})


def load_backbone(spec: BackboneSpec) -> Backbone:
    """Build a frozen backbone from its spec."""
    if spec.kind == "handcrafted":
        return HandcraftedBackbone(spec.patch_size).freeze()
    model = TinyViT(spec.patch_size, spec.depth, spec.heads, spec.width, seed=spec.seed)
    if spec.kind == "external-weights" and not spec.weights_path:
        raise BackboneLoadError("external-weights backbone needs a weights_path")
    if spec.weights_path:
        _load_weights(model, spec.weights_path)
        logger.info("loaded backbone weights from %s", spec.weights_path)
    return model.freeze()
