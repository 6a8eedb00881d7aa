"""Small Vision Transformer producing one class token and N patch tokens.

Parameter names follow the common ``timm`` ViT layout (``patch_embed.proj``,
``cls_token``, ``pos_embed``, ``blocks.{i}.norm1`` / ``attn.qkv`` / ``attn.proj``
/ ``norm2`` / ``mlp.fc1`` / ``mlp.fc2``, ``norm``) so external checkpoints can
be imported with :func:`import_weights`.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import torch
from torch import nn

from .config import BackboneConfig
from .errors import ConfigError, NumericError

log = logging.getLogger(__name__)


@dataclass
class TokenSet:
    class_token: torch.Tensor  # (B, D)
    patch_tokens: torch.Tensor  # (B, N, D)


class PatchEmbed(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.proj = nn.Conv2d(cfg.channels, cfg.embed_dim, cfg.patch_size, stride=cfg.patch_size)

    def forward(self, x):
        return self.proj(x).flatten(2).transpose(1, 2)


class Attention(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.scale = self.head_dim ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.num_heads, self.head_dim).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q @ k.transpose(-2, -1)) * self.scale
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, d)
        return self.proj(out)


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int, output_gelu: bool = False):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)
        self.output_gelu = output_gelu

    def forward(self, x):
        x = self.fc2(self.act(self.fc1(x)))
        return self.act(x) if self.output_gelu else x


class Block(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        dim = cfg.embed_dim
        self.norm1 = nn.LayerNorm(dim, eps=1e-6)
        self.attn = Attention(dim, cfg.num_heads)
        self.norm2 = nn.LayerNorm(dim, eps=1e-6)
        self.mlp = Mlp(dim, int(dim * cfg.mlp_ratio), cfg.mlp_output_gelu)

    def forward(self, z):
        z = self.attn(self.norm1(z)) + z
        return self.mlp(self.norm2(z)) + z


class VisionTransformer(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        n = cfg.num_patches
        self.patch_embed = PatchEmbed(cfg)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, cfg.embed_dim))
        self.pos_embed = nn.Parameter(torch.zeros(1, n + 1, cfg.embed_dim))
        self.blocks = nn.ModuleList([Block(cfg) for _ in range(cfg.depth)])
        self.norm = nn.LayerNorm(cfg.embed_dim, eps=1e-6) if cfg.final_norm else nn.Identity()
        self.reset_parameters()

    def reset_parameters(self) -> None:
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        nn.init.trunc_normal_(self.cls_token, std=0.02)
        for m in self.modules():
            if isinstance(m, (nn.Linear, nn.Conv2d)):
                nn.init.trunc_normal_(m.weight, std=0.02)
                if m.bias is not None:
                    nn.init.zeros_(m.bias)
            elif isinstance(m, nn.LayerNorm):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)

    def embed(self, images: torch.Tensor) -> torch.Tensor:
        """Images ``(B, C, H, W)`` -> ``Z_0`` of shape ``(B, N + 1, D)``."""
        cfg = self.cfg
        expected = (cfg.channels, cfg.image_height, cfg.image_width)
        if images.dim() != 4 or tuple(images.shape[1:]) != expected:
            raise ConfigError(
                f"expected images of shape (B, {', '.join(map(str, expected))}), "
                f"got {tuple(images.shape)}"
            )
        patches = self.patch_embed(images)
        cls = self.cls_token.expand(images.shape[0], -1, -1)
        return torch.cat([cls, patches], dim=1) + self.pos_embed

    def encode(self, z: torch.Tensor, check_finite: bool = True) -> TokenSet:
        for i, block in enumerate(self.blocks):
            z = block(z)
            if check_finite and not torch.isfinite(z).all():
                raise NumericError(f"non-finite activations after encoder block {i}")
        z = self.norm(z)
        return TokenSet(class_token=z[:, 0], patch_tokens=z[:, 1:])

    def forward(self, images: torch.Tensor) -> TokenSet:
        return self.encode(self.embed(images))


def import_weights(model: VisionTransformer, state_dict: dict, strict_shapes: bool = True):
    """Copy matching tensors from an external checkpoint into ``model``.

    Keys use the naming documented in the module docstring; an optional
    ``backbone.`` or ``module.`` prefix is stripped. Positional embeddings are
    never imported (they are trained from scratch). Returns ``(loaded, skipped)``.
    """
    own = model.state_dict()
    loaded, skipped = [], []
    for key, value in state_dict.items():
        name = key
        for prefix in ("module.", "backbone."):
            if name.startswith(prefix):
                name = name[len(prefix):]
        if name == "pos_embed" or name not in own:
            skipped.append(key)
            continue
        if own[name].shape != value.shape:
            if strict_shapes:
                raise ConfigError(
                    f"shape mismatch for {name}: checkpoint {tuple(value.shape)} "
                    f"vs model {tuple(own[name].shape)}"
                )
            skipped.append(key)
            continue
        with torch.no_grad():
            own[name].copy_(value)
        loaded.append(name)
    log.info("imported %d tensors, skipped %d", len(loaded), len(skipped))
    return loaded, skipped
