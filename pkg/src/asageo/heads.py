"""Per-head additive/classification layers and the training objective."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .config import HeadConfig
from .errors import ConfigError


@dataclass
class HeadOutputs:
    f: torch.Tensor  # (B, K + 1, additive_dim); index 0 is the global head
    z: torch.Tensor  # (B, K + 1, C)


class HeadBlock(nn.Module):
    """Affine map, batch standardisation and GELU, then a bias-free classifier."""

    def __init__(self, in_dim: int, cfg: HeadConfig):
        super().__init__()
        self.add = nn.Sequential(
            nn.Linear(in_dim, cfg.additive_dim),
            nn.BatchNorm1d(cfg.additive_dim),
            nn.GELU(),
        )
        if cfg.dropout > 0:
            self.add.append(nn.Dropout(cfg.dropout))
        self.cls = nn.Linear(cfg.additive_dim, cfg.num_classes, bias=False)
        nn.init.kaiming_normal_(self.add[0].weight, a=0, mode="fan_out")
        nn.init.zeros_(self.add[0].bias)
        nn.init.normal_(self.cls.weight, std=0.001)

    def forward(self, x):
        f = self.add(x)
        return f, self.cls(f)


class ClassificationModule(nn.Module):
    def __init__(self, in_dim: int, num_parts: int, cfg: HeadConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.in_dim = in_dim
        self.num_parts = num_parts
        self.heads = nn.ModuleList([HeadBlock(in_dim, cfg) for _ in range(num_parts + 1)])

    def forward(self, class_token: torch.Tensor, parts: torch.Tensor) -> HeadOutputs:
        """``class_token`` (B, D) and ``parts`` (B, K, D)."""
        if parts.dim() != 3 or parts.shape[1] != self.num_parts or parts.shape[2] != self.in_dim:
            raise ConfigError(
                f"expected parts of shape (B, {self.num_parts}, {self.in_dim}), got {tuple(parts.shape)}"
            )
        if class_token.shape != (parts.shape[0], self.in_dim):
            raise ConfigError(f"class token shape {tuple(class_token.shape)} does not match parts")
        inputs = [class_token] + [parts[:, k] for k in range(self.num_parts)]
        fs, zs = zip(*(head(x) for head, x in zip(self.heads, inputs)))
        return HeadOutputs(torch.stack(fs, dim=1), torch.stack(zs, dim=1))


def _head_slice(t: torch.Tensor, include_global_head: bool) -> torch.Tensor:
    return t if include_global_head else t[:, 1:]


def ce_loss(outputs: HeadOutputs, y, include_global_head: bool = True) -> torch.Tensor:
    """Softmax cross entropy averaged over heads and samples."""
    z = _head_slice(outputs.z, include_global_head)
    y = torch.as_tensor(y, dtype=torch.long, device=z.device).reshape(-1)
    b, h, c = z.shape
    if y.shape[0] != b:
        raise ValueError(f"{y.shape[0]} labels for {b} samples")
    if bool(((y < 0) | (y >= c)).any()):
        raise ValueError(f"labels must lie in [0, {c})")
    # log_softmax subtracts the row max internally
    logp = F.log_softmax(z, dim=-1)
    picked = logp.gather(-1, y.view(b, 1, 1).expand(b, h, 1)).squeeze(-1)
    return -picked.mean()


def triplet_hinge(d_pos: torch.Tensor, d_neg: torch.Tensor, margin: float) -> torch.Tensor:
    """Mean of ``max(d_pos - d_neg + margin, 0)`` over the given heads."""
    return torch.clamp(d_pos - d_neg + margin, min=0).mean()


def triplet_loss(f_anchor, f_pos, f_neg, margin: float = 0.3) -> torch.Tensor:
    """Per-head triplet hinge for aligned ``(heads, dim)`` feature stacks."""
    d_pos = torch.linalg.vector_norm(f_anchor - f_pos, dim=-1)
    d_neg = torch.linalg.vector_norm(f_anchor - f_neg, dim=-1)
    return triplet_hinge(d_pos, d_neg, margin)


def _pairwise(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    diff = a.unsqueeze(1) - b.unsqueeze(0)
    sq = (diff * diff).sum(-1)
    pos = sq > 0
    return torch.where(pos, torch.sqrt(torch.where(pos, sq, torch.ones_like(sq))), torch.zeros_like(sq))


def batch_triplet_loss(f, locations, views, margin: float = 0.3, include_global_head: bool = True):
    """Cross-view triplet loss with in-batch hardest negatives.

    Every sample is an anchor. Its positive is the opposite-view sample of the
    same location; its negative, chosen per head, is the nearest opposite-view
    sample of another location.
    """
    f = _head_slice(f, include_global_head)
    locations = torch.as_tensor(locations).reshape(-1)
    views = torch.as_tensor(views).reshape(-1)
    b, h, _ = f.shape
    # (H, B, B) distances per head
    dist = torch.stack([_pairwise(f[:, k], f[:, k]) for k in range(h)])
    other_view = views.view(-1, 1) != views.view(1, -1)
    same_loc = locations.view(-1, 1) == locations.view(1, -1)
    pos_mask = other_view & same_loc
    neg_mask = other_view & ~same_loc
    if not bool(pos_mask.any(1).all()) or not bool(neg_mask.any(1).all()):
        raise ValueError("every sample needs a cross-view positive and negative in the batch")
    inf = torch.finfo(dist.dtype).max
    # a location may contribute several opposite-view samples; use the farthest positive
    d_pos = torch.where(pos_mask, dist, torch.full_like(dist, -inf)).max(dim=-1).values
    d_neg = torch.where(neg_mask, dist, torch.full_like(dist, inf)).min(dim=-1).values
    return triplet_hinge(d_pos, d_neg, margin)


def total_loss(ce, triplet):
    return ce + triplet
