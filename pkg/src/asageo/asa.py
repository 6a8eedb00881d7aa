"""Adaptive semantic aggregation of patch tokens into part features.

The discrete steps (1-D compression, descending sort, k-means on scalars,
anchor lookup) run on detached NumPy copies and are treated as constants
for autograd. Distances, the cosine attention and the weighted aggregation
are differentiable torch ops.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from . import kernels
from .config import PartitionSpec
from .errors import AggregationError, PartitionError


@dataclass
class KMeansResult:
    labels: np.ndarray
    centers: np.ndarray
    sse_history: np.ndarray
    converged: bool


@dataclass
class PartFeatures:
    rho: torch.Tensor  # (K, D)
    anchor_indices: np.ndarray | None  # (K,), None for hard strategies
    attention: torch.Tensor  # (K, N)
    labels: np.ndarray | None = None


def compress(patch_tokens: torch.Tensor) -> torch.Tensor:
    """Mean over the feature dimension: (..., N, D) -> (..., N)."""
    return patch_tokens.mean(dim=-1)


def sort_descending(q) -> np.ndarray:
    """Patch indices ordered by decreasing ``q``; equal values keep ascending index."""
    q = np.asarray(q, dtype=np.float64)
    return np.lexsort((np.arange(q.shape[0]), -q))


def init_positions(n: int, k: int) -> np.ndarray:
    """1-based positions ``floor((2k - 1) N / 2K)`` into the sorted sequence, clamped to [1, N]."""
    if k < 1 or k > n:
        raise PartitionError(f"cannot split {n} patches into {k} parts")
    ks = np.arange(1, k + 1, dtype=np.int64)
    return np.clip(((2 * ks - 1) * n) // (2 * k), 1, n)


def init_centers(q, k: int) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    order = sort_descending(q)
    return q[order[init_positions(q.shape[0], k) - 1]]


def kmeans_1d(q, k: int, centers=None, max_iters: int = 100, tol: float = 1e-9) -> KMeansResult:
    q = np.ascontiguousarray(q, dtype=np.float64)
    if k < 1 or k > q.shape[0]:
        raise PartitionError(f"cannot split {q.shape[0]} patches into {k} parts")
    if centers is None:
        centers = init_centers(q, k)
    labels, centers, history, converged = kernels.kmeans_1d(q, centers, max_iters, tol)
    return KMeansResult(labels, centers, history, bool(converged))


def select_anchors(q, centers) -> np.ndarray:
    return kernels.nearest_indices(np.asarray(q, dtype=np.float64), np.asarray(centers, dtype=np.float64))


def _distances(patch_tokens: torch.Tensor, anchors: torch.Tensor) -> torch.Tensor:
    diff = patch_tokens.unsqueeze(-3) - patch_tokens[..., anchors, :].unsqueeze(-2)
    sq = (diff * diff).sum(dim=-1)
    # sqrt has no derivative at 0; the anchor column is identically zero anyway
    pos = sq > 0
    return torch.where(pos, torch.sqrt(torch.where(pos, sq, torch.ones_like(sq))), torch.zeros_like(sq))


def compute_attention(
    patch_tokens: torch.Tensor, anchor_indices, alpha: float = 1.0, beta: float = 0.0
) -> torch.Tensor:
    """Cosine-shaped attention of every patch to every anchor: (N, D) -> (K, N).

    A row whose distances are all equal is set to ``alpha + beta``.
    """
    anchors = torch.as_tensor(np.asarray(anchor_indices), dtype=torch.long, device=patch_tokens.device)
    dis = _distances(patch_tokens, anchors)
    lo = dis.min(dim=-1, keepdim=True).values
    hi = dis.max(dim=-1, keepdim=True).values
    span = hi - lo
    flat = span <= 0
    t = (dis - lo) / torch.where(flat, torch.ones_like(span), span)
    att = alpha * torch.cos(t * (math.pi / 2)) + beta
    return torch.where(flat, torch.full_like(att, alpha + beta), att)


def aggregate(patch_tokens: torch.Tensor, attention: torch.Tensor) -> torch.Tensor:
    """Attention-normalised weighted mean of patch rows: (N, D), (K, N) -> (K, D)."""
    sums = attention.sum(dim=-1, keepdim=True)
    if not bool((sums > 0).all()):
        raise AggregationError("attention row with non-positive sum")
    return (attention @ patch_tokens) / sums


def hard_partition_uniform(q, k: int) -> np.ndarray:
    """Split the descending ranking into K contiguous groups.

    With ``N % K = r`` the last ``r`` groups take one extra patch.
    """
    q = np.asarray(q, dtype=np.float64)
    n = q.shape[0]
    if k < 1 or k > n:
        raise PartitionError(f"cannot split {n} patches into {k} parts")
    base, rem = divmod(n, k)
    sizes = [base + (1 if g >= k - rem else 0) for g in range(k)]
    labels = np.empty(n, dtype=np.int64)
    labels[sort_descending(q)] = np.repeat(np.arange(k), sizes)
    return labels


def hard_partition_kmeans(q, k: int, max_iters: int = 100, tol: float = 1e-9) -> np.ndarray:
    return kmeans_1d(q, k, max_iters=max_iters, tol=tol).labels


def one_hot_attention(labels, k: int, like: torch.Tensor) -> torch.Tensor:
    labels = torch.as_tensor(np.asarray(labels), dtype=torch.long, device=like.device)
    return nn.functional.one_hot(labels, k).T.to(like.dtype)


def asa_forward(
    patch_tokens: torch.Tensor,
    spec: PartitionSpec,
    anchor_indices=None,
    labels=None,
) -> PartFeatures:
    """Part features for one image's patch tokens ``(N, D)``.

    ``anchor_indices`` (soft) or ``labels`` (hard) may be passed to freeze the
    discrete choices, e.g. for gradient checks.
    """
    n = patch_tokens.shape[-2]
    k = spec.num_parts
    if k > n:
        raise PartitionError(f"cannot split {n} patches into {k} parts")
    q = None
    if (spec.strategy == "soft_kmeans" and anchor_indices is None) or (
        spec.strategy != "soft_kmeans" and labels is None
    ):
        q = compress(patch_tokens.detach()).cpu().double().numpy()

    if spec.strategy == "soft_kmeans":
        km_labels = None
        if anchor_indices is None:
            km = kmeans_1d(q, k, max_iters=spec.max_iters, tol=spec.tol)
            km_labels = km.labels
            anchor_indices = select_anchors(q, km.centers)
        att = compute_attention(patch_tokens, anchor_indices, spec.alpha, spec.beta)
        if spec.attention_grad == "detach":
            att = att.detach()
        return PartFeatures(aggregate(patch_tokens, att), np.asarray(anchor_indices), att, km_labels)

    if labels is None:
        if spec.strategy == "hard_kmeans":
            labels = hard_partition_kmeans(q, k, spec.max_iters, spec.tol)
        else:
            labels = hard_partition_uniform(q, k)
    att = one_hot_attention(labels, k, patch_tokens)
    return PartFeatures(aggregate(patch_tokens, att), None, att, np.asarray(labels))


class ASA(nn.Module):
    """Batched wrapper; has no trainable parameters."""

    def __init__(self, spec: PartitionSpec):
        super().__init__()
        spec.validate()
        self.spec = spec
        self.last_parts: list[PartFeatures] = []

    def forward(self, patch_tokens: torch.Tensor) -> torch.Tensor:
        parts = [asa_forward(p, self.spec) for p in patch_tokens]
        self.last_parts = [
            PartFeatures(p.rho.detach(), p.anchor_indices, p.attention.detach(), p.labels) for p in parts
        ]
        return torch.stack([p.rho for p in parts])
