"""Per-image attention export: raw K x N CSV plus one grayscale heatmap per part."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import ConfigError


def image_attention(model, image: np.ndarray, norm):
    """Attention matrix ``(K, N)`` and anchor indices for one ``(H, W, C)`` image."""
    from .training import to_tensor

    cfg = model.cfg.backbone
    expected = (cfg.image_height, cfg.image_width, cfg.channels)
    if image.shape != expected:
        raise ConfigError(f"image shape {image.shape} incompatible with model input {expected}")
    model.eval()
    with torch.no_grad():
        model(to_tensor([image], *norm))
    parts = model.asa.last_parts[0]
    return parts.attention.double().numpy(), parts.anchor_indices


def write_attention_csv(path, attention: np.ndarray) -> None:
    """Rows are parts, columns are patches in raster order; values round-trip exactly."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow([f"patch_{i}" for i in range(attention.shape[1])])
        for row in attention:
            writer.writerow([repr(float(v)) for v in row])


def read_attention_csv(path) -> np.ndarray:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    return np.array([[float(v) for v in r] for r in rows[1:]], dtype=np.float64)


def heatmap(row: np.ndarray, grid: tuple[int, int]) -> np.ndarray:
    """One part's attention on the patch grid as uint8, scaled so the row maximum is 255."""
    peak = float(np.max(row))
    scaled = row / peak if peak > 0 else np.zeros_like(row)
    return np.round(np.clip(scaled, 0.0, 1.0) * 255.0).astype(np.uint8).reshape(grid)


def save_heatmaps(attention: np.ndarray, grid: tuple[int, int], out_dir, upscale: int = 1) -> list[Path]:
    out_dir = Path(out_dir)
    paths = []
    for k, row in enumerate(attention):
        img = Image.fromarray(heatmap(row, grid))
        if upscale > 1:
            img = img.resize((grid[1] * upscale, grid[0] * upscale), Image.NEAREST)
        path = out_dir / f"part_{k + 1}.png"
        img.save(path)
        paths.append(path)
    return paths
