"""Single-file checkpoint archive.

Layout (a ``torch.save`` zip archive holding one dict):

* ``format``: ``"asageo-checkpoint-v1"``
* ``config``: the full run configuration as a JSON string
* ``model``: named parameter/buffer tensors; ``backbone.*`` uses the ViT
  naming of :mod:`asageo.backbone`, heads are ``classifier.heads.{k}.*`` with
  ``k = 0`` the global head and ``k = 1..K`` the parts
* ``class_ids``: training location ids in label order
* ``norm``: per-channel ``mean`` / ``std`` used for input normalisation
* ``train_state`` (optional): optimizer state, epoch, step, RNG states, loss history
"""

from __future__ import annotations

import json
from pathlib import Path

import torch

from .config import RunConfig
from .errors import CheckpointError
from .model import GeoLocalizer

FORMAT = "asageo-checkpoint-v1"


def save_checkpoint(path, model: GeoLocalizer, cfg: RunConfig, class_ids, norm, train_state=None) -> None:
    payload = {
        "format": FORMAT,
        "config": cfg.to_json(),
        "model": {k: v.detach().cpu().clone() for k, v in model.state_dict().items()},
        "class_ids": list(class_ids),
        "norm": {"mean": [float(x) for x in norm[0]], "std": [float(x) for x in norm[1]]},
    }
    if train_state is not None:
        payload["train_state"] = train_state
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def read_checkpoint(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint {path} not found")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or payload.get("format") != FORMAT:
        raise CheckpointError(f"{path} is not an {FORMAT} archive")
    return payload


def config_of(payload: dict) -> RunConfig:
    return RunConfig.from_dict(json.loads(payload["config"]))


ARCH_FIELDS = {
    "backbone": ("image_height", "image_width", "channels", "patch_size", "embed_dim", "depth",
                 "num_heads", "mlp_ratio", "final_norm", "mlp_output_gelu"),
    "asa": ("num_parts",),
    "head": ("additive_dim", "num_classes"),
}


def check_compatible(stored: RunConfig, requested: RunConfig) -> None:
    """Raise naming the first architecture field that differs."""
    for section, names in ARCH_FIELDS.items():
        for name in names:
            a = getattr(getattr(stored, section), name)
            b = getattr(getattr(requested, section), name)
            if a != b:
                raise CheckpointError(
                    f"config mismatch on {section}.{name}: checkpoint has {a!r}, requested {b!r}"
                )


def load_model(path, requested: RunConfig | None = None):
    """Rebuild the model from a checkpoint. Returns ``(model, cfg, payload)``."""
    payload = read_checkpoint(path)
    cfg = config_of(payload)
    if requested is not None:
        check_compatible(cfg, requested)
        # inference-time knobs (strategy, alpha, beta) may differ
        cfg.asa = requested.asa
    model = GeoLocalizer(cfg)
    missing, unexpected = model.load_state_dict(payload["model"], strict=False)
    if missing or unexpected:
        raise CheckpointError(f"checkpoint tensors do not match model: missing={missing}, unexpected={unexpected}")
    model.eval()
    return model, cfg, payload
