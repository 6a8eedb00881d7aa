"""Two-branch geo-localization model with one shared backbone."""

from __future__ import annotations

import torch
from torch import nn

from .asa import ASA
from .backbone import VisionTransformer
from .config import RunConfig
from .heads import ClassificationModule, HeadOutputs


class GeoLocalizer(nn.Module):
    def __init__(self, cfg: RunConfig):
        super().__init__()
        cfg.backbone.validate()
        cfg.asa.validate(cfg.backbone.num_patches)
        self.cfg = cfg
        self.backbone = VisionTransformer(cfg.backbone)
        self.asa = ASA(cfg.asa)
        self.classifier = ClassificationModule(cfg.backbone.embed_dim, cfg.asa.num_parts, cfg.head)

    # Both views run through the same module object; nothing is copied.
    @property
    def uav_branch(self) -> VisionTransformer:
        return self.backbone

    @property
    def satellite_branch(self) -> VisionTransformer:
        return self.backbone

    def forward(self, images: torch.Tensor) -> HeadOutputs:
        tokens = self.backbone(images)
        parts = self.asa(tokens.patch_tokens)
        return self.classifier(tokens.class_token, parts)

    @torch.no_grad()
    def descriptors(self, images: torch.Tensor) -> torch.Tensor:
        """Concatenated additive-layer outputs ``[f_0; f_1; ...; f_K]`` per image."""
        was_training = self.training
        self.eval()
        try:
            out = self.forward(images)
        finally:
            self.train(was_training)
        return out.f.reshape(out.f.shape[0], -1)

    def param_groups(self) -> tuple[list[nn.Parameter], list[nn.Parameter]]:
        """(backbone, new) parameter lists; positional embeddings count as new."""
        backbone = [p for n, p in self.backbone.named_parameters() if n != "pos_embed"]
        new = [self.backbone.pos_embed] + list(self.classifier.parameters())
        return backbone, new
