"""Full dual-branch quality model: global encoder, feedback, local branch, heads."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn

from .datapack import Batch
from .feedback import FeedbackConfig, FeedbackModule
from .globalenc import EncoderConfig, GlobalEncoder, global_feature
from .localenc import LocalBranch
from .objective import QualityHeads


@dataclass
class ModelConfig:
    image_size: int = 224
    patch_size: int = 16
    embed_dim: int = 768
    depth: int = 12
    heads: int = 12
    regions: int = 8
    kernel_size: int = 3
    d_out: int = 256
    st_temperature: float = 1.0
    mlp_ratio: float = 4.0

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(
            image_size=self.image_size,
            patch_size=self.patch_size,
            embed_dim=self.embed_dim,
            depth=self.depth,
            heads=self.heads,
            mlp_ratio=self.mlp_ratio,
            d_out=self.d_out,
        )

    def feedback_config(self) -> FeedbackConfig:
        return FeedbackConfig(
            heads=self.heads,
            regions=self.regions,
            kernel_size=self.kernel_size,
            st_temperature=self.st_temperature,
        )

    @staticmethod
    def tiny(image_size: int = 64) -> "ModelConfig":
        """Desk-scale configuration used by tests and the overfit sanity run."""
        return ModelConfig(
            image_size=image_size,
            patch_size=16,
            embed_dim=16,
            depth=1,
            heads=4,
            regions=4,
            kernel_size=3,
            d_out=32,
            mlp_ratio=2.0,
        )


def stitch_tensor(views: torch.Tensor) -> torch.Tensor:
    """(B, 6, C, H, W) -> (B, C, 2H, 3W) in the fixed 2x3 view layout."""
    rows = [torch.cat([views[:, r * 3 + c] for c in range(3)], dim=-1) for r in range(2)]
    return torch.cat(rows, dim=-2)


class QualityModel(nn.Module):
    """End-to-end model mapping a Batch of six-view images to quality scores."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = GlobalEncoder(cfg.encoder_config())
        self.feedback = FeedbackModule(cfg.feedback_config())
        self.local = LocalBranch(cfg.d_out)
        self.heads = QualityHeads(cfg.d_out)

    def forward(self, batch: Batch):
        b = len(batch)
        tex = batch.texture.reshape(b * 6, *batch.texture.shape[2:])
        dep = batch.depth.reshape(b * 6, *batch.depth.shape[2:])
        _, maps = self.encoder(tex, dep)                       # (B*6, heads, g, g)
        maps = maps.reshape(b, 6, *maps.shape[1:])

        view_feats = self.encoder.view_features(maps.reshape(b * 6, *maps.shape[2:]))
        f_g = global_feature(view_feats.reshape(b, 6, -1), batch.ratios)

        s = stitch_tensor(torch.cat([batch.texture, batch.depth], dim=2))  # (B, 4, 2H, 3W)
        s_o = stitch_tensor(batch.occupancy.unsqueeze(2)).squeeze(1)       # (B, 2H, 3W)
        a_s = stitch_tensor(maps)                                          # (B, heads, 2g, 3g)

        region_feature, plan = self.feedback(s, a_s, s_o)
        f_l = self.local(region_feature)
        q_c, q_f = self.heads(f_g, f_l)
        return {
            "q_c": q_c,
            "q_f": q_f,
            "f_g": f_g,
            "f_l": f_l,
            "maps": maps,
            "plan": plan,
            "stitched": s,
        }

    def pretrained_parameters(self):
        """Parameters initialized from pretrained ViT weights (the backbone)."""
        backbone = []
        backbone.extend(self.encoder.patch_embed.parameters())
        backbone.append(self.encoder.cls_token)
        backbone.append(self.encoder.pos_embed)
        backbone.extend(self.encoder.blocks.parameters())
        backbone.extend(self.encoder.norm.parameters())
        return backbone

    def fresh_parameters(self):
        """Everything outside the pretrained backbone."""
        backbone_ids = {id(p) for p in self.pretrained_parameters()}
        return [p for p in self.parameters() if id(p) not in backbone_ids]
