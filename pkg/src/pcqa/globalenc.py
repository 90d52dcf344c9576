"""Transformer encoder over fused texture+depth patches.

Produces final tokens, the last block's class-token attention maps, and the
occupancy-weighted global feature.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class EncoderConfig:
    image_size: int = 224
    patch_size: int = 16
    embed_dim: int = 768
    depth: int = 12
    heads: int = 12
    mlp_ratio: float = 4.0
    d_out: int = 256
    attn_norm_affine: bool = True  # affine params of the head-channel layer norm

    @property
    def grid(self):
        if self.image_size % self.patch_size != 0:
            raise ValueError("patch size must divide image size")
        return self.image_size // self.patch_size

    @property
    def num_patches(self):
        return self.grid * self.grid

    @staticmethod
    def vit_b(image_size: int = 224, d_out: int = 256) -> "EncoderConfig":
        return EncoderConfig(image_size=image_size, d_out=d_out)


class DualPatchEmbed(nn.Module):
    """Independent learned affine maps for texture and depth patches, summed."""

    def __init__(self, patch_size, embed_dim):
        super().__init__()
        self.proj_t = nn.Conv2d(3, embed_dim, patch_size, stride=patch_size)
        self.proj_d = nn.Conv2d(1, embed_dim, patch_size, stride=patch_size)

    def forward(self, texture, depth):
        x = self.proj_t(texture) + self.proj_d(depth)   # (B, D, gh, gw)
        return x.flatten(2).transpose(1, 2)             # (B, N, D)


class Attention(nn.Module):
    def __init__(self, dim, heads):
        super().__init__()
        if dim % heads != 0:
            raise ValueError("embed dim must be divisible by head count")
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, d // self.heads)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)
        attn = torch.softmax(q @ k.transpose(-2, -1) * self.scale, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, d)
        return self.proj(out), attn  # attn: (B, heads, N+1, N+1)


class Block(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, dim, heads, mlp_ratio):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x):
        y, attn = self.attn(self.norm1(x))
        x = x + y
        x = x + self.mlp(self.norm2(x))
        return x, attn


class GlobalEncoder(nn.Module):
    """ViT-style encoder exposing class-token attention maps of the last block."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        n = cfg.num_patches
        self.patch_embed = DualPatchEmbed(cfg.patch_size, cfg.embed_dim)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, cfg.embed_dim))
        self.pos_embed = nn.Parameter(torch.zeros(1, n + 1, cfg.embed_dim))
        self.blocks = nn.ModuleList(
            Block(cfg.embed_dim, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth)
        )
        self.norm = nn.LayerNorm(cfg.embed_dim)
        # Channel norm over the head dimension of the class attention maps.
        self.attn_norm = nn.LayerNorm(cfg.heads, elementwise_affine=cfg.attn_norm_affine)
        # 1x1 conv turning attention channels into the global feature width.
        self.head_proj = nn.Conv2d(cfg.heads, cfg.d_out, kernel_size=1)
        self._init_weights()

    def _init_weights(self):
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        nn.init.trunc_normal_(self.cls_token, std=0.02)
        for m in self.modules():
            if isinstance(m, (nn.Linear, nn.Conv2d)):
                nn.init.trunc_normal_(m.weight, std=0.02)
                if m.bias is not None:
                    nn.init.zeros_(m.bias)

    def embed(self, texture, depth):
        """Patch-embed one image pair into the (N+1)-token sequence."""
        tokens = self.patch_embed(texture, depth)
        cls = self.cls_token.expand(tokens.shape[0], -1, -1)
        return torch.cat([cls, tokens], dim=1) + self.pos_embed

    def encode(self, z):
        """Run the blocks; return final tokens and the last block's attention."""
        attn = None
        for i, block in enumerate(self.blocks):
            z, attn = block(z)
            if not torch.isfinite(z).all():
                raise RuntimeError(f"non-finite activations after transformer block {i}")
        return self.norm(z), attn

    def class_attention(self, attn):
        """Reshape each head's class-token row to the patch grid and channel-norm it.

        attn: (B, heads, N+1, N+1) -> maps (B, heads, gh, gw), layer norm
        applied across the heads dimension per spatial location.
        """
        g = self.cfg.grid
        b, heads, n1, _ = attn.shape
        if n1 - 1 != g * g:
            raise ValueError(f"attention over {n1 - 1} patches does not form a {g}x{g} grid")
        maps = attn[:, :, 0, 1:].reshape(b, heads, g, g)
        maps = self.attn_norm(maps.permute(0, 2, 3, 1))  # norm over heads
        return maps.permute(0, 3, 1, 2)

    def forward(self, texture, depth):
        """texture (B, 3, H, W), depth (B, 1, H, W) -> (tokens, class attention maps)."""
        z, attn = self.encode(self.embed(texture, depth))
        return z, self.class_attention(attn)

    def view_features(self, maps):
        """Per-view global descriptor: 1x1 conv then adaptive average pooling."""
        return self.head_proj(maps).mean(dim=(2, 3))  # (B, d_out)


def global_feature(view_feats, ratios):
    """Occupancy-weighted fusion of per-view features.

    view_feats: (B, 6, d_out); ratios: (B, 6). Raises if a sample has all
    ratios zero (blank render).
    """
    totals = ratios.sum(dim=1)
    if (totals <= 0).any():
        raise ValueError("all occupancy ratios are zero for at least one sample")
    weighted = (ratios.unsqueeze(-1) * view_feats).sum(dim=1)
    return weighted / totals.unsqueeze(-1)


def load_pretrained_vit(encoder: GlobalEncoder, state_dict) -> None:
    """Load standard ViT-B weights (timm vit_base_patch16_224 tensor names).

    The texture patch embed takes the RGB kernel directly; the depth patch
    embed starts from the channel mean of the RGB kernel. Expected names:
    cls_token, pos_embed, patch_embed.proj.{weight,bias},
    blocks.{i}.norm1/attn.qkv/attn.proj/norm2/mlp.fc1/mlp.fc2, norm.
    """
    own = encoder.state_dict()
    mapped = {}
    rgb_w = state_dict["patch_embed.proj.weight"]
    mapped["patch_embed.proj_t.weight"] = rgb_w
    mapped["patch_embed.proj_t.bias"] = state_dict["patch_embed.proj.bias"]
    mapped["patch_embed.proj_d.weight"] = rgb_w.mean(dim=1, keepdim=True)
    mapped["patch_embed.proj_d.bias"] = torch.zeros_like(state_dict["patch_embed.proj.bias"])
    mapped["cls_token"] = state_dict["cls_token"]
    mapped["pos_embed"] = state_dict["pos_embed"]
    mapped["norm.weight"] = state_dict["norm.weight"]
    mapped["norm.bias"] = state_dict["norm.bias"]
    for i in range(encoder.cfg.depth):
        for src, dst in (
            (f"blocks.{i}.norm1", f"blocks.{i}.norm1"),
            (f"blocks.{i}.attn.qkv", f"blocks.{i}.attn.qkv"),
            (f"blocks.{i}.attn.proj", f"blocks.{i}.attn.proj"),
            (f"blocks.{i}.norm2", f"blocks.{i}.norm2"),
            (f"blocks.{i}.mlp.fc1", f"blocks.{i}.mlp.0"),
            (f"blocks.{i}.mlp.fc2", f"blocks.{i}.mlp.2"),
        ):
            mapped[f"{dst}.weight"] = state_dict[f"{src}.weight"]
            mapped[f"{dst}.bias"] = state_dict[f"{src}.bias"]
    for k, v in mapped.items():
        if own[k].shape != v.shape:
            raise ValueError(f"pretrained tensor {k} has shape {tuple(v.shape)}, "
                             f"expected {tuple(own[k].shape)}")
    encoder.load_state_dict(mapped, strict=False)
