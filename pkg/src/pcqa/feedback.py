"""Attention-driven region-aware convolution.

The stitched class-attention maps are enhanced with occupancy, split into a
guided mask (which region owns each pixel) and per-region filter banks, and
the stitched texture+depth image is convolved with the filter bank the mask
selects at every pixel.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

# First local-branch layer maps 4 -> 16 channels, so each region's filter
# bank is 16 x 4 x k x k and the generator emits 64n = 4*16*n channels.
DRCONV_IN = 4
DRCONV_OUT = 16


@dataclass
class FeedbackConfig:
    heads: int = 12
    regions: int = 8          # n
    kernel_size: int = 3      # k
    st_temperature: float = 1.0
    interpolation: str = "bilinear"  # mask upsampling kind; "nearest" also valid


@dataclass
class RegionPlan:
    mask: torch.Tensor     # (B, 2H, 3W) long, values in [0, n-1]
    logits: torch.Tensor   # (B, n, 2H, 3W), kept for the soft backward path
    filters: torch.Tensor  # (B, n, 16, 4, k, k)


def enhance_attention(a_s: torch.Tensor, s_o: torch.Tensor) -> torch.Tensor:
    """Merge occupancy into the stitched attention maps.

    Occupancy is area-averaged down to the attention grid (fractional values
    are kept, preserving partial occupancy at the 16x downscale) and
    multiplied into every channel. a_s: (B, heads, gh, gw); s_o: (B, 2H, 3W).
    """
    gh, gw = a_s.shape[2:]
    hh, ww = s_o.shape[1:]
    if hh % gh != 0 or ww % gw != 0:
        raise ValueError(
            f"occupancy {hh}x{ww} does not resize evenly to attention grid {gh}x{gw}"
        )
    occ = F.adaptive_avg_pool2d(s_o.unsqueeze(1), (gh, gw))
    return a_s * occ


class MaskPredictor(nn.Module):
    """3x3 conv to region logits, upsampled to pixel resolution, hard argmax."""

    def __init__(self, cfg: FeedbackConfig):
        super().__init__()
        self.cfg = cfg
        self.conv = nn.Conv2d(cfg.heads, cfg.regions, kernel_size=3, padding=1)

    def forward(self, enhanced, out_hw):
        logits = self.conv(enhanced)
        logits = F.interpolate(logits, size=out_hw, mode=self.cfg.interpolation)
        mask = hard_argmax(logits)
        return mask, logits


def hard_argmax(logits: torch.Tensor) -> torch.Tensor:
    """Per-pixel argmax over channel 1, ties broken toward the lowest index."""
    n = logits.shape[1]
    top = logits.max(dim=1, keepdim=True).values
    # Among exact maxima, score n-c is unique and largest at the lowest index.
    channel = torch.arange(n, device=logits.device).view(1, n, 1, 1)
    score = (logits == top).long() * (n - channel)
    return score.argmax(dim=1)


class FilterGenerator(nn.Module):
    """Pool the enhanced maps to k x k and expand to n filter groups."""

    def __init__(self, cfg: FeedbackConfig):
        super().__init__()
        self.cfg = cfg
        n = cfg.regions
        self.conv1 = nn.Conv2d(cfg.heads, n * n, kernel_size=1)
        self.conv2 = nn.Conv2d(n * n, 64 * n, kernel_size=1)

    def forward(self, enhanced):
        k, n = self.cfg.kernel_size, self.cfg.regions
        pooled = F.adaptive_avg_pool2d(enhanced, (k, k))      # (B, heads, k, k)
        hidden = self.conv1(pooled)                           # (B, n^2, k, k)
        raw = self.conv2(hidden)                              # (B, 64n, k, k)
        b = raw.shape[0]
        return raw.reshape(b, n, DRCONV_OUT, DRCONV_IN, k, k)


def drconv(s: torch.Tensor, plan: RegionPlan, temperature: float = 1.0) -> torch.Tensor:
    """Region-aware convolution of the stitched image.

    Each pixel's output is the k x k convolution (zero same-padding) of the 4
    input channels with the filter group the mask selects there. The forward
    pass is the hard per-pixel gather; the backward pass flows through the
    softmax of the logits, so both the mask path and unselected filter groups
    receive straight-through gradients.

    s: (B, 4, Hp, Wp) -> (B, 16, Hp, Wp).
    """
    b, cin, hp, wp = s.shape
    _, n, cout, _, k, _ = plan.filters.shape
    if plan.mask.shape != (b, hp, wp):
        raise ValueError(f"mask shape {tuple(plan.mask.shape)} does not match image")
    if int(plan.mask.max()) >= n:
        raise ValueError(f"mask value {int(plan.mask.max())} >= region count {n}")

    # All regions at once: grouped conv with one group per batch sample.
    weight = plan.filters.reshape(b * n * cout, cin, k, k)
    all_out = F.conv2d(s.reshape(1, b * cin, hp, wp), weight, padding="same", groups=b)
    all_out = all_out.reshape(b, n, cout, hp, wp)

    index = plan.mask.unsqueeze(1).unsqueeze(1).expand(b, 1, cout, hp, wp)
    hard = all_out.gather(1, index).squeeze(1)

    probs = torch.softmax(plan.logits / temperature, dim=1)   # (B, n, Hp, Wp)
    soft = (probs.unsqueeze(2) * all_out).sum(dim=1)
    return soft + (hard - soft).detach()


class FeedbackModule(nn.Module):
    """Dual-stream embedder plus the region-aware convolution."""

    def __init__(self, cfg: FeedbackConfig):
        super().__init__()
        self.cfg = cfg
        self.mask_predictor = MaskPredictor(cfg)
        self.filter_generator = FilterGenerator(cfg)

    def plan(self, a_s, s_o) -> RegionPlan:
        enhanced = enhance_attention(a_s, s_o)
        mask, logits = self.mask_predictor(enhanced, s_o.shape[1:])
        filters = self.filter_generator(enhanced)
        return RegionPlan(mask=mask, logits=logits, filters=filters)

    def forward(self, s, a_s, s_o):
        plan = self.plan(a_s, s_o)
        return drconv(s, plan, self.cfg.st_temperature), plan
