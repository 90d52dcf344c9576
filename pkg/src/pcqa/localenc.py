"""Shallow convolutional branch turning the region-aware feature map into f_l."""

from __future__ import annotations

import torch.nn as nn
import torch.nn.functional as F

from .feedback import DRCONV_OUT


class LocalBranch(nn.Module):
    """3x3 conv -> 2x2 max pool -> 1x1 conv -> global max pool.

    Small receptive fields keep the extracted feature strictly local; ReLU
    after each conv, no batch norm so B=1 inference stays well-defined.
    """

    def __init__(self, d_out: int = 256):
        super().__init__()
        self.conv1 = nn.Conv2d(DRCONV_OUT, 64, kernel_size=3, padding=1)
        self.conv2 = nn.Conv2d(64, d_out, kernel_size=1)

    def forward(self, x):
        """x: (B, 16, 2H, 3W) -> (B, d_out)."""
        x = F.relu(self.conv1(x))                 # (B, 64, 2H, 3W)
        x = F.max_pool2d(x, kernel_size=2)        # (B, 64, H, 3W/2)
        x = F.relu(self.conv2(x))                 # (B, d_out, H, 3W/2)
        return x.amax(dim=(2, 3))                 # global max pool
