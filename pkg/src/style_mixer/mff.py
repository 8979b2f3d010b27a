"""Multi-level feature fusion.

Fuses relu3_1 / relu4_1 / relu5_1 activations into a single 512-channel
map on the relu4_1 grid: per-layer 1x1 recalibration, bilinear resize,
channel concat, squeeze-excitation gating, 3x3 smoothing.
"""

import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoder import LAYER_CHANNELS

DEFAULT_LAYERS = ("relu3_1", "relu4_1", "relu5_1")


class ChannelGate(nn.Module):
    """Squeeze-and-excitation gate: spatial mean -> FC -> ReLU -> FC -> sigmoid.

    Emits one multiplier per channel, each strictly inside (0,1).
    """

    def __init__(self, channels, ratio=16):
        super().__init__()
        hidden = max(1, channels // ratio)
        self.reduce = nn.Linear(channels, hidden)
        self.expand = nn.Linear(hidden, channels)

    def forward(self, feature):
        # (N,C,H,W) -> (N,C) gates; (C,H,W) -> (C,)
        if not torch.isfinite(feature).all():
            raise ValueError("channel gate input contains non-finite values")
        squeezed = feature.mean(dim=(-2, -1))
        return torch.sigmoid(self.expand(F.relu(self.reduce(squeezed))))


class FeatureFusion(nn.Module):
    """Recalibrate, resize, concatenate, gate, and smooth a set of layers.

    The output grid always matches relu4_1, so the attention/decoder
    interface is independent of which layers are enabled. Restricting
    ``layers`` to a single entry gives the single-level ablation.
    """

    def __init__(self, layers=DEFAULT_LAYERS, recalib_channels=256,
                 out_channels=512, se_ratio=16, in_channels=None):
        super().__init__()
        if not layers:
            raise ValueError("at least one input layer is required")
        channels = dict(LAYER_CHANNELS)
        if in_channels:
            channels.update(in_channels)
        self.layers = tuple(layers)
        self.recalibrate = nn.ModuleDict(
            {l: nn.Conv2d(channels[l], recalib_channels, 1) for l in self.layers})
        cat_channels = recalib_channels * len(self.layers)
        self.gate = ChannelGate(cat_channels, se_ratio)
        self.pad = nn.ReflectionPad2d(1)
        self.smooth = nn.Conv2d(cat_channels, out_channels, 3)

    def forward(self, feats):
        """Fuse a {layer_tag: tensor} map into one (N, out, H4, W4) tensor."""
        for l in self.layers:
            if l not in feats:
                raise ValueError(f"missing layer in feature map: {l}")
        if "relu4_1" not in feats:
            raise ValueError("relu4_1 is required to fix the output grid")
        reference = feats["relu4_1"]
        batched = reference.dim() == 4
        target = reference.shape[-2:]
        parts = []
        for l in self.layers:
            x = feats[l] if batched else feats[l].unsqueeze(0)
            x = self.recalibrate[l](x)
            if x.shape[-2:] != target:
                x = F.interpolate(x, size=target, mode="bilinear", align_corners=False)
            parts.append(x)
        cat = torch.cat(parts, dim=1)
        gates = self.gate(cat)
        cat = cat * gates[:, :, None, None]
        fused = self.smooth(self.pad(cat))
        return fused if batched else fused.squeeze(0)
