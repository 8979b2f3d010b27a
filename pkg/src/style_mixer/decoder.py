"""Feature merging and the relu4_1 -> RGB decoder."""

import torch
import torch.nn as nn


def merge(content_feat, stylized_feat):
    """Elementwise sum of the content feature and the attention output."""
    if content_feat.shape != stylized_feat.shape:
        raise ValueError(
            f"shape mismatch: {tuple(content_feat.shape)} vs {tuple(stylized_feat.shape)}")
    return content_feat + stylized_feat


class Amplifier(nn.Module):
    """Scales the stylized feature by a single trainable gain.

    Used on the identity path (content == style) instead of the additive
    merge, so the gradient has to flow through the attention branch and
    cannot shortcut through a skip connection.
    """

    def __init__(self):
        super().__init__()
        self.k = nn.Parameter(torch.ones(()))

    def forward(self, stylized_feat):
        return self.k * stylized_feat


class Decoder(nn.Module):
    """Mirror of the encoder from relu4_1 back to RGB.

    Nearest-neighbor upsampling between blocks, reflection padding before
    every 3x3 conv. The final conv output is returned raw; clamping to
    [0, 1] is applied by :func:`decode` so training sees live gradients
    everywhere.
    """

    def __init__(self):
        super().__init__()
        self.net = nn.Sequential(
            nn.ReflectionPad2d(1), nn.Conv2d(512, 256, 3), nn.ReLU(),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.ReflectionPad2d(1), nn.Conv2d(256, 256, 3), nn.ReLU(),
            nn.ReflectionPad2d(1), nn.Conv2d(256, 256, 3), nn.ReLU(),
            nn.ReflectionPad2d(1), nn.Conv2d(256, 256, 3), nn.ReLU(),
            nn.ReflectionPad2d(1), nn.Conv2d(256, 128, 3), nn.ReLU(),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.ReflectionPad2d(1), nn.Conv2d(128, 128, 3), nn.ReLU(),
            nn.ReflectionPad2d(1), nn.Conv2d(128, 64, 3), nn.ReLU(),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.ReflectionPad2d(1), nn.Conv2d(64, 64, 3), nn.ReLU(),
            nn.ReflectionPad2d(1), nn.Conv2d(64, 3, 3),
        )
        convs = [m for m in self.net if isinstance(m, nn.Conv2d)]
        for conv in convs[:-1]:
            nn.init.kaiming_normal_(conv.weight, mode="fan_in", nonlinearity="relu")
            nn.init.zeros_(conv.bias)
        # synthesis head starts near mid-gray so early steps fit structure
        # instead of unlearning random output
        nn.init.normal_(convs[-1].weight, std=1e-2)
        nn.init.constant_(convs[-1].bias, 0.5)

    def forward(self, feat):
        if feat.dim() not in (3, 4):
            raise ValueError(f"expected a 3-D or 4-D feature, got {feat.dim()}-D")
        squeeze = feat.dim() == 3
        if squeeze:
            feat = feat.unsqueeze(0)
        if feat.shape[1] != 512:
            raise ValueError(f"expected 512 channels, got {feat.shape[1]}")
        out = self.net(feat)
        return out.squeeze(0) if squeeze else out


def decode(feat, decoder):
    """Decode a merged feature to an image clamped to [0, 1].

    Validates the input the way the rest of the pipeline expects it:
    512 channels, spatial extent at least 2x2, all values finite.
    """
    if feat.dim() not in (3, 4):
        raise ValueError(f"expected a 3-D or 4-D feature, got {feat.dim()}-D")
    h, w = feat.shape[-2:]
    if h < 2 or w < 2:
        raise ValueError(f"feature spatial extent {h}x{w} is below the 2x2 minimum")
    if not torch.isfinite(feat).all():
        raise ValueError("feature contains non-finite values")
    return decoder(feat).clamp(0.0, 1.0)
