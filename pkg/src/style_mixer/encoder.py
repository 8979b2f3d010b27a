"""Frozen VGG-19 feature encoder.

Weights come from a flat named-array archive (``.npz``) holding
``convX_Y.weight`` (out x in x 3 x 3) and ``convX_Y.bias`` (out) for every
conv layer through relu5_1. The encoder is frozen: no optimizer ever sees
its parameters.
"""

import hashlib
import os
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

# Conv stack of VGG-19 up to relu5_1: (name, in_channels, out_channels).
# Max pooling (2x2, stride 2, floor mode) sits between blocks, so the
# relu{1..5}_1 grids are the input size floor-divided by 1, 2, 4, 8, 16.
VGG19_CONVS = (
    ("conv1_1", 3, 64), ("conv1_2", 64, 64),
    ("conv2_1", 64, 128), ("conv2_2", 128, 128),
    ("conv3_1", 128, 256), ("conv3_2", 256, 256),
    ("conv3_3", 256, 256), ("conv3_4", 256, 256),
    ("conv4_1", 256, 512), ("conv4_2", 512, 512),
    ("conv4_3", 512, 512), ("conv4_4", 512, 512),
    ("conv5_1", 512, 512),
)

# Conv after which each tapped activation is emitted.
FEATURE_LAYERS = ("relu1_1", "relu2_1", "relu3_1", "relu4_1", "relu5_1")
_TAP_AFTER = {"conv1_1": "relu1_1", "conv2_1": "relu2_1", "conv3_1": "relu3_1",
              "conv4_1": "relu4_1", "conv5_1": "relu5_1"}

LAYER_CHANNELS = {"relu1_1": 64, "relu2_1": 128, "relu3_1": 256,
                  "relu4_1": 512, "relu5_1": 512}
LAYER_STRIDE = {"relu1_1": 1, "relu2_1": 2, "relu3_1": 4,
                "relu4_1": 8, "relu5_1": 16}

# Per-channel statistics the pretrained weights expect; inputs are [0,1] RGB.
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

MIN_IMAGE_SIDE = 32


class VggEncoder(nn.Module):
    """VGG-19 through relu5_1 with frozen parameters.

    Stock architecture: zero padding, max pooling, no batch norm. Inputs
    are NCHW RGB batches with values in [0,1]; ImageNet normalization is
    applied internally. Read-only after construction, so concurrent
    forward passes are safe.
    """

    def __init__(self, weights):
        super().__init__()
        self.convs = nn.ModuleDict()
        for name, c_in, c_out in VGG19_CONVS:
            conv = nn.Conv2d(c_in, c_out, 3, padding=1)
            with torch.no_grad():
                conv.weight.copy_(torch.as_tensor(weights[name + ".weight"]))
                conv.bias.copy_(torch.as_tensor(weights[name + ".bias"]))
            self.convs[name] = conv
        self.pool = nn.MaxPool2d(2, 2)
        mean = torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1)
        std = torch.tensor(IMAGENET_STD).view(1, 3, 1, 1)
        self.register_buffer("mean", mean)
        self.register_buffer("std", std)
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def forward(self, images):
        """Return {layer_tag: activation} for all relu*_1 layers."""
        if images.dim() != 4 or images.size(1) != 3:
            raise ValueError(f"expected NCHW RGB batch, got shape {tuple(images.shape)}")
        if not torch.isfinite(images).all():
            raise ValueError("input pixels contain non-finite values")
        x = (images - self.mean) / self.std
        feats = {}
        prev_block = "1"
        for name, _, _ in VGG19_CONVS:
            block = name[4]
            if block != prev_block:
                x = self.pool(x)
                prev_block = block
            x = torch.relu(self.convs[name](x))
            tap = _TAP_AFTER.get(name)
            if tap is not None:
                feats[tap] = x
        return feats


def load_encoder(weights_path):
    """Load a frozen encoder from a named-array archive.

    Raises FileNotFoundError for a missing file and ValueError naming the
    first absent or wrongly shaped array.
    """
    weights_path = Path(weights_path)
    if not weights_path.is_file():
        raise FileNotFoundError(f"encoder weights not found: {weights_path}")
    try:
        archive = np.load(weights_path)
    except Exception as exc:
        raise ValueError(f"not a readable weight archive: {weights_path} ({exc})") from exc
    weights = {}
    for name, c_in, c_out in VGG19_CONVS:
        for suffix, expected in ((".weight", (c_out, c_in, 3, 3)), (".bias", (c_out,))):
            key = name + suffix
            if key not in archive:
                raise ValueError(f"checkpoint missing array {key}")
            arr = archive[key]
            if arr.shape != expected:
                raise ValueError(
                    f"{key}: expected shape {expected}, got {tuple(arr.shape)}")
            weights[key] = np.asarray(arr, dtype=np.float32)
    return VggEncoder(weights)


def save_encoder_weights(weights, path):
    """Write conv weights/biases to the flat archive format."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, **{k: np.asarray(v, dtype=np.float32) for k, v in weights.items()})
    return path


def random_encoder_weights(seed=0):
    """He-initialized VGG-19 weights for tests and dry runs.

    The resulting encoder has the right architecture and finite activation
    statistics but carries no pretrained semantics.
    """
    rng = np.random.default_rng(seed)
    weights = {}
    for name, c_in, c_out in VGG19_CONVS:
        fan_in = c_in * 9
        scale = np.sqrt(2.0 / fan_in)
        weights[name + ".weight"] = rng.normal(0.0, scale, (c_out, c_in, 3, 3)).astype(np.float32)
        weights[name + ".bias"] = np.zeros(c_out, dtype=np.float32)
    return weights


def default_weights_path():
    """Encoder weight location: $STYLE_MIXER_CACHE/vgg19.npz."""
    cache = os.environ.get("STYLE_MIXER_CACHE", "~/.cache/style_mixer")
    return Path(cache).expanduser() / "vgg19.npz"


def encode(image, encoder):
    """Extract multi-level features from a single HWC image in [0,1].

    Returns {layer_tag: CHW tensor}. The batched path is
    ``encoder(batch)`` directly.
    """
    t = torch.as_tensor(np.asarray(image), dtype=torch.float32)
    if t.dim() != 3 or t.size(-1) != 3:
        raise ValueError(f"expected HxWx3 image, got shape {tuple(t.shape)}")
    h, w = t.shape[0], t.shape[1]
    if h < MIN_IMAGE_SIDE or w < MIN_IMAGE_SIDE:
        raise ValueError(f"image sides must be >= {MIN_IMAGE_SIDE}, got {h}x{w}")
    if not torch.isfinite(t).all():
        raise ValueError("input pixels contain non-finite values")
    if t.min() < 0 or t.max() > 1:
        raise ValueError("pixel values must lie in [0,1]")
    batch = t.permute(2, 0, 1).unsqueeze(0)
    feats = encoder(batch)
    return {k: v.squeeze(0) for k, v in feats.items()}


def parameter_checksum(module):
    """SHA-256 over all parameter bytes, in state-dict order."""
    digest = hashlib.sha256()
    for name, p in sorted(module.state_dict().items()):
        digest.update(name.encode())
        digest.update(p.detach().cpu().numpy().tobytes())
    return digest.hexdigest()
