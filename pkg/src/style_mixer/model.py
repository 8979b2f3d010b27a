"""Full model assembly and checkpoint serialization.

Wires the frozen encoder, the feature-fusion block, patch attention, the
amplifier, and the decoder into the single- and multi-style transfer
paths. Checkpoints are named-array .npz archives holding the four
trainable groups plus a JSON config block used to validate reloads.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .decoder import Amplifier, Decoder, decode, merge
from .encoder import encode
from .fusion import (RegionLabeling, StyleAssignment, assign_styles,
                     assign_styles_discrete, cluster_content, compose_positions,
                     style_index_map)
from .mff import DEFAULT_LAYERS, FeatureFusion
from .patch_attention import PatchAttention

TRAIN_PREFIX = "__train__."
CONFIG_KEY = "__config__"


@dataclass
class ModelConfig:
    patch_size: int = 3
    norm_eps: float = 1e-5
    mff_layers: tuple = DEFAULT_LAYERS
    se_ratio: int = 16
    recalib_channels: int = 256

    def to_dict(self):
        d = self.__dict__.copy()
        d["mff_layers"] = list(self.mff_layers)
        return d

    @classmethod
    def from_dict(cls, data):
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(data) - known)
        if unknown:
            raise ValueError(f"config block has unknown key {unknown[0]}")
        data = dict(data)
        if "mff_layers" in data:
            data["mff_layers"] = tuple(data["mff_layers"])
        return cls(**data)


@dataclass
class MultiStyleResult:
    """Everything cmd-level callers need from one multi-style pass."""
    image: np.ndarray                  # H x W x 3 in [0, 1]
    style_map: np.ndarray              # per-position style index at relu4_1 grid
    regions: RegionLabeling = None     # None under the discrete strategy
    assignment: StyleAssignment = None


class StyleMixer(nn.Module):
    """Feed-forward arbitrary style transfer with patch attention.

    One feature-fusion block is shared by the content and style branches;
    attention always reads the raw relu4_1 features.
    """

    def __init__(self, encoder, config=None):
        super().__init__()
        self.config = config or ModelConfig()
        self.encoder = encoder
        self.mff = FeatureFusion(layers=self.config.mff_layers,
                                 recalib_channels=self.config.recalib_channels,
                                 se_ratio=self.config.se_ratio)
        self.pa = PatchAttention(channels=512,
                                 patch_size=self.config.patch_size,
                                 eps=self.config.norm_eps)
        self.decoder = Decoder()
        self.amplifier = Amplifier()

    def trainable_modules(self):
        return {"mff": self.mff, "pa": self.pa,
                "decoder": self.decoder, "amplifier": self.amplifier}

    def trainable_parameters(self):
        for module in self.trainable_modules().values():
            yield from module.parameters()

    def fuse_content(self, feats):
        return self.mff(feats)

    def attend(self, content_feats, style_feats):
        """One style's reassembled feature and confidence map."""
        style_fused = self.mff(style_feats)
        return self.pa(content_feats["relu4_1"], style_feats["relu4_1"], style_fused)

    def stylize_features(self, content_feats, style_feats):
        """Single-style path: merged feature ready for decoding."""
        reassembled, conf = self.attend(content_feats, style_feats)
        return merge(self.fuse_content(content_feats), reassembled), conf

    def identity_features(self, feats):
        """Identity-branch feature: the amplifier replaces the additive
        merge, so everything the decoder sees went through attention."""
        reassembled, _ = self.attend(feats, feats)
        return self.amplifier(reassembled)

    def stylize(self, content, style):
        """Stylize one HWC [0,1] content image with one style image."""
        with torch.no_grad():
            content_feats = encode(content, self.encoder)
            style_feats = encode(style, self.encoder)
            merged, _ = self.stylize_features(content_feats, style_feats)
            image = decode(merged, self.decoder)
        return image.permute(1, 2, 0).numpy()

    def stylize_multi(self, content, styles, k=6, pos_weight=1.0, seed=0,
                      strategy="region"):
        """Stylize with several references, one style per region.

        ``strategy`` picks how positions get their style: "region" votes
        by summed confidence inside K-means regions, "discrete" takes the
        per-position argmax.
        """
        if not styles:
            raise ValueError("at least one style image is required")
        if strategy not in ("region", "discrete"):
            raise ValueError(f"unknown strategy {strategy!r}")
        with torch.no_grad():
            content_feats = encode(content, self.encoder)
            reassembled, confs = [], []
            for style in styles:
                feat, conf = self.attend(content_feats, encode(style, self.encoder))
                reassembled.append(feat)
                confs.append(conf)
            regions = assignment = None
            if strategy == "region":
                regions = cluster_content(content_feats["relu4_1"], k=k,
                                          pos_weight=pos_weight, seed=seed)
                assignment = assign_styles(regions, confs)
                style_map = style_index_map(assignment, regions)
            else:
                style_map = assign_styles_discrete(confs)
            hybrid = compose_positions(style_map, reassembled)
            merged = merge(self.fuse_content(content_feats), hybrid)
            image = decode(merged, self.decoder)
        return MultiStyleResult(image=image.permute(1, 2, 0).numpy(),
                                style_map=style_map, regions=regions,
                                assignment=assignment)


def _model_arrays(model):
    arrays = {}
    for group, module in model.trainable_modules().items():
        for name, tensor in module.state_dict().items():
            arrays[f"{group}.{name}"] = tensor.detach().cpu().numpy()
    return arrays


def save_checkpoint(model, path, extras=None):
    """Write the trainable parameter groups plus the config block.

    ``extras`` lets the training loop stash optimizer moments and RNG
    state under the reserved "__train__." prefix.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = _model_arrays(model)
    config_json = json.dumps(model.config.to_dict(), sort_keys=True)
    arrays[CONFIG_KEY] = np.frombuffer(config_json.encode("utf-8"), dtype=np.uint8)
    for name, value in (extras or {}).items():
        if not name.startswith(TRAIN_PREFIX):
            raise ValueError(f"extra array {name!r} must use the {TRAIN_PREFIX} prefix")
        arrays[name] = np.asarray(value)
    np.savez(path, **arrays)
    return path


def load_checkpoint(path, encoder):
    """Rebuild a model from a checkpoint; returns (model, extras).

    Every expected array is validated for presence, shape, and
    finiteness; the first malformed one is named in the error.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with np.load(path) as archive:
        data = {name: archive[name] for name in archive.files}
    if CONFIG_KEY not in data:
        raise ValueError(f"checkpoint missing array {CONFIG_KEY}")
    try:
        config = ModelConfig.from_dict(json.loads(bytes(data[CONFIG_KEY]).decode("utf-8")))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValueError(f"{CONFIG_KEY}: not valid JSON ({exc})") from exc
    model = StyleMixer(encoder, config)
    for name, expected in sorted(_model_arrays(model).items()):
        if name not in data:
            raise ValueError(f"checkpoint missing array {name}")
        actual = data[name]
        if actual.shape != expected.shape:
            raise ValueError(
                f"{name}: expected shape {tuple(expected.shape)}, got {tuple(actual.shape)}")
        if not np.isfinite(actual).all():
            raise ValueError(f"{name}: contains non-finite values")
    with torch.no_grad():
        for group, module in model.trainable_modules().items():
            state = {name: torch.from_numpy(data[f"{group}.{name}"].copy())
                     for name in module.state_dict()}
            module.load_state_dict(state)
    extras = {name: data[name] for name in data if name.startswith(TRAIN_PREFIX)}
    return model, extras
