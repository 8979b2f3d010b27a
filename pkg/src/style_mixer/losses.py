"""Training objective: content, style, contextual, and identity terms.

Reduction convention used throughout: every per-layer term is a MEAN over
its elements (batch included), and layers are then SUMMED. Closed forms
in the tests assume this convention.
"""

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .patch_attention import channel_normalize

CONTENT_LAYERS = ("relu3_1", "relu4_1", "relu5_1")
CX_LAYERS = ("relu2_1", "relu3_1", "relu4_1")
STYLE_LAYERS = ("relu1_1", "relu2_1", "relu3_1", "relu4_1", "relu5_1")


class NonFiniteLossError(RuntimeError):
    """Raised when a loss term is NaN or infinite; names the term."""

    def __init__(self, term, value=None):
        self.term = term
        detail = f" (value {value})" if value is not None else ""
        super().__init__(f"loss term '{term}' is non-finite{detail}")


@dataclass
class LossConfig:
    lambda_content: float = 3.0
    lambda_style: float = 3.0
    lambda_contextual: float = 3.0
    lambda_identity1: float = 1.0
    lambda_identity2: float = 50.0
    bandwidth: float = 0.1
    eps: float = 1e-5
    content_layers: tuple = CONTENT_LAYERS
    cx_layers: tuple = CX_LAYERS
    style_layers: tuple = STYLE_LAYERS
    # Pairwise-affinity memory grows as positions^2; larger inputs are
    # subsampled on an even stride down to this many positions per side.
    cx_max_positions: int = 1024

    def __post_init__(self):
        for name in ("lambda_content", "lambda_style", "lambda_contextual",
                     "lambda_identity1", "lambda_identity2"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.bandwidth <= 0:
            raise ValueError("bandwidth must be > 0")


@dataclass
class LossBreakdown:
    """One step's loss terms; `total` carries the autograd graph."""
    total: object
    content: object
    style: object
    contextual: object
    identity1: object
    identity2: object

    def floats(self):
        out = {}
        for name in ("total", "content", "style", "contextual", "identity1", "identity2"):
            value = getattr(self, name)
            out[name] = float(value.detach() if isinstance(value, torch.Tensor) else value)
        return out


def _require_layers(feats, layers, who):
    for layer in layers:
        if layer not in feats:
            raise KeyError(f"{who} features missing layer {layer}")


def calc_mean_std(feat, eps=1e-5):
    """Per-channel spatial mean and std of a (...,C,H,W) feature."""
    var = feat.var(dim=(-2, -1), unbiased=False, keepdim=True)
    return feat.mean(dim=(-2, -1), keepdim=True), (var + eps).sqrt()


def content_loss(synth_feats, content_feats, cfg):
    """Mean squared distance between channel-normalized features.

    Normalization removes per-channel affine statistics, so the loss
    compares spatial structure only.
    """
    _require_layers(synth_feats, cfg.content_layers, "synthesized")
    _require_layers(content_feats, cfg.content_layers, "content")
    loss = None
    for layer in cfg.content_layers:
        term = F.mse_loss(channel_normalize(synth_feats[layer], cfg.eps),
                          channel_normalize(content_feats[layer], cfg.eps))
        loss = term if loss is None else loss + term
    return loss


def style_loss(synth_feats, style_feats, cfg):
    """Match per-channel mean and std against the style features."""
    _require_layers(synth_feats, cfg.style_layers, "synthesized")
    _require_layers(style_feats, cfg.style_layers, "style")
    loss = None
    for layer in cfg.style_layers:
        mu_a, sigma_a = calc_mean_std(synth_feats[layer], cfg.eps)
        mu_b, sigma_b = calc_mean_std(style_feats[layer], cfg.eps)
        term = F.mse_loss(mu_a, mu_b) + F.mse_loss(sigma_a, sigma_b)
        loss = term if loss is None else loss + term
    return loss


def _even_stride_subset(n, cap):
    if n <= cap:
        return None
    return torch.arange(cap) * n // cap


def _cx_vectors(feat, cap):
    # (..., C, H, W) -> (B, N, C) position vectors, subsampled on an even
    # stride once N exceeds the cap.
    if feat.dim() == 3:
        feat = feat.unsqueeze(0)
    b, c = feat.shape[:2]
    vecs = feat.reshape(b, c, -1).transpose(1, 2)
    idx = _even_stride_subset(vecs.shape[1], cap)
    if idx is not None:
        vecs = vecs[:, idx.to(vecs.device)]
    return vecs


def contextual_loss(synth_feats, style_feats, cfg):
    """Affinity between synthesized features and their nearest style features.

    Per layer: cosine distances d_ij between position vectors, rows
    normalized by their minimum (d_bar = d / (min_k d_ik + eps)), affinity
    A = row-softmax((1 - d_bar) / bandwidth), and the layer term is
    -log(mean_i max_j A_ij). Layers are summed.
    """
    _require_layers(synth_feats, cfg.cx_layers, "synthesized")
    _require_layers(style_feats, cfg.cx_layers, "style")
    loss = None
    for layer in cfg.cx_layers:
        x = _cx_vectors(synth_feats[layer], cfg.cx_max_positions)
        y = _cx_vectors(style_feats[layer], cfg.cx_max_positions)
        if x.shape[0] != y.shape[0]:
            raise ValueError(
                f"batch mismatch on {layer}: {x.shape[0]} vs {y.shape[0]}")
        x = x / x.norm(dim=-1, keepdim=True).clamp_min(cfg.eps)
        y = y / y.norm(dim=-1, keepdim=True).clamp_min(cfg.eps)
        d = 1.0 - torch.bmm(x, y.transpose(1, 2))
        d_bar = d / (d.min(dim=-1, keepdim=True).values + cfg.eps)
        affinity = F.softmax((1.0 - d_bar) / cfg.bandwidth, dim=-1)
        cx = affinity.max(dim=-1).values.mean(dim=-1)
        term = (-torch.log(cx)).mean()
        loss = term if loss is None else loss + term
    return loss


def identity_loss(i_cc, i_c, i_ss, i_s, encoder, cfg, feats_c=None, feats_s=None):
    """Reconstruction penalty on the two symmetric identity pairs.

    i_cc and i_ss must come from the amplifier merge path so the whole
    penalty backpropagates through the attention branch. Returns the pixel
    term and the summed five-layer feature term separately. Target
    features may be passed in when the caller already encoded I_c, I_s.
    """
    for name, (a, b) in {"content pair": (i_cc, i_c), "style pair": (i_ss, i_s)}.items():
        if a.shape != b.shape:
            raise ValueError(
                f"{name} shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    pixel = F.mse_loss(i_cc, i_c) + F.mse_loss(i_ss, i_s)
    feats_cc = encoder(_as_batch(i_cc))
    feats_ss = encoder(_as_batch(i_ss))
    if feats_c is None:
        with torch.no_grad():
            feats_c = encoder(_as_batch(i_c))
    if feats_s is None:
        with torch.no_grad():
            feats_s = encoder(_as_batch(i_s))
    feat = None
    for layer in cfg.style_layers:
        term = (F.mse_loss(feats_cc[layer], feats_c[layer])
                + F.mse_loss(feats_ss[layer], feats_s[layer]))
        feat = term if feat is None else feat + term
    return pixel, feat


def _as_batch(image):
    return image.unsqueeze(0) if image.dim() == 3 else image


def _check_finite(term, value):
    if isinstance(value, torch.Tensor):
        if not torch.isfinite(value).all():
            raise NonFiniteLossError(term, float(value))
    elif not math.isfinite(value):
        raise NonFiniteLossError(term, value)


def total_loss(content, style, contextual, identity1, identity2, cfg):
    """Weighted sum of the five terms; rejects any non-finite part."""
    parts = {"content": content, "style": style, "contextual": contextual,
             "identity1": identity1, "identity2": identity2}
    for term, value in parts.items():
        _check_finite(term, value)
    total = (cfg.lambda_content * content
             + cfg.lambda_style * style
             + cfg.lambda_contextual * contextual
             + cfg.lambda_identity1 * identity1
             + cfg.lambda_identity2 * identity2)
    _check_finite("total", total)
    return LossBreakdown(total=total, content=content, style=style,
                         contextual=contextual, identity1=identity1,
                         identity2=identity2)
