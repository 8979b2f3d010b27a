"""Patch attention between content and style features.

Similarity is computed between vectorized p x p patches of the projected,
channel-normalized relu4_1 features. Point-wise style attention is the
p = 1 special case. Alongside the reassembled style feature, the module
emits a per-position correspondence confidence that later drives
multi-style region assignment.
"""

import torch
import torch.nn as nn
import torch.nn.functional as F


def channel_normalize(feat, eps=1e-5):
    """Zero-mean, unit-variance per channel over spatial positions.

    Accepts (C,H,W) or (N,C,H,W). Constant channels come out as zeros
    thanks to the eps guard.
    """
    if not torch.isfinite(feat).all():
        raise ValueError("feature contains non-finite values")
    mean = feat.mean(dim=(-2, -1), keepdim=True)
    var = feat.var(dim=(-2, -1), unbiased=False, keepdim=True)
    return (feat - mean) / torch.sqrt(var + eps)


def unfold_patches(feat, patch_size):
    """Stack the p x p neighborhood of every position into a row vector.

    (C,H,W) -> (H*W, C*p*p); (N,C,H,W) -> (N, H*W, C*p*p). Borders are
    zero padded so the row count always equals H*W; p = 1 is the identity
    flattening.
    """
    if patch_size < 1 or patch_size % 2 == 0:
        raise ValueError(f"patch size must be odd and positive, got {patch_size}")
    batched = feat.dim() == 4
    x = feat if batched else feat.unsqueeze(0)
    cols = F.unfold(x, kernel_size=patch_size, padding=patch_size // 2)
    rows = cols.transpose(1, 2)
    return rows if batched else rows.squeeze(0)


def attention_map(scores):
    """Row-softmax of a score matrix; rows sum to 1."""
    return torch.softmax(scores, dim=-1)


def confidence(scores, attention):
    """Per-position confidence: sum_j S_ij * M_ij over style positions."""
    if scores.shape != attention.shape:
        raise ValueError(
            f"score/attention shape mismatch: {tuple(scores.shape)} vs {tuple(attention.shape)}")
    return (scores * attention).sum(dim=-1)


class PatchAttention(nn.Module):
    """Correspondence scoring and style-feature reassembly.

    Scores are computed on raw encoder relu4_1 features (not the fused
    ones); the attention map then mixes the projected fused style feature
    onto the content grid. Stateless given parameters, so per-style calls
    may run concurrently.
    """

    def __init__(self, channels=512, patch_size=3, eps=1e-5):
        super().__init__()
        if patch_size < 1 or patch_size % 2 == 0:
            raise ValueError(f"patch size must be odd and positive, got {patch_size}")
        self.channels = channels
        self.patch_size = patch_size
        self.eps = eps
        self.theta_c = nn.Conv2d(channels, channels, 1)
        self.theta_s = nn.Conv2d(channels, channels, 1)
        self.theta_fused = nn.Conv2d(channels, channels, 1)

    def scores(self, content_feat, style_feat):
        """Raw correspondence scores and their row-stochastic attention map.

        Returns (S, M) with S[i, j] the inner product of the projected
        normalized patches at content position i and style position j.
        """
        c, s, batched = _pair_batched(content_feat, style_feat)
        if c.size(1) != self.channels or s.size(1) != self.channels:
            raise ValueError(
                f"expected {self.channels}-channel features, got "
                f"{c.size(1)} (content) and {s.size(1)} (style)")
        pc = unfold_patches(self.theta_c(channel_normalize(c, self.eps)), self.patch_size)
        ps = unfold_patches(self.theta_s(channel_normalize(s, self.eps)), self.patch_size)
        scores = torch.bmm(pc, ps.transpose(1, 2))
        attn = attention_map(scores)
        if batched:
            return scores, attn
        return scores.squeeze(0), attn.squeeze(0)

    def reassemble(self, attention, style_fused, out_size):
        """Mix the projected fused style feature with attention weights.

        Output position i is sum_j M[i, j] * theta_fused(style_fused)[j],
        laid out on the content grid ``out_size`` = (H, W).
        """
        m, f, batched = _pair_batched(attention, style_fused, dims=(2, 3))
        positions = f.size(-2) * f.size(-1)
        if m.size(-1) != positions:
            raise ValueError(
                f"attention has {m.size(-1)} style positions, fused feature has {positions}")
        h, w = out_size
        if m.size(-2) != h * w:
            raise ValueError(
                f"attention has {m.size(-2)} content positions, target grid is {h}x{w}")
        proj = self.theta_fused(f)
        flat = proj.flatten(2).transpose(1, 2)          # (N, Ns, C)
        mixed = torch.bmm(m, flat)                       # (N, Nc, C)
        out = mixed.transpose(1, 2).reshape(f.size(0), proj.size(1), h, w)
        return out if batched else out.squeeze(0)

    def forward(self, content_feat, style_feat, style_fused):
        """Full pass: returns (reassembled fused feature, confidence map)."""
        batched = content_feat.dim() == 4
        hc, wc = content_feat.shape[-2:]
        s, m = self.scores(content_feat, style_feat)
        reassembled = self.reassemble(m, style_fused, (hc, wc))
        conf = confidence(s, m)
        conf = conf.reshape(-1, hc, wc) if batched else conf.reshape(hc, wc)
        return reassembled, conf


def _pair_batched(a, b, dims=(3, 3)):
    # Promote a pair of inputs to batched form, requiring consistency.
    # dims holds the unbatched ndim of each argument.
    a_batched = a.dim() == dims[0] + 1
    b_batched = b.dim() == dims[1] + 1
    if a_batched != b_batched:
        raise ValueError("mixed batched and unbatched inputs")
    if a_batched:
        return a, b, True
    return a.unsqueeze(0), b.unsqueeze(0), False
