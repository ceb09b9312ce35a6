"""Speaker embeddings for the four variants.

``d``   -- D-vector of the frozen ASV model.
``g``   -- GST module (reference encoder + style-token attention) on the mel.
``dg``  -- the same GST module on the ASV D-sequence.
``dgc`` -- ``dg`` trained with an auxiliary speaker classifier; identical
           at inference time.
"""
from __future__ import annotations

import math

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from . import asv as asv_mod
from .errors import ConfigError, TooShortError

VARIANTS = ("d", "g", "dg", "dgc")
EMBED_DIM = 256
MIN_REFERENCE_FRAMES = 8


def check_variant(variant: str) -> str:
    v = variant.lower()
    if v not in VARIANTS:
        raise ConfigError(f"variant must be one of {VARIANTS}, got {variant!r}")
    return v


def needs_asv(variant: str) -> bool:
    return check_variant(variant) in ("d", "dg", "dgc")


class ReferenceEncoder(nn.Module):
    """Strided 2-D convolutions over (time, feature) followed by a GRU.

    Returns the final GRU state, a fixed-size vector for any T >= 8.
    """

    def __init__(self, in_dim=80, channels=(32, 64, 128), hidden=EMBED_DIM):
        super().__init__()
        layers = []
        c_in = 1
        for c in channels:
            layers += [nn.Conv2d(c_in, c, 3, stride=2, padding=1, bias=False),
                       nn.BatchNorm2d(c), nn.ReLU()]
            c_in = c
        self.convs = nn.Sequential(*layers)
        f = in_dim
        for _ in channels:
            f = (f - 1) // 2 + 1
        self.gru = nn.GRU(channels[-1] * f, hidden, batch_first=True)
        self.in_dim = in_dim

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] < MIN_REFERENCE_FRAMES:
            raise TooShortError(
                f"reference input needs at least {MIN_REFERENCE_FRAMES} frames, got {x.shape[1]}")
        if x.shape[-1] != self.in_dim:
            raise ValueError(f"reference encoder expects {self.in_dim}-dim frames, got {x.shape[-1]}")
        h = self.convs(x.unsqueeze(1))
        b, c, t, f = h.shape
        h = h.permute(0, 2, 1, 3).reshape(b, t, c * f)
        _, last = self.gru(h)
        return last[-1]


class StyleTokenLayer(nn.Module):
    """Multi-head attention of a query vector over a bank of learnable tokens."""

    def __init__(self, n_tokens=10, token_dim=EMBED_DIM, heads=4, query_dim=EMBED_DIM,
                 out_dim=EMBED_DIM, token_std=0.5):
        super().__init__()
        if n_tokens < 1:
            raise ConfigError("need at least one style token")
        if token_dim % heads or out_dim % heads:
            raise ConfigError(f"{heads} heads do not divide token_dim={token_dim} / out_dim={out_dim}")
        self.tokens = nn.Parameter(torch.randn(n_tokens, token_dim) * token_std)
        self.heads = heads
        self.w_query = nn.Linear(query_dim, out_dim, bias=False)
        self.w_key = nn.Linear(token_dim, out_dim, bias=False)
        self.w_value = nn.Linear(token_dim, out_dim, bias=False)

    def forward(self, query: torch.Tensor, return_weights=False):
        b = query.shape[0]
        keys = torch.tanh(self.tokens)
        q = self.w_query(query).view(b, self.heads, 1, -1)
        k = self.w_key(keys).view(1, -1, self.heads, q.shape[-1]).transpose(1, 2)
        v = self.w_value(keys).view(1, -1, self.heads, q.shape[-1]).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
        weights = F.softmax(scores, dim=-1)  # (B, H, 1, n_tokens)
        out = (weights @ v).reshape(b, -1)
        if return_weights:
            return out, weights.squeeze(2)
        return out


class SpeakerEncoder(nn.Module):
    """Trainable part of the speaker embedding (empty for the ``d`` variant)."""

    def __init__(self, variant="dgc", conv_channels=(32, 64, 128), gru_hidden=EMBED_DIM,
                 n_tokens=10, heads=4, token_dim=EMBED_DIM, token_std=0.5, n_mels=80):
        super().__init__()
        self.variant = check_variant(variant)
        if self.variant == "d":
            self.reference = None
            self.gst = None
            return
        in_dim = n_mels if self.variant == "g" else asv_mod.EMBED_DIM
        self.reference = ReferenceEncoder(in_dim, tuple(conv_channels), gru_hidden)
        self.gst = StyleTokenLayer(n_tokens, token_dim, heads, gru_hidden, EMBED_DIM, token_std)

    def forward(self, mel: torch.Tensor, asv=None) -> torch.Tensor:
        """(B, T, n_mels) mel -> (B, 256) embedding."""
        if self.variant != "g" and asv is None:
            raise ValueError(f"variant {self.variant!r} needs a frozen ASV model")
        if self.variant == "d":
            return asv_mod.batch_dvectors(asv, mel)
        feat = mel if self.variant == "g" else asv_mod.dsequence(asv, mel)
        return self.gst(self.reference(feat))


def encode_reference(enc: ReferenceEncoder, feat) -> torch.Tensor:
    x = torch.as_tensor(np.asarray(feat), dtype=torch.float32) if not torch.is_tensor(feat) else feat
    return enc(x.unsqueeze(0))[0] if x.dim() == 2 else enc(x)


def style_attention(query: torch.Tensor, layer: StyleTokenLayer, return_weights=False):
    single = query.dim() == 1
    out = layer(query.unsqueeze(0) if single else query, return_weights=return_weights)
    if return_weights:
        e, w = out
        return (e[0], w[0]) if single else (e, w)
    return out[0] if single else out


def speaker_embed(variant: str, reference_mel, asv=None, encoder: SpeakerEncoder | None = None):
    """256-dim embedding of a full reference utterance, computed in eval mode."""
    variant = check_variant(variant)
    if needs_asv(variant) and asv is None:
        raise ValueError(f"variant {variant!r} needs a frozen ASV model")
    if variant == "d":
        return asv_mod.dvector(asv, reference_mel)
    if encoder is None:
        raise ValueError(f"variant {variant!r} needs a trained speaker encoder")
    mel = torch.as_tensor(np.asarray(reference_mel), dtype=torch.float32).unsqueeze(0)
    was_training = encoder.training
    encoder.eval()
    with torch.no_grad():
        e = encoder(mel, asv)[0]
    encoder.train(was_training)
    return e
