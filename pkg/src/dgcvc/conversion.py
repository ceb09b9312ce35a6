"""AUTOVC-style bottleneck autoencoder.

The content encoder sees the mel plus the source speaker embedding and keeps
only ``dim_neck`` numbers per direction every ``freq`` frames; the decoder
rebuilds the mel from those codes and a (possibly different) target
embedding. A residual postnet refines the decoder output.
"""
from __future__ import annotations

import numpy as np
import torch
from torch import nn

from .features import fixed_window

SEGMENT_FRAMES = 160


def _conv_bn(c_in, c_out, k=5):
    return nn.Sequential(nn.Conv1d(c_in, c_out, k, padding=k // 2), nn.BatchNorm1d(c_out))


class ContentEncoder(nn.Module):
    def __init__(self, n_mels=80, emb_dim=256, channels=512, dim_neck=32, freq=32):
        super().__init__()
        self.dim_neck = dim_neck
        self.freq = freq
        self.convs = nn.ModuleList(
            [_conv_bn(n_mels + emb_dim if i == 0 else channels, channels) for i in range(3)])
        self.lstm = nn.LSTM(channels, dim_neck, num_layers=2, batch_first=True, bidirectional=True)

    def forward(self, mel: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        """(B, T, n_mels), (B, E) -> codes (B, T // freq, 2 * dim_neck).

        ``codes[..., :dim_neck]`` are forward states at frames ``freq-1, 2*freq-1, ...``
        and ``codes[..., dim_neck:]`` backward states at frames ``0, freq, ...``.
        """
        b, t, _ = mel.shape
        if t % self.freq:
            raise ValueError(f"frame count {t} is not a multiple of the downsample factor {self.freq}")
        if emb.shape[0] != b:
            raise ValueError("embedding batch does not match mel batch")
        x = torch.cat([mel, emb[:, None, :].expand(b, t, emb.shape[-1])], dim=-1).transpose(1, 2)
        for conv in self.convs:
            x = torch.relu(conv(x))
        out, _ = self.lstm(x.transpose(1, 2))
        fwd = out[:, self.freq - 1::self.freq, :self.dim_neck]
        bwd = out[:, ::self.freq, self.dim_neck:]
        return torch.cat([fwd, bwd], dim=-1)


class Decoder(nn.Module):
    def __init__(self, n_mels=80, emb_dim=256, dim_neck=32, pre_lstm=512, channels=512,
                 lstm_dim=1024, lstm_layers=3):
        super().__init__()
        self.dim_neck = dim_neck
        self.lstm1 = nn.LSTM(2 * dim_neck + emb_dim, pre_lstm, batch_first=True)
        self.convs = nn.ModuleList([_conv_bn(pre_lstm if i == 0 else channels, channels) for i in range(3)])
        self.lstm2 = nn.LSTM(channels, lstm_dim, num_layers=lstm_layers, batch_first=True)
        self.out = nn.Linear(lstm_dim, n_mels)

    def forward(self, codes: torch.Tensor, emb: torch.Tensor, freq: int) -> torch.Tensor:
        if codes.dim() != 3 or codes.shape[-1] != 2 * self.dim_neck:
            raise ValueError(f"codes must be (B, N, {2 * self.dim_neck}), got {tuple(codes.shape)}")
        up = codes.repeat_interleave(freq, dim=1)
        b, t, _ = up.shape
        x = torch.cat([up, emb[:, None, :].expand(b, t, emb.shape[-1])], dim=-1)
        x, _ = self.lstm1(x)
        x = x.transpose(1, 2)
        for conv in self.convs:
            x = torch.relu(conv(x))
        x, _ = self.lstm2(x.transpose(1, 2))
        return self.out(x)


class Postnet(nn.Module):
    def __init__(self, n_mels=80, channels=512, layers=5):
        super().__init__()
        dims = [n_mels] + [channels] * (layers - 1) + [n_mels]
        self.convs = nn.ModuleList([_conv_bn(a, b) for a, b in zip(dims[:-1], dims[1:])])

    def forward(self, mel: torch.Tensor) -> torch.Tensor:
        x = mel.transpose(1, 2)
        for i, conv in enumerate(self.convs):
            x = conv(x)
            if i < len(self.convs) - 1:
                x = torch.tanh(x)
        return x.transpose(1, 2)


class Generator(nn.Module):
    def __init__(self, n_mels=80, emb_dim=256, dim_neck=32, freq=32, enc_channels=512,
                 dec_pre_lstm=512, dec_channels=512, dec_lstm=1024, dec_lstm_layers=3,
                 postnet_channels=512):
        super().__init__()
        self.freq = freq
        self.encoder = ContentEncoder(n_mels, emb_dim, enc_channels, dim_neck, freq)
        self.decoder = Decoder(n_mels, emb_dim, dim_neck, dec_pre_lstm, dec_channels,
                               dec_lstm, dec_lstm_layers)
        self.postnet = Postnet(n_mels, postnet_channels)

    def encode(self, mel, emb_src):
        return self.encoder(mel, emb_src)

    def decode(self, codes, emb_tgt):
        """Returns ``(x_prime, x_dprime)``."""
        x1 = self.decoder(codes, emb_tgt, self.freq)
        return x1, x1 + self.postnet(x1)

    def forward(self, mel, emb_src, emb_tgt=None):
        """Returns ``(x_prime, x_dprime, codes)``; self-reconstruction when ``emb_tgt`` is None."""
        codes = self.encode(mel, emb_src)
        x1, x2 = self.decode(codes, emb_src if emb_tgt is None else emb_tgt)
        return x1, x2, codes


def reconstruct(gen: Generator, mel, emb):
    return gen(mel, emb, emb)


def segment(mel: np.ndarray, length=SEGMENT_FRAMES) -> np.ndarray:
    """Split (T, n_mels) into floor-padded, non-overlapping ``length``-frame windows."""
    n = max(1, -(-mel.shape[0] // length))
    return np.stack([fixed_window(mel[i * length:(i + 1) * length], length, "eval") for i in range(n)])


def convert(gen: Generator, src_mel, emb_src, emb_tgt, trim=False) -> np.ndarray:
    """Convert a source mel of any length window by window (postnet output).

    The result covers the floor-padded source (a multiple of 160 frames)
    unless ``trim`` is set.
    """
    src_mel = np.asarray(src_mel, dtype=np.float32)
    windows = torch.from_numpy(segment(src_mel))
    n = windows.shape[0]
    emb_src = torch.as_tensor(emb_src, dtype=torch.float32).reshape(1, -1).expand(n, -1)
    emb_tgt = torch.as_tensor(emb_tgt, dtype=torch.float32).reshape(1, -1).expand(n, -1)
    was_training = gen.training
    gen.eval()
    with torch.no_grad():
        _, x2, _ = gen(windows, emb_src, emb_tgt)
    gen.train(was_training)
    out = x2.reshape(-1, x2.shape[-1]).numpy()
    return out[:src_mel.shape[0]] if trim else out
