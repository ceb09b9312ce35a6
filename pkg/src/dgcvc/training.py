"""Objectives and the joint optimisation loop for the conversion model.

The reconstruction objective is two mean-squared mel terms (decoder and
postnet outputs) plus a mean-absolute content-code consistency term. The
auxiliary speaker-classification loss is weighted in only for ``dgc``.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from . import asv as asv_mod
from .checkpoint import save_checkpoint
from .config import RunConfig
from .conversion import Generator
from .features import fixed_window
from .speaker_encoder import SpeakerEncoder, needs_asv

log = logging.getLogger(__name__)


class AuxClassifier(nn.Linear):
    """Single fully connected layer from a 256-dim embedding to speaker logits."""

    def __init__(self, n_speakers, emb_dim=256):
        super().__init__(emb_dim, n_speakers)


def reconstruction_loss(x, x1, x2, codes, codes2):
    for name, t in (("x_prime", x1), ("x_dprime", x2)):
        if t.shape != x.shape:
            raise ValueError(f"{name} shape {tuple(t.shape)} != target shape {tuple(x.shape)}")
    if codes.shape != codes2.shape:
        raise ValueError(f"content code shapes differ: {tuple(codes.shape)} vs {tuple(codes2.shape)}")
    return F.mse_loss(x1, x) + F.mse_loss(x2, x) + F.l1_loss(codes2, codes)


def classification_loss(logits, labels):
    """Mean negative log-probability of the true speaker."""
    labels = torch.as_tensor(labels, dtype=torch.long)
    k = logits.shape[-1]
    if labels.numel() and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"speaker label out of range for {k} classes")
    return F.cross_entropy(logits, labels)


def total_loss(l_rec, l_class, lambda_rec=1.0, lambda_class=0.5):
    return lambda_rec * l_rec + lambda_class * l_class


def classifier_accuracy(classifier, embeddings, labels) -> float:
    labels = torch.as_tensor(labels, dtype=torch.long)
    if labels.numel() == 0:
        raise ValueError("no embeddings to score")
    with torch.no_grad():
        pred = classifier(torch.as_tensor(embeddings, dtype=torch.float32)).argmax(dim=-1)
    return float((pred == labels).float().mean())


@dataclass
class VCModels:
    generator: Generator
    encoder: SpeakerEncoder
    classifier: AuxClassifier
    asv: asv_mod.ASVModel | None
    speakers: tuple

    @property
    def variant(self):
        return self.encoder.variant

    def trainable(self):
        return [*self.generator.parameters(), *self.encoder.parameters(), *self.classifier.parameters()]

    def embed(self, mel: torch.Tensor) -> torch.Tensor:
        return self.encoder(mel, self.asv)

    def train(self, mode=True):
        self.generator.train(mode)
        self.encoder.train(mode)
        self.classifier.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def blobs(self) -> dict:
        out = {"generator": self.generator.state_dict(), "encoder": self.encoder.state_dict(),
               "classifier": self.classifier.state_dict()}
        if self.asv is not None:
            out["asv"] = self.asv.state_dict()
        return out


def build_asv(cfg: RunConfig) -> asv_mod.ASVModel:
    a = cfg.asv
    return asv_mod.ASVModel(cfg.features.n_mels, a.hidden, a.layers, w_init=a.w_init, b_init=a.b_init)


def build_models(cfg: RunConfig, speakers, asv=None) -> VCModels:
    if needs_asv(cfg.variant) and asv is None:
        raise ValueError(f"variant {cfg.variant!r} needs a pretrained ASV model")
    if asv is not None and not asv.frozen:
        asv.freeze()
    torch.manual_seed(cfg.training.seed)
    s, c = cfg.speaker_encoder, cfg.conversion
    encoder = SpeakerEncoder(s.variant, s.conv_channels, s.gru_hidden, s.n_tokens, s.heads,
                             s.token_dim, s.token_std, cfg.features.n_mels)
    gen = Generator(cfg.features.n_mels, 256, c.dim_neck, c.freq, c.enc_channels, c.dec_pre_lstm,
                    c.dec_channels, c.dec_lstm, c.dec_lstm_layers, c.postnet_channels)
    clf = AuxClassifier(len(speakers))
    return VCModels(gen, encoder, clf, asv, tuple(speakers))


def load_models(payload: dict) -> VCModels:
    """Rebuild conversion models from an unpacked checkpoint payload."""
    cfg = payload["run_config"]
    asv = None
    if "asv" in payload["blobs"]:
        asv = build_asv(cfg)
        asv.load_state_dict(payload["blobs"]["asv"])
        asv.freeze()
    models = build_models(cfg, payload["extra"]["speakers"], asv)
    models.generator.load_state_dict(payload["blobs"]["generator"])
    models.encoder.load_state_dict(payload["blobs"]["encoder"])
    models.classifier.load_state_dict(payload["blobs"]["classifier"])
    return models.eval()


def sample_batch(mels_by_speaker: dict, speakers, batch_size, frames, rng):
    labels = rng.integers(0, len(speakers), size=batch_size)
    windows = []
    for lab in labels:
        utts = mels_by_speaker[speakers[lab]]
        windows.append(fixed_window(utts[rng.integers(len(utts))], frames, "train", rng))
    return torch.from_numpy(np.asarray(windows, dtype=np.float32)), torch.from_numpy(labels)


def train_step(models: VCModels, x, labels, lambda_rec, lambda_class):
    emb = models.embed(x)
    x1, x2, codes = models.generator(x, emb, emb)
    codes2 = models.generator.encode(x2, emb)
    l_rec = reconstruction_loss(x, x1, x2, codes, codes2)
    l_class = classification_loss(models.classifier(emb), labels)
    return l_rec, l_class, total_loss(l_rec, l_class, lambda_rec, lambda_class)


def train_vc(mels_by_speaker: dict, asv, cfg: RunConfig, out_dir=None, steps=None, callback=None,
             extra=None):
    """Jointly train generator, GST speaker encoder and classifier; the ASV stays frozen.

    Returns ``(models, history)``; history rows are ``(step, l_rec, l_class, total)``.
    With ``out_dir`` set, periodic/best/final checkpoints and ``loss_<variant>.csv``
    are written there.
    """
    speakers = sorted(mels_by_speaker)
    if len(speakers) < 2:
        raise ValueError("conversion training needs at least 2 speakers")
    if any(len(v) == 0 for v in mels_by_speaker.values()):
        raise ValueError("every training speaker needs at least one utterance")
    if needs_asv(cfg.variant) != (asv is not None) and needs_asv(cfg.variant):
        raise ValueError(f"variant {cfg.variant!r} needs a pretrained ASV model")
    asv = asv if needs_asv(cfg.variant) else None

    models = build_models(cfg, speakers, asv)
    t = cfg.training
    lam_c = cfg.effective_lambda_class
    opt = torch.optim.Adam(models.trainable(), lr=t.lr)
    rng = np.random.default_rng(t.seed)
    steps = t.steps if steps is None else steps
    out_dir = Path(out_dir) if out_dir else None
    extra = {**(extra or {}), "speakers": list(speakers)}
    if asv is not None:
        extra["asv_checksum"] = asv_mod.parameter_checksum(asv)

    history = []
    best = float("inf")
    window = []
    models.train()
    for step in range(steps):
        x, labels = sample_batch(mels_by_speaker, speakers, t.batch_size, cfg.conversion.segment, rng)
        l_rec, l_class, loss = train_step(models, x, labels, t.lambda_rec, lam_c)
        opt.zero_grad()
        loss.backward()
        opt.step()
        row = (step, float(l_rec.detach()), float(l_class.detach()), float(loss.detach()))
        history.append(row)
        window.append(row[3])
        if t.log_every and step % t.log_every == 0:
            log.info("vc[%s] step %d l_rec %.4f l_class %.4f total %.4f", cfg.variant, *row)
        if callback:
            callback(step, models)
        if out_dir and t.checkpoint_every and (step + 1) % t.checkpoint_every == 0:
            save_checkpoint(out_dir / f"vc_{cfg.variant}_step{step + 1}.ckpt", "vc",
                            models.blobs(), cfg, step + 1, extra)
            mean = float(np.mean(window))
            if mean < best:
                best = mean
                save_checkpoint(out_dir / f"vc_{cfg.variant}_best.ckpt", "vc",
                                models.blobs(), cfg, step + 1, extra)
            window = []
    models.eval()
    if out_dir:
        save_checkpoint(out_dir / f"vc_{cfg.variant}.ckpt", "vc", models.blobs(), cfg, steps, extra)
        write_loss_csv(out_dir / f"loss_{cfg.variant}.csv", history)
    return models, history


def write_loss_csv(path, history):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "l_rec", "l_class", "total"])
        for step, a, b, c in history:
            w.writerow([step, repr(a), repr(b), repr(c)])
