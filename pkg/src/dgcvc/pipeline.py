"""Utterance-level glue: reference embeddings and whole-utterance conversion."""
from __future__ import annotations

import numpy as np

from . import features as F
from .conversion import convert
from .evaluation import dtw_mcd, f0_mae
from .features import fixed_window
from .speaker_encoder import speaker_embed


def pad_reference(mel, segment=160) -> np.ndarray:
    """Floor-pad references shorter than a training window, as seen in training."""
    mel = np.asarray(mel, dtype=np.float32)
    return fixed_window(mel, segment, "eval") if mel.shape[0] < segment else mel


def reference_embedding(models, mel, segment=160):
    return speaker_embed(models.variant, pad_reference(mel, segment), models.asv, models.encoder)


def convert_utterance(models, src_mel, ref_mel, trim=True, segment=160) -> np.ndarray:
    """Convert ``src_mel`` to the voice of ``ref_mel``.

    The source embedding comes from the source utterance itself and the
    target embedding is computed once from the full reference.
    """
    emb_src = reference_embedding(models, src_mel, segment)
    emb_tgt = reference_embedding(models, ref_mel, segment)
    return convert(models.generator, src_mel, emb_src, emb_tgt, trim=trim)


def score_conversion(converted_mel, reference_wav, cfg: F.FeatureConfig = F.DEFAULT_FEATURES, seed=0):
    """Vocode a converted mel with Griffin-Lim and score it against the reference.

    Returns ``(waveform, mcd_db, f0_mae_hz_or_None)``.
    """
    wav = F.mel_to_waveform(converted_mel, cfg=cfg, seed=seed)
    ref = np.asarray(reference_wav, dtype=np.float64)
    mc_conv, mc_ref = F.compute_mcep(wav, cfg), F.compute_mcep(ref, cfg)
    mcd, path = dtw_mcd(mc_conv, mc_ref, return_path=True)
    err = f0_mae(F.extract_f0(wav, cfg), F.extract_f0(ref, cfg), path)
    return wav, mcd, err
