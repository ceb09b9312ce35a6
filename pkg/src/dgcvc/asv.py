"""LSTM speaker-verification model trained with the GE2E softmax loss.

After pretraining the model is frozen; the conversion system only reads its
per-frame projected outputs (D-sequences) and utterance-level D-vectors.
"""
from __future__ import annotations

import hashlib
import logging

import numpy as np
import torch
from scipy.ndimage import gaussian_filter1d
from torch import nn

from .errors import FrozenModelError, TooShortError
from .features import fixed_window

log = logging.getLogger(__name__)

EMBED_DIM = 256


class ASVModel(nn.Module):
    def __init__(self, n_mels=80, hidden=256, num_layers=3, embed_dim=EMBED_DIM,
                 w_init=10.0, b_init=-5.0):
        super().__init__()
        self.lstm = nn.LSTM(n_mels, hidden, num_layers=num_layers, batch_first=True)
        self.proj = nn.Linear(hidden, embed_dim)
        self.w = nn.Parameter(torch.tensor(float(w_init)))
        self.b = nn.Parameter(torch.tensor(float(b_init)))
        self.frozen = False

    def frame_embeddings(self, mel: torch.Tensor) -> torch.Tensor:
        """(B, T, n_mels) -> (B, T, embed_dim): projected last-layer outputs."""
        out, _ = self.lstm(mel)
        return self.proj(out)

    def forward(self, mel: torch.Tensor) -> torch.Tensor:
        e = self.frame_embeddings(mel)[:, -1]
        return e / e.norm(dim=-1, keepdim=True).clamp_min(1e-12)

    def freeze(self) -> "ASVModel":
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()
        self.frozen = True
        return self

    def clamp_scale(self, minimum=1e-6):
        with torch.no_grad():
            self.w.clamp_(min=minimum)


def parameter_checksum(model: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def _as_batch(mel) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(mel), dtype=torch.float32)
    if t.dim() == 2:
        t = t.unsqueeze(0)
    return t


def dsequence(model: ASVModel, mel) -> torch.Tensor:
    """Frame-level D-sequence, shape (T, 256) or (B, T, 256) for batched input.

    Always computed without gradient: the ASV model is never trained by callers.
    """
    batched = torch.is_tensor(mel) and mel.dim() == 3
    x = mel if torch.is_tensor(mel) else _as_batch(mel)
    if x.dim() == 2:
        x = x.unsqueeze(0)
    if x.shape[1] == 0:
        raise TooShortError("D-sequence needs at least one frame")
    was_training = model.training
    model.eval()
    with torch.no_grad():
        out = model.frame_embeddings(x.float())
    model.train(was_training)
    return out if batched else out[0]


def dvector(model: ASVModel, mel, window=160, overlap=0.5) -> torch.Tensor:
    """Unit-norm utterance embedding from sliding 160-frame windows.

    Utterances shorter than a window give a single-window D-vector over all
    their frames; longer ones average per-window D-vectors and renormalise.
    """
    mel = np.asarray(mel, dtype=np.float32)
    if mel.ndim != 2 or mel.shape[0] == 0:
        raise TooShortError("D-vector needs a non-empty (T, n_mels) mel")
    t = mel.shape[0]
    if t <= window:
        windows = mel[None]
    else:
        hop = max(1, int(window * (1 - overlap)))
        starts = list(range(0, t - window + 1, hop))
        windows = np.stack([mel[s:s + window] for s in starts])
    was_training = model.training
    model.eval()
    with torch.no_grad():
        e = model(torch.from_numpy(windows)).mean(dim=0)
    model.train(was_training)
    return e / e.norm().clamp_min(1e-12)


def batch_dvectors(model: ASVModel, mel: torch.Tensor, window=160) -> torch.Tensor:
    """D-vectors for a (B, T, n_mels) batch, without gradient."""
    if mel.shape[1] > window:
        return torch.stack([dvector(model, m.detach().cpu().numpy(), window) for m in mel])
    was_training = model.training
    model.eval()
    with torch.no_grad():
        e = model(mel.float())
    model.train(was_training)
    return e


def ge2e_similarity(emb: torch.Tensor, w, b) -> torch.Tensor:
    """Scaled cosine similarity S[j, i, k] of utterance (j, i) to centroid k.

    For k == j the centroid excludes utterance i itself.
    """
    n, m, _ = emb.shape
    if n < 2 or m < 2:
        raise ValueError(f"GE2E needs >= 2 speakers and >= 2 utterances each, got {n}x{m}")
    e = emb / emb.norm(dim=-1, keepdim=True).clamp_min(1e-12)
    centroids = emb.mean(dim=1)
    excl = (emb.sum(dim=1, keepdim=True) - emb) / (m - 1)
    c = centroids / centroids.norm(dim=-1, keepdim=True).clamp_min(1e-12)
    cos = torch.einsum("jid,kd->jik", e, c)
    excl_n = excl / excl.norm(dim=-1, keepdim=True).clamp_min(1e-12)
    own = (e * excl_n).sum(dim=-1)
    mask = torch.eye(n, dtype=torch.bool, device=emb.device)[:, None, :].expand(n, m, n)
    cos = torch.where(mask, own[:, :, None].expand(n, m, n), cos)
    return w * cos + b


def ge2e_loss(emb: torch.Tensor, w, b) -> torch.Tensor:
    """GE2E softmax loss summed over all N*M utterances."""
    s = ge2e_similarity(emb, w, b)
    n = emb.shape[0]
    target = s[torch.arange(n), :, torch.arange(n)]
    return (torch.logsumexp(s, dim=-1) - target).sum()


# -- training ---------------------------------------------------------------

def smooth_spectrum(mel: np.ndarray, sigma: float) -> np.ndarray:
    """Gaussian smoothing along the mel axis, mimicking over-smoothed generated spectra."""
    return gaussian_filter1d(mel, sigma, axis=-1, mode="nearest") if sigma > 0 else mel


def _sample_batch(mels_by_speaker, n_spk, n_utt, frames, rng, blur=0.0):
    speakers = sorted(mels_by_speaker)
    chosen = rng.choice(len(speakers), size=n_spk, replace=False)
    batch = []
    for s in chosen:
        utts = mels_by_speaker[speakers[s]]
        idx = rng.choice(len(utts), size=n_utt, replace=len(utts) < n_utt)
        windows = [fixed_window(utts[i], frames, "train", rng) for i in idx]
        if blur > 0:
            # half the windows stay clean
            windows = [smooth_spectrum(w, rng.uniform(0, blur)) if rng.random() < 0.5 else w
                       for w in windows]
        batch.append(windows)
    return torch.from_numpy(np.asarray(batch, dtype=np.float32))


def fixed_batch(mels_by_speaker, n_utt, frames):
    speakers = sorted(mels_by_speaker)
    return torch.from_numpy(np.asarray(
        [[fixed_window(mels_by_speaker[s][i % len(mels_by_speaker[s])], frames, "eval")
          for i in range(n_utt)] for s in speakers], dtype=np.float32))


def batch_loss(model: ASVModel, batch: torch.Tensor) -> torch.Tensor:
    n, m, t, d = batch.shape
    emb = model(batch.reshape(n * m, t, d)).reshape(n, m, -1)
    return ge2e_loss(emb, model.w, model.b)


def train_asv(mels_by_speaker: dict, cfg, heldout: dict | None = None, model: ASVModel | None = None,
              state: dict | None = None, steps: int | None = None, on_checkpoint=None):
    """Train (or resume training) an ASV model with GE2E.

    ``cfg`` is an :class:`~dgcvc.config.ASVConfig`. ``state`` carries the
    optimizer and sampler state from a previous call so that resuming is
    bit-for-bit identical to an uninterrupted run.
    Returns ``(model, state, history)`` where history holds per-step losses
    and the held-out loss before and after training.
    """
    if model is not None and model.frozen:
        raise FrozenModelError("cannot train a frozen ASV model")
    usable = {s: u for s, u in mels_by_speaker.items() if len(u) >= 2}
    if len(usable) < 2:
        raise ValueError("ASV training needs at least 2 speakers with at least 2 utterances each")
    n_spk = min(cfg.speakers_per_batch, len(usable))
    n_utt = cfg.utterances_per_speaker

    if model is None:
        torch.manual_seed(cfg.seed)
        model = ASVModel(hidden=cfg.hidden, num_layers=cfg.layers, w_init=cfg.w_init, b_init=cfg.b_init)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    start = 0
    if state is not None:
        opt.load_state_dict(state["optimizer"])
        rng.bit_generator.state = state["rng"]
        start = state["step"]

    held_batch = None
    history = {"loss": []}
    if heldout:
        held_batch = fixed_batch(heldout, max(2, min(len(u) for u in heldout.values())), cfg.window)
        with torch.no_grad():
            history["heldout_initial"] = float(batch_loss(model.eval(), held_batch))

    total = cfg.steps if steps is None else steps
    model.train()
    for step in range(start, start + total):
        batch = _sample_batch(usable, n_spk, n_utt, cfg.window, rng, cfg.blur_augment)
        loss = batch_loss(model, batch)
        opt.zero_grad()
        loss.backward()
        # the scale and bias get a reduced step, as in the GE2E recipe
        model.w.grad *= 0.01
        model.b.grad *= 0.01
        nn.utils.clip_grad_norm_(model.parameters(), 3.0)
        opt.step()
        model.clamp_scale()
        history["loss"].append(float(loss.detach()))
        if step % 50 == 0:
            log.info("asv step %d loss %.4f w %.3f", step, float(loss.detach()), float(model.w.detach()))
        if on_checkpoint and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            on_checkpoint(model, _state(opt, rng, step + 1))

    model.eval()
    if held_batch is not None:
        with torch.no_grad():
            history["heldout_final"] = float(batch_loss(model, held_batch))
    return model, _state(opt, rng, start + total), history


def _state(opt, rng, step):
    return {"optimizer": opt.state_dict(), "rng": rng.bit_generator.state, "step": step}
