"""Speaker/utterance catalog, speaker splits and the synthetic toy corpus.

On-disk layout is ``root/<speaker_id>/*.wav`` with an optional one-line
``root/<speaker_id>/meta`` file holding the gender tag (``F`` or ``M``).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import features as F

GENDER_PAIRS = ("F2F", "M2M", "F2M", "M2F")

TOY_BASE_F0 = (110.0, 150.0, 200.0, 260.0)
TOY_TILTS = (0.7, 1.3, 1.9)
TOY_VIBRATO_HZ = (4.0, 5.5, 7.0)
TOY_UTTERANCE_SECONDS = 2.0

# rough (F1, F2) pairs in Hz; the sequence of vowels carries the "content"
_VOWELS = ((730, 1090), (270, 2290), (300, 870), (530, 1840), (640, 1190), (490, 1350))


@dataclass(frozen=True)
class Speaker:
    id: str
    utterances: tuple[Path, ...]
    gender: str | None = None


@dataclass(frozen=True)
class Corpus:
    root: Path
    speakers: tuple[Speaker, ...]
    train_speakers: tuple[str, ...] = ()
    eval_speakers: tuple[str, ...] = ()

    def __post_init__(self):
        ids = [s.id for s in self.speakers]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate speaker ids")
        if set(self.train_speakers) & set(self.eval_speakers):
            raise ValueError("training and evaluation speakers overlap")

    @property
    def speaker_ids(self) -> list[str]:
        return [s.id for s in self.speakers]

    def speaker(self, speaker_id: str) -> Speaker:
        for s in self.speakers:
            if s.id == speaker_id:
                return s
        raise KeyError(speaker_id)

    def utterances(self, speaker_ids=None) -> list[tuple[str, Path]]:
        wanted = None if speaker_ids is None else set(speaker_ids)
        return [(s.id, u) for s in self.speakers if wanted is None or s.id in wanted
                for u in s.utterances]

    def __len__(self):
        return sum(len(s.utterances) for s in self.speakers)


@dataclass(frozen=True)
class ConversionPair:
    source: str
    target: str
    tag: str | None = None

    def __post_init__(self):
        if self.tag is not None and self.tag not in GENDER_PAIRS:
            raise ValueError(f"unknown gender-pair tag {self.tag!r}")


def gender_pair_tag(source_gender, target_gender) -> str | None:
    if source_gender not in ("F", "M") or target_gender not in ("F", "M"):
        return None
    return f"{source_gender}2{target_gender}"


def make_pair(corpus: Corpus, source: str, target: str) -> ConversionPair:
    tag = gender_pair_tag(corpus.speaker(source).gender, corpus.speaker(target).gender)
    return ConversionPair(source, target, tag)


def load_corpus(root) -> Corpus:
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"corpus root {root} does not exist")
    speakers = []
    for d in sorted(p for p in root.iterdir() if p.is_dir()):
        wavs = tuple(sorted(d.glob("*.wav")))
        if not wavs:
            continue
        gender = None
        meta = d / "meta"
        if meta.is_file():
            tag = meta.read_text().strip().upper()
            if tag not in ("F", "M"):
                raise ValueError(f"{meta}: gender tag must be F or M, got {tag!r}")
            gender = tag
        speakers.append(Speaker(d.name, wavs, gender))
    if not speakers:
        raise ValueError(f"corpus root {root} contains no speaker directories with WAV files")
    return Corpus(root, tuple(speakers))


def make_splits(corpus: Corpus, n_train_speakers: int, seed: int = 0) -> Corpus:
    """Seeded random choice of training speakers; the rest are zero-shot speakers."""
    ids = corpus.speaker_ids
    if not 1 <= n_train_speakers < len(ids):
        raise ValueError(
            f"n_train_speakers must be in [1, {len(ids) - 1}] for {len(ids)} speakers")
    rng = np.random.default_rng(seed)
    chosen = set(rng.choice(len(ids), size=n_train_speakers, replace=False).tolist())
    train = tuple(s for i, s in enumerate(ids) if i in chosen)
    held = tuple(s for i, s in enumerate(ids) if i not in chosen)
    return replace(corpus, train_speakers=train, eval_speakers=held)


def assert_zero_shot(corpus: Corpus, speaker_ids) -> None:
    leaked = set(speaker_ids) & set(corpus.train_speakers)
    if leaked:
        raise ValueError(f"speakers {sorted(leaked)} were seen in training")


def split_utterances(corpus: Corpus, speaker_ids, heldout_fraction: float = 0.2):
    """Per speaker, the last ``heldout_fraction`` of utterances go to held-out."""
    train, held = [], []
    for sid in speaker_ids:
        utts = corpus.speaker(sid).utterances
        n_held = max(1, int(round(len(utts) * heldout_fraction)))
        train += [(sid, u) for u in utts[:-n_held]]
        held += [(sid, u) for u in utts[-n_held:]]
    return train, held


# -- synthetic speakers ------------------------------------------------------

@dataclass(frozen=True)
class ToyVoice:
    base_f0: float
    tilt: float
    vibrato_hz: float

    @property
    def gender(self) -> str:
        return "M" if self.base_f0 <= 150 else "F"


def toy_voice_slots() -> list[ToyVoice]:
    return [ToyVoice(TOY_BASE_F0[i % 4], TOY_TILTS[(i // 4) % 3], TOY_VIBRATO_HZ[(i + i // 4) % 3])
            for i in range(len(TOY_BASE_F0) * len(TOY_TILTS))]


@dataclass
class _Content:
    """Speaker-independent part of an utterance, shared across speakers."""
    seg_bounds: np.ndarray
    seg_kind: np.ndarray  # 0 silence, 1 voiced, 2 noise
    formants: np.ndarray  # per segment (F1, F2)
    amp_knots: np.ndarray
    intonation: np.ndarray
    gain: float
    noise_seed: int = field(default=0)


def _make_content(rng: np.random.Generator, n_samples: int, sr: int) -> _Content:
    bounds = [0]
    while bounds[-1] < n_samples:
        bounds.append(bounds[-1] + int(rng.uniform(0.12, 0.32) * sr))
    bounds[-1] = n_samples
    n_seg = len(bounds) - 1
    kind = rng.choice([0, 1, 2], size=n_seg, p=[0.1, 0.7, 0.2])
    kind[0] = 1
    formants = np.array([_VOWELS[i] for i in rng.integers(0, len(_VOWELS), n_seg)], dtype=float)
    return _Content(
        seg_bounds=np.array(bounds),
        seg_kind=kind,
        formants=formants,
        amp_knots=rng.uniform(0.35, 1.0, size=12),
        intonation=rng.uniform(-1.0, 1.0, size=4),
        gain=float(rng.uniform(0.4, 0.8)),
        noise_seed=int(rng.integers(0, 2**31 - 1)),
    )


def _formant_gain(freqs: np.ndarray, f1: np.ndarray, f2: np.ndarray) -> np.ndarray:
    def bump(fc, bw, height):
        return height / (1.0 + ((freqs - fc) / bw) ** 2)
    return 0.15 + bump(f1, 90.0, 1.0) + bump(f2, 140.0, 0.6)


def render_toy_utterance(voice: ToyVoice, content: _Content, speaker_seed: int,
                         sr: int = F.SAMPLE_RATE) -> np.ndarray:
    n = int(content.seg_bounds[-1])
    t = np.arange(n) / sr
    seg_of = np.searchsorted(content.seg_bounds, np.arange(n), side="right") - 1
    kind = content.seg_kind[seg_of]

    # smooth per-sample formant tracks between segment centres
    centres = 0.5 * (content.seg_bounds[:-1] + content.seg_bounds[1:])
    f1 = np.interp(np.arange(n), centres, content.formants[:, 0])
    f2 = np.interp(np.arange(n), centres, content.formants[:, 1])

    slow = sum(c * np.sin(np.pi * (k + 1) * t / t[-1]) for k, c in enumerate(content.intonation))
    f0 = voice.base_f0 * (1.0 + 0.012 * slow / 2.0) * (1.0 + 0.015 * np.sin(2 * np.pi * voice.vibrato_hz * t))
    phase = 2 * np.pi * np.cumsum(f0) / sr

    n_harm = int(0.95 * (sr / 2) / (voice.base_f0 * 1.05))
    harmonic = np.zeros(n)
    for h in range(1, n_harm + 1):
        fh = h * f0
        amp = h ** (-voice.tilt) * _formant_gain(fh, f1, f2) * (fh < 0.95 * sr / 2)
        harmonic += amp * np.sin(h * phase)
    harmonic /= np.max(np.abs(harmonic)) + 1e-12

    nrng = np.random.default_rng([content.noise_seed, speaker_seed])
    noise = nrng.standard_normal(n)
    noise = np.diff(noise, prepend=0.0)  # fricative-like high-pass
    noise *= 0.25 / (np.std(noise) + 1e-12) * (1.0 + 0.3 * (voice.tilt - 1.3))

    envelope = np.interp(t, np.linspace(0, t[-1], len(content.amp_knots)), content.amp_knots)
    # 15 ms ramps at segment edges
    ramp = int(0.015 * sr)
    edge = np.ones(n)
    for s, e in zip(content.seg_bounds[:-1], content.seg_bounds[1:]):
        r = min(ramp, (e - s) // 2)
        edge[s:s + r] = np.linspace(0, 1, r, endpoint=False)
        edge[e - r:e] = np.linspace(1, 0, r, endpoint=False)

    out = np.where(kind == 1, harmonic, np.where(kind == 2, noise, 0.0)) * envelope * edge
    return content.gain * out / (np.max(np.abs(out)) + 1e-12)


def synth_toy_corpus(n_speakers: int, utts_per_speaker: int, seed: int, out_dir,
                     seconds: float = TOY_UTTERANCE_SECONDS) -> Corpus:
    """Write a parallel synthetic corpus: utterance ``k`` has the same content for every speaker."""
    slots = toy_voice_slots()
    if n_speakers > len(slots):
        raise ValueError(f"at most {len(slots)} toy speakers are available, asked for {n_speakers}")
    if n_speakers < 1 or utts_per_speaker < 1:
        raise ValueError("need at least one speaker and one utterance")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    sr = F.SAMPLE_RATE
    rng = np.random.default_rng(seed)
    contents = [_make_content(rng, int(seconds * sr), sr) for _ in range(utts_per_speaker)]
    params = {}
    for i in range(n_speakers):
        voice = slots[i]
        sid = f"spk{i:02d}"
        d = out_dir / sid
        d.mkdir(exist_ok=True)
        (d / "meta").write_text(voice.gender + "\n")
        for k, content in enumerate(contents):
            w = render_toy_utterance(voice, content, speaker_seed=seed * 1000 + i, sr=sr)
            F.save_wav(d / f"utt{k:03d}.wav", w, sr)
        params[sid] = {"base_f0": voice.base_f0, "tilt": voice.tilt,
                       "vibrato_hz": voice.vibrato_hz, "gender": voice.gender}
    (out_dir / "toy_voices.json").write_text(json.dumps(params, indent=2, sort_keys=True) + "\n")
    return load_corpus(out_dir)


def synth_voice_pool(n_speakers: int, utts_per_speaker: int, seed: int, out_dir,
                     seconds: float = TOY_UTTERANCE_SECONDS) -> Corpus:
    """Non-parallel corpus of voices with continuously sampled parameters.

    Used to pretrain the speaker-verification model on many more voices than
    the conversion corpus has, so that its embedding space covers unseen
    speakers.
    """
    if n_speakers < 2 or utts_per_speaker < 2:
        raise ValueError("a voice pool needs >= 2 speakers with >= 2 utterances")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    sr = F.SAMPLE_RATE
    rng = np.random.default_rng([seed, 7919])
    params = {}
    for i in range(n_speakers):
        voice = ToyVoice(float(np.exp(rng.uniform(np.log(95.0), np.log(290.0)))),
                         float(rng.uniform(0.5, 2.1)), float(rng.uniform(3.5, 7.5)))
        sid = f"pool{i:03d}"
        d = out_dir / sid
        d.mkdir(exist_ok=True)
        (d / "meta").write_text(voice.gender + "\n")
        for k in range(utts_per_speaker):
            content = _make_content(rng, int(seconds * sr), sr)
            F.save_wav(d / f"utt{k:03d}.wav", render_toy_utterance(voice, content, seed * 1000 + i, sr), sr)
        params[sid] = {"base_f0": voice.base_f0, "tilt": voice.tilt,
                       "vibrato_hz": voice.vibrato_hz, "gender": voice.gender}
    (out_dir / "toy_voices.json").write_text(json.dumps(params, indent=2, sort_keys=True) + "\n")
    return load_corpus(out_dir)


def mels_by_speaker(corpus: Corpus, speaker_ids=None, cfg: F.FeatureConfig = F.DEFAULT_FEATURES) -> dict:
    pairs = corpus.utterances(speaker_ids)
    out: dict[str, list] = {}
    for (sid, _), mel in zip(pairs, load_mels(pairs, cfg)):
        out.setdefault(sid, []).append(mel)
    return out


def load_mels(pairs, cfg: F.FeatureConfig = F.DEFAULT_FEATURES) -> list[np.ndarray]:
    return [F.compute_mel(F.load_wav(p, cfg.sample_rate), cfg).astype(np.float32) for _, p in pairs]
