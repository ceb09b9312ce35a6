"""Waveform and spectral feature extraction at 16 kHz.

Mel spectrograms, F0 tracks and mel-cepstra share one framing convention:
no centre padding, ``T = 1 + (len(w) - win) // hop`` frames. Matrices are
time-major, shape ``(T, n_mels)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import signal
from scipy.io import wavfile

from .errors import TooShortError

SAMPLE_RATE = 16000


@dataclass(frozen=True)
class FeatureConfig:
    sample_rate: int = SAMPLE_RATE
    n_fft: int = 1024
    win_length: int = 1024
    hop_length: int = 256
    n_mels: int = 80
    fmin: float = 0.0
    fmax: float = 8000.0
    log_floor: float = 1e-5
    f0_min: float = 50.0
    f0_max: float = 600.0
    voicing_threshold: float = 0.3
    mcep_order: int = 24
    mcep_alpha: float = 0.42
    griffin_lim_iters: int = 60

    @property
    def log_floor_value(self) -> float:
        return float(np.log(self.log_floor))


DEFAULT_FEATURES = FeatureConfig()


# -- waveform i/o -----------------------------------------------------------

def load_wav(path, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Read a PCM WAV as float64 in [-1, 1], mono, resampled to ``sample_rate``."""
    sr, data = wavfile.read(str(path))
    if np.issubdtype(data.dtype, np.integer):
        data = data.astype(np.float64) / float(np.iinfo(data.dtype).max + 1)
    else:
        data = data.astype(np.float64)
    if data.ndim == 2:
        data = data.mean(axis=1)
    if data.size == 0:
        raise ValueError(f"{path}: empty waveform")
    if sr != sample_rate:
        g = np.gcd(int(sr), int(sample_rate))
        data = signal.resample_poly(data, sample_rate // g, sr // g)
    if not np.all(np.isfinite(data)):
        raise ValueError(f"{path}: non-finite samples")
    return np.clip(data, -1.0, 1.0)


def save_wav(path, w: np.ndarray, sample_rate: int = SAMPLE_RATE) -> None:
    pcm = np.round(np.clip(w, -1.0, 1.0) * 32767.0).astype(np.int16)
    wavfile.write(str(path), sample_rate, pcm)


# -- framing ----------------------------------------------------------------

def num_frames(n_samples: int, cfg: FeatureConfig = DEFAULT_FEATURES) -> int:
    if n_samples < cfg.win_length:
        return 0
    return 1 + (n_samples - cfg.win_length) // cfg.hop_length


def frame_signal(w: np.ndarray, cfg: FeatureConfig = DEFAULT_FEATURES) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 1 or w.size == 0:
        raise ValueError("waveform must be a non-empty 1-D array")
    n = num_frames(w.size, cfg)
    if n == 0:
        raise TooShortError(
            f"waveform of {w.size} samples is shorter than one analysis "
            f"window ({cfg.win_length} samples)")
    return np.lib.stride_tricks.sliding_window_view(w, cfg.win_length)[::cfg.hop_length][:n]


@lru_cache(maxsize=8)
def _window(n: int) -> np.ndarray:
    return signal.get_window("hann", n, fftbins=True)


def stft_magnitude(w: np.ndarray, cfg: FeatureConfig = DEFAULT_FEATURES) -> np.ndarray:
    frames = frame_signal(w, cfg) * _window(cfg.win_length)
    return np.abs(np.fft.rfft(frames, n=cfg.n_fft, axis=1))


# -- mel --------------------------------------------------------------------

def hz_to_mel(f):
    """Slaney mel scale: linear below 1 kHz, logarithmic above."""
    f = np.asarray(f, dtype=np.float64)
    f_sp = 200.0 / 3
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = np.log(6.4) / 27.0
    return np.where(f >= min_log_hz,
                    min_log_mel + np.log(np.maximum(f, 1e-10) / min_log_hz) / logstep,
                    f / f_sp)


def mel_to_hz(m):
    m = np.asarray(m, dtype=np.float64)
    f_sp = 200.0 / 3
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = np.log(6.4) / 27.0
    return np.where(m >= min_log_mel,
                    min_log_hz * np.exp(logstep * (m - min_log_mel)),
                    f_sp * m)


def mel_center_frequencies(cfg: FeatureConfig = DEFAULT_FEATURES) -> np.ndarray:
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2))
    return edges[1:-1]


@lru_cache(maxsize=8)
def mel_filterbank(cfg: FeatureConfig = DEFAULT_FEATURES) -> np.ndarray:
    """Triangular, area-normalised filters, shape ``(n_mels, n_fft // 2 + 1)``."""
    fft_freqs = np.linspace(0.0, cfg.sample_rate / 2, cfg.n_fft // 2 + 1)
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2))
    fdiff = np.diff(edges)
    ramps = edges[:, None] - fft_freqs[None, :]
    lower = -ramps[:-2] / fdiff[:-1, None]
    upper = ramps[2:] / fdiff[1:, None]
    weights = np.maximum(0.0, np.minimum(lower, upper))
    weights *= (2.0 / (edges[2:] - edges[:-2]))[:, None]
    weights.setflags(write=False)
    return weights


def compute_mel(w: np.ndarray, cfg: FeatureConfig = DEFAULT_FEATURES) -> np.ndarray:
    """Log-mel magnitude spectrogram, shape ``(T, n_mels)``, floored at ``log(log_floor)``."""
    mag = stft_magnitude(w, cfg)
    mel = mag @ mel_filterbank(cfg).T
    return np.log(np.maximum(mel, cfg.log_floor))


def fixed_window(mel: np.ndarray, length: int = 160, mode: str = "eval",
                 rng: np.random.Generator | None = None,
                 cfg: FeatureConfig = DEFAULT_FEATURES) -> np.ndarray:
    """Crop or floor-pad a ``(T, n_mels)`` mel to exactly ``length`` frames.

    ``train`` picks a uniformly random start; ``eval`` starts at frame 0.
    """
    if length <= 0:
        raise ValueError("window length must be positive")
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown mode {mode!r}")
    mel = np.asarray(mel)
    t = mel.shape[0]
    if t < length:
        out = np.full((length, mel.shape[1]), cfg.log_floor_value, dtype=mel.dtype)
        out[:t] = mel
        return out
    start = 0
    if mode == "train" and t > length:
        rng = rng if rng is not None else np.random.default_rng()
        start = int(rng.integers(0, t - length + 1))
    return mel[start:start + length].copy()


# -- F0 ---------------------------------------------------------------------

@dataclass
class F0Track:
    f0_hz: np.ndarray
    voiced: np.ndarray

    def __len__(self):
        return len(self.f0_hz)


def _normalized_autocorrelation(frames: np.ndarray, max_lag: int) -> np.ndarray:
    n = frames.shape[1]
    nfft = 1 << int(np.ceil(np.log2(2 * n)))
    spec = np.fft.rfft(frames, n=nfft, axis=1)
    acf = np.fft.irfft(spec * np.conj(spec), n=nfft, axis=1)[:, :max_lag + 1]
    sq = frames ** 2
    csum = np.concatenate([np.zeros((frames.shape[0], 1)), np.cumsum(sq, axis=1)], axis=1)
    lags = np.arange(max_lag + 1)
    # energy of x[0:n-lag] and x[lag:n]
    e_head = csum[:, n - lags]
    e_tail = csum[:, n:n + 1] - csum[:, lags]
    denom = np.sqrt(np.maximum(e_head * e_tail, 0.0))
    with np.errstate(invalid="ignore", divide="ignore"):
        r = np.where(denom > 1e-12, acf / denom, 0.0)
    return r


def extract_f0(w: np.ndarray, cfg: FeatureConfig = DEFAULT_FEATURES) -> F0Track:
    """Per-frame F0 from the normalised autocorrelation peak.

    The earliest local maximum reaching 85% of the in-band maximum is taken
    (guards against sub-octave picks), refined by parabolic interpolation.
    Frames whose peak is below ``voicing_threshold`` are unvoiced.
    """
    frames = frame_signal(w, cfg)
    frames = frames - frames.mean(axis=1, keepdims=True)
    lag_min = int(np.floor(cfg.sample_rate / cfg.f0_max))
    lag_max = int(np.ceil(cfg.sample_rate / cfg.f0_min))
    r = _normalized_autocorrelation(frames, lag_max + 1)

    f0 = np.zeros(frames.shape[0])
    voiced = np.zeros(frames.shape[0], dtype=bool)
    energy = np.sqrt(np.mean(frames ** 2, axis=1))
    for t in range(frames.shape[0]):
        if energy[t] < 1e-6:
            continue
        band = r[t, lag_min:lag_max + 1]
        interior = (band[1:-1] > band[:-2]) & (band[1:-1] >= band[2:])
        peaks = np.flatnonzero(interior) + 1
        if peaks.size == 0:
            continue
        best = band[peaks].max()
        if best < cfg.voicing_threshold:
            continue
        k = peaks[np.argmax(band[peaks] >= 0.85 * best)]
        a, b, c = band[k - 1], band[k], band[k + 1]
        denom = a - 2 * b + c
        shift = 0.5 * (a - c) / denom if denom < 0 else 0.0
        lag = lag_min + k + shift
        hz = cfg.sample_rate / lag
        if cfg.f0_min <= hz <= cfg.f0_max:
            f0[t] = hz
            voiced[t] = True
    return F0Track(f0, voiced)


# -- mel-cepstrum -----------------------------------------------------------

def _warp_frequency(omega: np.ndarray, alpha: float) -> np.ndarray:
    """All-pass (bilinear) frequency warping on [0, pi]."""
    return omega + 2.0 * np.arctan(alpha * np.sin(omega) / (1.0 - alpha * np.cos(omega)))


def compute_mcep(w: np.ndarray, cfg: FeatureConfig = DEFAULT_FEATURES) -> np.ndarray:
    """Mel-cepstral coefficients ``c0..c_order``, shape ``(T, order + 1)``.

    The log-amplitude spectrum is resampled onto an all-pass warped axis and
    truncated in the cepstral domain, which keeps only the smooth envelope.
    The spectral floor is relative to each frame's peak, so a gain change
    only moves ``c0``.
    """
    frames = frame_signal(w, cfg) * _window(cfg.win_length)
    power = np.abs(np.fft.rfft(frames, n=cfg.n_fft, axis=1)) ** 2
    peak = power.max(axis=1, keepdims=True)
    floor = np.where(peak > 0, peak * 1e-12, 1e-30)
    log_amp = 0.5 * np.log(np.maximum(power, floor))

    k = power.shape[1]
    warped = np.linspace(0.0, np.pi, k)
    # sample the linear-frequency spectrum at the pre-images of a uniform warped grid
    linear = _warp_frequency(warped, -cfg.mcep_alpha)
    bins = linear / np.pi * (k - 1)
    lo = np.clip(np.floor(bins).astype(int), 0, k - 2)
    frac = bins - lo
    env = log_amp[:, lo] * (1.0 - frac) + log_amp[:, lo + 1] * frac
    ceps = np.fft.irfft(env, n=2 * (k - 1), axis=1)
    return ceps[:, :cfg.mcep_order + 1]


# -- inversion --------------------------------------------------------------

def mel_to_linear(amp: np.ndarray, cfg: FeatureConfig = DEFAULT_FEATURES, iterations=100) -> np.ndarray:
    """Non-negative least-squares linear magnitudes for mel amplitudes.

    Multiplicative updates, vectorised over frames; zero mel rows stay zero.
    """
    fb = mel_filterbank(cfg)
    gram = fb.T @ fb
    target = amp @ fb
    x = np.maximum(amp @ np.linalg.pinv(fb).T, 1e-8) * (amp.sum(axis=1, keepdims=True) > 0)
    for _ in range(iterations):
        x *= target / np.maximum(x @ gram, 1e-30)
    return x


def _istft(spec: np.ndarray, n_samples: int, cfg: FeatureConfig) -> np.ndarray:
    win = _window(cfg.win_length)
    frames = np.fft.irfft(spec, n=cfg.n_fft, axis=1)[:, :cfg.win_length] * win
    out = np.zeros(n_samples)
    norm = np.zeros(n_samples)
    for t, frame in enumerate(frames):
        s = t * cfg.hop_length
        out[s:s + cfg.win_length] += frame
        norm[s:s + cfg.win_length] += win ** 2
    # edge samples where the window overlap vanishes would otherwise blow up
    return out / np.maximum(norm, 0.1)


def mel_to_waveform(mel: np.ndarray, iterations: int | None = None,
                    cfg: FeatureConfig = DEFAULT_FEATURES, seed: int = 0) -> np.ndarray:
    """Griffin-Lim inversion of a log-mel spectrogram.

    The output has ``(T - 1) * hop + win`` samples, so re-analysis yields
    ``T`` frames. Floor-valued mel channels are treated as exact zeros.
    """
    iterations = cfg.griffin_lim_iters if iterations is None else iterations
    mel = np.asarray(mel, dtype=np.float64)
    amp = np.where(mel > cfg.log_floor_value + 1e-9, np.exp(mel), 0.0)
    mag = mel_to_linear(amp, cfg)
    n_samples = (mel.shape[0] - 1) * cfg.hop_length + cfg.win_length
    if not np.any(mag > 0):
        return np.zeros(n_samples)

    rng = np.random.default_rng(seed)
    phase = np.exp(2j * np.pi * rng.random(mag.shape))
    w = _istft(mag * phase, n_samples, cfg)
    for _ in range(iterations):
        spec = np.fft.rfft(frame_signal(w, cfg) * _window(cfg.win_length), n=cfg.n_fft, axis=1)
        phase = np.exp(1j * np.angle(spec))
        w = _istft(mag * phase, n_samples, cfg)
    peak = np.max(np.abs(w))
    if peak > 1.0:
        w = w / peak
    return w
