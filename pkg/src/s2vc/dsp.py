"""Waveform I/O and spectral processing.

WAV reading/writing (PCM16 / IEEE float32), polyphase sinc resampling,
Hann-windowed STFT, HTK-scale log-mel extraction, and Griffin-Lim phase
recovery as the waveform synthesis path.

Internals run in float64; public matrices come back as float32.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, asdict

import numpy as np

__all__ = [
    "AudioBuffer",
    "MelConfig",
    "Spectrogram",
    "DspError",
    "WavDecodeError",
    "read_wav",
    "write_wav",
    "resample",
    "stft",
    "istft",
    "log_mel",
    "mel_filterbank",
    "griffin_lim",
]


class DspError(Exception):
    pass


class WavDecodeError(DspError):
    def __init__(self, message, offset=None):
        super().__init__(message if offset is None else f"{message} (at byte {offset})")
        self.offset = offset


@dataclass
class AudioBuffer:
    """Mono waveform in [-1, 1] plus its sample rate."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise DspError(f"AudioBuffer expects mono samples, got shape {self.samples.shape}")
        if not np.all(np.isfinite(self.samples)):
            raise DspError("AudioBuffer contains non-finite samples")
        if self.sample_rate <= 0:
            raise DspError(f"invalid sample rate {self.sample_rate}")

    @property
    def duration(self):
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class MelConfig:
    sample_rate: int = 16000
    n_fft: int = 512
    win_length: int = 400   # 25 ms
    hop_length: int = 160   # 10 ms -> 100 frames/second
    n_mels: int = 80
    fmin: float = 0.0
    fmax: float = 8000.0
    log_floor: float = 1e-10

    def __post_init__(self):
        if not (self.hop_length <= self.win_length <= self.n_fft):
            raise DspError("require hop_length <= win_length <= n_fft")
        if self.fmax > self.sample_rate / 2:
            raise DspError("fmax above Nyquist")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class Spectrogram:
    frames: np.ndarray  # T x F magnitudes or T x n_mels log-mel
    config: MelConfig
    kind: str = field(default="log_mel")  # "linear" | "log_mel"


# ---------------------------------------------------------------------------
# WAV

def read_wav(path):
    """Decode a RIFF WAV file into a mono AudioBuffer.

    PCM 16-bit and IEEE float32 are supported; stereo is averaged to mono.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 12 or raw[0:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise WavDecodeError("not a RIFF/WAVE file", offset=0)

    fmt = None
    data = None
    pos = 12
    while pos + 8 <= len(raw):
        chunk_id = raw[pos:pos + 4]
        (chunk_size,) = struct.unpack_from("<I", raw, pos + 4)
        body = raw[pos + 8:pos + 8 + chunk_size]
        if len(body) < chunk_size:
            raise WavDecodeError("truncated chunk", offset=pos)
        if chunk_id == b"fmt ":
            if chunk_size < 16:
                raise WavDecodeError("fmt chunk too small", offset=pos)
            fmt = struct.unpack_from("<HHIIHH", body, 0)
        elif chunk_id == b"data":
            data = body
        pos += 8 + chunk_size + (chunk_size & 1)

    if fmt is None or data is None:
        raise WavDecodeError("missing fmt or data chunk", offset=pos)
    audio_format, n_channels, sample_rate, _, _, bits = fmt
    if n_channels < 1:
        raise WavDecodeError("zero channels")

    if audio_format == 1 and bits == 16:
        arr = np.frombuffer(data, dtype="<i2").astype(np.float64) / 32768.0
    elif audio_format == 3 and bits == 32:
        arr = np.frombuffer(data, dtype="<f4").astype(np.float64)
    else:
        raise WavDecodeError(f"unsupported codec (format={audio_format}, bits={bits})")
    if n_channels > 1:
        usable = (len(arr) // n_channels) * n_channels
        arr = arr[:usable].reshape(-1, n_channels).mean(axis=1)
    if np.any(np.abs(arr) > 1.0 + 1e-3):
        raise WavDecodeError("samples outside [-1, 1] beyond clip tolerance")
    return AudioBuffer(arr, sample_rate)


def write_wav(path, buf, fmt="pcm16"):
    """Write a mono WAV; ``fmt`` is 'pcm16' or 'float32'."""
    n = len(buf.samples)
    if fmt == "pcm16":
        payload = np.clip(np.round(buf.samples * 32767.0), -32768, 32767).astype("<i2").tobytes()
        audio_format, bits = 1, 16
    elif fmt == "float32":
        payload = buf.samples.astype("<f4").tobytes()
        audio_format, bits = 3, 32
    else:
        raise DspError(f"unknown wav format {fmt!r}")
    byte_rate = buf.sample_rate * bits // 8
    header = struct.pack(
        "<4sI4s4sIHHIIHH4sI",
        b"RIFF", 36 + len(payload), b"WAVE",
        b"fmt ", 16, audio_format, 1, buf.sample_rate, byte_rate, bits // 8, bits,
        b"data", len(payload),
    )
    with open(path, "wb") as fh:
        fh.write(header + payload)
    return n


# ---------------------------------------------------------------------------
# resampling

def _kaiser_sinc(t, cutoff, beta=8.0, half_width=16.0):
    """Windowed-sinc kernel evaluated at (fractional) sample offsets ``t``."""
    x = t * cutoff
    core = cutoff * np.sinc(x)
    w = np.zeros_like(t)
    inside = np.abs(t) <= half_width
    r = t[inside] / half_width
    w[inside] = np.i0(beta * np.sqrt(np.maximum(0.0, 1.0 - r * r))) / np.i0(beta)
    return core * w


def resample(buf, target_rate):
    """Polyphase windowed-sinc resampling (Kaiser beta=8, 32 taps per phase)."""
    if target_rate <= 0:
        raise DspError(f"invalid target rate {target_rate}")
    if target_rate == buf.sample_rate:
        return AudioBuffer(buf.samples.copy(), buf.sample_rate)

    ratio = target_rate / buf.sample_rate
    n_out = int(round(len(buf.samples) * ratio))
    # cutoff relative to the input Nyquist; widen the kernel when downsampling
    cutoff = min(1.0, ratio)
    half_width = 16.0 / cutoff

    x = buf.samples
    out = np.zeros(n_out, dtype=np.float64)
    centers = np.arange(n_out) / ratio
    left = np.ceil(centers - half_width).astype(np.int64)
    n_taps = int(2 * half_width) + 1
    for j in range(n_taps):
        idx = left + j
        valid = (idx >= 0) & (idx < len(x))
        taps = _kaiser_sinc(idx - centers, cutoff, half_width=half_width)
        out[valid] += taps[valid] * x[idx[valid]]
    return AudioBuffer(out, target_rate)


# ---------------------------------------------------------------------------
# STFT / mel

def _frame_count(n_samples, cfg):
    if n_samples < cfg.win_length:
        raise DspError(
            f"utterance of {n_samples} samples shorter than window {cfg.win_length}"
        )
    return 1 + (n_samples - cfg.win_length) // cfg.hop_length


def stft(samples, cfg):
    """Hann-windowed STFT magnitudes-and-phases, center=false framing.

    Returns a complex T x (n_fft//2 + 1) matrix.
    """
    samples = np.asarray(samples, dtype=np.float64)
    t_len = _frame_count(len(samples), cfg)
    window = np.hanning(cfg.win_length)
    frames = np.zeros((t_len, cfg.n_fft), dtype=np.float64)
    for t in range(t_len):
        start = t * cfg.hop_length
        frames[t, :cfg.win_length] = samples[start:start + cfg.win_length] * window
    return np.fft.rfft(frames, n=cfg.n_fft, axis=1)


def istft(spec, cfg, n_samples=None):
    """Weighted overlap-add inverse of ``stft`` (squared-window normalization)."""
    t_len = spec.shape[0]
    window = np.hanning(cfg.win_length)
    total = (t_len - 1) * cfg.hop_length + cfg.win_length
    out = np.zeros(total, dtype=np.float64)
    norm = np.zeros(total, dtype=np.float64)
    frames = np.fft.irfft(spec, n=cfg.n_fft, axis=1)[:, :cfg.win_length]
    for t in range(t_len):
        start = t * cfg.hop_length
        out[start:start + cfg.win_length] += frames[t] * window
        norm[start:start + cfg.win_length] += window * window
    out = np.where(norm > 1e-10, out / np.maximum(norm, 1e-10), 0.0)
    if n_samples is not None:
        out = out[:n_samples]
    return out


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(cfg):
    """Triangular HTK-scale filterbank, shape n_mels x (n_fft//2 + 1)."""
    n_bins = cfg.n_fft // 2 + 1
    fft_freqs = np.arange(n_bins) * cfg.sample_rate / cfg.n_fft
    mel_pts = np.linspace(_hz_to_mel(cfg.fmin), _hz_to_mel(cfg.fmax), cfg.n_mels + 2)
    hz_pts = _mel_to_hz(mel_pts)
    fb = np.zeros((cfg.n_mels, n_bins), dtype=np.float64)
    for m in range(cfg.n_mels):
        lo, ctr, hi = hz_pts[m], hz_pts[m + 1], hz_pts[m + 2]
        rising = (fft_freqs - lo) / max(ctr - lo, 1e-10)
        falling = (hi - fft_freqs) / max(hi - ctr, 1e-10)
        fb[m] = np.maximum(0.0, np.minimum(rising, falling))
    return fb


def mel_center_freqs(cfg):
    mel_pts = np.linspace(_hz_to_mel(cfg.fmin), _hz_to_mel(cfg.fmax), cfg.n_mels + 2)
    return _mel_to_hz(mel_pts)[1:-1]


def log_mel(buf, cfg):
    """Log-mel spectrogram: STFT magnitudes through the filterbank, natural log."""
    if buf.sample_rate != cfg.sample_rate:
        raise DspError(
            f"buffer rate {buf.sample_rate} != config rate {cfg.sample_rate}; resample first"
        )
    mags = np.abs(stft(buf.samples, cfg))
    mel = mags @ mel_filterbank(cfg).T
    frames = np.log(np.maximum(mel, cfg.log_floor)).astype(np.float32)
    return Spectrogram(frames=frames, config=cfg, kind="log_mel")


# ---------------------------------------------------------------------------
# Griffin-Lim

def mel_to_linear(log_mel_frames, cfg):
    """Invert the mel projection by pseudo-inverse with negative clipping."""
    fb = mel_filterbank(cfg)
    mel_mags = np.exp(np.asarray(log_mel_frames, dtype=np.float64))
    linear = mel_mags @ np.linalg.pinv(fb).T
    return np.maximum(linear, 0.0)


def griffin_lim(spec, cfg=None, n_iter=60, seed=0):
    """Phase recovery from a log-mel spectrogram; returns peak-normalized audio.

    The per-iteration consistency residuals are attached to the returned
    buffer as ``buf.residuals`` for inspection.
    """
    if spec.kind != "log_mel":
        raise DspError(f"griffin_lim expects a log_mel spectrogram, got {spec.kind!r}")
    cfg = cfg or spec.config
    target = mel_to_linear(spec.frames, cfg)
    rng = np.random.default_rng(seed)
    phase = np.exp(2j * np.pi * rng.random(target.shape))
    residuals = []
    n_samples = (target.shape[0] - 1) * cfg.hop_length + cfg.win_length
    signal = istft(target * phase, cfg, n_samples)
    for _ in range(n_iter):
        full = stft(signal, cfg)
        mags = np.abs(full)
        residuals.append(float(np.sqrt(((mags - target) ** 2).sum())))
        phase = full / np.maximum(mags, 1e-12)
        signal = istft(target * phase, cfg, n_samples)
    peak = np.abs(signal).max()
    # do not amplify near-silence (an all-floor spectrogram stays silent)
    if peak > 1e-3:
        signal = signal * (0.95 / peak)
    out = AudioBuffer(signal, cfg.sample_rate)
    out.residuals = residuals
    return out
