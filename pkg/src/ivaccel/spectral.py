"""STFT analysis/synthesis and WAV file I/O for multichannel audio.

Signals are stored channel-major: a time-domain signal is a real matrix of
shape ``(channels, samples)`` and a spectrogram is a complex tensor of shape
``(channels, bins, frames)`` holding the one-sided spectrum of each frame.
Synthesis uses weighted overlap-add with the analysis window reused as the
synthesis window and division by the summed squared-window envelope, which
reconstructs interior samples of an unmodified spectrogram exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.io import wavfile

__all__ = [
    "TimeSignal",
    "StftConfig",
    "Spectrogram",
    "make_window",
    "analyze",
    "synthesize",
    "interior_slice",
    "read_wav",
    "write_wav",
]

WINDOW_KINDS = ("hamming", "hann", "rectangular")


@dataclass(frozen=True)
class TimeSignal:
    """Multichannel time-domain signal: ``samples[channel, n]`` at ``sample_rate`` Hz."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim == 1:
            samples = samples[np.newaxis, :]
        if samples.ndim != 2:
            raise ValueError(f"samples must be (channels, samples), got shape {samples.shape}")
        if int(self.sample_rate) <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    @property
    def n_channels(self) -> int:
        return self.samples.shape[0]

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]

    @property
    def duration(self) -> float:
        return self.n_samples / self.sample_rate


@dataclass(frozen=True)
class StftConfig:
    """Frame schedule and window of the short-time transform.

    Frame ``t`` starts at sample ``t * hop``; trailing samples that do not
    fill a whole window are dropped, so the frame count is deterministic.
    """

    window_length: int = 2048
    hop: int = 1024
    window_kind: str = "hamming"

    def __post_init__(self):
        if self.window_length < 2 or self.window_length % 2 != 0:
            raise ValueError(f"window_length must be even and >= 2, got {self.window_length}")
        if not 0 < self.hop <= self.window_length:
            raise ValueError(f"hop must be in (0, window_length], got {self.hop}")
        if self.window_kind not in WINDOW_KINDS:
            raise ValueError(f"window_kind must be one of {WINDOW_KINDS}, got {self.window_kind!r}")

    @property
    def n_bins(self) -> int:
        return self.window_length // 2 + 1

    def n_frames(self, n_samples: int) -> int:
        return (n_samples - self.window_length) // self.hop + 1


@dataclass(frozen=True)
class Spectrogram:
    """Complex one-sided STFT tensor, ``data[channel, bin, frame]``."""

    data: np.ndarray
    config: StftConfig
    sample_rate: int

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.complex128)
        if data.ndim != 3:
            raise ValueError(f"data must be (channels, bins, frames), got shape {data.shape}")
        if data.shape[1] != self.config.n_bins:
            raise ValueError(
                f"bin count {data.shape[1]} does not match window length "
                f"{self.config.window_length} (expected {self.config.n_bins})"
            )
        if data.shape[2] < 1:
            raise ValueError("spectrogram must hold at least one frame")
        object.__setattr__(self, "data", data)

    @property
    def n_channels(self) -> int:
        return self.data.shape[0]

    @property
    def n_bins(self) -> int:
        return self.data.shape[1]

    @property
    def n_frames(self) -> int:
        return self.data.shape[2]


def make_window(kind: str, length: int) -> np.ndarray:
    """Periodic analysis window of the given length.

    The periodic (DFT-even) variants are used because they satisfy the
    constant-overlap-add property at 50% overlap; the symmetric variants
    do not.
    """
    n = np.arange(length)
    if kind == "hamming":
        return 0.54 - 0.46 * np.cos(2.0 * np.pi * n / length)
    if kind == "hann":
        return 0.5 - 0.5 * np.cos(2.0 * np.pi * n / length)
    if kind == "rectangular":
        return np.ones(length)
    raise ValueError(f"unknown window kind {kind!r}")


def analyze(signal: TimeSignal, config: StftConfig | None = None) -> Spectrogram:
    """Short-time Fourier transform of a multichannel signal.

    Parameters
    ----------
    signal : TimeSignal
        Input signal; must be at least one window long.
    config : StftConfig, optional
        Frame schedule; defaults to a 2048-sample Hamming window with 50%
        overlap.

    Returns
    -------
    Spectrogram
        ``data[c, f, t]`` is the one-sided DFT of the windowed frame of
        channel ``c`` starting at sample ``t * hop``.
    """
    if config is None:
        config = StftConfig()
    win_len, hop = config.window_length, config.hop
    if signal.n_samples < win_len:
        raise ValueError(
            f"signal too short: {signal.n_samples} samples < window length {win_len}"
        )
    window = make_window(config.window_kind, win_len)
    frames = np.lib.stride_tricks.sliding_window_view(signal.samples, win_len, axis=1)
    frames = frames[:, ::hop, :]  # (channels, frames, window)
    data = np.fft.rfft(frames * window, axis=2).transpose(0, 2, 1)
    return Spectrogram(data=data, config=config, sample_rate=signal.sample_rate)


def synthesize(spec: Spectrogram) -> TimeSignal:
    """Weighted overlap-add inverse of :func:`analyze`.

    Each frame is inverse-transformed, weighted by the analysis window a
    second time, accumulated at its frame position, and the result is
    divided by the summed squared-window envelope. Interior samples (see
    :func:`interior_slice`) of an unmodified spectrogram reproduce the
    analyzed signal up to rounding; edge samples are kept but rely on
    partial window coverage.
    """
    config = spec.config
    win_len, hop = config.window_length, config.hop
    window = make_window(config.window_kind, win_len)
    n_frames = spec.n_frames
    n_samples = (n_frames - 1) * hop + win_len

    frames = np.fft.irfft(spec.data.transpose(0, 2, 1), n=win_len, axis=2)
    frames *= window

    acc = np.zeros((spec.n_channels, n_samples))
    envelope = np.zeros(n_samples)
    win_sq = window * window
    for t in range(n_frames):
        start = t * hop
        acc[:, start : start + win_len] += frames[:, t, :]
        envelope[start : start + win_len] += win_sq

    interior = interior_slice(config, n_frames)
    tiny = 1e-12 * max(envelope.max(), 1.0)
    if np.any(envelope[interior] <= tiny):
        raise ValueError("window schedule not invertible: zero window-sum at an interior sample")
    covered = envelope > tiny
    out = np.zeros_like(acc)
    out[:, covered] = acc[:, covered] / envelope[covered]
    return TimeSignal(samples=out, sample_rate=spec.sample_rate)


def interior_slice(config: StftConfig, n_frames: int) -> slice:
    """Samples covered by the full overlap schedule of ``n_frames`` frames.

    Samples before ``window_length - hop`` and from ``n_frames * hop`` on are
    touched by fewer frames than the steady-state overlap count and are
    excluded from round-trip guarantees.
    """
    start = config.window_length - config.hop
    stop = n_frames * config.hop
    if stop <= start:  # too few frames for any steady-state sample
        return slice(0, 0)
    return slice(start, stop)


def read_wav(path) -> TimeSignal:
    """Read a 16-bit PCM or 32-bit float RIFF/WAV file as float64 in [-1, 1].

    PCM samples are scaled by 1/32768, so full-scale positive code 32767
    maps to ``1 - 2**-15``. Other encodings raise a descriptive error.
    """
    try:
        rate, data = wavfile.read(path)
    except Exception as err:
        raise ValueError(f"malformed WAV file {path!r}: {err}") from err
    if data.ndim == 1:
        data = data[:, np.newaxis]
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise ValueError(
            f"unsupported WAV encoding {data.dtype} in {path!r}: expected int16 PCM or float32"
        )
    return TimeSignal(samples=samples.T, sample_rate=int(rate))


def write_wav(path, signal: TimeSignal, encoding: str = "float32") -> None:
    """Write a signal as a RIFF/WAV file.

    ``encoding`` is ``"float32"`` (exact for float32-representable samples)
    or ``"pcm16"`` (quantized with at most 1 LSB round-trip error for
    samples in [-1, 1]).
    """
    data = signal.samples.T
    if encoding == "float32":
        payload = data.astype(np.float32)
    elif encoding == "pcm16":
        payload = np.clip(np.round(data * 32768.0), -32768, 32767).astype(np.int16)
    else:
        raise ValueError(f"unsupported encoding {encoding!r}: use 'float32' or 'pcm16'")
    if payload.shape[1] == 1:
        payload = payload[:, 0]
    wavfile.write(path, signal.sample_rate, payload)
